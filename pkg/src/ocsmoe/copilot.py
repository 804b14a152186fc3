"""Next-layer expert load prediction with a fitted column-stochastic transition matrix.

Given pairs (X_i, Y_i) of normalized load vectors of adjacent layers, find P minimizing
sum_i w_i ||Y_i - P X_i||^2 subject to P >= 0 and every column of P summing to 1.
The problem is solved by projected gradient descent with step 1/L, L the Lipschitz
constant of the gradient, projecting each column onto the probability simplex.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .fabric import ConfigError


@dataclass
class DemandWindow:
    X: np.ndarray  # (k, E) source-layer loads
    Y: np.ndarray  # (k, E) next-layer loads
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if self.X.shape != self.Y.shape or self.X.shape[0] < 1:
            raise ConfigError(f"window X {self.X.shape} and Y {self.Y.shape} must be equal and non-empty")
        for name, arr in (("X", self.X), ("Y", self.Y)):
            if np.any(np.abs(arr.sum(axis=1) - 1.0) > 1e-9):
                raise ConfigError(f"every {name} vector must sum to 1")
        if self.weights is None:
            self.weights = decay_weights(self.k)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.k,):
            raise ConfigError("one weight per pair is required")
        if np.any(self.weights < 0):
            raise ConfigError("weights must be non-negative")
        if not self.weights.sum() > 0:
            raise ConfigError("at least one weight must be positive")

    @property
    def k(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def decay_weights(k: int, half_life: float | None = None) -> np.ndarray:
    """Exponentially decaying weights, oldest pair first; the newest pair has weight 1."""
    h = k / 2 if half_life is None else half_life
    age = np.arange(k - 1, -1, -1, dtype=float)
    return 0.5 ** (age / max(h, 1e-12))


@dataclass
class TransitionEstimate:
    P: np.ndarray
    objective: float
    iterations: int = 0

    def check(self, tol: float = 1e-6) -> None:
        P = self.P
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ConfigError("transition matrix must be square")
        if np.any(P < -tol) or np.any(P > 1 + tol):
            raise ConfigError("transition entries must lie in [0, 1]")
        if np.any(np.abs(P.sum(axis=0) - 1.0) > tol):
            raise ConfigError("transition columns must sum to 1")


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 500
    tol: float = 1e-9
    check_monotone: bool = False


def project_columns_to_simplex(V: np.ndarray) -> np.ndarray:
    """Euclidean projection of every column onto {p >= 0, sum p = 1} (sort-based)."""
    n = V.shape[0]
    U = -np.sort(-V, axis=0)
    css = np.cumsum(U, axis=0) - 1.0
    ind = np.arange(1, n + 1)[:, None]
    cond = U - css / ind > 0
    rho = n - 1 - np.argmax(cond[::-1], axis=0)
    theta = css[rho, np.arange(V.shape[1])] / (rho + 1)
    return np.maximum(V - theta, 0.0)


def weighted_objective(P: np.ndarray, window: DemandWindow) -> float:
    R = window.Y - window.X @ P.T
    return float(np.sum(window.weights * np.sum(R * R, axis=1)))


def fit_transition_matrix(window: DemandWindow, opts: FitOptions | None = None,
                          warm_start: np.ndarray | None = None) -> TransitionEstimate:
    """Projected gradient fit of a column-stochastic P to the window."""
    opts = opts or FitOptions()
    e = window.dim
    w = window.weights
    Xw = window.X * w[:, None]
    Sxx = Xw.T @ window.X  # sum_i w_i x_i x_i^T
    Syx = (window.Y * w[:, None]).T @ window.X  # sum_i w_i y_i x_i^T
    L = 2.0 * float(np.linalg.eigvalsh(Sxx)[-1])
    if warm_start is not None:
        P = np.asarray(warm_start, dtype=float)
        if P.shape != (e, e):
            raise ConfigError("warm start has the wrong shape")
        P = project_columns_to_simplex(P)
    else:
        P = np.full((e, e), 1.0 / e)
    obj = weighted_objective(P, window)
    it = 0
    if L > 0:
        step = 1.0 / L
        for it in range(1, opts.max_iter + 1):
            grad = 2.0 * (P @ Sxx - Syx)
            P_new = project_columns_to_simplex(P - step * grad)
            new_obj = weighted_objective(P_new, window)
            if opts.check_monotone and new_obj > obj + 1e-12:
                raise AssertionError(f"objective increased at iteration {it}: {obj} -> {new_obj}")
            improvement = obj - new_obj
            P, obj = P_new, new_obj
            if improvement < opts.tol:
                break
    return TransitionEstimate(P, obj, it)


def predict_next_layer_load(P: TransitionEstimate | np.ndarray, x) -> np.ndarray:
    M = P.P if isinstance(P, TransitionEstimate) else np.asarray(P, dtype=float)
    x = np.asarray(x, dtype=float)
    if M.shape[1] != x.shape[0]:
        raise ConfigError(f"load vector of length {x.shape[0]} does not match P {M.shape}")
    return M @ x


def topk_set(v, K: int) -> set[int]:
    v = np.asarray(v, dtype=float)
    order = np.lexsort((np.arange(v.shape[0]), -v))  # value desc, index asc
    return set(int(i) for i in order[:K])


def topk_accuracy(predicted, actual, K: int) -> float:
    predicted, actual = np.asarray(predicted), np.asarray(actual)
    if K < 1:
        raise ConfigError("K must be >= 1")
    if predicted.shape != actual.shape or K > predicted.shape[0]:
        raise ConfigError("K must not exceed the number of experts and shapes must match")
    return len(topk_set(predicted, K) & topk_set(actual, K)) / K


@dataclass
class Copilot:
    """Sliding-window estimator for one layer transition; refits after every observation."""

    num_experts: int
    window: int = 16
    half_life: float | None = None
    opts: FitOptions = field(default_factory=FitOptions)
    pairs: deque = field(default_factory=deque)
    estimate: TransitionEstimate | None = None

    def observe(self, x, y) -> None:
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        if x.shape != (self.num_experts,) or y.shape != (self.num_experts,):
            raise ConfigError("observed loads have the wrong length")
        self.pairs.append((x, y))
        while len(self.pairs) > self.window:
            self.pairs.popleft()
        X = np.array([p[0] for p in self.pairs])
        Y = np.array([p[1] for p in self.pairs])
        win = DemandWindow(X, Y, decay_weights(len(self.pairs), self.half_life))
        warm = self.estimate.P if self.estimate is not None else None
        self.estimate = fit_transition_matrix(win, self.opts, warm)

    def predict(self, x) -> np.ndarray:
        if self.estimate is None:
            return np.asarray(x, dtype=float).copy()  # nothing learned yet: assume persistence
        return predict_next_layer_load(self.estimate, x)

    def to_json(self) -> str:
        return json.dumps({
            "num_experts": self.num_experts,
            "window": self.window,
            "half_life": self.half_life,
            "pairs": [[p[0].tolist(), p[1].tolist()] for p in self.pairs],
            "P": None if self.estimate is None else self.estimate.P.tolist(),
            "objective": None if self.estimate is None else self.estimate.objective,
        })

    @classmethod
    def from_json(cls, text: str) -> "Copilot":
        d = json.loads(text)
        c = cls(d["num_experts"], d["window"], d["half_life"])
        c.pairs = deque((np.array(a), np.array(b)) for a, b in d["pairs"])
        if d["P"] is not None:
            c.estimate = TransitionEstimate(np.array(d["P"]), d["objective"])
        return c


@dataclass
class CopilotBank:
    """One estimator per layer transition (l-1 -> l)."""

    num_experts: int
    window: int = 16
    estimators: dict[int, Copilot] = field(default_factory=dict)

    def get(self, layer: int) -> Copilot:
        if layer not in self.estimators:
            self.estimators[layer] = Copilot(self.num_experts, self.window)
        return self.estimators[layer]

    def observe_iteration(self, loads: np.ndarray) -> None:
        """loads: (layers, E) realized loads of one iteration."""
        for l in range(1, loads.shape[0]):
            self.get(l).observe(loads[l - 1], loads[l])

    def predict(self, layer: int, prev_loads) -> np.ndarray:
        return self.get(layer).predict(prev_loads)
