"""Synthetic MoE training workloads: gate traces, expert traffic matrices and task DAGs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Iterator

import networkx as nx
import numpy as np

from .fabric import ClusterSpec, ConfigError

if TYPE_CHECKING:
    from .simcore.policy import ReconfigPolicy

PHASES = ("FP-1", "FP-2", "BP-1", "BP-2")
TASK_KINDS = ("compute", "all_to_all", "all_reduce", "p2p", "reconfig_barrier")


@dataclass(frozen=True)
class MoeModelSpec:
    num_layers: int
    num_experts: int
    top_k: int = 2
    hidden_size: int = 4096
    token_bytes: int | None = None  # bytes moved per token per all-to-all; default 2*hidden
    seq_len: int = 2048
    micro_batch: int = 8
    attention_time: float = 30e-3
    gate_time: float = 1e-3
    expert_time_per_token: float = 3e-6
    backward_factor: float = 2.0
    dp_grad_bytes: float = 0.0  # gradient bytes each DP replica all-reduces per stage
    tp_allreduce_bytes: float | None = None  # per TP all-reduce; default activation size
    pp_activation_bytes: float | None = None  # per stage boundary crossing; default activation size

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.num_experts < 1:
            raise ConfigError("num_experts must be >= 1")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k must be in [1, {self.num_experts}]")
        for name in ("attention_time", "gate_time", "expert_time_per_token", "dp_grad_bytes"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.backward_factor <= 0:
            raise ConfigError("backward_factor must be > 0")
        if self.token_bytes is None:
            object.__setattr__(self, "token_bytes", 2 * self.hidden_size)

    @property
    def tokens_per_microbatch(self) -> int:
        return self.seq_len * self.micro_batch

    @property
    def activation_bytes(self) -> float:
        return float(self.tokens_per_microbatch * self.hidden_size * 2)

    def tp_bytes(self) -> float:
        return self.activation_bytes if self.tp_allreduce_bytes is None else self.tp_allreduce_bytes

    def pp_bytes(self) -> float:
        return self.activation_bytes if self.pp_activation_bytes is None else self.pp_activation_bytes


@dataclass(frozen=True)
class ParallelismSpec:
    """Degrees of the four parallelisms plus the number of microbatches per iteration.

    GPU ranks are laid out TP innermost, then EP, then DP, with PP outermost.
    """

    dp_degree: int = 1
    tp_degree: int = 1
    pp_degree: int = 1
    ep_degree: int = 1
    num_microbatches: int = 1

    def __post_init__(self):
        for name in ("dp_degree", "tp_degree", "pp_degree", "ep_degree", "num_microbatches"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def world_size(self) -> int:
        return self.dp_degree * self.tp_degree * self.pp_degree * self.ep_degree

    def validate(self, cluster: ClusterSpec, model: MoeModelSpec) -> None:
        g = cluster.gpus_per_server
        if self.tp_degree > g or g % self.tp_degree:
            raise ConfigError(f"tp_degree {self.tp_degree} must divide the {g} GPUs of one server")
        total = cluster.workload_servers * g
        if self.world_size != total:
            raise ConfigError(f"dp*tp*pp*ep = {self.world_size} but the cluster has {total} workload GPUs")
        if model.num_experts % self.ep_degree:
            raise ConfigError(f"ep_degree {self.ep_degree} must divide num_experts {model.num_experts}")
        if model.num_layers % self.pp_degree:
            raise ConfigError(f"pp_degree {self.pp_degree} must divide num_layers {model.num_layers}")

    def gpu(self, pp: int, dp: int, ep: int, tp: int) -> int:
        return ((pp * self.dp_degree + dp) * self.ep_degree + ep) * self.tp_degree + tp

    def stage_gpus(self, pp: int) -> tuple[int, ...]:
        per = self.dp_degree * self.ep_degree * self.tp_degree
        return tuple(range(pp * per, (pp + 1) * per))

    def stage_layers(self, pp: int, num_layers: int) -> range:
        per = num_layers // self.pp_degree
        return range(pp * per, (pp + 1) * per)


@dataclass(frozen=True)
class ExpertPlacement:
    """Anchor GPU of every expert; an expert is sharded over gpus_per_expert consecutive GPUs."""

    expert_gpu: tuple[int, ...]
    gpus_per_expert: int = 1

    def __post_init__(self):
        object.__setattr__(self, "expert_gpu", tuple(self.expert_gpu))
        for e, g in enumerate(self.expert_gpu):
            if g is None or int(g) < 0:
                raise ConfigError(f"expert {e} is not placed on a GPU")

    @property
    def num_experts(self) -> int:
        return len(self.expert_gpu)

    def gpus_of(self, expert: int) -> tuple[int, ...]:
        a = self.expert_gpu[expert]
        return tuple(range(a, a + self.gpus_per_expert))

    def server_of(self, expert: int, cluster: ClusterSpec) -> int:
        return cluster.server_of_gpu(self.expert_gpu[expert])

    def servers(self, cluster: ClusterSpec) -> tuple[int, ...]:
        return tuple(sorted({self.server_of(e, cluster) for e in range(self.num_experts)}))

    def remapped(self, remap: dict[int, int]) -> "ExpertPlacement":
        return ExpertPlacement(tuple(remap.get(g, g) for g in self.expert_gpu), self.gpus_per_expert)

    @classmethod
    def for_group(cls, par: ParallelismSpec, num_experts: int, pp: int = 0, dp: int = 0) -> "ExpertPlacement":
        per_rank = num_experts // par.ep_degree
        return cls(tuple(par.gpu(pp, dp, e // per_rank, 0) for e in range(num_experts)), par.tp_degree)


@dataclass(frozen=True)
class ExpertTrafficMatrix:
    layer: int
    phase: str
    M: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}")
        m = np.asarray(self.M, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ConfigError("traffic matrix must be square")
        if np.any(m < 0):
            raise ConfigError("traffic matrix must be non-negative")
        object.__setattr__(self, "M", m)

    @property
    def total(self) -> float:
        return float(self.M.sum())

    def for_phase(self, phase: str) -> "ExpertTrafficMatrix":
        """Matrix of another phase of the same layer, given that this one is FP-1 or BP-1 shaped."""
        same = (phase in ("FP-1", "BP-1")) == (self.phase in ("FP-1", "BP-1"))
        return ExpertTrafficMatrix(self.layer, phase, self.M if same else self.M.T)


def expert_to_traffic_matrix(loads, placement: ExpertPlacement, phase: str, token_bytes: float = 1.0,
                             tokens: float | None = None, layer: int = 0) -> ExpertTrafficMatrix:
    """Byte demand between expert groups for one all-to-all phase.

    loads is either an E x E token-count matrix (row i = tokens of source group i sent
    to each expert) or a length-E gating distribution applied to `tokens` dispatched
    tokens of every source group. Dispatch phases (FP-1, BP-1) keep the orientation,
    combine phases (FP-2, BP-2) are the transpose.
    """
    arr = np.asarray(loads, dtype=float)
    e = placement.num_experts
    if arr.ndim == 1:
        if tokens is None:
            raise ConfigError("a load vector needs the number of dispatched tokens")
        counts = np.tile(arr * float(tokens), (e, 1)) if arr.shape[0] == e else None
    else:
        counts = arr
    if counts is None or counts.shape != (e, e):
        raise ConfigError(f"loads do not match the {e} placed experts")
    m = counts * float(token_bytes)
    if phase in ("FP-2", "BP-2"):
        m = m.T
    return ExpertTrafficMatrix(layer, phase, m)


# ---------------------------------------------------------------------------
# Gate traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DynamicsParams:
    """Knobs of the synthetic gate model.

    Layer-0 loads come from a Dirichlet draw fixed for the run and perturbed every
    iteration. Each deeper layer applies a hidden column-stochastic transition to the
    previous layer's realized loads. `fanout` limits how many experts one source group
    can reach; `balance_max` and `decay_iters` pull loads toward uniform as training
    progresses, following s_t = balance_max * (1 - exp(-t / decay_iters)).
    """

    tokens_per_group: int | None = None
    concentration: float = 0.5
    transition: str = "random"
    persistence: float = 0.5
    transition_concentration: float = 0.3
    noise: float = 0.1
    fanout: int | None = None
    balance_target: str = "none"
    balance_max: float = 0.9
    decay_iters: float = 50.0

    def __post_init__(self):
        if self.transition not in ("random", "identity"):
            raise ConfigError("transition must be 'random' or 'identity'")
        if self.balance_target not in ("none", "uniform"):
            raise ConfigError("balance_target must be 'none' or 'uniform'")
        if self.concentration <= 0 or self.transition_concentration <= 0:
            raise ConfigError("Dirichlet concentrations must be > 0")
        for name in ("noise", "persistence", "balance_max"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.decay_iters <= 0:
            raise ConfigError("decay_iters must be > 0")
        if self.tokens_per_group is not None and self.tokens_per_group < 1:
            raise ConfigError("tokens_per_group must be >= 1")

    def balance(self, t: int) -> float:
        if self.balance_target == "none":
            return 0.0
        return self.balance_max * (1.0 - np.exp(-t / self.decay_iters))


@dataclass
class GateTrace:
    """Per-iteration, per-layer gate outcomes.

    counts[t, l, i, j] tokens of source group i routed to expert j; loads[t, l] is the
    normalized column sum of counts[t, l].
    """

    loads: np.ndarray
    counts: np.ndarray
    top_k: int
    tokens_per_group: int

    @property
    def num_iterations(self) -> int:
        return self.loads.shape[0]

    @property
    def num_layers(self) -> int:
        return self.loads.shape[1]

    @property
    def num_experts(self) -> int:
        return self.loads.shape[2]

    def slice(self, start: int, stop: int) -> "GateTrace":
        return GateTrace(self.loads[start:stop], self.counts[start:stop], self.top_k, self.tokens_per_group)

    def records(self) -> Iterator[dict]:
        for t in range(self.num_iterations):
            for l in range(self.num_layers):
                yield {
                    "iteration": t,
                    "layer": l,
                    "top_k": self.top_k,
                    "tokens_per_group": self.tokens_per_group,
                    "loads": self.loads[t, l].tolist(),
                    "matrix": self.counts[t, l].tolist(),
                }

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "GateTrace":
        recs = sorted(records, key=lambda r: (r["iteration"], r["layer"]))
        if not recs:
            raise ConfigError("empty gate trace")
        iters = max(r["iteration"] for r in recs) + 1
        layers = max(r["layer"] for r in recs) + 1
        if len(recs) != iters * layers:
            raise ConfigError("gate trace must have one record per (iteration, layer)")
        counts = np.array([r["matrix"] for r in recs], dtype=np.int64)
        e = counts.shape[-1]
        counts = counts.reshape(iters, layers, e, e)
        col = counts.sum(axis=2).astype(float)
        loads = col / col.sum(axis=2, keepdims=True)
        return cls(loads, counts, int(recs[0]["top_k"]), int(recs[0]["tokens_per_group"]))

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "GateTrace":
        with open(path) as fh:
            return cls.from_records(json.loads(line) for line in fh if line.strip())


def apportion_topk(p: np.ndarray, tokens: int, top_k: int) -> np.ndarray:
    """Integer token counts per expert for one source group.

    Distributes tokens*top_k routing slots proportionally to p (largest remainder),
    never giving one expert more than `tokens` slots. Under that cap a round-robin
    assignment gives every token exactly top_k distinct experts (see topk_assignment).
    """
    p = np.asarray(p, dtype=float)
    if np.count_nonzero(p > 0) < top_k:
        raise ConfigError("gate distribution reaches fewer experts than top_k")
    counts = np.zeros(p.shape[0], dtype=np.int64)
    free = p > 0
    remaining = tokens * top_k
    while remaining > 0:
        share = np.zeros_like(p)
        share[free] = remaining * p[free] / p[free].sum()
        over = share > tokens
        if not over.any():
            base = np.floor(share).astype(np.int64)
            frac = share - base
            extra = remaining - int(base.sum())
            order = np.argsort(-frac, kind="stable")[:extra]
            base[order] += 1
            counts += base
            break
        counts[over] = tokens
        free &= ~over
        remaining -= tokens * int(over.sum())
    return counts


def topk_assignment(counts: np.ndarray, tokens: int, top_k: int) -> np.ndarray:
    """Explicit (tokens x top_k) expert choice realizing per-expert counts.

    Slots are laid out expert by expert; token t takes slots t, t+tokens, ...
    Because no expert holds more than `tokens` slots, a token never sees one twice.
    """
    slots = np.repeat(np.arange(counts.shape[0]), counts)
    if slots.shape[0] != tokens * top_k:
        raise ConfigError("counts do not sum to tokens * top_k")
    return slots.reshape(top_k, tokens).T


def _hidden_transitions(e: int, layers: int, dyn: DynamicsParams, rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for _ in range(layers):
        if dyn.transition == "identity":
            out.append(np.eye(e))
        else:
            cols = rng.dirichlet(np.full(e, dyn.transition_concentration), size=e).T
            out.append(dyn.persistence * np.eye(e) + (1 - dyn.persistence) * cols)
    return out


def _support_masks(e: int, layers: int, dyn: DynamicsParams, top_k: int,
                   rng: np.random.Generator) -> list[np.ndarray]:
    fan = e if dyn.fanout is None else max(top_k, min(e, dyn.fanout))
    masks = []
    for _ in range(layers):
        m = np.zeros((e, e), dtype=bool)
        if fan == e:
            m[:] = True
        else:
            for i in range(e):
                m[i, rng.choice(e, size=fan, replace=False)] = True
        masks.append(m)
    return masks


def synthesize_gate_trace(model: MoeModelSpec, iters: int, dynamics: DynamicsParams | None = None,
                          seed: int = 0) -> GateTrace:
    """Generate `iters` iterations of gate decisions for every layer of the model."""
    dyn = dynamics or DynamicsParams()
    e, layers, k = model.num_experts, model.num_layers, model.top_k
    if e < 2:
        raise ConfigError("a gate trace needs at least 2 experts")
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    tokens = dyn.tokens_per_group or model.tokens_per_microbatch
    rng = np.random.default_rng(seed)
    transitions = _hidden_transitions(e, layers, dyn, rng)
    masks = _support_masks(e, layers, dyn, k, rng)
    base = rng.dirichlet(np.full(e, dyn.concentration))
    uniform = np.full(e, 1.0 / e)

    loads = np.zeros((iters, layers, e))
    counts = np.zeros((iters, layers, e, e), dtype=np.int64)
    for t in range(iters):
        s = dyn.balance(t)
        prev = None
        for l in range(layers):
            x = base if prev is None else transitions[l] @ prev
            if dyn.noise > 0:
                x = (1 - dyn.noise) * x + dyn.noise * rng.dirichlet(np.full(e, dyn.concentration))
            x = (1 - s) * x + s * uniform
            x = np.maximum(x, 1e-12)
            mat = np.empty((e, e), dtype=np.int64)
            for i in range(e):
                mat[i] = apportion_topk(np.where(masks[l][i], x, 0.0), tokens, k)
            col = mat.sum(axis=0).astype(float)
            y = col / col.sum()
            counts[t, l] = mat
            loads[t, l] = y
            prev = y
    return GateTrace(loads, counts, k, tokens)


# ---------------------------------------------------------------------------
# Task DAG
# ---------------------------------------------------------------------------

@dataclass
class Task:
    id: int
    kind: str
    name: str
    tag: str  # compute | ep | tp | dp | pp | reconfig
    gpus: tuple[int, ...] = ()
    stage: int = 0
    microbatch: int = 0
    layer: int | None = None
    phase: str | None = None
    duration: float = 0.0
    nbytes: float = 0.0
    deps: list[int] = field(default_factory=list)
    start_deps: list[int] = field(default_factory=list)  # satisfied when these tasks start
    traffic: ExpertTrafficMatrix | None = None
    groups: tuple[ExpertPlacement, ...] = ()  # EP groups sharing this all-to-all
    mode: str | None = None  # reconfig_barrier: "actual" or "predict"
    target: int | None = None  # reconfig_barrier: the all-to-all it prepares
    predict_from: np.ndarray | None = None  # reconfig_barrier/predict: previous layer's loads
    peer_gpus: tuple[int, ...] = ()  # p2p destinations, aligned with gpus
    subgroups: tuple[tuple[int, ...], ...] = ()  # all_reduce: TP rings, or the GPUs of each DP replica

    def brief(self) -> dict:
        return {
            "id": self.id, "kind": self.kind, "name": self.name, "tag": self.tag,
            "stage": self.stage, "microbatch": self.microbatch, "layer": self.layer,
            "phase": self.phase, "duration": self.duration, "nbytes": self.nbytes,
            "deps": list(self.deps), "start_deps": list(self.start_deps),
        }


@dataclass
class TaskDag:
    tasks: list[Task] = field(default_factory=list)
    schedule: dict[int, list[tuple[str, int]]] = field(default_factory=dict)  # stage -> 1F1B order

    def add(self, kind: str, name: str, tag: str, deps: Iterable[int] = (), **kw) -> Task:
        if kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {kind!r}")
        t = Task(len(self.tasks), kind, name, tag, deps=[d for d in deps if d is not None], **kw)
        self.tasks.append(t)
        return t

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def of_kind(self, kind: str) -> list[Task]:
        return [t for t in self.tasks if t.kind == kind]

    def graph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(t.id for t in self.tasks)
        for t in self.tasks:
            g.add_edges_from((d, t.id) for d in t.deps)
            g.add_edges_from((d, t.id) for d in t.start_deps)
        return g

    def is_acyclic(self) -> bool:
        return nx.is_directed_acyclic_graph(self.graph())

    def validate(self) -> None:
        if not self.is_acyclic():
            raise ConfigError("task DAG has a cycle")
        for t in self.tasks:
            if t.kind == "all_to_all" and t.traffic is None:
                raise ConfigError(f"all_to_all task {t.name} carries no traffic matrix")

    def critical_compute(self) -> float:
        """Longest path through compute durations alone (communication taken as free)."""
        g = self.graph()
        finish: dict[int, float] = {}
        for n in nx.topological_sort(g):
            t = self.tasks[n]
            start = max((finish[p] for p in g.predecessors(n)), default=0.0)
            finish[n] = start + (t.duration if t.kind == "compute" else 0.0)
        return max(finish.values(), default=0.0)

    def to_json(self) -> list[dict]:
        return [t.brief() for t in self.tasks]


def one_f_one_b(num_stages: int, num_microbatches: int, stage: int) -> list[tuple[str, int]]:
    """Operation order of one pipeline stage under the 1F1B schedule."""
    warm = min(num_stages - stage - 1, num_microbatches)
    order = [("F", m) for m in range(warm)]
    for i in range(num_microbatches - warm):
        order.append(("F", warm + i))
        order.append(("B", i))
    order.extend(("B", m) for m in range(num_microbatches - warm, num_microbatches))
    return order


def expert_compute_time(model: MoeModelSpec, par: ParallelismSpec, counts: np.ndarray) -> float:
    """Forward expert time: per-token cost times the tokens landing on the busiest EP rank."""
    per_expert = np.asarray(counts).sum(axis=0)
    per_rank = per_expert.reshape(par.ep_degree, -1).sum(axis=1)
    return float(per_rank.max()) * model.expert_time_per_token


class _Builder:
    def __init__(self, model, par, cluster, trace, iteration, policy):
        self.model, self.par, self.cluster = model, par, cluster
        self.trace, self.iteration, self.policy = trace, iteration, policy
        self.dag = TaskDag()
        self.reconf = policy is not None
        self.hide = policy.hide_in_compute if policy else True

    def trace_index(self, mb: int) -> int:
        return (self.iteration * self.par.num_microbatches + mb) % self.trace.num_iterations

    def groups(self, stage: int) -> tuple[ExpertPlacement, ...]:
        return tuple(ExpertPlacement.for_group(self.par, self.model.num_experts, stage, d)
                     for d in range(self.par.dp_degree))

    def tp_groups(self, stage: int) -> list[tuple[int, ...]]:
        tp = self.par.tp_degree
        gpus = self.par.stage_gpus(stage)
        return [gpus[i:i + tp] for i in range(0, len(gpus), tp)]

    def compute(self, name, stage, mb, layer, duration, deps):
        return self.dag.add("compute", name, "compute", deps, gpus=self.par.stage_gpus(stage),
                            stage=stage, microbatch=mb, layer=layer, duration=duration).id

    def tp_allreduce(self, name, stage, mb, layer, deps):
        if self.par.tp_degree == 1:
            return deps[-1] if deps else None
        return self.dag.add("all_reduce", name, "tp", deps, gpus=self.par.stage_gpus(stage), stage=stage,
                            microbatch=mb, layer=layer, nbytes=self.model.tp_bytes(),
                            subgroups=tuple(self.tp_groups(stage))).id

    def barrier(self, stage, mb, layer, phase, anchor, trigger, mode, predict_from=None):
        kw = dict(gpus=self.par.stage_gpus(stage), stage=stage, microbatch=mb, layer=layer,
                  phase=phase, mode=mode, predict_from=predict_from)
        if trigger == "start":
            t = self.dag.add("reconfig_barrier", f"reconf {phase} L{layer} s{stage} m{mb}", "reconfig", (), **kw)
            t.start_deps.append(anchor)
        else:
            t = self.dag.add("reconfig_barrier", f"reconf {phase} L{layer} s{stage} m{mb}", "reconfig",
                             (anchor,), **kw)
        return t

    def a2a(self, stage, mb, layer, phase, counts, deps, barrier=None):
        traffic = expert_to_traffic_matrix(counts, self.groups(stage)[0], phase, self.model.token_bytes,
                                           layer=layer)
        deps = list(deps) + ([barrier.id] if barrier is not None else [])
        t = self.dag.add("all_to_all", f"a2a {phase} L{layer} s{stage} m{mb}", "ep", deps,
                         gpus=self.par.stage_gpus(stage), stage=stage, microbatch=mb, layer=layer,
                         phase=phase, nbytes=traffic.total * self.par.dp_degree, traffic=traffic,
                         groups=self.groups(stage))
        if barrier is not None:
            barrier.target = t.id
        return t.id

    def forward(self, stage, mb, first_dep):
        m, p = self.model, self.policy
        idx = self.trace_index(mb)
        last = first_dep
        for layer in self.par.stage_layers(stage, m.num_layers):
            counts = self.trace.counts[idx, layer]
            attn = self.compute(f"attn F L{layer} s{stage} m{mb}", stage, mb, layer, m.attention_time, [last])
            pre = None
            if self.reconf and p.fp1 == "predict" and layer > 0:
                pre = self.barrier(stage, mb, layer, "FP-1", attn, "start", "predict",
                                   predict_from=self.trace.loads[idx, layer - 1])
            x = self.tp_allreduce(f"tp F-attn L{layer} s{stage} m{mb}", stage, mb, layer, [attn])
            gate = self.compute(f"gate F L{layer} s{stage} m{mb}", stage, mb, layer, m.gate_time, [x])
            if self.reconf and p.fp1 == "block":
                pre = self.barrier(stage, mb, layer, "FP-1", gate, "finish", "actual")
            a1 = self.a2a(stage, mb, layer, "FP-1", counts, [gate], pre)
            exp = self.compute(f"expert F L{layer} s{stage} m{mb}", stage, mb, layer,
                               expert_compute_time(m, self.par, counts), [a1])
            b2 = None
            if self.reconf:
                b2 = self.barrier(stage, mb, layer, "FP-2", exp, "start" if self.hide else "finish", "actual")
            a2 = self.a2a(stage, mb, layer, "FP-2", counts, [exp], b2)
            last = self.tp_allreduce(f"tp F-mlp L{layer} s{stage} m{mb}", stage, mb, layer, [a2])
        if stage < self.par.pp_degree - 1:
            last = self.p2p(f"pp F s{stage}->s{stage + 1} m{mb}", stage, stage + 1, mb, last)
        return last

    def backward(self, stage, mb, first_dep):
        m = self.model
        bf = m.backward_factor
        idx = self.trace_index(mb)
        last = anchor = first_dep
        for layer in reversed(self.par.stage_layers(stage, m.num_layers)):
            counts = self.trace.counts[idx, layer]
            x = self.tp_allreduce(f"tp B-mlp L{layer} s{stage} m{mb}", stage, mb, layer, [last])
            b1 = None
            if self.reconf:
                # Launched with the backward attention of the layer above; never while
                # a communication task may still hold circuits.
                hide = self.hide and self.dag.tasks[anchor].kind == "compute"
                b1 = self.barrier(stage, mb, layer, "BP-1", anchor, "start" if hide else "finish", "actual")
            a1 = self.a2a(stage, mb, layer, "BP-1", counts, [x], b1)
            exp = self.compute(f"expert B L{layer} s{stage} m{mb}", stage, mb, layer,
                               bf * expert_compute_time(m, self.par, counts), [a1])
            a2 = self.a2a(stage, mb, layer, "BP-2", counts, [exp])
            gate = self.compute(f"gate B L{layer} s{stage} m{mb}", stage, mb, layer, bf * m.gate_time, [a2])
            attn = anchor = self.compute(f"attn B L{layer} s{stage} m{mb}", stage, mb, layer,
                                         bf * m.attention_time, [gate])
            last = self.tp_allreduce(f"tp B-attn L{layer} s{stage} m{mb}", stage, mb, layer, [attn])
        if stage > 0:
            last = self.p2p(f"pp B s{stage}->s{stage - 1} m{mb}", stage, stage - 1, mb, last)
        return last

    def p2p(self, name, src, dst, mb, dep):
        src_g, dst_g = self.par.stage_gpus(src), self.par.stage_gpus(dst)
        return self.dag.add("p2p", name, "pp", [dep], gpus=src_g, peer_gpus=dst_g, stage=src,
                            microbatch=mb, nbytes=self.model.pp_bytes()).id

    def build(self) -> TaskDag:
        par = self.par
        fwd_done: dict[tuple[int, int], int] = {}
        bwd_done: dict[tuple[int, int], int] = {}
        orders = {s: one_f_one_b(par.pp_degree, par.num_microbatches, s) for s in range(par.pp_degree)}
        self.dag.schedule = orders
        pos = {s: 0 for s in orders}
        prev_op: dict[int, int | None] = {s: None for s in orders}
        # Round-robin over stages, emitting an op once its cross-stage input exists.
        while any(pos[s] < len(orders[s]) for s in orders):
            progressed = False
            for s in range(par.pp_degree):
                if pos[s] >= len(orders[s]):
                    continue
                op, mb = orders[s][pos[s]]
                if op == "F":
                    if s > 0 and (s - 1, mb) not in fwd_done:
                        continue
                    deps = [prev_op[s]] + ([fwd_done[(s - 1, mb)]] if s > 0 else [])
                    first = self._join(deps)
                    fwd_done[(s, mb)] = prev_op[s] = self.forward(s, mb, first)
                else:
                    if s < par.pp_degree - 1 and (s + 1, mb) not in bwd_done:
                        continue
                    deps = [prev_op[s]]
                    if s < par.pp_degree - 1:
                        deps.append(bwd_done[(s + 1, mb)])
                    else:
                        deps.append(fwd_done[(s, mb)])
                    bwd_done[(s, mb)] = prev_op[s] = self.backward(s, mb, self._join(deps))
                pos[s] += 1
                progressed = True
            if not progressed:
                raise ConfigError("pipeline schedule deadlocked")
        if par.dp_degree > 1 and self.model.dp_grad_bytes > 0:
            for s in range(par.pp_degree):
                gpus = par.stage_gpus(s)
                per = len(gpus) // par.dp_degree
                reps = tuple(gpus[d * per:(d + 1) * per] for d in range(par.dp_degree))
                self.dag.add("all_reduce", f"dp s{s}", "dp", [prev_op[s]], gpus=gpus, stage=s,
                             nbytes=self.model.dp_grad_bytes, subgroups=reps)
        self.dag.validate()
        return self.dag

    def _join(self, deps: list[int | None]) -> int | None:
        deps = [d for d in dict.fromkeys(deps) if d is not None]
        if not deps:
            return None
        if len(deps) == 1:
            return deps[0]
        return self.dag.add("compute", "join", "compute", deps).id


def build_task_dag(model: MoeModelSpec, par: ParallelismSpec, cluster: ClusterSpec, trace: GateTrace,
                   iteration: int = 0, policy: ReconfigPolicy | None = None) -> TaskDag:
    """Task DAG of one training iteration.

    Microbatch m of the iteration uses trace sample iteration*num_microbatches + m
    (wrapping around the trace). Reconfiguration barriers are only emitted when a
    policy is given, i.e. for reconfigurable fabrics.
    """
    if par.tp_degree > cluster.gpus_per_server:
        raise ConfigError("tp_degree exceeds the GPUs of one server; TP stays inside a host")
    par.validate(cluster, model)
    if trace.num_layers != model.num_layers or trace.num_experts != model.num_experts:
        raise ConfigError("gate trace shape does not match the model")
    return _Builder(model, par, cluster, trace, iteration, policy).build()


def model_from_dict(data: dict) -> MoeModelSpec:
    return MoeModelSpec(**data)


def parallelism_from_dict(data: dict) -> ParallelismSpec:
    return ParallelismSpec(**data)


def dynamics_from_dict(data: dict) -> DynamicsParams:
    return DynamicsParams(**data)


def spec_to_dict(obj) -> dict:
    return asdict(obj)
