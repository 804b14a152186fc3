"""Reconfiguration timeline policy and failure scenario descriptions."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..fabric import ConfigError

FP1_MODES = ("block", "reuse", "predict")


@dataclass(frozen=True)
class ReconfigPolicy:
    """How the OCS follows the four all-to-all phases of every MoE layer.

    fp1: what to do for the first forward all-to-all, whose demand is only known
    after the gate runs. "block" reconfigures after the gate and stalls the
    network for the full delay; "reuse" keeps whatever topology is installed;
    "predict" installs a topology derived from the predicted expert loads while
    attention is computing.

    hide_in_compute: launch the remaining reconfigurations when the preceding
    compute starts rather than when it finishes.
    """

    fp1: str = "block"
    hide_in_compute: bool = True
    skip_saturated: bool = False
    copilot_window: int = 16

    def __post_init__(self):
        if self.fp1 not in FP1_MODES:
            raise ConfigError(f"fp1 mode must be one of {FP1_MODES}, got {self.fp1!r}")
        if self.copilot_window < 1:
            raise ConfigError("copilot_window must be >= 1")


FAILURE_KINDS = ("nic", "gpu", "node")


@dataclass(frozen=True)
class FailureEvent:
    """One failure.

    target: (server, nic) for "nic", a global GPU id for "gpu", a server id for "node".
    backup: GPU id ("gpu") or server id ("node") taking over the failed work.
    backup_via: "eps" when the backup is reachable over the packet fabric,
    "ocs" when it is only attached to the regional optical switch.
    """

    time: float
    kind: str
    target: object
    backup: int | None = None
    backup_via: str = "eps"

    def __post_init__(self):
        if self.kind not in FAILURE_KINDS:
            raise ConfigError(f"failure kind must be one of {FAILURE_KINDS}")
        if self.time < 0:
            raise ConfigError("failure time must be >= 0")
        if self.backup_via not in ("eps", "ocs"):
            raise ConfigError("backup_via must be 'eps' or 'ocs'")
        if self.kind == "nic":
            object.__setattr__(self, "target", tuple(self.target))


@dataclass(frozen=True)
class FailureScenario:
    events: tuple[FailureEvent, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(sorted(self.events, key=lambda e: e.time)))

    def __bool__(self) -> bool:
        return bool(self.events)
