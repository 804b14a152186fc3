"""Per-iteration results of the simulator."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from ..fabric import FabricState
from ..reconfig import ReconfigRecord


@dataclass(frozen=True)
class TaskTiming:
    id: int
    name: str
    kind: str
    tag: str
    stage: int
    microbatch: int
    layer: int | None
    phase: str | None
    start: float
    finish: float
    stall: float = 0.0  # all-to-all only: time spent waiting for its OCS reconfiguration

    @property
    def duration(self) -> float:
        return self.finish - self.start


def _union_length(intervals: list[tuple[float, float]]) -> float:
    total, end = 0.0, float("-inf")
    for a, b in sorted(intervals):
        if b <= end:
            continue
        total += b - max(a, end)
        end = b
    return total


@dataclass
class IterationReport:
    iteration_time: float
    tasks: list[TaskTiming]
    reconfigs: list[ReconfigRecord]
    planned_bytes: float
    delivered_bytes: float
    failures: list[dict]
    final_state: FabricState | None = field(default=None, repr=False)
    events: list[dict] = field(default_factory=list, repr=False)

    @classmethod
    def build(cls, tasks, reconfigs, planned, delivered, failures, state, events) -> "IterationReport":
        end = max((t.finish for t in tasks), default=0.0)
        return cls(end, list(tasks), list(reconfigs), planned, delivered, list(failures), state, list(events))

    # -- derived metrics -----------------------------------------------------
    def of_kind(self, kind: str) -> list[TaskTiming]:
        return [t for t in self.tasks if t.kind == kind]

    @property
    def all_to_alls(self) -> list[TaskTiming]:
        return self.of_kind("all_to_all")

    @property
    def a2a_time(self) -> float:
        """Wall-clock time during which at least one all-to-all is in progress."""
        return _union_length([(t.start, t.finish) for t in self.all_to_alls])

    @property
    def a2a_fraction(self) -> float:
        return self.a2a_time / self.iteration_time if self.iteration_time > 0 else 0.0

    @property
    def reconfig_charge(self) -> float:
        """Total time all-to-alls waited on circuit setup beyond their other inputs."""
        return sum(t.stall for t in self.all_to_alls)

    def phase_durations(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for t in self.all_to_alls:
            out[t.phase] = out.get(t.phase, 0.0) + t.duration
        return out

    def byte_audit(self) -> dict[str, float]:
        return {"planned": self.planned_bytes, "delivered": self.delivered_bytes,
                "lost": self.planned_bytes - self.delivered_bytes}

    # -- serialization -------------------------------------------------------
    def summary(self) -> dict:
        return {
            "iteration_time_s": self.iteration_time,
            "a2a_time_s": self.a2a_time,
            "a2a_fraction": self.a2a_fraction,
            "reconfig_charge_s": self.reconfig_charge,
            "reconfigurations": len(self.reconfigs),
            "phase_durations_s": self.phase_durations(),
            "bytes": self.byte_audit(),
            "failures": [{k: v for k, v in f.items()} for f in self.failures],
        }

    def to_json(self, include_tasks: bool = True) -> str:
        d = self.summary()
        d["reconfigs"] = [r.to_json() for r in self.reconfigs]
        if include_tasks:
            d["tasks"] = [{"name": t.name, "kind": t.kind, "start": t.start, "finish": t.finish, "stall": t.stall}
                          for t in self.tasks]
        if self.final_state is not None:
            d["final_state"] = self.final_state.to_json()
        return json.dumps(d, indent=2, sort_keys=True, default=_jsonable)

    def a2a_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "stage", "microbatch", "layer", "phase", "start_s", "finish_s", "stall_s"])
        for t in self.all_to_alls:
            w.writerow([t.name, t.stage, t.microbatch, t.layer, t.phase,
                        f"{t.start:.9g}", f"{t.finish:.9g}", f"{t.stall:.9g}"])
        return buf.getvalue()

    def events_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True, default=_jsonable) + "\n" for e in self.events)


def _jsonable(x):
    if hasattr(x, "tolist"):
        return x.tolist()
    if isinstance(x, (set, frozenset)):
        return sorted(x)
    return str(x)
