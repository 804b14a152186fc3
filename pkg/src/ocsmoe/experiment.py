"""Assemble and run one simulated training iteration from a nested config dict.

Config layout (every section optional except cluster/model/parallelism)::

    cluster:      ClusterSpec fields
    model:        MoeModelSpec fields
    parallelism:  ParallelismSpec fields (dp_degree may be "auto")
    dynamics:     DynamicsParams fields
    fabric:       fattree | oversub[:r] | rail | topoopt | mixnet
    policy:       ReconfigPolicy fields
    failures:     list of FailureEvent fields
    warmup_iterations: iterations of gate history preceding the measured one
    seed:         RNG seed for the trace and the initial circuits
    prices:       price rows keyed by Gb/s
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .collectives import build_static_topology
from .copilot import CopilotBank
from .costmodel import ComponentPriceTable, CostBreakdown, cost_fabric, perf_per_dollar
from .fabric import (ClusterSpec, ConfigError, CrossConnect, FabricKind, FabricState, NicMapping, apply_nic_mapping,
                     cluster_from_dict, coerce_numbers, initial_state)
from .simcore.engine import run_iteration
from .simcore.policy import FailureEvent, FailureScenario, ReconfigPolicy
from .simcore.report import IterationReport
from .workload import (DynamicsParams, GateTrace, MoeModelSpec, ParallelismSpec, build_task_dag,
                       synthesize_gate_trace)

SECTIONS = ("cluster", "model", "parallelism", "dynamics", "fabric", "policy", "failures",
            "warmup_iterations", "seed", "prices", "name")


def _build(cls, data: dict, section: str):
    data = dict(data or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {', '.join(unknown)}")
    try:
        return cls(**coerce_numbers(cls, data))
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    except ConfigError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass
class Experiment:
    cluster: ClusterSpec
    model: MoeModelSpec
    parallelism: ParallelismSpec
    dynamics: DynamicsParams
    fabric: FabricKind
    policy: ReconfigPolicy
    failures: FailureScenario
    warmup_iterations: int = 2
    seed: int = 0
    prices: ComponentPriceTable = ComponentPriceTable()

    @classmethod
    def from_dict(cls, config: dict) -> "Experiment":
        unknown = sorted(set(config) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        for key in ("cluster", "model", "parallelism"):
            if key not in config:
                raise ConfigError(f"config section '{key}' is required")
        try:
            cluster = cluster_from_dict(config["cluster"])
        except ConfigError as exc:
            raise ConfigError(f"cluster: {exc}") from exc
        model = _build(MoeModelSpec, config["model"], "model")
        par_data = dict(config["parallelism"])
        if par_data.get("dp_degree") == "auto":
            per = par_data.get("tp_degree", 1) * par_data.get("ep_degree", 1) * par_data.get("pp_degree", 1)
            par_data["dp_degree"] = max(1, cluster.workload_servers * cluster.gpus_per_server // per)
        par = _build(ParallelismSpec, par_data, "parallelism")
        try:
            par.validate(cluster, model)
        except ConfigError as exc:
            raise ConfigError(f"parallelism: {exc}") from exc
        dyn = _build(DynamicsParams, config.get("dynamics", {}), "dynamics")
        try:
            fabric = FabricKind.parse(str(config.get("fabric", "mixnet")))
        except (ConfigError, ValueError) as exc:
            raise ConfigError(f"fabric: {exc}") from exc
        policy = _build(ReconfigPolicy, config.get("policy", {}), "policy")
        events = []
        for k, ev in enumerate(config.get("failures") or []):
            events.append(_build(FailureEvent, ev, f"failures[{k}]"))
        warm = int(config.get("warmup_iterations", 2))
        if warm < 0:
            raise ConfigError("warmup_iterations must be >= 0")
        prices = ComponentPriceTable.from_dict(config["prices"]) if config.get("prices") else ComponentPriceTable()
        return cls(cluster, model, par, dyn, fabric, policy, FailureScenario(tuple(events)), warm,
                   int(config.get("seed", 0)), prices)

    # -- pieces ---------------------------------------------------------------
    def trace(self) -> GateTrace:
        iters = (self.warmup_iterations + 1) * self.parallelism.num_microbatches
        return synthesize_gate_trace(self.model, iters, self.dynamics, self.seed)

    def initial_state(self) -> FabricState:
        state = initial_state(self.cluster, self.fabric)
        if self.fabric.name == "topoopt":
            mapping = build_static_topology(self.cluster, self.seed)
        elif self.fabric.name == "mixnet":
            mapping = initial_regional_circuits(self.cluster, self.seed)
        else:
            return state
        return apply_nic_mapping(state, mapping, 0.0, delay=0.0)

    def copilot(self, trace: GateTrace) -> CopilotBank | None:
        if self.policy.fp1 != "predict":
            return None
        bank = CopilotBank(self.model.num_experts, self.policy.copilot_window)
        for i in range(self.warmup_iterations * self.parallelism.num_microbatches):
            bank.observe_iteration(trace.loads[i])
        return bank

    def cost(self) -> CostBreakdown:
        return cost_fabric(self.fabric, self.cluster, self.prices)


@dataclass
class RunResult:
    experiment: Experiment
    report: IterationReport
    cost: CostBreakdown

    def row(self, run_id: str) -> dict:
        e = self.experiment
        return {
            "run_id": run_id,
            "fabric": str(e.fabric),
            "bandwidth": f"{e.cluster.nic_bandwidth / 1e9:g}",
            "servers": e.cluster.num_servers,
            "policy": e.policy.fp1 if e.fabric.reconfigurable else "static",
            "seed": e.seed,
            "iteration_time_s": f"{self.report.iteration_time:.9g}",
            "a2a_fraction": f"{self.report.a2a_fraction:.6f}",
            "reconfig_charge_s": f"{self.report.reconfig_charge:.9g}",
            "cost_total": f"{self.cost.total:.2f}",
            "perf_per_dollar": f"{perf_per_dollar(self.report.iteration_time, self.cost.total):.6e}",
        }


def initial_regional_circuits(cluster: ClusterSpec, seed: int = 0) -> NicMapping:
    """Random circuits inside every OCS region: one random matching per OCS NIC index."""
    rng = np.random.default_rng(seed)
    links = []
    for members in cluster.region_list():
        if len(members) < 2:
            continue
        for nic in cluster.split_ocs_nics():
            perm = [members[i] for i in rng.permutation(len(members))]
            for a, b in zip(perm[0::2], perm[1::2]):
                links.append(CrossConnect.make(a, nic, b, nic))
    return NicMapping(tuple(links))


def run_experiment(exp: Experiment | dict, record_events: bool = False) -> RunResult:
    if isinstance(exp, dict):
        exp = Experiment.from_dict(exp)
    trace = exp.trace()
    policy = exp.policy if exp.fabric.reconfigurable else None
    dag = build_task_dag(exp.model, exp.parallelism, exp.cluster, trace, exp.warmup_iterations, policy)
    report = run_iteration(dag, exp.initial_state(), exp.policy, exp.failures, exp.seed, exp.copilot(trace),
                           record_events)
    return RunResult(exp, report, exp.cost())


# -- config manipulation ------------------------------------------------------

_UNITS = {"ns": 1e-9, "us": 1e-6, "µs": 1e-6, "ms": 1e-3, "s": 1.0}


def parse_duration(text) -> float:
    if isinstance(text, (int, float)):
        return float(text)
    s = str(text).strip()
    for unit in sorted(_UNITS, key=len, reverse=True):
        if s.endswith(unit):
            try:
                return float(s[: -len(unit)]) * _UNITS[unit]
            except ValueError:
                break
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"cannot parse duration {text!r} (use a number with us, ms or s)") from None


def _scalar(text: str):
    try:
        return json.loads(text)
    except (json.JSONDecodeError, TypeError):
        return text


def apply_override(config: dict, key: str, value) -> dict:
    """Return a copy of config with one sweep/override key applied.

    Shorthands: bandwidth (Gb/s), servers, alpha (optical degree), reconfig_delay
    (with units), fabric, policy, seed, failure (see failure_events); anything else is a dotted path such as
    model.num_layers.
    """
    try:
        return _override(copy.deepcopy(config), key, value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {value!r} for {key}: {exc}") from exc


def _override(cfg: dict, key: str, value) -> dict:
    cl = cfg.setdefault("cluster", {})
    if key == "bandwidth":
        cl["nic_bandwidth"] = float(value) * 1e9
    elif key == "servers":
        n = int(value)
        cl["num_servers"] = n + int(cl.get("backup_servers", 0))
        if cl.get("region_size") is not None and cl["region_size"] > cl["num_servers"]:
            cl["region_size"] = cl["num_servers"]
        cfg.setdefault("parallelism", {})["dp_degree"] = "auto"
    elif key in ("alpha", "optical_degree"):
        a = int(value)
        nics = int(cl.get("nics_per_server", 8))
        cl["ocs_nics_per_server"] = a
        cl["eps_nics_per_server"] = nics - a
    elif key == "reconfig_delay":
        cl["ocs_reconfig_delay"] = parse_duration(value)
    elif key == "fabric":
        cfg["fabric"] = str(value)
    elif key == "policy":
        cfg.setdefault("policy", {})["fp1"] = str(value)
    elif key == "seed":
        cfg["seed"] = int(value)
    elif key == "failure":
        cfg["failures"] = failure_events(cluster_from_dict(cl), str(value))
    elif "." in key:
        head, *rest = key.split(".")
        node = cfg.setdefault(head, {})
        for part in rest[:-1]:
            node = node.setdefault(part, {})
        node[rest[-1]] = _scalar(value) if isinstance(value, str) else value
    else:
        raise ConfigError(f"unknown override key {key!r}")
    return cfg


FAILURE_SHORTHANDS = ("none", "nic", "eps-nic", "gpu", "gpu-ocs", "node")


def failure_events(cluster: ClusterSpec, name: str) -> list[dict]:
    """Canned single-failure scenarios at time 0.

    nic fails the first optical NIC of server 0, eps-nic its first packet-switched
    NIC; gpu moves GPU 0 to the first GPU of the first backup server (gpu-ocs does
    the same with the backup attached only optically); node replaces server 0 by
    the first backup server.
    """
    if name == "none":
        return []
    if name == "nic":
        return [{"time": 0.0, "kind": "nic", "target": [0, cluster.split_ocs_nics()[0]]}]
    if name == "eps-nic":
        return [{"time": 0.0, "kind": "nic", "target": [0, cluster.split_eps_nics()[0]]}]
    if name not in FAILURE_SHORTHANDS:
        raise ConfigError(f"unknown failure scenario {name!r}; use one of {', '.join(FAILURE_SHORTHANDS)}")
    if cluster.backup_servers < 1:
        raise ConfigError(f"failure scenario {name!r} needs cluster.backup_servers >= 1")
    spare = cluster.workload_servers
    if name == "node":
        return [{"time": 0.0, "kind": "node", "target": 0, "backup": spare}]
    return [{"time": 0.0, "kind": "gpu", "target": 0, "backup": spare * cluster.gpus_per_server,
             "backup_via": "ocs" if name == "gpu-ocs" else "eps"}]


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]
