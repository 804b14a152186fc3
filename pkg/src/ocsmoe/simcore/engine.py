"""Event-driven execution of a task DAG on the fluid fabric model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..collectives import (Flow, FlowSet, delegation_for_state, plan_direct_all_to_all, plan_dp_hierarchical_allreduce,
                           plan_ep_all_to_all, plan_pp_p2p, plan_ring, plan_tp_allreduce, route_gpu_pair)
from ..copilot import CopilotBank
from ..fabric import CrossConnect, FabricError, FabricState, NicMapping, apply_nic_mapping
from ..reconfig import ReconfigRecord, calculate_server_demand, reconfigure_ocs
from ..workload import ExpertPlacement, ExpertTrafficMatrix, Task, TaskDag
from .events import EventQueue
from .failures import inject_failure
from .policy import FailureScenario, ReconfigPolicy
from .report import IterationReport, TaskTiming
from .sharing import incidence, max_min_rates


class SimulationError(RuntimeError):
    """The simulation cannot make progress (for example an unroutable flow)."""


@dataclass
class _ActiveFlow:
    fid: int
    task: int
    flow: Flow
    links: np.ndarray
    remaining: float  # bits
    size: float  # bits


@dataclass
class _CommState:
    groups: list[list[Flow]]
    next_group: int = 0
    outstanding: int = 0


@dataclass
class _Run:
    start: dict[int, float] = field(default_factory=dict)
    finish: dict[int, float] = field(default_factory=dict)


class Simulator:
    def __init__(self, dag: TaskDag, fabric: FabricState, policy: ReconfigPolicy | None = None,
                 failures: FailureScenario | None = None, seed: int = 0, copilot: CopilotBank | None = None,
                 record_events: bool = False):
        self.dag = dag
        self.state = fabric
        self.policy = policy or ReconfigPolicy()
        self.failures = failures or FailureScenario()
        self.seed = seed
        self.copilot = copilot
        self.record_events = record_events
        self.queue = EventQueue()
        self.now = 0.0
        self.links: dict = {}
        self.flows: dict[int, _ActiveFlow] = {}
        self.comm: dict[int, _CommState] = {}
        self.times = _Run()
        self.next_fid = 0
        self.dirty = True
        self.rates = np.zeros(0)
        self.order: list[int] = []
        self.cap_table: dict = {}
        self.paused: set = set()
        self.planned_bytes = 0.0
        self.delivered_bytes = 0.0
        self.reconfigs: list[ReconfigRecord] = []
        self.stalls: dict[int, float] = {}
        self.failure_log: list[dict] = []
        self.events: list[dict] = []
        self.barrier_of: dict[int, int] = {}
        self._refresh_capacity()

        n = len(dag.tasks)
        self.wait = [len(t.deps) for t in dag.tasks]
        self.wait_start = [len(t.start_deps) for t in dag.tasks]
        self.after: list[list[int]] = [[] for _ in range(n)]
        self.after_start: list[list[int]] = [[] for _ in range(n)]
        for t in dag.tasks:
            for d in t.deps:
                self.after[d].append(t.id)
            for d in t.start_deps:
                self.after_start[d].append(t.id)
            if t.kind == "reconfig_barrier" and t.target is not None:
                self.barrier_of[t.target] = t.id

    # -- bookkeeping ------------------------------------------------------
    def _log(self, kind: str, **payload):
        if self.record_events:
            self.events.append({"time": self.now, "kind": kind, **payload})

    def _refresh_capacity(self):
        self.cap_table = self.state.capacities()
        self.paused = self.state.paused_links(self.now)
        self.dirty = True

    def _link_ids(self, path) -> np.ndarray:
        return np.array([self.links.setdefault(l, len(self.links)) for l in path], dtype=np.int64)

    def _capacity_vector(self) -> np.ndarray:
        cap = np.zeros(len(self.links))
        for l, k in self.links.items():
            cap[k] = 0.0 if l in self.paused else self.cap_table.get(l, 0.0)
        return cap

    # -- flows ------------------------------------------------------------
    def _path_ok(self, path) -> bool:
        if any(self.cap_table.get(l, 0.0) <= 0 for l in path):
            return False
        if self.state.kind.has_ocs:
            optical = set(self.state.kind.ocs_nics(self.state.cluster))
            circuits = set(self.state.mapping.links)
            for a, b in zip(path, path[1:]):
                if a[0] == "tx" and b[0] == "rx" and a[2] in optical:
                    if CrossConnect.make(a[1], a[2], b[1], b[2]) not in circuits:
                        return False
        return True

    def _repair(self, flow: Flow, salt: int) -> Flow:
        if self._path_ok(flow.path):
            return flow
        try:
            path, fabric = route_gpu_pair(self.state, flow.src, flow.dst, salt)
        except FabricError as exc:
            raise SimulationError(f"flow {flow.src}->{flow.dst} ({flow.stage}) is unroutable: {exc}") from exc
        if not self._path_ok(path):
            raise SimulationError(f"flow {flow.src}->{flow.dst} ({flow.stage}) has no healthy path")
        return Flow(flow.src, flow.dst, flow.nbytes, path, fabric, flow.stage, flow.group)

    def _start_flow(self, task_id: int, flow: Flow):
        fid = self.next_fid
        self.next_fid += 1
        flow = self._repair(flow, fid)
        bits = flow.nbytes * 8.0
        self.flows[fid] = _ActiveFlow(fid, task_id, flow, self._link_ids(flow.path), bits, bits)
        self.dirty = True

    def _reroute_active(self):
        for af in self.flows.values():
            if not self._path_ok(af.flow.path):
                af.flow = self._repair(af.flow, af.fid)
                af.links = self._link_ids(af.flow.path)
        self.dirty = True

    def _solve(self):
        self.order = sorted(self.flows)
        if not self.order:
            self.rates = np.zeros(0)
            self.dirty = False
            return
        paths = [self.flows[f].links for f in self.order]
        used = np.unique(np.concatenate(paths))
        local = np.full(len(self.links), -1, dtype=np.int64)
        local[used] = np.arange(used.shape[0])
        A = incidence([local[p] for p in paths], used.shape[0])
        cap = self._capacity_vector()[used]
        self.rates = max_min_rates(A, cap)
        self.dirty = False

    # -- tasks --------------------------------------------------------------
    def _ready(self, tid: int):
        self.queue.push(self.now, "task_ready", tid)

    def _start_task(self, tid: int):
        t = self.dag.tasks[tid]
        self.times.start[tid] = self.now
        self._log("task_start", task=t.name)
        for nxt in self.after_start[tid]:
            self.wait_start[nxt] -= 1
            if self.wait_start[nxt] == 0 and self.wait[nxt] == 0:
                self._ready(nxt)
        if t.kind == "compute":
            self.queue.push(self.now + t.duration, "task_done", tid)
        elif t.kind == "reconfig_barrier":
            self.queue.push(self._barrier(t), "task_done", tid)
        else:
            b = self.barrier_of.get(tid)
            if b is not None:
                others = [self.times.finish[d] for d in t.deps if d != b]
                self.stalls[tid] = max(0.0, self.times.finish[b] - max(others, default=0.0))
            fs = self._plan(t)
            self.planned_bytes += fs.total
            self.comm[tid] = _CommState(fs.groups())
            self._next_group(tid)

    def _next_group(self, tid: int):
        cs = self.comm[tid]
        if cs.next_group >= len(cs.groups):
            self.queue.push(self.now, "task_done", tid)
            return
        group = cs.groups[cs.next_group]
        cs.next_group += 1
        cs.outstanding = len(group)
        for f in group:
            self._start_flow(tid, f)

    def _finish_task(self, tid: int):
        self.times.finish[tid] = self.now
        self._log("task_done", task=self.dag.tasks[tid].name)
        for nxt in self.after[tid]:
            self.wait[nxt] -= 1
            if self.wait[nxt] == 0 and self.wait_start[nxt] == 0:
                self._ready(nxt)

    # -- planning -------------------------------------------------------------
    def _placements(self, t: Task) -> list[ExpertPlacement]:
        remap = dict(self.state.gpu_remap)
        return [p.remapped(remap) if remap else p for p in t.groups]

    def _servers_of(self, gpus) -> list[int]:
        c = self.state.cluster
        return sorted({c.server_of_gpu(self.state.remap(g)) for g in gpus})

    def _plan(self, t: Task) -> FlowSet:
        st, c = self.state, self.state.cluster
        out = FlowSet()
        if t.kind == "all_to_all":
            if st.kind.reconfigurable:
                table = delegation_for_state(st, self.now, self._servers_of(t.gpus))
                for p in self._placements(t):
                    out.extend(plan_ep_all_to_all(t.traffic, table, c, p))
            else:
                for p in self._placements(t):
                    out.extend(plan_direct_all_to_all(t.traffic, st, p, remap=lambda g: g))
        elif t.kind == "all_reduce" and t.tag == "tp":
            for group in t.subgroups or (tuple(t.gpus),):
                ring = [st.remap(g) for g in group]
                if len({c.server_of_gpu(g) for g in ring}) == 1:
                    out.extend(plan_tp_allreduce(t.nbytes, ring, c))
                else:
                    out.extend(plan_ring(ring, t.nbytes, st))
        elif t.kind == "all_reduce":
            groups = self._dp_groups(t)
            per_server = t.nbytes / max(1, len(groups))  # a replica's gradients are spread over its servers
            for servers in groups:
                out.extend(plan_dp_hierarchical_allreduce(per_server, c, servers, st))
        elif t.kind == "p2p":
            out.extend(plan_pp_p2p(t.nbytes, st.remap(t.gpus[0]), st.remap(t.peer_gpus[0]), st))
        return out

    def _dp_groups(self, t: Task) -> list[list[int]]:
        """Servers holding the same model shard in every DP replica of the stage (after failover)."""
        c = self.state.cluster
        g = c.gpus_per_server
        replicas = t.subgroups or (tuple(t.gpus),)
        per_rep = [sorted({c.server_of_gpu(x) for x in r}) for r in replicas]
        width = min(len(r) for r in per_rep)
        # a server is replaced only when it failed as a whole; a single failed GPU's
        # share still reduces through its home server's gateways
        failed = self.state.failed_servers
        mapped = lambda s: c.server_of_gpu(self.state.remap(s * g)) if s in failed else s
        return [[mapped(r[k]) for r in per_rep] for k in range(width)]

    # -- reconfiguration ------------------------------------------------------
    def _demand_matrix(self, t: Task, target: Task) -> ExpertTrafficMatrix:
        traffic = target.traffic
        if t.mode != "predict":
            return traffic
        M = traffic.M
        src = M.sum(axis=1)
        src = src / src.sum() if src.sum() > 0 else np.full(M.shape[0], 1.0 / M.shape[0])
        prev = np.asarray(t.predict_from, dtype=float)
        yhat = self.copilot.predict(t.layer, prev) if self.copilot is not None else prev
        yhat = np.clip(yhat, 0.0, None)
        yhat = yhat / yhat.sum() if yhat.sum() > 0 else np.full(M.shape[0], 1.0 / M.shape[0])
        return ExpertTrafficMatrix(traffic.layer, traffic.phase, traffic.total * np.outer(src, yhat))

    def _barrier(self, t: Task) -> float:
        st = self.state
        if not st.kind.reconfigurable or t.target is None:
            return self.now
        c = st.cluster
        target = self.dag.tasks[t.target]
        traffic = self._demand_matrix(t, target)
        placements = self._placements(target)
        stage = set(self._servers_of(target.gpus))
        pinned = set(st.pinned)
        pinned_nics = {(s, x.end_at(s)) for x in pinned for s in x.pair}
        touched: set[int] = set()
        new_links: list[CrossConnect] = []
        regions = []
        for r, members in enumerate(c.region_list()):
            V = [s for s in members if s in stage and s not in st.failed_servers and s not in st.ocs_detached]
            if len(V) < 2:
                continue
            D = sum(calculate_server_demand(traffic, p, c, V) for p in placements)
            nics = {s: [n for n in st.ocs_nics(s) if (s, n) not in pinned_nics] for s in V}
            out = reconfigure_ocs(None, c.alpha, V=V, cluster=c, demand=D, nics=nics,
                                  skip_saturated=self.policy.skip_saturated)
            new_links.extend(out.mapping.links)
            touched.update(V)
            regions.append(r)
        keep = [x for x in st.mapping if x in pinned or not (x.server_a in touched or x.server_b in touched)]
        mapping = NicMapping(tuple(keep) + tuple(new_links))
        new = apply_nic_mapping(st, mapping, self.now)
        done = max((tt for x, tt in new.pending if tt > self.now and (x.server_a in touched or x.server_b in touched)),
                   default=self.now)
        if t.phase == "FP-1" and t.mode == "actual" and touched:
            # Blocking mode reprograms the switch after the gate every time, so the
            # all-to-all always sits out one full reconfiguration delay.
            done = max(done, self.now + c.ocs_reconfig_delay)
        if new is st and done == self.now:
            return self.now
        added = tuple(sorted(set(new.mapping.links) - set(st.mapping.links)))
        removed = tuple(sorted(set(st.mapping.links) - set(new.mapping.links)))
        self.state = new
        self.reconfigs.append(ReconfigRecord(regions[0] if len(regions) == 1 else -1, self.now, t.phase, t.layer,
                                             added, removed, done - self.now))
        self._log("reconfig_start", phase=t.phase, layer=t.layer, added=len(added), removed=len(removed))
        self.queue.push(done, "reconfig_done", t.id)
        self._refresh_capacity()
        self._reroute_active()
        return done

    # -- main loop --------------------------------------------------------------
    def run(self) -> IterationReport:
        for t in self.dag.tasks:
            if not t.deps and not t.start_deps:
                self._ready(t.id)
        for ev in self.failures.events:
            self.queue.push(ev.time, "failure", ev)
        prop = self.state.cluster.link_propagation_delay
        while True:
            if self.dirty:
                self._solve()
            t_flow = np.inf
            if self.order:
                rem = np.array([self.flows[f].remaining for f in self.order])
                with np.errstate(divide="ignore", invalid="ignore"):
                    dt = np.where(self.rates > 0, rem / self.rates, np.inf)
                t_flow = self.now + float(dt.min())
            t_next = min(t_flow, self.queue.peek_time())
            if not np.isfinite(t_next):
                if self.flows:
                    stuck = self.flows[self.order[0]].flow
                    name = self.dag.tasks[self.flows[self.order[0]].task].name
                    raise SimulationError(f"flow {stuck.src}->{stuck.dst} of task {name!r} cannot make progress")
                break
            if self.order and t_next > self.now:
                step = t_next - self.now
                done = []
                for k, f in enumerate(self.order):
                    af = self.flows[f]
                    r = self.rates[k]
                    if np.isinf(r):
                        af.remaining = 0.0
                    else:
                        af.remaining -= r * step
                    if af.remaining <= max(1e-6, 1e-9 * af.size):
                        done.append(f)
                self.now = t_next
                for f in done:
                    self._retire(f, prop)
            else:
                self.now = max(self.now, t_next)
                if self.order:
                    done = [f for k, f in enumerate(self.order) if np.isinf(self.rates[k])]
                    for f in done:
                        self._retire(f, prop)
            while self.queue and self.queue.peek_time() <= self.now:
                ev = self.queue.pop()
                self._handle(ev)
        if len(self.times.finish) != len(self.dag.tasks):
            missing = [t.name for t in self.dag.tasks if t.id not in self.times.finish][:3]
            raise SimulationError(f"tasks never completed: {missing}")
        return self._report()

    def _retire(self, fid: int, prop: float):
        af = self.flows.pop(fid)
        self.delivered_bytes += af.flow.nbytes
        self.dirty = True
        self.queue.push(self.now + prop, "flow_complete", af.task)

    def _handle(self, ev):
        if ev.kind == "task_ready":
            self._start_task(ev.payload)
        elif ev.kind == "task_done":
            self._finish_task(ev.payload)
        elif ev.kind == "flow_complete":
            cs = self.comm[ev.payload]
            cs.outstanding -= 1
            if cs.outstanding == 0:
                self._next_group(ev.payload)
        elif ev.kind == "reconfig_done":
            self._log("reconfig_done", task=ev.payload)
            self._refresh_capacity()
        elif ev.kind == "failure":
            self.state, info = inject_failure(self.state, ev.payload, self.now)
            self.failure_log.append(info)
            self._log("failure", failure=info["kind"], **{k: v for k, v in info.items() if k not in ("time", "kind")})
            if self.state.not_ready(self.now):
                self.queue.push(self.state.ready_at, "reconfig_done", None)  # circuits pinned for a backup
            self._refresh_capacity()
            self._reroute_active()

    def _report(self) -> IterationReport:
        timings = []
        for t in self.dag.tasks:
            timings.append(TaskTiming(t.id, t.name, t.kind, t.tag, t.stage, t.microbatch, t.layer, t.phase,
                                      self.times.start[t.id], self.times.finish[t.id], self.stalls.get(t.id, 0.0)))
        return IterationReport.build(timings, self.reconfigs, self.planned_bytes, self.delivered_bytes,
                                     self.failure_log, self.state, self.events)


def run_iteration(dag: TaskDag, fabric: FabricState, policy: ReconfigPolicy | None = None,
                  failures: FailureScenario | None = None, seed: int = 0, copilot: CopilotBank | None = None,
                  record_events: bool = False) -> IterationReport:
    """Simulate one training iteration; the report carries the final fabric state."""
    return Simulator(dag, fabric, policy, failures, seed, copilot, record_events).run()
