"""Turn communication tasks into concrete flows on the fabric.

Every flow carries a full link path (see fabric for link ids). Flows of one FlowSet
run in overlap groups: all flows of group g start together and group g+1 starts
once every flow of group g has finished.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

from .fabric import (ClusterSpec, ConfigError, CrossConnect, EpsTopology, FabricError, FabricState, Link,
                     NicMapping, circuit_path, eps_path, nv_path)
from .workload import ExpertPlacement, ExpertTrafficMatrix

EP_STAGES = ("gather", "inter_host", "intra_a2a", "scatter")
STAGE_GROUP = {"gather": 0, "inter_host": 1, "intra_a2a": 1, "scatter": 2}


@dataclass(frozen=True)
class Flow:
    src: int  # GPU
    dst: int  # GPU
    nbytes: float
    path: tuple[Link, ...]
    fabric: str  # nvswitch | eps | ocs | relay
    stage: str
    group: int = 0

    def to_json(self) -> dict:
        return {"src": self.src, "dst": self.dst, "bytes": self.nbytes, "path": [list(l) for l in self.path],
                "fabric": self.fabric, "stage": self.stage, "group": self.group}


@dataclass
class FlowSet:
    flows: list[Flow] = field(default_factory=list)
    audit: dict[tuple[str, int], float] = field(default_factory=dict)  # (stage, final dst GPU) -> bytes

    def groups(self) -> list[list[Flow]]:
        ids = sorted({f.group for f in self.flows})
        return [[f for f in self.flows if f.group == g] for g in ids]

    def bytes_by_stage(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for f in self.flows:
            out[f.stage] = out.get(f.stage, 0.0) + f.nbytes
        return out

    def bytes_by_fabric(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for f in self.flows:
            out[f.fabric] = out.get(f.fabric, 0.0) + f.nbytes
        return out

    @property
    def total(self) -> float:
        return float(sum(f.nbytes for f in self.flows))

    def extend(self, other: "FlowSet") -> "FlowSet":
        self.flows.extend(other.flows)
        for k, v in other.audit.items():
            self.audit[k] = self.audit.get(k, 0.0) + v
        return self

    def to_json(self) -> str:
        return json.dumps([f.to_json() for f in self.flows], sort_keys=True)


class _Acc:
    """Merges byte contributions of identical (group, stage, src, dst, path) flows."""

    def __init__(self):
        self.flows: dict[tuple, float] = {}
        self.audit: dict[tuple[str, int], float] = {}

    def add(self, src: int, dst: int, nbytes: float, path: tuple, fabric: str, stage: str,
            group: int | None = None, final_dst: int | None = None):
        if nbytes <= 0:
            return
        key_a = (stage, dst if final_dst is None else final_dst)
        self.audit[key_a] = self.audit.get(key_a, 0.0) + nbytes
        if not path:
            return
        g = STAGE_GROUP.get(stage, 0) if group is None else group
        key = (g, stage, src, dst, path, fabric)
        self.flows[key] = self.flows.get(key, 0.0) + nbytes

    def result(self) -> FlowSet:
        flows = [Flow(src, dst, b, path, fabric, stage, g)
                 for (g, stage, src, dst, path, fabric), b in sorted(self.flows.items(), key=lambda kv: _sort_key(kv[0]))]
        return FlowSet(flows, dict(self.audit))


def _sort_key(key: tuple) -> tuple:
    g, stage, src, dst, path, fabric = key
    return (g, stage, src, dst, repr(path), fabric)


# ---------------------------------------------------------------------------
# Delegation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Route:
    """One way of moving bytes from server src to server dst.

    links covers NIC egress to NIC ingress, including any relay hops; src_nic/dst_nic
    identify the delegation NICs whose GPUs gather and scatter the traffic.
    """

    src_nic: int
    dst_nic: int
    links: tuple[Link, ...]
    fabric: str
    weight: float
    relay: tuple[int, ...] = ()


@dataclass
class DelegationTable:
    cluster: ClusterSpec
    routes: dict[tuple[int, int], tuple[Route, ...]]

    def entry(self, src: int, dst: int) -> tuple[Route, ...]:
        try:
            return self.routes[(src, dst)]
        except KeyError:
            raise FabricError(f"no route from server {src} to server {dst}") from None

    def fabric(self, src: int, dst: int) -> str:
        return self.entry(src, dst)[0].fabric

    def delegation_gpus(self, src: int, dst: int) -> list[int]:
        return [self.cluster.gpu_of_nic(src, r.src_nic) for r in self.entry(src, dst)]


def _nv_hop(cluster: ClusterSpec, server: int, nic_in: int, nic_out: int) -> tuple[Link, ...]:
    return nv_path(cluster.gpu_of_nic(server, nic_in), cluster.gpu_of_nic(server, nic_out))


def _eps_routes(state: FabricState, s: int, d: int) -> list[Route]:
    src, dst = state.eps_nics(s), state.eps_nics(d)
    if not src or not dst:
        return []
    w = 1.0 / len(src)
    out = []
    for k, n in enumerate(src):
        m = dst[k % len(dst)]
        out.append(Route(n, m, eps_path(state, (s, n), (d, m)), "eps", w))
    return out


def _circuits(mapping: NicMapping, state: FabricState | None, a: int, b: int) -> list[CrossConnect]:
    xs = mapping.between(a, b)
    if state is None:
        return xs
    bad = state.failed_nics
    return [x for x in xs if (x.server_a, x.nic_a) not in bad and (x.server_b, x.nic_b) not in bad]


def _optical_peers(mapping: NicMapping, state: FabricState, s: int) -> list[tuple[int, CrossConnect]]:
    out = []
    for x in mapping:
        if s in x.pair:
            p, _ = x.peer_of(s)
            if x in _circuits(mapping, state, *x.pair):
                out.append((p, x))
    return sorted(out)


@dataclass(frozen=True)
class _Segment:
    server: int  # where the segment meets the EPS
    eps_nic: int  # EPS NIC used on that server
    end_nic: int  # NIC on the endpoint server (source or destination)
    links: tuple[Link, ...]
    relay: tuple[int, ...]
    circuit: CrossConnect | None = None


def _forwarding_nic(state: FabricState, server: int, nics: Sequence[int]) -> int:
    """First EPS NIC of a relay server whose GPU is alive to forward through NVSwitch."""
    for n in nics:
        if state.cluster.gpu_of_nic(server, n) not in state.failed_gpus:
            return n
    return nics[0]


def _relay_routes(state: FabricState, mapping: NicMapping, s: int, d: int) -> list[Route]:
    """Routes for a pair lacking EPS access on one side, via optical neighbours that have it."""
    c = state.cluster
    heads: list[_Segment] = []
    if state.eps_nics(s):
        heads = [_Segment(s, n, n, (), ()) for n in state.eps_nics(s)]
    else:
        for p, x in _optical_peers(mapping, state, s):
            p_eps = state.eps_nics(p)
            if p_eps and p != d:
                _, n_in = x.peer_of(s)
                e = _forwarding_nic(state, p, p_eps)
                heads.append(_Segment(p, e, x.end_at(s), circuit_path(x, s) + _nv_hop(c, p, n_in, e),
                                      (p,), x))
    tails: list[_Segment] = []
    if state.eps_nics(d):
        tails = [_Segment(d, m, m, (), ()) for m in state.eps_nics(d)]
    else:
        for q, y in _optical_peers(mapping, state, d):
            q_eps = state.eps_nics(q)
            if q_eps and q != s:
                n_out = y.end_at(q)
                e = _forwarding_nic(state, q, q_eps)
                tails.append(_Segment(q, e, y.peer_of(q)[1], _nv_hop(c, q, e, n_out) + circuit_path(y, q),
                                      (q,), y))
    routes = []
    if heads and tails:
        for k in range(max(len(heads), len(tails))):
            h, t = heads[k % len(heads)], tails[k % len(tails)]
            if h.server == t.server:
                # Both endpoints reach the same relay optically; stay in the optical domain.
                mid = _nv_hop(c, h.server, h.circuit.peer_of(s)[1], t.circuit.end_at(t.server))
                links = circuit_path(h.circuit, s) + mid + circuit_path(t.circuit, t.server)
            else:
                links = h.links + eps_path(state, (h.server, h.eps_nic), (t.server, t.eps_nic)) + t.links
            routes.append(Route(h.end_nic, t.end_nic, links, "relay", 0.0, h.relay + t.relay))
    routes = list(dict.fromkeys(routes))
    if not routes:
        return []
    w = 1.0 / len(routes)
    return [Route(r.src_nic, r.dst_nic, r.links, r.fabric, w, r.relay) for r in routes]


def build_delegation_table(mapping: NicMapping, eps: EpsTopology | None, cluster: ClusterSpec,
                           state: FabricState | None = None, servers: Iterable[int] | None = None) -> DelegationTable:
    """Routes for every ordered server pair.

    Direct circuits win over the EPS; several circuits of one pair share the load
    evenly. Pairs with neither get relayed through an optical neighbour.
    """
    if state is None:
        from .fabric import FabricKind
        state = FabricState(cluster, FabricKind("mixnet"), eps, mapping)
    servers = sorted(range(cluster.num_servers) if servers is None else set(servers))
    routes: dict[tuple[int, int], tuple[Route, ...]] = {}
    for s in servers:
        for d in servers:
            if s == d:
                continue
            xs = _circuits(mapping, state, s, d)
            if xs:
                w = 1.0 / len(xs)
                rs = [Route(x.end_at(s), x.peer_of(s)[1], circuit_path(x, s), "ocs", w) for x in xs]
            else:
                rs = _eps_routes(state, s, d) or _relay_routes(state, mapping, s, d)
            if rs:
                routes[(s, d)] = tuple(rs)
    return DelegationTable(cluster, routes)


def delegation_for_state(state: FabricState, now: float = 0.0, servers: Iterable[int] | None = None) -> DelegationTable:
    return build_delegation_table(state.active_mapping(now), state.eps, state.cluster, state, servers)


# ---------------------------------------------------------------------------
# Expert-parallel all-to-all
# ---------------------------------------------------------------------------

def _shards(placement: ExpertPlacement, expert: int, remap) -> tuple[int, ...]:
    return tuple(remap(g) for g in placement.gpus_of(expert))


def plan_ep_all_to_all(m: ExpertTrafficMatrix, table: DelegationTable, cluster: ClusterSpec,
                       placement: ExpertPlacement, remap=None) -> FlowSet:
    """Five-step all-to-all through delegation GPUs.

    (1) routes come from the delegation table; (2) source shards gather their
    cross-server bytes on the delegation GPU; (3) delegation GPUs exchange over
    circuits or the EPS while (4) local experts exchange over NVSwitch; (5) the
    receiving delegation GPU scatters to the destination shards.
    """
    remap = remap or (lambda g: g)
    e = placement.num_experts
    if m.M.shape != (e, e):
        raise FabricError("traffic matrix does not match the expert placement")
    acc = _Acc()
    rows, cols = np.nonzero(m.M)
    for i, j in zip(rows.tolist(), cols.tolist()):
        b = float(m.M[i, j])
        src, dst = _shards(placement, i, remap), _shards(placement, j, remap)
        per = b / len(src)
        for k, sg in enumerate(src):
            dg = dst[k % len(dst)]
            s, d = cluster.server_of_gpu(sg), cluster.server_of_gpu(dg)
            if s == d:
                acc.add(sg, dg, per, nv_path(sg, dg), "nvswitch", "intra_a2a", final_dst=dg)
                continue
            for r in table.entry(s, d):
                part = per * r.weight
                gs, gd = cluster.gpu_of_nic(s, r.src_nic), cluster.gpu_of_nic(d, r.dst_nic)
                acc.add(sg, gs, part, nv_path(sg, gs), "nvswitch", "gather", final_dst=dg)
                acc.add(gs, gd, part, r.links, r.fabric, "inter_host", final_dst=dg)
                acc.add(gd, dg, part, nv_path(gd, dg), "nvswitch", "scatter", final_dst=dg)
    return acc.result()


def plan_direct_all_to_all(m: ExpertTrafficMatrix, state: FabricState, placement: ExpertPlacement,
                           remap=None) -> FlowSet:
    """All-to-all where every GPU sends through its own NIC (packet fabrics and static circuits)."""
    remap = remap or state.remap
    c = state.cluster
    acc = _Acc()
    rows, cols = np.nonzero(m.M)
    for i, j in zip(rows.tolist(), cols.tolist()):
        src, dst = _shards(placement, i, remap), _shards(placement, j, remap)
        per = float(m.M[i, j]) / len(src)
        for k, sg in enumerate(src):
            dg = dst[k % len(dst)]
            path, fabric = route_gpu_pair(state, sg, dg, salt=k)
            stage = "intra_a2a" if c.server_of_gpu(sg) == c.server_of_gpu(dg) else "inter_host"
            acc.add(sg, dg, per, path, fabric, stage, group=0, final_dst=dg)
    return acc.result()


# ---------------------------------------------------------------------------
# Generic GPU-to-GPU routing
# ---------------------------------------------------------------------------

def _live_nics(state: FabricState, server: int, nics: Sequence[int]) -> tuple[int, ...]:
    """NICs whose owner GPU is alive; a dead GPU's NVSwitch ports carry nothing to or from its NIC."""
    live = tuple(n for n in nics if state.cluster.gpu_of_nic(server, n) not in state.failed_gpus)
    return live or tuple(nics)


def _pick_nic(state: FabricState, gpu: int, nics: Sequence[int], salt: int) -> int:
    own = state.cluster.nic_of_gpu(gpu)
    if own in nics and gpu not in state.failed_gpus:
        return own
    live = _live_nics(state, state.cluster.server_of_gpu(gpu), nics)
    return live[salt % len(live)]


def route_gpu_pair(state: FabricState, src: int, dst: int, salt: int = 0) -> tuple[tuple[Link, ...], str]:
    """Link path for a point-to-point transfer outside the delegation scheme."""
    c = state.cluster
    s, d = c.server_of_gpu(src), c.server_of_gpu(dst)
    if s == d:
        return nv_path(src, dst), "nvswitch"
    if state.kind.name == "topoopt":
        return _static_route(state, src, dst, salt), "ocs"
    s_eps, d_eps = state.eps_nics(s), state.eps_nics(d)
    if s_eps and d_eps:
        n, m = _pick_nic(state, src, s_eps, salt), _pick_nic(state, dst, d_eps, salt)
        gs, gd = c.gpu_of_nic(s, n), c.gpu_of_nic(d, m)
        return nv_path(src, gs) + eps_path(state, (s, n), (d, m)) + nv_path(gd, dst), "eps"
    mapping = state.mapping
    xs = _circuits(mapping, state, s, d)
    live = [x for x in xs if c.gpu_of_nic(s, x.end_at(s)) not in state.failed_gpus
            and c.gpu_of_nic(d, x.peer_of(s)[1]) not in state.failed_gpus]
    xs = live or xs
    if xs:
        x = xs[salt % len(xs)]
        gs, gd = c.gpu_of_nic(s, x.end_at(s)), c.gpu_of_nic(d, x.peer_of(s)[1])
        return nv_path(src, gs) + circuit_path(x, s) + nv_path(gd, dst), "ocs"
    rs = _relay_routes(state, mapping, s, d)
    if not rs:
        raise FabricError(f"unroutable flow GPU {src} -> GPU {dst}")
    r = rs[salt % len(rs)]
    gs, gd = c.gpu_of_nic(s, r.src_nic), c.gpu_of_nic(d, r.dst_nic)
    return nv_path(src, gs) + r.links + nv_path(gd, dst), "relay"


# ---------------------------------------------------------------------------
# Static circuit topology (TopoOpt-style baseline)
# ---------------------------------------------------------------------------

def build_static_topology(cluster: ClusterSpec, seed: int = 0, degree: int | None = None) -> NicMapping:
    """Random regular circuit topology: one random perfect matching per NIC index."""
    degree = cluster.nics_per_server if degree is None else degree
    n = cluster.num_servers
    if n < 2:
        return NicMapping()
    rng = np.random.default_rng(seed)
    for _ in range(100):
        links = []
        for nic in range(degree):
            perm = rng.permutation(n).tolist()
            for a, b in zip(perm[0::2], perm[1::2]):
                links.append(CrossConnect.make(a, nic, b, nic))
        g = nx.MultiGraph()
        g.add_nodes_from(range(n))
        g.add_edges_from(x.pair for x in links)
        if nx.is_connected(g):
            return NicMapping(tuple(links))
    raise ConfigError("could not draw a connected static topology")


@lru_cache(maxsize=64)
def _static_paths(mapping: NicMapping, n: int, failed: frozenset) -> dict:
    g = nx.Graph()
    g.add_nodes_from(range(n))
    for x in mapping:
        if (x.server_a, x.nic_a) in failed or (x.server_b, x.nic_b) in failed:
            continue
        g.add_edge(*x.pair)
    paths = {}
    for s in range(n):
        for d in range(n):
            if s != d and nx.has_path(g, s, d):
                paths[(s, d)] = sorted(nx.all_shortest_paths(g, s, d))[:8]
    return paths


def _static_route(state: FabricState, src: int, dst: int, salt: int) -> tuple[Link, ...]:
    c = state.cluster
    s, d = c.server_of_gpu(src), c.server_of_gpu(dst)
    paths = _static_paths(state.mapping, c.num_servers, frozenset(state.failed_nics)).get((s, d))
    if not paths:
        raise FabricError(f"unroutable flow GPU {src} -> GPU {dst}")
    hops = paths[salt % len(paths)]
    links: tuple[Link, ...] = ()
    here = src
    for u, v in zip(hops, hops[1:]):
        xs = _circuits(state.mapping, state, u, v)
        x = xs[(salt + u) % len(xs)]
        out_gpu = c.gpu_of_nic(u, x.end_at(u))
        links += nv_path(here, out_gpu) + circuit_path(x, u)
        here = c.gpu_of_nic(v, x.peer_of(u)[1])
    return links + nv_path(here, dst)


# ---------------------------------------------------------------------------
# DP / TP / PP
# ---------------------------------------------------------------------------

def ring_volume(nbytes: float, n: int) -> float:
    """Bytes each member sends in a ring all-reduce of nbytes over n members."""
    return 2.0 * nbytes * (n - 1) / n if n > 1 else 0.0


def plan_ring(gpus: Sequence[int], nbytes: float, state: FabricState | None, stage: str = "ring_step",
              group: int = 0, salt: int = 0) -> FlowSet:
    acc = _Acc()
    n = len(gpus)
    vol = ring_volume(nbytes, n)
    for k, g in enumerate(gpus):
        nxt = gpus[(k + 1) % n]
        if state is None:
            path, fabric = nv_path(g, nxt), "nvswitch"
        else:
            path, fabric = route_gpu_pair(state, g, nxt, salt + k)
        acc.add(g, nxt, vol, path, fabric, stage, group=group)
    return acc.result()


def plan_tp_allreduce(nbytes: float, group: Sequence[int], cluster: ClusterSpec,
                      state: FabricState | None = None) -> FlowSet:
    """Ring all-reduce over NVSwitch inside one server."""
    group = list(group)
    if len({cluster.server_of_gpu(g) for g in group}) > 1:
        raise ConfigError("a TP group must stay inside one server")
    if len(group) < 2 or nbytes <= 0:
        return FlowSet()
    return plan_ring(group, nbytes, None)


def plan_dp_hierarchical_allreduce(model_bytes: float, cluster: ClusterSpec, dp_group: Sequence[int],
                                   state: FabricState, remap=None) -> FlowSet:
    """Intra-host reduce to gateway GPUs, one ring per EPS NIC across servers, intra-host broadcast.

    dp_group lists the servers that synchronize; model_bytes are the bytes each of
    them holds. With e EPS NICs per server, ring k carries model_bytes / e over NIC k
    of every server.
    """
    remap = remap or state.remap
    servers = list(dp_group)
    acc = _Acc()
    if model_bytes <= 0 or not servers:
        return FlowSet()
    g = cluster.gpus_per_server
    nics = {s: _live_nics(state, s, state.eps_nics(s) if state.kind.has_eps else state.kind.ocs_nics(cluster))
            for s in servers}
    e = min(len(v) for v in nics.values()) if len(servers) > 1 else max(1, len(nics[servers[0]]))
    if len(servers) > 1 and e == 0:
        # A server without EPS access still joins, through a relayed ring hop.
        e = 1
    per_gpu = model_bytes / g
    for s in servers:
        gateways = [cluster.gpu_of_nic(s, n) for n in (nics[s][:e] or [0])]
        for local in range(g):
            gpu = remap(s * g + local)
            for k, gw in enumerate(gateways):
                part = per_gpu / len(gateways)
                up, f_up = route_gpu_pair(state, gpu, gw, salt=k)
                down, f_down = route_gpu_pair(state, gw, gpu, salt=k)
                acc.add(gpu, gw, part, up, f_up, "reduce", group=0)
                acc.add(gw, gpu, part, down, f_down, "broadcast", group=2)
    if len(servers) > 1:
        vol = ring_volume(model_bytes / e, len(servers))
        for k in range(e):
            for idx, s in enumerate(servers):
                d = servers[(idx + 1) % len(servers)]
                if nics[s] and nics[d]:
                    ns, nd = nics[s][k % len(nics[s])], nics[d][k % len(nics[d])]
                    src, dst = cluster.gpu_of_nic(s, ns), cluster.gpu_of_nic(d, nd)
                else:
                    src, dst = s * g, d * g
                path, fabric = route_gpu_pair(state, src, dst, salt=k)
                acc.add(src, dst, vol, path, fabric, "ring_step", group=1)
    return acc.result()


def plan_pp_p2p(nbytes: float, src_gpu: int, dst_gpu: int, state: FabricState) -> FlowSet:
    """One activation (or gradient) transfer across a pipeline stage boundary."""
    if nbytes <= 0:
        return FlowSet()
    path, fabric = route_gpu_pair(state, src_gpu, dst_gpu)
    acc = _Acc()
    acc.add(src_gpu, dst_gpu, nbytes, path, fabric, "p2p", group=0)
    return acc.result()
