"""Demand-driven OCS topology generation.

The allocation loop follows the greedy bottleneck procedure literally: every server
pair with demand starts with an infinite finish time, the pair with the largest
finish time receives the next circuit, and the loop stops as soon as that pair has
no spare optical degree on either endpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fabric import ClusterSpec, CircuitMap, CrossConnect, FabricError, NicMapping
from .workload import ExpertPlacement, ExpertTrafficMatrix


def calculate_server_demand(traffic: ExpertTrafficMatrix | np.ndarray, placement: ExpertPlacement,
                            cluster: ClusterSpec, servers: Sequence[int] | None = None) -> np.ndarray:
    """Upper-triangular inter-server byte demand with TX and RX merged.

    Index k of the result is servers[k]; experts on servers outside that list are ignored.
    """
    m = traffic.M if isinstance(traffic, ExpertTrafficMatrix) else np.asarray(traffic, dtype=float)
    e = placement.num_experts
    if m.shape != (e, e):
        raise FabricError(f"traffic matrix {m.shape} does not match {e} placed experts")
    if servers is None:
        servers = placement.servers(cluster)
    index = {s: k for k, s in enumerate(servers)}
    onehot = np.zeros((e, len(servers)))
    for x in range(e):
        k = index.get(placement.server_of(x, cluster))
        if k is not None:
            onehot[x, k] = 1.0
    raw = onehot.T @ m @ onehot
    np.fill_diagonal(raw, 0.0)
    return np.triu(raw + raw.T, 1)


def initial_finish_times(D: np.ndarray) -> np.ndarray:
    """Infinite finish time wherever the upper-triangular demand is non-zero, mirrored."""
    T = np.where(np.triu(D, 1) != 0, np.inf, 0.0)
    return T + T.T


def find_bottleneck_link(T: np.ndarray, C: np.ndarray | None = None, V=None,
                         exclude: np.ndarray | None = None) -> tuple[int, int] | None:
    """Pair (i < j) with the largest finish time; ties go to the smallest (i, j)."""
    n = T.shape[0]
    iu, ju = np.triu_indices(n, 1)
    vals = T[iu, ju]
    if exclude is not None:
        vals = np.where(exclude[iu, ju], -1.0, vals)
    if vals.size == 0:
        return None
    k = int(np.argmax(vals))  # first maximum in row-major order
    if not vals[k] > 0:
        return None
    return int(iu[k]), int(ju[k])


@dataclass
class Allocation:
    C: np.ndarray
    T: np.ndarray
    avail_ocs: np.ndarray
    steps: list[tuple[int, int]] = field(default_factory=list)
    history: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def circuit_map(self) -> CircuitMap:
        return CircuitMap(self.C, self.avail_ocs)


def allocate_circuits(D: np.ndarray, alpha, skip_saturated: bool = False, record: bool = False) -> Allocation:
    """Greedy bottleneck circuit allocation over one region.

    alpha is the optical degree, either shared or per server. With skip_saturated the
    loop passes over a saturated bottleneck and keeps serving the next-worst pair
    instead of stopping (an extension, off by default).
    """
    D = np.asarray(D, dtype=float)
    n = D.shape[0]
    D = np.triu(D, 1)
    cmap = CircuitMap.empty(n, alpha)
    C, avail = cmap.C, cmap.avail_ocs
    T = initial_finish_times(D)
    out = Allocation(C, T, avail)
    skipped = np.zeros((n, n), dtype=bool) if skip_saturated else None
    while True:
        pair = find_bottleneck_link(T, C, None, skipped)
        if pair is None:
            break
        i, j = pair
        if avail[i] > 0 and avail[j] > 0:
            C[i, j] += 1
            C[j, i] += 1
            avail[i] -= 1
            avail[j] -= 1
        elif skip_saturated:
            skipped[i, j] = skipped[j, i] = True
            continue
        else:
            break
        T[i, j] = T[j, i] = D[i, j] / C[i, j]  # D lives in the upper triangle
        out.steps.append(pair)
        if record:
            out.history.append((C.copy(), T.copy()))
    return out


def _circuit_list(C: np.ndarray) -> list[tuple[int, int]]:
    n = C.shape[0]
    return [(i, j) for i in range(n) for j in range(i + 1, n) for _ in range(int(C[i, j]))]


def get_nic_mapping(C: np.ndarray, cluster: ClusterSpec, servers: Sequence[int] | None = None,
                    nics: dict[int, Sequence[int]] | None = None) -> NicMapping:
    """Give every circuit of C concrete NIC ports, lowest free OCS NIC first.

    servers maps matrix indices to server ids; nics lists the usable OCS NICs per
    server (default: the hybrid split of the cluster).
    """
    C = np.asarray(C)
    n = C.shape[0]
    servers = list(range(n)) if servers is None else list(servers)
    free = {s: sorted(nics[s]) if nics is not None else list(cluster.split_ocs_nics()) for s in servers}
    for k, s in enumerate(servers):
        if C[k].sum() > len(free[s]):
            raise FabricError(f"server {s} needs {int(C[k].sum())} circuits but has {len(free[s])} OCS NICs")
    links = []
    for i, j in _circuit_list(C):
        a, b = servers[i], servers[j]
        links.append(CrossConnect.make(a, free[a].pop(0), b, free[b].pop(0)))
    return NicMapping(tuple(links))


def _assign_ends(server: int, ends: list[tuple[int, int]], pool: list[int], prefer: set[int],
                 cluster: ClusterSpec) -> dict[int, int]:
    """Pick a local NIC for every circuit end (circuit id, peer) on one server."""
    by_peer: dict[int, list[int]] = {}
    for cid, peer in ends:
        by_peer.setdefault(peer, []).append(cid)
    numa = {nic: cluster.numa_of_nic(nic) for nic in pool}
    left = {node: sorted(n for n in pool if numa[n] == node) for node in sorted(set(numa.values()))}
    chosen: dict[int, int] = {}

    def take(nic: int):
        left[numa[nic]].remove(nic)

    for peer in sorted(by_peer):
        cids = by_peer[peer]
        if len(cids) < 2:
            continue
        spread = min(len(cids), sum(1 for v in left.values() if v))
        nodes = sorted((node for node in left if left[node]), key=lambda node: (-len(left[node]), node))
        for cid, node in zip(cids, nodes[:spread]):
            nic = next((x for x in left[node] if x in prefer), left[node][0])
            take(nic)
            chosen[cid] = nic
    rest = sorted(x for v in left.values() for x in v)
    rest = [x for x in rest if x in prefer] + [x for x in rest if x not in prefer]
    for cid, _ in sorted(ends):
        if cid not in chosen:
            nic = rest.pop(0)
            chosen[cid] = nic
    return chosen


def permute_links(mapping: NicMapping, cluster: ClusterSpec,
                  nics: dict[int, Sequence[int]] | None = None) -> NicMapping:
    """Spread the NICs of every multi-circuit server pair over distinct NUMA nodes.

    Circuit counts per pair never change. Servers whose pairs all have a single
    circuit keep their ports untouched.
    """
    links = list(mapping.links)
    ends: dict[int, list[tuple[int, int]]] = {}
    for cid, x in enumerate(links):
        ends.setdefault(x.server_a, []).append((cid, x.server_b))
        ends.setdefault(x.server_b, []).append((cid, x.server_a))
    new_nic: dict[tuple[int, int], int] = {}
    for s, lst in ends.items():
        peers = [p for _, p in lst]
        if all(peers.count(p) < 2 for p in set(peers)):
            continue
        used = {links[cid].end_at(s) for cid, _ in lst}
        avail = set(nics[s]) if nics is not None else set(cluster.split_ocs_nics())
        pool = sorted(used | avail)
        for cid, nic in _assign_ends(s, lst, pool, used, cluster).items():
            new_nic[(cid, s)] = nic
    out = []
    for cid, x in enumerate(links):
        na = new_nic.get((cid, x.server_a), x.nic_a)
        nb = new_nic.get((cid, x.server_b), x.nic_b)
        out.append(CrossConnect.make(x.server_a, na, x.server_b, nb))
    return NicMapping(tuple(out))


def numa_spread_ok(mapping: NicMapping, cluster: ClusterSpec) -> bool:
    """Every multi-circuit pair touches >= 2 NUMA nodes on both sides (when the server has them)."""
    if cluster.numa_nodes_per_server < 2:
        return True
    for (a, b), cnt in mapping.counts().items():
        if cnt < 2:
            continue
        xs = mapping.between(a, b)
        for s in (a, b):
            if len({cluster.numa_of_nic(x.end_at(s)) for x in xs}) < 2:
                return False
    return True


@dataclass
class ReconfigOutcome:
    mapping: NicMapping
    allocation: Allocation
    servers: tuple[int, ...]
    demand: np.ndarray


def reconfigure_ocs(E: ExpertTrafficMatrix | np.ndarray, alpha, N: int | None = None, V: Sequence[int] | None = None,
                    placement: ExpertPlacement | None = None, cluster: ClusterSpec | None = None, *,
                    demand: np.ndarray | None = None, nics: dict[int, Sequence[int]] | None = None,
                    skip_saturated: bool = False, record: bool = False) -> ReconfigOutcome:
    """Full topology generation for one OCS region.

    V is the server set (global ids); N defaults to len(V). Pass `demand` to skip the
    expert-to-server aggregation (it must then be indexed like V).
    """
    if cluster is None:
        raise FabricError("reconfigure_ocs needs the cluster description")
    if V is None:
        V = placement.servers(cluster) if placement is not None else range(N or 0)
    V = tuple(V)
    if N is not None and N != len(V):
        raise FabricError(f"N={N} but the server set has {len(V)} members")
    if np.isscalar(alpha) and alpha < 1:
        raise FabricError("optical degree must be >= 1")
    if demand is None:
        if placement is None:
            raise FabricError("expert placement is required to aggregate demand")
        demand = calculate_server_demand(E, placement, cluster, V)
    if nics is not None:
        alpha = np.array([min(len(nics[s]), int(alpha) if np.isscalar(alpha) else int(alpha[k]))
                          for k, s in enumerate(V)])
    alloc = allocate_circuits(demand, alpha, skip_saturated=skip_saturated, record=record)
    mapping = get_nic_mapping(alloc.C, cluster, V, nics)
    mapping = permute_links(mapping, cluster, nics)
    return ReconfigOutcome(mapping, alloc, V, demand)


@dataclass(frozen=True)
class ReconfigRecord:
    region: int
    time: float
    phase: str | None
    layer: int | None
    added: tuple[CrossConnect, ...]
    removed: tuple[CrossConnect, ...]
    charge: float  # seconds the affected circuits are dark

    def to_json(self) -> dict:
        return {
            "region": self.region, "time": self.time, "phase": self.phase, "layer": self.layer,
            "added": [list(x) for x in self.added], "removed": [list(x) for x in self.removed],
            "charge": self.charge,
        }
