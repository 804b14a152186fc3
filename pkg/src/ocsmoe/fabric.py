"""Cluster description and the mutable state of the electrical and optical fabrics.

Links are identified by small tuples so flow paths stay hashable and cheap:

    ("tx", server, nic) / ("rx", server, nic)   NIC egress / ingress
    ("nvo", gpu) / ("nvi", gpu)                 NVSwitch port out / in
    ("tu", tor) / ("td", tor)                   ToR uplink / downlink bundle
    ("pu", pod) / ("pd", pod)                   pod (aggregation) up / down bundle

Bundles aggregate every parallel cable of one switch tier into a single fluid
resource, which is exact for a perfectly load-balanced Clos.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import ClassVar, Iterable, NamedTuple

import networkx as nx
import numpy as np
import yaml

Link = tuple


class ConfigError(ValueError):
    """Invalid cluster or experiment configuration."""


class FabricError(RuntimeError):
    """An operation referenced failed or non-existent fabric resources."""


@dataclass(frozen=True)
class ClusterSpec:
    num_servers: int
    nic_bandwidth: float = 100e9  # bits/s
    gpus_per_server: int = 8
    nics_per_server: int = 8
    eps_nics_per_server: int = 2
    ocs_nics_per_server: int = 6
    nvswitch_bandwidth: float = 900e9  # bytes/s
    link_propagation_delay: float = 1e-6
    ocs_reconfig_delay: float = 25e-3
    region_size: int | None = None
    numa_nodes_per_server: int = 2
    ocs_port_count: int = 576
    switch_radix: int | None = None
    backup_servers: int = 0
    regions: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        if self.num_servers < 1:
            raise ConfigError("num_servers must be >= 1")
        for name in ("gpus_per_server", "nics_per_server", "numa_nodes_per_server"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.eps_nics_per_server < 0 or self.ocs_nics_per_server < 0:
            raise ConfigError("NIC split must be non-negative")
        if self.eps_nics_per_server + self.ocs_nics_per_server != self.nics_per_server:
            raise ConfigError(
                "eps_nics_per_server + ocs_nics_per_server must equal nics_per_server "
                f"({self.eps_nics_per_server} + {self.ocs_nics_per_server} != {self.nics_per_server})"
            )
        for name in ("nic_bandwidth", "nvswitch_bandwidth", "link_propagation_delay", "ocs_reconfig_delay"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be strictly positive")
        if not 0 <= self.backup_servers < self.num_servers:
            raise ConfigError("backup_servers must leave at least one workload server")
        if self.switch_radix is not None and (self.switch_radix < 2 or self.switch_radix % 2):
            raise ConfigError("switch_radix must be an even number >= 2")
        if self.region_size is None:
            object.__setattr__(self, "region_size", self.num_servers)
        if self.region_size < 1:
            raise ConfigError("region_size must be >= 1")
        if self.region_size * self.ocs_nics_per_server > self.ocs_port_count:
            raise ConfigError(
                f"region of {self.region_size} servers x {self.ocs_nics_per_server} OCS NICs "
                f"exceeds the {self.ocs_port_count}-port OCS"
            )
        if self.regions is not None:
            regions = tuple(tuple(int(s) for s in r) for r in self.regions)
            seen = [s for r in regions for s in r]
            if len(seen) != len(set(seen)) or any(not 0 <= s < self.num_servers for s in seen):
                raise ConfigError("explicit regions must be disjoint sets of valid servers")
            if any(len(r) * self.ocs_nics_per_server > self.ocs_port_count for r in regions):
                raise ConfigError("an explicit region exceeds the OCS port count")
            object.__setattr__(self, "regions", regions)

    # -- derived layout -------------------------------------------------
    @property
    def alpha(self) -> int:
        return self.ocs_nics_per_server

    @property
    def num_gpus(self) -> int:
        return self.num_servers * self.gpus_per_server

    @property
    def workload_servers(self) -> int:
        return self.num_servers - self.backup_servers

    def region_list(self) -> list[tuple[int, ...]]:
        if self.regions is not None:
            return [tuple(r) for r in self.regions]
        n, size = self.num_servers, self.region_size
        return [tuple(range(lo, min(lo + size, n))) for lo in range(0, n, size)]

    def region_of(self, server: int) -> int | None:
        for idx, members in enumerate(self.region_list()):
            if server in members:
                return idx
        return None

    def numa_of_nic(self, nic: int) -> int:
        per = max(1, self.nics_per_server // self.numa_nodes_per_server)
        return min(nic // per, self.numa_nodes_per_server - 1)

    def gpu_of_nic(self, server: int, nic: int) -> int:
        local = nic * self.gpus_per_server // self.nics_per_server
        return server * self.gpus_per_server + local

    def nic_of_gpu(self, gpu: int) -> int:
        local = gpu % self.gpus_per_server
        return local * self.nics_per_server // self.gpus_per_server

    def server_of_gpu(self, gpu: int) -> int:
        return gpu // self.gpus_per_server

    def split_eps_nics(self) -> tuple[int, ...]:
        """NIC indices wired to the EPS in the hybrid layout, spread evenly over NUMA nodes."""
        e, n = self.eps_nics_per_server, self.nics_per_server
        return tuple(sorted({k * n // e for k in range(e)})) if e else ()

    def split_ocs_nics(self) -> tuple[int, ...]:
        eps = set(self.split_eps_nics())
        return tuple(i for i in range(self.nics_per_server) if i not in eps)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["regions"] is not None:
            d["regions"] = [list(r) for r in d["regions"]]
        return d


def coerce_numbers(cls, data: dict) -> dict:
    """Convert numeric strings (YAML reads 100e9 as text) for int and float fields of a dataclass."""
    out = dict(data)
    for f in fields(cls):
        v = out.get(f.name)
        kind = str(f.type).replace(" | None", "")
        if not isinstance(v, str) or kind not in ("int", "float"):
            continue
        try:
            x = float(v)
        except ValueError:
            raise ConfigError(f"field {f.name!r} expects a number, got {v!r}") from None
        if kind == "int":
            if not x.is_integer():
                raise ConfigError(f"field {f.name!r} expects an integer, got {v!r}")
            x = int(x)
        out[f.name] = x
    return out


def cluster_from_dict(data: dict) -> ClusterSpec:
    known = {f.name for f in fields(ClusterSpec)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown ClusterSpec field(s): {', '.join(unknown)}")
    if "num_servers" not in data:
        raise ConfigError("ClusterSpec field 'num_servers' is required")
    data = coerce_numbers(ClusterSpec, data)
    if data.get("regions") is not None:
        data["regions"] = tuple(tuple(r) for r in data["regions"])
    try:
        return ClusterSpec(**data)
    except TypeError as exc:
        raise ConfigError(f"bad ClusterSpec value: {exc}") from exc


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_text()
    try:
        if path.suffix in (".yaml", ".yml"):
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_cluster_spec(path: str | Path) -> ClusterSpec:
    data = load_config_file(path)
    return cluster_from_dict(data.get("cluster", data))


# ---------------------------------------------------------------------------
# Fabric kinds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FabricKind:
    name: str
    ratio: float = 1.0

    NAMES: ClassVar[tuple[str, ...]] = ("fattree", "oversub", "rail", "topoopt", "mixnet")

    def __post_init__(self):
        if self.name not in self.NAMES:
            raise ConfigError(f"unknown fabric kind {self.name!r}")
        if self.ratio < 1:
            raise ConfigError(f"oversubscription ratio must be >= 1, got {self.ratio}")
        if self.name != "oversub" and self.ratio != 1.0:
            raise ConfigError(f"{self.name} does not take an oversubscription ratio")

    @classmethod
    def parse(cls, text: str) -> "FabricKind":
        name, _, arg = text.strip().lower().partition(":")
        aliases = {"fat-tree": "fattree", "fat_tree": "fattree", "rail-optimized": "rail",
                   "rail_optimized": "rail", "oversubfattree": "oversub"}
        name = aliases.get(name, name)
        if name == "oversub":
            return cls("oversub", float(arg) if arg else 3.0)
        if arg:
            raise ConfigError(f"{name} does not take an argument")
        return cls(name)

    @property
    def has_eps(self) -> bool:
        return self.name != "topoopt"

    @property
    def has_ocs(self) -> bool:
        return self.name in ("topoopt", "mixnet")

    @property
    def reconfigurable(self) -> bool:
        return self.name == "mixnet"

    def eps_nics(self, cluster: ClusterSpec) -> tuple[int, ...]:
        if self.name == "mixnet":
            return cluster.split_eps_nics()
        if self.name == "topoopt":
            return ()
        return tuple(range(cluster.nics_per_server))

    def ocs_nics(self, cluster: ClusterSpec) -> tuple[int, ...]:
        if self.name == "mixnet":
            return cluster.split_ocs_nics()
        if self.name == "topoopt":
            return tuple(range(cluster.nics_per_server))
        return ()

    def __str__(self) -> str:
        return f"oversub:{self.ratio:g}" if self.name == "oversub" else self.name


# ---------------------------------------------------------------------------
# EPS topology
# ---------------------------------------------------------------------------

def smallest_radix(num_ports: int) -> int:
    """Smallest even switch radix k whose three-tier folded Clos (k^3/4 hosts) fits num_ports."""
    k = 2
    while k ** 3 // 4 < num_ports:
        k += 2
    return k


def clos_tiers(num_ports: int, radix: int) -> int:
    """Number of switch tiers a folded Clos of the given radix needs for num_ports hosts."""
    if num_ports <= radix:
        return 1
    if num_ports <= radix * radix // 2:
        return 2
    if num_ports <= radix ** 3 // 4:
        return 3
    raise ConfigError(f"{num_ports} host ports do not fit a 3-tier Clos of radix {radix}")


@dataclass
class EpsTopology:
    tiers: int
    radix: int
    ratio: float
    tor_of: dict[tuple[int, int], int]
    pod_of_tor: list[int]
    capacity: dict[Link, float]
    graph: nx.Graph
    rail: bool = False

    @property
    def num_tors(self) -> int:
        return len(self.pod_of_tor)

    def hosts_on_tor(self, tor: int) -> int:
        return sum(1 for t in self.tor_of.values() if t == tor)

    def inner_path(self, src: tuple[int, int], dst: tuple[int, int]) -> tuple[Link, ...]:
        t1, t2 = self.tor_of[src], self.tor_of[dst]
        if t1 == t2:
            return ()
        p1, p2 = self.pod_of_tor[t1], self.pod_of_tor[t2]
        if self.tiers <= 2 or p1 == p2:
            return (("tu", t1), ("td", t2))
        return (("tu", t1), ("pu", p1), ("pd", p2), ("td", t2))

    def switch_ports(self) -> int:
        """Switch ports actually cabled in this build."""
        hosts = len(self.tor_of)
        up = sum(math.ceil(self.hosts_on_tor(t) / self.ratio) for t in range(self.num_tors))
        if self.tiers == 1:
            return hosts
        if self.tiers == 2:
            return hosts + 2 * up
        return hosts + 4 * up


def build_eps_topology(spec: ClusterSpec, kind: FabricKind) -> EpsTopology:
    """Lay out the EPS NICs of every server on a folded Clos (or rail-optimized) switch fabric.

    Radix: spec.switch_radix if given, else the smallest even k with k^3/4 >= #EPS NICs.
    A ToR hosts floor(k*r/(r+1)) NICs (k/2 when non-blocking); its uplink bundle carries
    1/r of its host-facing capacity. Three-tier fabrics group k/2 ToRs per pod.
    """
    nics = kind.eps_nics(spec)
    ends = [(s, n) for s in range(spec.num_servers) for n in nics]
    bw = spec.nic_bandwidth
    graph = nx.Graph()
    for s, n in ends:
        graph.add_node(("nic", s, n), kind="nic")
    if not ends:
        return EpsTopology(0, 0, kind.ratio, {}, [], {}, graph)

    hosts = len(ends)
    radix = spec.switch_radix or smallest_radix(hosts)
    ratio = kind.ratio
    tor_of: dict[tuple[int, int], int] = {}
    pod_of_tor: list[int] = []

    if kind.name == "rail":
        per_tor = max(1, radix // 2)
        for rail, n in enumerate(nics):
            for chunk in range(0, spec.num_servers, per_tor):
                tor = len(pod_of_tor)
                pod_of_tor.append(rail)
                for s in range(chunk, min(chunk + per_tor, spec.num_servers)):
                    tor_of[(s, n)] = tor
        tiers = 1 if len(pod_of_tor) == 1 else 2
    else:
        tiers = clos_tiers(hosts, radix)
        if tiers == 1:
            per_tor = hosts
        else:
            per_tor = max(1, int(radix * ratio // (ratio + 1)))
        tors_per_pod = max(1, radix // 2)
        for idx, end in enumerate(ends):
            tor_of[end] = idx // per_tor
        num_tors = (hosts + per_tor - 1) // per_tor
        pod_of_tor = [t // tors_per_pod if tiers == 3 else 0 for t in range(num_tors)]

    capacity: dict[Link, float] = {}
    for s, n in ends:
        capacity[("tx", s, n)] = bw
        capacity[("rx", s, n)] = bw
        graph.add_edge(("nic", s, n), ("tor", tor_of[(s, n)]), capacity=bw)
    counts = np.bincount(np.fromiter(tor_of.values(), dtype=int), minlength=len(pod_of_tor))
    if tiers >= 2:
        for t, h in enumerate(counts):
            up = h * bw / ratio
            capacity[("tu", t)] = up
            capacity[("td", t)] = up
            upper = ("agg", pod_of_tor[t]) if tiers == 3 else ("spine", 0)
            graph.add_edge(("tor", t), upper, capacity=up)
        if tiers == 3:
            for p in sorted(set(pod_of_tor)):
                agg = sum(capacity[("tu", t)] for t in range(len(pod_of_tor)) if pod_of_tor[t] == p)
                capacity[("pu", p)] = agg
                capacity[("pd", p)] = agg
                graph.add_edge(("agg", p), ("core", 0), capacity=agg)
    return EpsTopology(tiers, radix, ratio, tor_of, pod_of_tor, capacity, graph, rail=kind.name == "rail")


# ---------------------------------------------------------------------------
# OCS circuits
# ---------------------------------------------------------------------------

class CrossConnect(NamedTuple):
    server_a: int
    nic_a: int
    server_b: int
    nic_b: int

    @classmethod
    def make(cls, a: int, na: int, b: int, nb: int) -> "CrossConnect":
        return cls(a, na, b, nb) if (a, na) <= (b, nb) else cls(b, nb, a, na)

    @property
    def pair(self) -> tuple[int, int]:
        return (self.server_a, self.server_b)

    def end_at(self, server: int) -> int:
        return self.nic_a if server == self.server_a else self.nic_b

    def peer_of(self, server: int) -> tuple[int, int]:
        if server == self.server_a:
            return self.server_b, self.nic_b
        return self.server_a, self.nic_a


@dataclass(frozen=True)
class NicMapping:
    links: tuple[CrossConnect, ...] = ()

    def __post_init__(self):
        norm = tuple(sorted(CrossConnect.make(*x) for x in self.links))
        object.__setattr__(self, "links", norm)
        used = [(x.server_a, x.nic_a) for x in norm] + [(x.server_b, x.nic_b) for x in norm]
        if len(used) != len(set(used)):
            raise FabricError("a NIC port appears in more than one cross-connect")
        if any(x.server_a == x.server_b for x in norm):
            raise FabricError("cross-connect loops back to its own server")

    def __len__(self) -> int:
        return len(self.links)

    def __iter__(self):
        return iter(self.links)

    def counts(self) -> dict[tuple[int, int], int]:
        out: dict[tuple[int, int], int] = {}
        for x in self.links:
            out[x.pair] = out.get(x.pair, 0) + 1
        return out

    def circuit_matrix(self, n: int) -> np.ndarray:
        c = np.zeros((n, n), dtype=int)
        for x in self.links:
            c[x.server_a, x.server_b] += 1
            c[x.server_b, x.server_a] += 1
        return c

    def between(self, a: int, b: int) -> list[CrossConnect]:
        lo, hi = min(a, b), max(a, b)
        return [x for x in self.links if x.pair == (lo, hi)]

    def degree(self, server: int) -> int:
        return sum((x.server_a == server) + (x.server_b == server) for x in self.links)

    def restricted_to(self, servers: Iterable[int]) -> "NicMapping":
        keep = set(servers)
        return NicMapping(tuple(x for x in self.links if x.server_a in keep and x.server_b in keep))

    def merged(self, other: "NicMapping") -> "NicMapping":
        return NicMapping(self.links + other.links)

    def to_json(self) -> list[list[int]]:
        return [list(x) for x in self.links]

    @classmethod
    def from_json(cls, data) -> "NicMapping":
        return cls(tuple(CrossConnect.make(*x) for x in data))


@dataclass
class CircuitMap:
    """Server-level circuit counts C and remaining optical degree per server."""

    C: np.ndarray
    avail_ocs: np.ndarray

    @classmethod
    def empty(cls, n: int, alpha: int | np.ndarray) -> "CircuitMap":
        avail = np.full(n, alpha, dtype=int) if np.isscalar(alpha) else np.asarray(alpha, dtype=int).copy()
        return cls(np.zeros((n, n), dtype=int), avail)

    def check(self, alpha: int | np.ndarray) -> None:
        c = self.C
        if np.any(np.diag(c) != 0):
            raise FabricError("circuit map has self-loops")
        if not np.array_equal(c, c.T):
            raise FabricError("circuit map is not symmetric")
        if np.any(c < 0) or np.any(c.sum(axis=1) > alpha):
            raise FabricError("circuit map exceeds the optical degree")


# ---------------------------------------------------------------------------
# Fabric state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FabricState:
    cluster: ClusterSpec
    kind: FabricKind
    eps: EpsTopology = field(repr=False, compare=False)
    mapping: NicMapping = NicMapping()
    pending: tuple = ()  # ((cross-connect, ready time), ...) circuits still being set up
    failed_nics: frozenset = frozenset()  # {(server, nic)}
    failed_gpus: frozenset = frozenset()
    failed_servers: frozenset = frozenset()
    eps_detached: frozenset = frozenset()  # servers whose EPS NICs are unusable by design
    ocs_detached: frozenset = frozenset()  # servers with no regional OCS attachment
    gpu_remap: tuple = ()  # ((failed_gpu, backup_gpu), ...)
    pinned: tuple = ()  # cross-connects reserved for a backup server, never reallocated

    def eps_nics(self, server: int) -> tuple[int, ...]:
        if server in self.eps_detached or server in self.failed_servers:
            return ()
        return tuple(n for n in self.kind.eps_nics(self.cluster) if (server, n) not in self.failed_nics)

    def ocs_nics(self, server: int) -> tuple[int, ...]:
        if server in self.ocs_detached or server in self.failed_servers:
            return ()
        return tuple(n for n in self.kind.ocs_nics(self.cluster) if (server, n) not in self.failed_nics)

    def remap(self, gpu: int) -> int:
        return dict(self.gpu_remap).get(gpu, gpu)

    @property
    def ready_at(self) -> float:
        return max((t for _, t in self.pending), default=0.0)

    def not_ready(self, now: float) -> list[CrossConnect]:
        return [x for x, t in self.pending if t > now + 1e-15]

    def active_mapping(self, now: float) -> NicMapping:
        dark = set(self.not_ready(now))
        if not dark:
            return self.mapping
        return NicMapping(tuple(x for x in self.mapping if x not in dark))

    def paused_links(self, now: float) -> set[Link]:
        out: set[Link] = set()
        for x in self.not_ready(now):
            for s, n in ((x.server_a, x.nic_a), (x.server_b, x.nic_b)):
                out.add(("tx", s, n))
                out.add(("rx", s, n))
        return out

    def capacities(self) -> dict[Link, float]:
        cap = _base_capacities(self.cluster, self.kind, self.eps)
        for s, n in self.failed_nics:
            cap[("tx", s, n)] = 0.0
            cap[("rx", s, n)] = 0.0
        for s in self.failed_servers:
            for n in range(self.cluster.nics_per_server):
                cap[("tx", s, n)] = 0.0
                cap[("rx", s, n)] = 0.0
        for g in self.failed_gpus:
            cap[("nvo", g)] = 0.0
            cap[("nvi", g)] = 0.0
        return cap

    def to_json(self) -> dict:
        return {
            "kind": str(self.kind),
            "cluster": self.cluster.to_dict(),
            "mapping": self.mapping.to_json(),
            "pending": sorted([list(x), t] for x, t in self.pending),
            "failed_nics": sorted(list(x) for x in self.failed_nics),
            "failed_gpus": sorted(self.failed_gpus),
            "failed_servers": sorted(self.failed_servers),
            "eps_detached": sorted(self.eps_detached),
            "ocs_detached": sorted(self.ocs_detached),
            "gpu_remap": [list(x) for x in self.gpu_remap],
            "eps": {"tiers": self.eps.tiers, "radix": self.eps.radix, "tors": self.eps.num_tors},
        }


def _base_capacities(cluster: ClusterSpec, kind: FabricKind, eps: EpsTopology) -> dict[Link, float]:
    cache = eps.__dict__.setdefault("_cap_cache", {})
    cached = cache.get((cluster, kind))
    if cached is None:
        cap = dict(eps.capacity)
        bw = cluster.nic_bandwidth
        for s in range(cluster.num_servers):
            for n in range(cluster.nics_per_server):
                cap.setdefault(("tx", s, n), bw)
                cap.setdefault(("rx", s, n), bw)
        nv = cluster.nvswitch_bandwidth * 8.0
        for g in range(cluster.num_gpus):
            cap[("nvo", g)] = nv
            cap[("nvi", g)] = nv
        cache[(cluster, kind)] = cached = cap
    return dict(cached)


def initial_state(cluster: ClusterSpec, kind: FabricKind) -> FabricState:
    return FabricState(cluster, kind, build_eps_topology(cluster, kind))


def validate_mapping(state: FabricState, mapping: NicMapping) -> None:
    cluster = state.cluster
    regions = {s: r for r, members in enumerate(cluster.region_list()) for s in members}
    for x in mapping:
        for s, n in ((x.server_a, x.nic_a), (x.server_b, x.nic_b)):
            if not 0 <= s < cluster.num_servers:
                raise FabricError(f"cross-connect {tuple(x)} names unknown server {s}")
            if (s, n) in state.failed_nics or s in state.failed_servers:
                raise FabricError(f"cross-connect {tuple(x)} uses failed NIC ({s}, {n})")
            if n not in state.kind.ocs_nics(cluster) or s in state.ocs_detached:
                raise FabricError(f"cross-connect {tuple(x)} uses non-optical NIC ({s}, {n})")
        if state.kind.reconfigurable and regions.get(x.server_a) != regions.get(x.server_b):
            raise FabricError(f"cross-connect {tuple(x)} spans two OCS regions")
    for s in range(cluster.num_servers):
        if mapping.degree(s) > len(state.kind.ocs_nics(cluster)):
            raise FabricError(f"server {s} exceeds its optical degree")


def apply_nic_mapping(state: FabricState, mapping: NicMapping, now: float = 0.0,
                      delay: float | None = None) -> FabricState:
    """Install a new set of OCS cross-connects.

    Circuits that survive unchanged keep carrying traffic; newly created ones come
    up after the reconfiguration delay, and circuits already being set up keep their
    original ready time. Identical mappings cost nothing.
    """
    validate_mapping(state, mapping)
    new = set(mapping.links)
    if new == set(state.mapping.links):
        return state
    if delay is None:
        delay = state.cluster.ocs_reconfig_delay
    still = {x: t for x, t in state.pending if t > now + 1e-15 and x in new}
    added = sorted(new - set(state.mapping.links))
    if delay > 0:
        for x in added:
            still[x] = now + delay
    pending = tuple(sorted(still.items()))
    return replace(state, mapping=mapping, pending=pending)


def mapping_diff(old: NicMapping, new: NicMapping) -> tuple[set, set]:
    a, b = set(old.links), set(new.links)
    return b - a, a - b


def eps_reachable(state: FabricState) -> bool:
    """True when every healthy EPS NIC can reach every other one through the switch graph."""
    g = state.eps.graph
    ends = [("nic", s, n) for s in range(state.cluster.num_servers) for n in state.eps_nics(s)]
    if not ends:
        return True
    seen = nx.node_connected_component(g, ends[0])
    return all(e in seen for e in ends)


# ---------------------------------------------------------------------------
# Path helpers
# ---------------------------------------------------------------------------

def nv_path(src_gpu: int, dst_gpu: int) -> tuple[Link, ...]:
    if src_gpu == dst_gpu:
        return ()
    return (("nvo", src_gpu), ("nvi", dst_gpu))


def eps_path(state: FabricState, src: tuple[int, int], dst: tuple[int, int]) -> tuple[Link, ...]:
    return (("tx",) + tuple(src),) + state.eps.inner_path(src, dst) + (("rx",) + tuple(dst),)


def circuit_path(x: CrossConnect, src_server: int) -> tuple[Link, ...]:
    dst_server, dst_nic = x.peer_of(src_server)
    return (("tx", src_server, x.end_at(src_server)), ("rx", dst_server, dst_nic))
