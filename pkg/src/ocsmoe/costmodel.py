"""Networking cost of the fabric families and the performance-per-dollar metric.

Counting rules:

* every server carries nics_per_server NICs whatever the fabric;
* an EPS host link costs two transceivers (NIC side and switch side) or one
  direct-attach cable when a cable price is configured;
* the electrical fabric is a folded Clos of the smallest radix accommodating its
  host ports; only used ports are paid for: H host ports plus, per tier above the
  ToR, ceil(H / ratio) ports on each side of the inter-switch links;
* every inter-switch link costs two transceivers;
* an OCS-attached NIC costs one transceiver and one OCS port, a patch-panel NIC one
  transceiver and one patch-panel port;
* fibers cost a constant per optical link (0 by default).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .fabric import ClusterSpec, ConfigError, FabricKind, clos_tiers, load_config_file, smallest_radix


@dataclass(frozen=True)
class PriceRow:
    transceiver: float
    nic: float
    switch_port: float
    ocs_port: float
    patch_panel_port: float
    fiber: float = 0.0
    cable: float | None = None  # DAC/AOC price per host-to-ToR link, replacing 2 transceivers + fiber

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and v < 0:
                raise ConfigError(f"price {f.name} must be non-negative")


DEFAULT_PRICES = {
    100: PriceRow(99, 659, 187, 520, 100),
    200: PriceRow(239, 1079, 374, 520, 100),
    400: PriceRow(659, 1499, 1090, 520, 100),
    800: PriceRow(1399, 2248, 1400, 520, 100),  # NIC: 1.5x the 400G NIC
}


@dataclass(frozen=True)
class ComponentPriceTable:
    rows: tuple[tuple[int, PriceRow], ...] = tuple(sorted(DEFAULT_PRICES.items()))

    @classmethod
    def default(cls) -> "ComponentPriceTable":
        return cls()

    def row(self, gbps: float) -> PriceRow:
        key = int(round(gbps))
        for speed, row in self.rows:
            if speed == key:
                return row
        raise ConfigError(f"price table has no row for {gbps:g} Gb/s")

    def speeds(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.rows)

    def with_row(self, gbps: int, row: PriceRow) -> "ComponentPriceTable":
        d = dict(self.rows)
        d[int(gbps)] = row
        return ComponentPriceTable(tuple(sorted(d.items())))

    def to_dict(self) -> dict:
        return {str(s): asdict(r) for s, r in self.rows}

    @classmethod
    def from_dict(cls, data: dict) -> "ComponentPriceTable":
        rows = []
        known = {f.name for f in fields(PriceRow)}
        for speed, row in data.items():
            unknown = set(row) - known
            if unknown:
                raise ConfigError(f"price row {speed}: unknown field(s) {', '.join(sorted(unknown))}")
            try:
                rows.append((int(speed), PriceRow(**row)))
            except TypeError as exc:
                raise ConfigError(f"price row {speed}: {exc}") from exc
        return cls(tuple(sorted(rows)))

    @classmethod
    def load(cls, path: str | Path) -> "ComponentPriceTable":
        data = load_config_file(path)
        return cls.from_dict(data.get("prices", data))


@dataclass(frozen=True)
class CostBreakdown:
    fabric: str
    servers: int
    gbps: float
    nics: int
    transceivers: int
    switch_ports: int
    ocs_ports: int
    patch_panel_ports: int
    fibers: int
    cables: int
    nic_cost: float
    transceiver_cost: float
    switch_port_cost: float
    ocs_port_cost: float
    patch_panel_cost: float
    fiber_cost: float
    cable_cost: float

    @property
    def total(self) -> float:
        return (self.nic_cost + self.transceiver_cost + self.switch_port_cost + self.ocs_port_cost
                + self.patch_panel_cost + self.fiber_cost + self.cable_cost)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def breakdowns_csv(items: list[CostBreakdown]) -> str:
    buf = io.StringIO()
    cols = list(items[0].to_dict()) if items else []
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for b in items:
        w.writerow(b.to_dict())
    return buf.getvalue()


@dataclass
class _Counts:
    transceivers: int = 0
    switch_ports: int = 0
    ocs_ports: int = 0
    patch_panel_ports: int = 0
    fibers: int = 0
    cables: int = 0


def eps_tiers(hosts: int, kind: FabricKind, radix: int | None = None) -> int:
    if hosts == 0:
        return 0
    k = radix or smallest_radix(hosts)
    tiers = clos_tiers(hosts, k)
    if kind.name == "rail" and hosts > 1:
        tiers = max(tiers, 2)  # rails only meet at a spine
    return tiers


def _eps(counts: _Counts, hosts: int, kind: FabricKind, radix: int | None, use_cable: bool) -> None:
    if hosts == 0:
        return
    tiers = eps_tiers(hosts, kind, radix)
    up = math.ceil(hosts / kind.ratio) if tiers > 1 else 0
    counts.switch_ports += hosts + 2 * up * (tiers - 1)
    if use_cable:
        counts.cables += hosts
    else:
        counts.transceivers += 2 * hosts
        counts.fibers += hosts
    counts.transceivers += 2 * up * (tiers - 1)
    counts.fibers += up * (tiers - 1)


def cost_fabric(kind: FabricKind | str, cluster: ClusterSpec, prices: ComponentPriceTable | None = None) -> CostBreakdown:
    """Networking bill of materials for every server of the cluster."""
    if isinstance(kind, str):
        kind = FabricKind.parse(kind)
    prices = prices or ComponentPriceTable.default()
    gbps = cluster.nic_bandwidth / 1e9
    row = prices.row(gbps)
    n = cluster.num_servers
    nics = n * cluster.nics_per_server
    c = _Counts()
    use_cable = row.cable is not None
    eps_hosts = n * len(kind.eps_nics(cluster))
    _eps(c, eps_hosts, kind, cluster.switch_radix, use_cable)
    optical = n * len(kind.ocs_nics(cluster))
    c.transceivers += optical
    c.fibers += optical
    if kind.name == "mixnet":
        c.ocs_ports += optical
    elif kind.name == "topoopt":
        c.patch_panel_ports += optical
    return CostBreakdown(
        fabric=str(kind), servers=n, gbps=gbps, nics=nics, transceivers=c.transceivers,
        switch_ports=c.switch_ports, ocs_ports=c.ocs_ports, patch_panel_ports=c.patch_panel_ports,
        fibers=c.fibers, cables=c.cables,
        nic_cost=nics * row.nic, transceiver_cost=c.transceivers * row.transceiver,
        switch_port_cost=c.switch_ports * row.switch_port, ocs_port_cost=c.ocs_ports * row.ocs_port,
        patch_panel_cost=c.patch_panel_ports * row.patch_panel_port, fiber_cost=c.fibers * row.fiber,
        cable_cost=c.cables * (row.cable or 0.0),
    )


def perf_per_dollar(iteration_time: float, cost: float) -> float:
    if not iteration_time > 0 or not cost > 0:
        raise ConfigError("iteration time and cost must both be positive")
    return 1.0 / (iteration_time * cost)


def cost_ratio(cluster: ClusterSpec, baseline: str = "fattree", target: str = "mixnet",
               prices: ComponentPriceTable | None = None) -> float:
    return cost_fabric(baseline, cluster, prices).total / cost_fabric(target, cluster, prices).total
