"""Failure injection: NIC, single-GPU and full-node failures."""

from __future__ import annotations

from dataclasses import replace

from ..fabric import CrossConnect, FabricError, FabricState, NicMapping, apply_nic_mapping
from .policy import FailureEvent


def _drop_circuits(state: FabricState, bad) -> FabricState:
    keep = tuple(x for x in state.mapping if not bad(x))
    pending = tuple((x, t) for x, t in state.pending if not bad(x))
    pinned = tuple(x for x in state.pinned if not bad(x))
    return replace(state, mapping=NicMapping(keep), pending=pending, pinned=pinned)


def _free_ocs_nic(state: FabricState, server: int) -> tuple[FabricState, int]:
    """Lowest OCS NIC of server not holding a circuit, evicting its lowest circuit if all are busy."""
    used = {x.end_at(server) for x in state.mapping if server in x.pair}
    for n in state.ocs_nics(server):
        if n not in used:
            return state, n
    pinned = set(state.pinned)
    victims = [x for x in state.mapping if server in x.pair and x not in pinned]
    if not victims:
        raise FabricError(f"server {server} has no OCS NIC to spare")
    victim = victims[0]
    state = _drop_circuits(state, lambda x: x == victim)
    return state, victim.end_at(server)


def inject_failure(state: FabricState, event: FailureEvent, now: float | None = None) -> tuple[FabricState, dict]:
    """Apply one failure; returns the new state and a description of the recovery actions."""
    c = state.cluster
    now = event.time if now is None else now
    info: dict = {"time": now, "kind": event.kind, "target": event.target}
    if event.kind == "nic":
        s, n = event.target
        if not 0 <= s < c.num_servers or not 0 <= n < c.nics_per_server:
            raise FabricError(f"NIC {event.target} does not exist")
        if (s, n) in state.failed_nics or s in state.failed_servers:
            raise FabricError(f"NIC {event.target} already failed")
        state = replace(state, failed_nics=state.failed_nics | {(s, n)})
        state = _drop_circuits(state, lambda x: (s, n) in ((x.server_a, x.nic_a), (x.server_b, x.nic_b)))
        info["eps_left"] = len(state.eps_nics(s))
        info["relay"] = state.kind.has_eps and not state.eps_nics(s)
        return state, info

    if event.backup is None:
        raise FabricError(f"{event.kind} failure of {event.target} has no designated backup")

    if event.kind == "gpu":
        g, b = int(event.target), int(event.backup)
        if not 0 <= g < c.num_gpus or not 0 <= b < c.num_gpus:
            raise FabricError("failed or backup GPU does not exist")
        if g in state.failed_gpus:
            raise FabricError(f"GPU {g} already failed")
        if b in state.failed_gpus or b in dict(state.gpu_remap).values():
            raise FabricError(f"backup GPU {b} is not available")
        state = replace(state, failed_gpus=state.failed_gpus | {g}, gpu_remap=state.gpu_remap + ((g, b),))
        home, bs = c.server_of_gpu(g), c.server_of_gpu(b)
        info["backup"] = b
        if event.backup_via == "ocs" and home != bs:
            if c.region_of(home) != c.region_of(bs):
                raise FabricError("an optically attached backup must sit in the same OCS region")
            state = replace(state, eps_detached=state.eps_detached | {bs})
            state, nh = _free_ocs_nic(state, home)
            state, nb = _free_ocs_nic(state, bs)
            pin = CrossConnect.make(home, nh, bs, nb)
            mapping = NicMapping(state.mapping.links + (pin,))
            state = apply_nic_mapping(state, mapping, now)
            state = replace(state, pinned=state.pinned + (pin,))
            info["pinned"] = list(pin)
        return state, info

    s, b = int(event.target), int(event.backup)
    if not 0 <= s < c.num_servers or not 0 <= b < c.num_servers:
        raise FabricError("failed or backup server does not exist")
    if s in state.failed_servers or b in state.failed_servers:
        raise FabricError("failed or backup server is not healthy")
    g = c.gpus_per_server
    remap = tuple((s * g + k, b * g + k) for k in range(g))
    state = replace(state, failed_servers=state.failed_servers | {s}, ocs_detached=state.ocs_detached | {b},
                    gpu_remap=state.gpu_remap + remap)
    state = _drop_circuits(state, lambda x: s in x.pair or b in x.pair)
    info["backup"] = b
    return state, info
