import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ocsmoe.fabric import (CircuitMap, ClusterSpec, ConfigError, CrossConnect, FabricError, FabricKind, NicMapping,
                           apply_nic_mapping, build_eps_topology, clos_tiers, cluster_from_dict, eps_path,
                           eps_reachable, initial_state, load_cluster_spec, mapping_diff, smallest_radix)


def test_cluster_defaults():
    c = ClusterSpec(4)
    assert c.alpha == 6
    assert c.split_eps_nics() == (0, 4)
    assert c.split_ocs_nics() == (1, 2, 3, 5, 6, 7)
    assert [c.numa_of_nic(n) for n in range(8)] == [0, 0, 0, 0, 1, 1, 1, 1]
    assert c.gpu_of_nic(2, 3) == 19
    assert c.server_of_gpu(19) == 2 and c.nic_of_gpu(19) == 3
    assert c.region_list() == [(0, 1, 2, 3)]


@pytest.mark.parametrize("kwargs", [
    dict(eps_nics_per_server=3),  # 3 + 6 != 8
    dict(nic_bandwidth=0),
    dict(link_propagation_delay=-1e-6),
    dict(ocs_reconfig_delay=0),
    dict(nvswitch_bandwidth=0),
    dict(region_size=200, ocs_port_count=576),  # 200 * 6 ports > 576
])
def test_cluster_rejects_invalid(kwargs):
    with pytest.raises(ConfigError):
        ClusterSpec(200 if "region_size" in kwargs else 4, **kwargs)


def test_cluster_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="bogus"):
        cluster_from_dict({"num_servers": 2, "bogus": 1})
    with pytest.raises(ConfigError):
        cluster_from_dict({"nic_bandwidth": 1e9})


@pytest.mark.parametrize("suffix", [".json", ".yaml"])
def test_load_cluster_spec_roundtrip(tmp_path, suffix):
    spec = ClusterSpec(8, nic_bandwidth=400e9, region_size=4)
    path = tmp_path / f"cluster{suffix}"
    if suffix == ".json":
        path.write_text(json.dumps({"cluster": spec.to_dict()}))
    else:
        import yaml
        path.write_text(yaml.safe_dump({"cluster": spec.to_dict()}))
    assert load_cluster_spec(path) == spec


def test_fabric_kind_parse():
    assert FabricKind.parse("fattree") == FabricKind("fattree")
    assert FabricKind.parse("oversub:3") == FabricKind("oversub", 3.0)
    assert str(FabricKind.parse("OVERSUB:2.5")) == "oversub:2.5"
    assert FabricKind.parse("rail-optimized").name == "rail"
    with pytest.raises(ConfigError):
        FabricKind("oversub", 0.5)
    with pytest.raises(ConfigError):
        FabricKind.parse("torus")
    with pytest.raises(ConfigError):
        FabricKind.parse("mixnet:2")


def test_smallest_radix_and_tiers():
    assert smallest_radix(128) == 8  # 8^3/4 = 128
    assert smallest_radix(129) == 10
    assert clos_tiers(4, 8) == 1
    assert clos_tiers(32, 8) == 2
    assert clos_tiers(33, 8) == 3


def test_two_servers_fit_one_switch():
    spec = ClusterSpec(2, nics_per_server=2, eps_nics_per_server=2, ocs_nics_per_server=0)
    topo = build_eps_topology(spec, FabricKind("fattree"))
    assert topo.tiers == 1
    assert topo.num_tors == 1
    assert topo.switch_ports() == 4
    st_ = initial_state(spec, FabricKind("fattree"))
    # one switch: NIC to NIC with no switch bundle on the way
    assert eps_path(st_, (0, 0), (1, 1)) == (("tx", 0, 0), ("rx", 1, 1))


def test_oversubscribed_uplinks_are_a_third_of_host_capacity():
    spec = ClusterSpec(16)
    topo = build_eps_topology(spec, FabricKind("oversub", 3.0))
    # 128 EPS NICs -> radix 8 -> three tiers; a ToR takes floor(8 * 3 / 4) = 6 hosts
    assert topo.radix == 8 and topo.tiers == 3
    assert topo.num_tors == 22
    bw = spec.nic_bandwidth
    for t in range(topo.num_tors):
        hosts = topo.hosts_on_tor(t)
        assert topo.capacity[("tu", t)] == pytest.approx(hosts * bw / 3)
        assert topo.capacity[("td", t)] == pytest.approx(hosts * bw / 3)
    total_up = sum(topo.capacity[("tu", t)] for t in range(topo.num_tors))
    assert total_up == pytest.approx(128 * bw / 3)


def test_non_blocking_fattree_uplinks_match_hosts():
    spec = ClusterSpec(16)
    topo = build_eps_topology(spec, FabricKind("fattree"))
    for t in range(topo.num_tors):
        assert topo.capacity[("tu", t)] == pytest.approx(topo.hosts_on_tor(t) * spec.nic_bandwidth)


def test_rail_optimized_groups_same_rank_nics():
    spec = ClusterSpec(128, region_size=64)
    topo = build_eps_topology(spec, FabricKind("rail"))
    rails = {}
    for (s, n), tor in topo.tor_of.items():
        rails.setdefault(topo.pod_of_tor[tor], set()).add(n)
    assert len(rails) == 8
    assert all(len(ranks) == 1 for ranks in rails.values())
    assert sorted(r.pop() for r in rails.values()) == list(range(8))


@pytest.mark.parametrize("kind", ["fattree", "oversub:3", "rail", "mixnet"])
@pytest.mark.parametrize("servers", [1, 3, 16, 40])
def test_eps_connectivity_is_total(kind, servers):
    st_ = initial_state(ClusterSpec(servers), FabricKind.parse(kind))
    assert eps_reachable(st_)


def test_topoopt_has_no_eps():
    st_ = initial_state(ClusterSpec(4), FabricKind("topoopt"))
    assert st_.eps.num_tors == 0
    assert st_.eps_nics(0) == ()


def test_empty_mapping_leaves_only_eps():
    st0 = initial_state(ClusterSpec(4), FabricKind("mixnet"))
    st1 = apply_nic_mapping(st0, NicMapping())
    assert len(st1.active_mapping(1.0)) == 0
    assert eps_reachable(st1)


def test_single_cross_connect_comes_up_after_delay():
    cl = ClusterSpec(4)
    st0 = initial_state(cl, FabricKind("mixnet"))
    m = NicMapping((CrossConnect.make(0, 2, 2, 2),))
    st1 = apply_nic_mapping(st0, m, now=1.0)
    assert len(st1.active_mapping(1.0)) == 0
    assert st1.paused_links(1.0) == {("tx", 0, 2), ("rx", 0, 2), ("tx", 2, 2), ("rx", 2, 2)}
    assert list(st1.active_mapping(1.0 + cl.ocs_reconfig_delay)) == [CrossConnect(0, 2, 2, 2)]
    assert st1.eps is st0.eps  # packet fabric untouched


def test_reapplying_identical_mapping_costs_nothing():
    st0 = initial_state(ClusterSpec(4), FabricKind("mixnet"))
    m = NicMapping((CrossConnect.make(0, 2, 2, 2), CrossConnect.make(1, 1, 3, 5)))
    st1 = apply_nic_mapping(st0, m, now=0.0)
    st2 = apply_nic_mapping(st1, m, now=1.0)
    assert st2 is st1
    assert mapping_diff(st1.mapping, m) == (set(), set())


def test_mapping_onto_failed_nic_is_rejected():
    from dataclasses import replace
    st0 = initial_state(ClusterSpec(4), FabricKind("mixnet"))
    st0 = replace(st0, failed_nics=frozenset({(0, 2)}))
    with pytest.raises(FabricError, match="failed"):
        apply_nic_mapping(st0, NicMapping((CrossConnect.make(0, 2, 1, 2),)))


def test_mapping_rejects_eps_nic_and_cross_region():
    st0 = initial_state(ClusterSpec(4, region_size=2), FabricKind("mixnet"))
    with pytest.raises(FabricError, match="non-optical"):
        apply_nic_mapping(st0, NicMapping((CrossConnect.make(0, 0, 1, 1),)))
    with pytest.raises(FabricError, match="regions"):
        apply_nic_mapping(st0, NicMapping((CrossConnect.make(0, 1, 2, 1),)))


def test_nic_mapping_port_uniqueness():
    with pytest.raises(FabricError):
        NicMapping((CrossConnect.make(0, 1, 1, 1), CrossConnect.make(0, 1, 2, 1)))
    with pytest.raises(FabricError):
        NicMapping((CrossConnect.make(0, 1, 0, 2),))


def test_circuit_map_check():
    cm = CircuitMap.empty(3, 2)
    cm.C[0, 1] = cm.C[1, 0] = 2
    cm.check(2)
    cm.C[0, 2] = cm.C[2, 0] = 1
    with pytest.raises(FabricError):
        cm.check(2)


def test_state_json_dump_is_stable():
    st0 = initial_state(ClusterSpec(2), FabricKind("mixnet"))
    st1 = apply_nic_mapping(st0, NicMapping((CrossConnect.make(0, 1, 1, 1),)), now=0.0)
    a = json.dumps(st1.to_json(), sort_keys=True)
    b = json.dumps(st1.to_json(), sort_keys=True)
    assert a == b
    assert st1.to_json()["mapping"] == [[0, 1, 1, 1]]


@st.composite
def random_mappings(draw):
    n = draw(st.integers(2, 6))
    cl = ClusterSpec(n)
    free = {s: list(cl.split_ocs_nics()) for s in range(n)}
    links = []
    for _ in range(draw(st.integers(0, 3 * n))):
        a, b = draw(st.sampled_from([(i, j) for i in range(n) for j in range(i + 1, n)]))
        if free[a] and free[b]:
            links.append(CrossConnect.make(a, free[a].pop(draw(st.integers(0, len(free[a]) - 1))),
                                           b, free[b].pop(draw(st.integers(0, len(free[b]) - 1)))))
    return cl, NicMapping(tuple(links))


@given(random_mappings())
def test_apply_keeps_degree_and_is_idempotent(case):
    cl, m = case
    st0 = initial_state(cl, FabricKind("mixnet"))
    st1 = apply_nic_mapping(st0, m, now=0.0)
    for s in range(cl.num_servers):
        assert st1.mapping.degree(s) <= cl.alpha
    C = st1.mapping.circuit_matrix(cl.num_servers)
    assert np.array_equal(C, C.T) and not np.any(np.diag(C))
    assert apply_nic_mapping(st1, m, now=5.0) is st1
