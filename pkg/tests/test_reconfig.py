import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from alg1_oracle import reconfigure as oracle
from ocsmoe.fabric import ClusterSpec, CrossConnect, FabricError, NicMapping
from ocsmoe.reconfig import (allocate_circuits, calculate_server_demand, find_bottleneck_link, get_nic_mapping,
                             initial_finish_times, numa_spread_ok, permute_links, reconfigure_ocs)
from ocsmoe.workload import ExpertPlacement, ExpertTrafficMatrix


def _upper(n, values):
    D = np.zeros((n, n))
    D[np.triu_indices(n, 1)] = values
    return D


# -- demand aggregation -------------------------------------------------------

def test_intra_server_traffic_gives_zero_demand():
    cl = ClusterSpec(2)
    pl = ExpertPlacement((0, 4, 8, 12), 4)
    M = np.zeros((4, 4))
    M[0, 1] = M[1, 0] = M[2, 3] = 7
    assert not calculate_server_demand(M, pl, cl).any()


def test_tx_and_rx_are_merged():
    cl = ClusterSpec(2, gpus_per_server=2, nics_per_server=2, eps_nics_per_server=1, ocs_nics_per_server=1)
    pl = ExpertPlacement((0, 1, 2, 3))
    M = np.zeros((4, 4))
    M[0, 2], M[2, 0] = 5, 3
    D = calculate_server_demand(ExpertTrafficMatrix(0, "FP-1", M), pl, cl)
    assert D.tolist() == [[0, 8], [0, 0]]


def test_uniform_matrix_scales_with_experts_per_server():
    cl = ClusterSpec(3)
    pl = ExpertPlacement(tuple(range(0, 24, 4)), 4)  # 2 experts per server
    D = calculate_server_demand(np.full((6, 6), 10.0), pl, cl)
    expected = 2 * 10.0 * 2 ** 2
    np.testing.assert_allclose(D, _upper(3, [expected] * 3))


def test_demand_shape_mismatch():
    with pytest.raises(FabricError):
        calculate_server_demand(np.zeros((3, 3)), ExpertPlacement((0, 8)), ClusterSpec(2))


# -- bottleneck ---------------------------------------------------------------

def test_bottleneck_examples():
    assert find_bottleneck_link(np.zeros((3, 3))) is None
    T = np.zeros((3, 3))
    T[0, 1] = T[1, 0] = math.inf
    T[0, 2] = T[2, 0] = 5
    assert find_bottleneck_link(T) == (0, 1)
    T[0, 1] = T[1, 0] = 5
    assert find_bottleneck_link(T) == (0, 1)
    T[1, 2] = T[2, 1] = 6
    assert find_bottleneck_link(T) == (1, 2)


def test_initial_finish_times_are_symmetric():
    D = _upper(3, [4, 0, 2])
    T = initial_finish_times(D)
    assert T[0, 1] == T[1, 0] == math.inf
    assert T[1, 2] == T[2, 1] == math.inf
    assert T[0, 2] == T[2, 0] == 0


# -- allocation examples ------------------------------------------------------

def test_two_servers_one_circuit():
    a = allocate_circuits(_upper(2, [10]), 1)
    assert a.C.tolist() == [[0, 1], [1, 0]]
    assert a.T[0, 1] == 10


def test_three_servers_uniform_demand():
    a = allocate_circuits(_upper(3, [10, 10, 10]), 2)
    assert a.C.tolist() == [[0, 1, 1], [1, 0, 1], [1, 1, 0]]
    assert a.avail_ocs.tolist() == [0, 0, 0]
    iu = np.triu_indices(3, 1)
    assert np.all(a.T[iu] == 10)


def test_single_pair_gets_all_circuits():
    a = allocate_circuits(_upper(2, [90]), 3)
    assert a.C[0, 1] == 3
    assert a.T[0, 1] == 30
    assert a.steps == [(0, 1)] * 3


def test_literal_break_on_saturated_bottleneck():
    # pair (0,1) saturates server 0; the heavier (0,1) stays the bottleneck so the loop stops
    D = _upper(3, [100, 1, 0])  # D01=100, D02=1, D12=0
    a = allocate_circuits(D, 2)
    assert a.C[0, 1] == 1 and a.C[0, 2] == 1
    assert a.steps == [(0, 1), (0, 2)]
    # server 1 and 2 still have a free degree but share no demand, so skipping adds nothing
    b = allocate_circuits(D, 2, skip_saturated=True)
    assert np.array_equal(b.C, a.C)


def test_skip_saturated_keeps_allocating():
    D = _upper(4, [100, 0, 0, 0, 0, 50])  # pairs (0,1) and (2,3)
    lit = allocate_circuits(D, np.array([1, 3, 3, 3]))
    ext = allocate_circuits(D, np.array([1, 3, 3, 3]), skip_saturated=True)
    assert lit.C[2, 3] == 1  # stops at (0,1) once server 0 is full
    assert ext.C[2, 3] == 3
    assert ext.C[0, 1] == 1


def test_empty_demand_gives_empty_mapping():
    out = reconfigure_ocs(None, 6, V=range(4), cluster=ClusterSpec(4), demand=np.zeros((4, 4)))
    assert len(out.mapping) == 0


# -- NIC mapping ----------------------------------------------------------------

def test_get_nic_mapping_examples():
    cl = ClusterSpec(4)
    C = np.zeros((4, 4), dtype=int)
    C[0, 1] = C[1, 0] = 1
    assert get_nic_mapping(C, cl).links == (CrossConnect(0, 1, 1, 1),)
    C[0, 1] = C[1, 0] = 2
    m = get_nic_mapping(C, cl)
    assert m.links == (CrossConnect(0, 1, 1, 1), CrossConnect(0, 2, 1, 2))
    full = 2 * (np.ones((4, 4), dtype=int) - np.eye(4, dtype=int))  # degree 6 everywhere
    m = get_nic_mapping(full, cl)
    for s in range(4):
        assert sorted(x.end_at(s) for x in m if s in x.pair) == list(cl.split_ocs_nics())
    C[0, 1] = C[1, 0] = 7
    with pytest.raises(FabricError):
        get_nic_mapping(C, cl)


def test_permute_spreads_double_circuit_over_numa():
    cl = ClusterSpec(2)
    m = NicMapping((CrossConnect(0, 1, 1, 1), CrossConnect(0, 2, 1, 2)))
    assert not numa_spread_ok(m, cl)
    p = permute_links(m, cl)
    assert p.counts() == m.counts()
    for s in (0, 1):
        assert sorted(cl.numa_of_nic(x.end_at(s)) for x in p) == [0, 1]
    assert numa_spread_ok(p, cl)


def test_permute_leaves_single_circuits_alone():
    cl = ClusterSpec(7)
    m = NicMapping(tuple(CrossConnect.make(0, n, peer, 1) for peer, n in zip(range(1, 7), cl.split_ocs_nics())))
    assert permute_links(m, cl) == m


def test_reconfigure_with_placement():
    cl = ClusterSpec(3)
    pl = ExpertPlacement((0, 8, 16), 8)
    M = np.array([[0, 30, 0], [10, 0, 5], [0, 0, 0]], dtype=float)
    out = reconfigure_ocs(ExpertTrafficMatrix(0, "FP-1", M), 2, N=3, placement=pl, cluster=cl)
    assert out.servers == (0, 1, 2)
    assert out.demand[0, 1] == 40 and out.demand[1, 2] == 5
    # (0,1) then (1,2) take their first circuit; server 1 is then full and the loop stops
    assert out.mapping.counts() == {(0, 1): 1, (1, 2): 1}
    assert numa_spread_ok(out.mapping, cl)
    with pytest.raises(FabricError):
        reconfigure_ocs(None, 0, V=range(2), cluster=cl, demand=np.zeros((2, 2)))
    with pytest.raises(FabricError):
        reconfigure_ocs(None, 1, N=3, V=range(2), cluster=cl, demand=np.zeros((2, 2)))


# -- oracle and invariants -------------------------------------------------------

@st.composite
def instances(draw, max_n=8, max_alpha=4):
    n = draw(st.integers(2, max_n))
    alpha = draw(st.integers(1, max_alpha))
    vals = draw(st.lists(st.one_of(st.just(0), st.integers(1, 1000)), min_size=n * (n - 1) // 2,
                         max_size=n * (n - 1) // 2))
    return _upper(n, vals), alpha


def _same(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return a.shape == b.shape and np.array_equal(a, b)


@given(instances())
def test_trace_matches_oracle(case):
    D, alpha = case
    out = allocate_circuits(D, alpha, record=True)
    C, T, trace = oracle(D.tolist(), alpha)
    assert _same(out.C, C) and _same(out.T, T)
    assert len(out.history) == len(trace)
    for (c1, t1), (c2, t2) in zip(out.history, trace):
        assert _same(c1, c2) and _same(t1, t2)


@given(instances(max_n=8, max_alpha=6))
def test_allocation_invariants(case):
    D, alpha = case
    n = D.shape[0]
    cl = ClusterSpec(n)
    out = reconfigure_ocs(None, alpha, V=range(n), cluster=cl, demand=D, record=True)
    C = out.allocation.C
    assert np.array_equal(C, C.T) and not np.diag(C).any()
    assert C.sum(axis=1).max() <= alpha
    assert np.array_equal(out.mapping.circuit_matrix(n), C)
    ports = [(x.server_a, x.nic_a) for x in out.mapping] + [(x.server_b, x.nic_b) for x in out.mapping]
    assert len(ports) == len(set(ports))
    assert all(nic in cl.split_ocs_nics() for _, nic in ports)
    assert numa_spread_ok(out.mapping, cl)
    # T finite exactly where there is no demand or a circuit
    T = out.allocation.T
    iu = np.triu_indices(n, 1)
    assert np.array_equal(np.isfinite(T[iu]), (D[iu] == 0) | (C[iu] > 0))
    # every allocation lowers the finish time of its pair; no second circuit before every pair has one
    prevC, prevT = np.zeros_like(C), initial_finish_times(D)
    for (i, j), (c, t) in zip(out.allocation.steps, out.allocation.history):
        assert t[i, j] < prevT[i, j]
        if prevC[i, j] >= 1:
            assert np.all(prevC[iu][D[iu] > 0] >= 1)
        prevC, prevT = c, t
