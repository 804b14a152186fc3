"""End-to-end acceptance checks, one test per criterion.

Run alone with `pytest -m acceptance -v`; the summary at the end of the session
lists one PASS/FAIL line per criterion.
"""

import time

import numpy as np
import pytest

from alg1_oracle import reconfigure as oracle
from conftest import preset_config
from ocsmoe.cli import main
from ocsmoe.copilot import CopilotBank, DemandWindow, fit_transition_matrix, topk_accuracy
from ocsmoe.costmodel import cost_ratio
from ocsmoe.experiment import Experiment, failure_events, run_experiment
from ocsmoe.fabric import ClusterSpec
from ocsmoe.reconfig import reconfigure_ocs
from ocsmoe.workload import DynamicsParams, MoeModelSpec, synthesize_gate_trace

pytestmark = pytest.mark.acceptance


def _random_demand(rng, n):
    D = np.zeros((n, n))
    iu = np.triu_indices(n, 1)
    vals = rng.integers(1, 1000, size=len(iu[0])).astype(float)
    vals[rng.random(len(vals)) < rng.uniform(0, 0.7)] = 0  # sparse demand, including ties and empty rows
    D[iu] = vals
    return D


def test_c1_alg1_oracle_equivalence(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        n, alpha = int(rng.integers(2, 9)), int(rng.integers(1, 5))
        D = _random_demand(rng, n)
        out = reconfigure_ocs(None, alpha, V=range(n), cluster=ClusterSpec(n), demand=D, record=True)
        C, T, trace = oracle(D.tolist(), alpha)
        a = out.allocation
        same = (np.array_equal(a.C, np.array(C)) and np.array_equal(a.T, np.array(T))
                and len(a.history) == len(trace)
                and all(np.array_equal(c1, np.array(c2)) and np.array_equal(t1, np.array(t2))
                        for (c1, t1), (c2, t2) in zip(a.history, trace)))
        mismatches += not same
    dt = time.perf_counter() - t0
    ok = criterion(1, mismatches == 0 and dt < 10, f"1000 instances, {mismatches} trace mismatches, {dt:.2f} s (< 10 s)")
    assert ok


def test_c2_degree_and_feasibility_invariants(criterion):
    rng = np.random.default_rng(7)
    violations = {"degree": 0, "symmetry": 0, "ports": 0, "numa": 0}
    t0 = time.perf_counter()
    for _ in range(10_000):
        n, alpha = int(rng.integers(2, 9)), int(rng.integers(1, 7))
        cl = ClusterSpec(n)
        out = reconfigure_ocs(None, alpha, V=range(n), cluster=cl, demand=_random_demand(rng, n))
        C = out.mapping.circuit_matrix(n)
        violations["degree"] += int(C.sum(axis=1).max() > alpha)
        violations["symmetry"] += int(not np.array_equal(C, C.T) or np.diag(C).any())
        ports = [(x.server_a, x.nic_a) for x in out.mapping] + [(x.server_b, x.nic_b) for x in out.mapping]
        violations["ports"] += int(len(ports) != len(set(ports))
                                   or any(nic not in cl.split_ocs_nics() for _, nic in ports))
        numa_bad = False
        for (a, b), cnt in out.mapping.counts().items():
            if cnt < 2:
                continue
            for s in (a, b):
                nodes = {cl.numa_of_nic(x.end_at(s)) for x in out.mapping if x.pair == (a, b)}
                numa_bad |= len(nodes) < min(cnt, cl.numa_nodes_per_server)
        violations["numa"] += int(numa_bad)
    dt = time.perf_counter() - t0
    total = sum(violations.values())
    ok = criterion(2, total == 0, f"10000 cases, violations {violations}, {dt:.1f} s")
    assert ok


def test_c3_copilot_recovery_and_accuracy(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    e = 8
    P_true = rng.dirichlet(np.ones(e), size=e).T
    X = rng.dirichlet(np.ones(e), size=50)
    est = fit_transition_matrix(DemandWindow(X, X @ P_true.T))
    err = float(np.linalg.norm(est.P - P_true))

    model = MoeModelSpec(num_layers=4, num_experts=16, top_k=2, hidden_size=1024, micro_batch=8, seq_len=1024)
    trace = synthesize_gate_trace(model, 60, DynamicsParams(), seed=3)
    bank = CopilotBank(16)
    acc_pred, acc_reuse = [], []
    for it in range(60):
        loads = trace.loads[it]
        if it >= 10:
            for l in range(1, model.num_layers):
                acc_pred.append(topk_accuracy(bank.predict(l, loads[l - 1]), loads[l], 4))
                acc_reuse.append(topk_accuracy(loads[l - 1], loads[l], 4))
        bank.observe_iteration(loads)
    dt = time.perf_counter() - t0
    p, r = float(np.mean(acc_pred)), float(np.mean(acc_reuse))
    ok = criterion(3, err <= 0.1 and len(acc_pred) >= 100 and p >= r and dt < 30,
                   f"||P-P*||_F = {err:.2e} (<= 0.1); top-4 Predict {p:.3f} vs Reuse {r:.3f} over "
                   f"{len(acc_pred)} transitions; {dt:.2f} s (< 30 s)")
    assert ok


def test_c4_cost_ratio(criterion):
    t0 = time.perf_counter()

    def mean_ratio(gbps):
        return float(np.mean([cost_ratio(ClusterSpec(n, nic_bandwidth=gbps * 1e9, region_size=min(n, 64)))
                              for n in (16, 32, 64, 128)]))

    r400, r100 = mean_ratio(400), mean_ratio(100)
    dt = time.perf_counter() - t0
    ok = criterion(4, 1.8 <= r400 <= 2.8 and 1.5 <= r100 <= 2.5 and dt < 1,
                   f"mean FatTree/MixNet at 400G {r400:.3f} (in [1.8, 2.8]), at 100G {r100:.3f} (in [1.5, 2.5]); "
                   f"{dt * 1e3:.0f} ms (< 1 s)")
    assert ok


def test_c5_reconfiguration_hiding(criterion):
    t0 = time.perf_counter()
    runs = {d: run_experiment(preset_config("fig24", reconfig_delay=d)).report for d in (1e-9, 25e-3, 10.0)}
    dt = time.perf_counter() - t0
    ref, hid, slow = (runs[d].iteration_time for d in (1e-9, 25e-3, 10.0))
    expert = min(t.duration for t in runs[25e-3].tasks if t.kind == "compute" and t.name.startswith("expert F"))
    rel = abs(hid - ref) / ref
    ok = criterion(5, expert >= 0.1 and rel <= 1e-3 and slow > ref and dt < 120,
                   f"16 servers, min expert compute {expert * 1e3:.1f} ms; 25 ms delay {hid:.6f} s vs "
                   f"0-delay {ref:.6f} s (diff {rel:.2e} <= 1e-3); 10 s delay {slow:.3f} s; {dt:.1f} s (< 2 min)")
    assert ok


def test_c6_fabric_ordering(criterion):
    t0 = time.perf_counter()
    times = {f: run_experiment(preset_config("desk16", fabric=f)).report.iteration_time
             for f in ("fattree", "mixnet", "topoopt")}
    dt = time.perf_counter() - t0
    ft, mx, to = times["fattree"], times["mixnet"], times["topoopt"]
    exp = Experiment.from_dict(preset_config("desk16"))
    shape_ok = (exp.cluster.num_servers == 16 and exp.cluster.nic_bandwidth == 100e9
                and exp.model.top_k == 2 and exp.model.num_experts == 16)
    ok = criterion(6, shape_ok and ft <= mx <= 1.25 * ft and to >= 1.1 * mx and dt < 300,
                   f"FatTree {ft:.4f} s, MixNet {mx:.4f} s ({mx / ft:.3f}x, <= 1.25x), TopoOpt {to:.4f} s "
                   f"({to / mx:.3f}x MixNet, >= 1.1x); {dt:.1f} s (< 5 min)")
    assert ok


def test_c7_failure_resiliency(criterion):
    t0 = time.perf_counter()
    base_cfg = preset_config("fig15")
    cl = Experiment.from_dict(base_cfg).cluster
    reports = {}
    for name in ("none", "nic", "gpu", "node"):
        cfg = dict(base_cfg, failures=failure_events(cl, name))
        reports[name] = run_experiment(cfg).report
    dt = time.perf_counter() - t0
    base = reports["none"].iteration_time
    infl = {k: reports[k].iteration_time / base - 1 for k in ("nic", "gpu", "node")}
    delivered = all(abs(r.byte_audit()["lost"]) <= 1e-9 * r.byte_audit()["planned"] for r in reports.values())
    ok = criterion(7, delivered and 0 < infl["nic"] <= 0.15 and 0 < infl["gpu"] <= 0.15
                   and infl["node"] >= infl["gpu"] and dt < 300,
                   f"inflation NIC {infl['nic']:.2%}, GPU {infl['gpu']:.2%}, node {infl['node']:.2%}; "
                   f"all bytes delivered: {delivered}; {dt:.1f} s (< 5 min)")
    assert ok


def test_c8_determinism(criterion, tmp_path, capsys):
    first, second, third = tmp_path / "first", tmp_path / "second", tmp_path / "third"
    rc = main(["run", "--preset", "smoke", "--sweep", "fabric=fattree,mixnet,topoopt", "--sweep",
               "policy=block,predict", "--out-dir", str(first)])
    rc |= main(["replay", str(first / "manifest.json"), "--out-dir", str(second)])
    rc |= main(["replay", str(first / "manifest.json"), "--out-dir", str(third), "--jobs", "2"])
    capsys.readouterr()
    same = all((first / f).read_bytes() == (d / f).read_bytes()
               for d in (second, third) for f in ("results.csv", "costs.csv", "reports.json"))
    rows = len((first / "results.csv").read_text().splitlines()) - 1
    ok = criterion(8, rc == 0 and same, f"{rows} runs replayed twice (serial and 2 workers); byte-identical: {same}")
    assert ok
