import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=500, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def small_config(fabric="mixnet", servers=2, **over):
    """A two-server, one-layer experiment config used across tests."""
    cfg = {
        "cluster": {"num_servers": servers, "nic_bandwidth": 100e9},
        "model": {"num_layers": 1, "num_experts": servers, "top_k": 1, "hidden_size": 1024, "micro_batch": 2,
                  "seq_len": 1024, "attention_time": 0.005, "expert_time_per_token": 1e-6},
        "parallelism": {"tp_degree": 8, "ep_degree": servers, "num_microbatches": 1},
        "fabric": fabric,
        "seed": 0,
    }
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def preset_config(name, **overrides):
    """A built-in preset without its doc string and sweep axes, with overrides applied."""
    from ocsmoe.experiment import apply_override
    from ocsmoe.presets import preset

    cfg = preset(name)
    cfg.pop("_doc", None)
    cfg.pop("sweep", None)
    for key, value in overrides.items():
        cfg = apply_override(cfg, key, value)
    return cfg


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; printed at the end of the session."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
