"""Built-in experiment configs.

Each preset is a complete config dict. "_doc" is a one-line description and
"sweep" the axes `ocsmoe run --preset NAME` expands when no --sweep is given.
"""

from __future__ import annotations

import copy

from .fabric import ConfigError

# 16 servers x 8 GPUs, one EP group of 16 experts spanning every server, TP inside
# each server. Gate fanout 2 gives the sparse, local all-to-all the optical
# fabric is built for; expert compute is ~105 ms per layer.
_DESK16 = {
    "cluster": {"num_servers": 16, "nic_bandwidth": 100e9},
    "model": {"num_layers": 4, "num_experts": 16, "top_k": 2, "hidden_size": 6144, "micro_batch": 16,
              "seq_len": 2048, "attention_time": 0.03, "expert_time_per_token": 8e-7,
              "tp_allreduce_bytes": 64 * 2**20},
    "parallelism": {"tp_degree": 8, "ep_degree": 16, "pp_degree": 1, "dp_degree": 1, "num_microbatches": 1},
    "dynamics": {"fanout": 2},
    "fabric": "mixnet",
    "policy": {"fp1": "block"},
    "seed": 0,
}


def _derive(base: dict, doc: str, sweep: dict | None = None, **sections) -> dict:
    cfg = copy.deepcopy(base)
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    cfg["_doc"] = doc
    if sweep:
        cfg["sweep"] = sweep
    return cfg


PRESETS: dict[str, dict] = {
    "smoke": {
        "_doc": "2 servers, one MoE layer; finishes in a few seconds",
        "cluster": {"num_servers": 2, "nic_bandwidth": 100e9},
        "model": {"num_layers": 1, "num_experts": 2, "top_k": 1, "hidden_size": 1024, "micro_batch": 2,
                  "seq_len": 1024, "attention_time": 0.005, "expert_time_per_token": 1e-6},
        "parallelism": {"tp_degree": 8, "ep_degree": 2, "pp_degree": 1, "dp_degree": 1, "num_microbatches": 1},
        "fabric": "mixnet",
        "seed": 0,
    },
    "desk16": _derive(_DESK16, "16-server sparse all-to-all at 100G; fabric comparison",
                      {"fabric": ["fattree", "mixnet", "topoopt"]}),
    "fig13": _derive(_DESK16, "iteration time and perf/$ across fabrics and link bandwidths",
                     {"fabric": ["fattree", "rail", "oversub:3", "topoopt", "mixnet"],
                      "bandwidth": [100, 200, 400, 800]}),
    "fig15": _derive(_DESK16, "NIC, GPU and full-server failures with one backup server",
                     {"failure": ["none", "nic", "gpu", "node"]},
                     cluster={"num_servers": 17, "backup_servers": 1, "region_size": 17}),
    "fig22": _derive(_DESK16, "scalability: more servers, one EP group of 16 per 16 servers",
                     {"servers": [16, 32, 48], "fabric": ["fattree", "mixnet"]},
                     parallelism={"dp_degree": "auto"}, model={"num_layers": 2, "dp_grad_bytes": 256 * 2**20}),
    "fig23": _derive(_DESK16, "optical degree: OCS NICs per server out of 8",
                     {"alpha": [2, 4, 6]}),
    "fig24": _derive(_DESK16, "OCS reconfiguration delay with predicted first all-to-all",
                     {"reconfig_delay": ["1us", "1ms", "25ms", "1000ms", "10s"]},
                     policy={"fp1": "predict"}),
}


def preset(name: str) -> dict:
    """Deep copy of a built-in preset."""
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}") from None
