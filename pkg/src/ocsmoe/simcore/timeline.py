"""Closed-form reconfiguration timeline of one pipeline stage running one microbatch.

This mirrors the barrier placement of the task DAG on a purely sequential compute
stream and serves as a reference for the event engine.
"""

from __future__ import annotations

from dataclasses import dataclass

from .policy import ReconfigPolicy


@dataclass(frozen=True)
class LayerTiming:
    attention: float
    gate: float
    expert: float
    a2a: float = 0.0  # duration of one all-to-all once its circuits are up
    fp1_change: bool = True  # FP-1 topology differs from what is installed
    fp2_change: bool = True
    bp1_change: bool = True


@dataclass(frozen=True)
class ReconfigWindow:
    layer: int
    phase: str
    launch: float
    done: float
    stall: float


def apply_reconfig_timeline(layers: list[LayerTiming], policy: ReconfigPolicy, delay: float,
                            backward_factor: float = 2.0) -> tuple[list[ReconfigWindow], float]:
    """Schedule of reconfigurations and the resulting stage time.

    A reconfiguration launched at time L finishes at L + delay; the all-to-all it
    prepares starts at max(ready, L + delay) and the difference is the stall.
    """
    out: list[ReconfigWindow] = []
    t = 0.0

    def wait(layer, phase, launch, ready):
        nonlocal t
        done = launch + delay
        stall = max(0.0, done - ready)
        out.append(ReconfigWindow(layer, phase, launch, done, stall))
        t = max(ready, done)

    for l, x in enumerate(layers):
        attn_start = t
        t += x.attention + x.gate
        if x.fp1_change and policy.fp1 == "block":
            wait(l, "FP-1", t, t)
        elif x.fp1_change and policy.fp1 == "predict" and l > 0:
            wait(l, "FP-1", attn_start, t)
        t += x.a2a
        exp_start = t
        t += x.expert
        if x.fp2_change:
            wait(l, "FP-2", exp_start if policy.hide_in_compute else t, t)
        t += x.a2a
    bf = backward_factor
    anchor = None  # start of the backward attention of the layer above
    for l in reversed(range(len(layers))):
        x = layers[l]
        if x.bp1_change:
            launch = anchor if (policy.hide_in_compute and anchor is not None) else t
            wait(l, "BP-1", launch, t)
        t += x.a2a + bf * x.expert + x.a2a + bf * x.gate
        anchor = t
        t += bf * x.attention
    return out, t
