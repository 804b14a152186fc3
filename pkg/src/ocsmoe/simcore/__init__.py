"""Event-driven flow-level simulation of one training iteration."""

from .engine import SimulationError, Simulator, run_iteration
from .events import EventQueue, SimEvent
from .failures import inject_failure
from .policy import FailureEvent, FailureScenario, ReconfigPolicy
from .report import IterationReport, TaskTiming
from .sharing import max_min_rates, share_bandwidth
from .timeline import LayerTiming, ReconfigWindow, apply_reconfig_timeline

__all__ = [
    "EventQueue", "FailureEvent", "FailureScenario", "IterationReport", "LayerTiming", "ReconfigPolicy",
    "ReconfigWindow", "SimEvent", "SimulationError", "Simulator", "TaskTiming", "apply_reconfig_timeline",
    "inject_failure", "max_min_rates", "run_iteration", "share_bandwidth",
]
