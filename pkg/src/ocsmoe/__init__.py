"""Flow-level simulation of MoE training over a hybrid optical/electrical fabric."""

__version__ = "0.1.0"
