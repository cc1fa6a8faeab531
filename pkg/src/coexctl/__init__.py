"""NR-U/Wi-Fi coexistence simulation with a constrained Q-learning controller."""

__version__ = "0.1.0"
