"""Rolling-horizon evolution planning over a learned recurrent state space model."""

__version__ = "0.1.0"
