"""Deep Continuous Networks: Gaussian N-jet filters inside neural ODE blocks."""

__version__ = "0.1.0"
