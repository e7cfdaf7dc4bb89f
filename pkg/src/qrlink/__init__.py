"""Monte Carlo simulator and exact-state toolkit for a multiplexed quantum-repeater link."""

__version__ = "0.1.0"
