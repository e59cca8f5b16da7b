"""Meta offline-online reinforcement learning on desk-scale toy problems."""

__version__ = "0.1.0"
