"""Background determination for particle decays with a GA-assisted AlphaZero-style agent."""

__version__ = "0.1.0"
