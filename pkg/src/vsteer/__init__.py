"""Value-guided steering of frozen stochastic policies at desk scale."""

__version__ = "0.1.0"
