"""Deep mean-field weight posteriors and the function-space distributions they induce."""

__version__ = "0.1.0"
