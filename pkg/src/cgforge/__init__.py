"""cgforge - learned call-graph recovery for x86-64 binaries."""

__version__ = "0.1.0"
