"""Instance-level emotional voice conversion: disentangled training,
conversion and objective evaluation on a synthetic or ESD-layout corpus."""

__version__ = "0.1.0"
