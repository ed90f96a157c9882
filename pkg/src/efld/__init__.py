"""Training, int8 quantization, cost analysis, and export toolkit for a
lightweight multi-format facial landmark detector."""

__version__ = "0.1.0"
