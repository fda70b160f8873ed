"""Static outlier suppression for 4-bit micro-scaling quantization."""

__version__ = "0.1.0"
