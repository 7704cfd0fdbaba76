"""Importance-guided layer-wise mixed-precision quantization for decoder-only transformers."""

__version__ = "0.1.0"
