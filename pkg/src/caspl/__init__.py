"""Cascade prompt learning on a miniature dual-encoder vision-language model."""
__version__ = "0.1.0"
