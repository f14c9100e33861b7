"""Backdoor watermarking and inference-time wrappers that block trigger-set verification."""

__version__ = "0.1.0"
