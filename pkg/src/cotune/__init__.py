"""Coordinated two-component instruction tuning on a toy multimodal model."""

__version__ = "0.1.0"
