"""Prompt-optional breast-ultrasound segmentation with nullable text prompts."""

__version__ = "0.1.0"
