"""Desk-scale open-vocabulary perception: prompt-anything detection,
segmentation, and grounding on synthetic scenes."""

__version__ = "0.1.0"
