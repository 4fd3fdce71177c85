"""Desk-scale laboratory for width-scaling rules in MoE transformers."""

__version__ = "0.1.0"
