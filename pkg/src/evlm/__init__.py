"""Desk-scale gated cross-attention fusion model with a fine-grained MoE and
an analytical training-cost model."""

__version__ = "0.1.0"
