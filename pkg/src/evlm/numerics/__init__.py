"""Minimal dense-tensor kernel and reverse-mode autodiff layer.

Pure Python on purpose: 64-bit floats, flat row-major storage, no external
math runtime. Gradient-check tolerances dominate the design, not throughput.
"""

from .gradcheck import grad_check
from .graph import Graph, Node
from .tensor import Tensor, derive_seed

__all__ = ["Graph", "Node", "Tensor", "derive_seed", "grad_check"]
