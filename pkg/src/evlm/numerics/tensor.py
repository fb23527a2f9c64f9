"""Dense 2-D tensors stored as flat row-major lists of 64-bit floats.

Correctness-first toy scale: no views, no strides, no broadcasting. Slices
copy. Every constructor validates shape consistency and finiteness, so a
NaN/Inf surfaces at the operation that produced it.
"""

from __future__ import annotations

import hashlib
import random
from math import isfinite

from ..errors import DimensionError, NonFiniteError

Shape = tuple[int, ...]


def derive_seed(root_seed: int, name: str) -> int:
    """Stable per-tensor seed from a root seed and a parameter name.

    Hash-based so the result does not depend on parameter creation order.
    """
    digest = hashlib.sha256(f"{root_seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


class Tensor:
    """Flat row-major float64 storage plus a shape tuple."""

    __slots__ = ("shape", "data")

    def __init__(self, shape: Shape | list[int], data: list[float], check: bool = True):
        shape = tuple(int(s) for s in shape)
        if check:
            if any(s <= 0 for s in shape):
                raise DimensionError(f"non-positive extent in shape {shape}")
            n = 1
            for s in shape:
                n *= s
            if n != len(data):
                raise DimensionError(f"shape {shape} does not match {len(data)} values")
            if not all(map(isfinite, data)):
                raise NonFiniteError(f"non-finite value in tensor of shape {shape}")
        self.shape = shape
        self.data = data

    # -- constructors ---------------------------------------------------

    @classmethod
    def zeros(cls, *shape: int) -> "Tensor":
        n = 1
        for s in shape:
            n *= s
        return cls(shape, [0.0] * n)

    @classmethod
    def full(cls, shape: Shape, value: float) -> "Tensor":
        n = 1
        for s in shape:
            n *= s
        return cls(shape, [float(value)] * n)

    @classmethod
    def from_rows(cls, rows: list[list[float]]) -> "Tensor":
        cols = len(rows[0])
        data: list[float] = []
        for r in rows:
            if len(r) != cols:
                raise DimensionError("ragged rows")
            data.extend(float(v) for v in r)
        return cls((len(rows), cols), data)

    @classmethod
    def scalar(cls, value: float) -> "Tensor":
        return cls((1, 1), [float(value)])

    @classmethod
    def randn(cls, shape: Shape, seed: int, std: float = 1.0) -> "Tensor":
        """Seeded Gaussian init; identical seed gives bit-identical data."""
        rng = random.Random(seed)
        n = 1
        for s in shape:
            n *= s
        return cls(shape, [rng.gauss(0.0, 1.0) * std for _ in range(n)])

    # -- helpers --------------------------------------------------------

    @property
    def size(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1] if len(self.shape) > 1 else 1

    def row(self, i: int) -> list[float]:
        c = self.cols
        return self.data[i * c : (i + 1) * c]

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return self.data[0]

    def copy(self) -> "Tensor":
        return Tensor(self.shape, list(self.data), check=False)

    def tolist(self) -> list[list[float]]:
        return [self.row(i) for i in range(self.rows)]

    def allclose(self, other: "Tensor", tol: float = 1e-12) -> bool:
        if self.shape != other.shape:
            return False
        return all(abs(a - b) <= tol for a, b in zip(self.data, other.data))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"
