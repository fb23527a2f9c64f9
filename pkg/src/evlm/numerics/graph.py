"""Reverse-mode autodiff over a linear tape of tensor operations.

A Graph instance records every operation in issue order, which is already a
topological order, so the backward pass is a single reverse sweep that visits
each node exactly once. Graphs are single-threaded and cheap; build a fresh
one per forward/backward episode. Parameters are plain Tensors shared across
graphs; gradients live on the graph, keyed by node.
"""

from __future__ import annotations

import math
from math import isfinite
from operator import mul as _opmul
from typing import Callable, Sequence

from ..errors import ContractViolationError, DimensionError, NonFiniteError
from .tensor import Tensor

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

BoolMatrix = list[list[bool]]


# -- raw data kernels (no graph bookkeeping) ------------------------------


def mm_data(a: list[float], m: int, k: int, b: list[float], n: int) -> list[float]:
    """Row-major (m,k) @ (k,n). Column extraction once, then zip-dot rows."""
    bt = [b[j::n] for j in range(n)]
    out: list[float] = []
    ext = out.extend
    for i in range(m):
        row = a[i * k : (i + 1) * k]
        ext([sum(map(_opmul, row, col)) for col in bt])
    return out


def mm_abt_data(a: list[float], m: int, n: int, b: list[float], p: int) -> list[float]:
    """(m,n) @ (p,n)^T -> (m,p); columns of b^T are rows of b."""
    brows = [b[q * n : (q + 1) * n] for q in range(p)]
    out: list[float] = []
    ext = out.extend
    for i in range(m):
        row = a[i * n : (i + 1) * n]
        ext([sum(map(_opmul, row, br)) for br in brows])
    return out


def transpose_data(d: list[float], m: int, n: int) -> list[float]:
    out: list[float] = []
    ext = out.extend
    for col in zip(*(d[i * n : (i + 1) * n] for i in range(m))):
        ext(col)
    return out


def _add_into(dst: list[float], src: list[float]) -> None:
    for i, v in enumerate(src):
        dst[i] += v


class Node:
    """A tensor value bound to its position in a graph's tape."""

    __slots__ = ("t", "idx")

    def __init__(self, t: Tensor, idx: int):
        self.t = t
        self.idx = idx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.t.shape


# Backward closures receive (grad_out_data, accumulate) where accumulate
# adds a gradient contribution to a parent node.
BackwardFn = Callable[[list[float], Callable[[Node, list[float]], None]], None]


class Graph:
    """Operation tape plus per-node gradients populated by backward()."""

    def __init__(self) -> None:
        self._values: list[Tensor] = []
        self._bwd: list[BackwardFn | None] = []
        self._grads: list[list[float] | None] | None = None

    # -- tape plumbing ----------------------------------------------------

    def _emit(self, t: Tensor, bwd: BackwardFn | None) -> Node:
        idx = len(self._values)
        self._values.append(t)
        self._bwd.append(bwd)
        return Node(t, idx)

    def param(self, t: Tensor) -> Node:
        """Register a leaf tensor; its gradient is available after backward."""
        return self._emit(t, None)

    leaf = param

    def constant(self, t: Tensor) -> Node:
        return self._emit(t, None)

    def backward(self, root: Node) -> None:
        """Seed d(root)=1 and sweep the tape once in reverse topological order."""
        if root.t.size != 1:
            raise DimensionError("backward root must be a scalar")
        grads: list[list[float] | None] = [None] * (root.idx + 1)
        grads[root.idx] = [1.0]

        def acc(node: Node, delta: list[float]) -> None:
            g = grads[node.idx]
            if g is None:
                grads[node.idx] = list(delta)
            else:
                _add_into(g, delta)

        bwd_fns = self._bwd
        for i in range(root.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            fn = bwd_fns[i]
            if fn is not None:
                fn(g, acc)
        self._grads = grads

    def grad(self, node: Node) -> Tensor:
        """Gradient of the last backward() root w.r.t. node (zeros if unreached)."""
        if self._grads is None:
            raise ContractViolationError("grad() before backward()")
        g = self._grads[node.idx] if node.idx < len(self._grads) else None
        if g is None:
            return Tensor.zeros(*node.t.shape)
        return Tensor(node.t.shape, list(g), check=False)

    def _out(self, shape: tuple[int, ...], data: list[float], bwd: BackwardFn | None) -> Node:
        if not all(map(isfinite, data)):
            raise NonFiniteError(f"non-finite result of shape {shape}")
        return self._emit(Tensor(shape, data, check=False), bwd)

    # -- core operations ---------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        (m, k), (k2, n) = a.t.shape, b.t.shape
        if k != k2:
            raise DimensionError(f"matmul {a.t.shape} @ {b.t.shape}")
        ad, bd = a.t.data, b.t.data
        out = mm_data(ad, m, k, bd, n)

        def bwd(g: list[float], acc) -> None:
            acc(a, mm_abt_data(g, m, n, bd, k))  # dA = G @ B^T
            acc(b, mm_data(transpose_data(ad, m, k), k, m, g, n))  # dB = A^T @ G

        return self._out((m, n), out, bwd)

    def add(self, a: Node, b: Node) -> Node:
        if a.t.shape != b.t.shape:
            raise DimensionError(f"add {a.t.shape} + {b.t.shape}")
        out = [x + y for x, y in zip(a.t.data, b.t.data)]

        def bwd(g: list[float], acc) -> None:
            acc(a, g)
            acc(b, g)

        return self._out(a.t.shape, out, bwd)

    def sub(self, a: Node, b: Node) -> Node:
        if a.t.shape != b.t.shape:
            raise DimensionError(f"sub {a.t.shape} - {b.t.shape}")
        out = [x - y for x, y in zip(a.t.data, b.t.data)]

        def bwd(g: list[float], acc) -> None:
            acc(a, g)
            acc(b, [-v for v in g])

        return self._out(a.t.shape, out, bwd)

    def mul(self, a: Node, b: Node) -> Node:
        """Elementwise (Hadamard) product."""
        if a.t.shape != b.t.shape:
            raise DimensionError(f"mul {a.t.shape} * {b.t.shape}")
        ad, bd = a.t.data, b.t.data
        out = [x * y for x, y in zip(ad, bd)]

        def bwd(g: list[float], acc) -> None:
            acc(a, [gv * y for gv, y in zip(g, bd)])
            acc(b, [gv * x for gv, x in zip(g, ad)])

        return self._out(a.t.shape, out, bwd)

    def scale(self, a: Node, c: float) -> Node:
        """Multiply by a Python float constant."""
        out = [c * x for x in a.t.data]

        def bwd(g: list[float], acc) -> None:
            acc(a, [c * gv for gv in g])

        return self._out(a.t.shape, out, bwd)

    def smul(self, a: Node, s: Node) -> Node:
        """Broadcast-multiply by a (1,1) scalar node (used by tanh gates)."""
        if s.t.size != 1:
            raise DimensionError(f"smul scalar has shape {s.t.shape}")
        sv = s.t.data[0]
        ad = a.t.data
        out = [sv * x for x in ad]

        def bwd(g: list[float], acc) -> None:
            acc(a, [sv * gv for gv in g])
            acc(s, [sum(map(_opmul, g, ad))])

        return self._out(a.t.shape, out, bwd)

    def tanh(self, a: Node) -> Node:
        out = list(map(math.tanh, a.t.data))

        def bwd(g: list[float], acc) -> None:
            acc(a, [gv * (1.0 - y * y) for gv, y in zip(g, out)])

        return self._out(a.t.shape, out, bwd)

    def gelu(self, a: Node) -> Node:
        """Exact erf-based gelu."""
        ad = a.t.data
        out = [0.5 * x * (1.0 + math.erf(x * _INV_SQRT2)) for x in ad]

        def bwd(g: list[float], acc) -> None:
            acc(
                a,
                [
                    gv
                    * (
                        0.5 * (1.0 + math.erf(x * _INV_SQRT2))
                        + x * math.exp(-0.5 * x * x) * _INV_SQRT2PI
                    )
                    for gv, x in zip(g, ad)
                ],
            )

        return self._out(a.t.shape, out, bwd)

    def sum_all(self, a: Node) -> Node:
        out = [math.fsum(a.t.data)]
        n = a.t.size

        def bwd(g: list[float], acc) -> None:
            acc(a, [g[0]] * n)

        return self._out((1, 1), out, bwd)

    def transpose(self, a: Node) -> Node:
        m, n = a.t.shape
        out = transpose_data(a.t.data, m, n)

        def bwd(g: list[float], acc) -> None:
            acc(a, transpose_data(g, n, m))

        return self._out((n, m), out, bwd)

    def reshape(self, a: Node, shape: Sequence[int]) -> Node:
        shape = tuple(int(s) for s in shape)
        n = 1
        for s in shape:
            n *= s
        if n != a.t.size:
            raise DimensionError(f"reshape {a.t.shape} -> {shape}")

        def bwd(g: list[float], acc) -> None:
            acc(a, g)

        return self._out(shape, list(a.t.data), bwd)

    # -- row/column selection and concatenation ----------------------------

    def row_select(self, a: Node, indices: Sequence[int]) -> Node:
        """Gather rows (doubles as embedding lookup); repeated rows accumulate
        their gradients back into the source."""
        m, n = a.t.shape
        idx = list(indices)
        if any(i < 0 or i >= m for i in idx):
            raise DimensionError(f"row index out of range for shape {a.t.shape}")
        ad = a.t.data
        out: list[float] = []
        for i in idx:
            out.extend(ad[i * n : (i + 1) * n])

        def bwd(g: list[float], acc) -> None:
            delta = [0.0] * (m * n)
            for r, i in enumerate(idx):
                off_src, off_dst = r * n, i * n
                for j in range(n):
                    delta[off_dst + j] += g[off_src + j]
            acc(a, delta)

        return self._out((len(idx), n), out, bwd)

    def col_select(self, a: Node, indices: Sequence[int]) -> Node:
        m, n = a.t.shape
        idx = list(indices)
        if any(j < 0 or j >= n for j in idx):
            raise DimensionError(f"column index out of range for shape {a.t.shape}")
        ad = a.t.data
        w = len(idx)
        out = [ad[i * n + j] for i in range(m) for j in idx]

        def bwd(g: list[float], acc) -> None:
            delta = [0.0] * (m * n)
            for i in range(m):
                for c, j in enumerate(idx):
                    delta[i * n + j] += g[i * w + c]
            acc(a, delta)

        return self._out((m, w), out, bwd)

    def col_slice(self, a: Node, start: int, stop: int) -> Node:
        return self.col_select(a, range(start, stop))

    def concat_rows(self, parts: Sequence[Node]) -> Node:
        n = parts[0].t.cols
        if any(p.t.cols != n for p in parts):
            raise DimensionError("concat_rows column mismatch")
        out: list[float] = []
        for p in parts:
            out.extend(p.t.data)
        sizes = [p.t.size for p in parts]
        rows = sum(p.t.rows for p in parts)

        def bwd(g: list[float], acc) -> None:
            off = 0
            for p, sz in zip(parts, sizes):
                acc(p, g[off : off + sz])
                off += sz

        return self._out((rows, n), out, bwd)

    def concat_cols(self, parts: Sequence[Node]) -> Node:
        m = parts[0].t.rows
        if any(p.t.rows != m for p in parts):
            raise DimensionError("concat_cols row mismatch")
        widths = [p.t.cols for p in parts]
        total = sum(widths)
        out: list[float] = []
        for i in range(m):
            for p, w in zip(parts, widths):
                out.extend(p.t.data[i * w : (i + 1) * w])

        def bwd(g: list[float], acc) -> None:
            for pi, (p, w) in enumerate(zip(parts, widths)):
                off = sum(widths[:pi])
                delta: list[float] = []
                for i in range(m):
                    delta.extend(g[i * total + off : i * total + off + w])
                acc(p, delta)

        return self._out((m, total), out, bwd)

    # -- normalization, attention and loss ---------------------------------

    def layer_norm(self, x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
        """Per-row normalization with learnable (1,d) gain and bias."""
        m, d = x.t.shape
        if gain.t.shape != (1, d) or bias.t.shape != (1, d):
            raise DimensionError(f"layer_norm params must be (1,{d})")
        xd, gd, bd = x.t.data, gain.t.data, bias.t.data
        out: list[float] = []
        xhat: list[float] = []
        inv_sigmas: list[float] = []
        for i in range(m):
            row = xd[i * d : (i + 1) * d]
            mu = sum(row) / d
            var = sum((v - mu) ** 2 for v in row) / d
            inv = 1.0 / math.sqrt(var + eps)
            inv_sigmas.append(inv)
            hrow = [(v - mu) * inv for v in row]
            xhat.extend(hrow)
            out.extend(h * g + b for h, g, b in zip(hrow, gd, bd))

        def bwd(g: list[float], acc) -> None:
            dgain = [0.0] * d
            dbias = [0.0] * d
            dx: list[float] = []
            for i in range(m):
                off = i * d
                grow = g[off : off + d]
                hrow = xhat[off : off + d]
                inv = inv_sigmas[i]
                gg = [gv * gm for gv, gm in zip(grow, gd)]
                mean_gg = sum(gg) / d
                mean_ggh = sum(v * h for v, h in zip(gg, hrow)) / d
                dx.extend((v - mean_gg - h * mean_ggh) * inv for v, h in zip(gg, hrow))
                for j in range(d):
                    dgain[j] += grow[j] * hrow[j]
                    dbias[j] += grow[j]
            acc(x, dx)
            acc(gain, dgain)
            acc(bias, dbias)

        return self._out((m, d), out, bwd)

    def softmax_masked(self, scores: Node, mask: BoolMatrix) -> Node:
        """Row softmax over allowed entries; masked entries are exactly 0.

        Stabilized by subtracting the row max over allowed entries. A fully
        masked row violates the contract (the pad block exists upstream to
        prevent it).
        """
        q, k = scores.t.shape
        if len(mask) != q or any(len(r) != k for r in mask):
            raise DimensionError(f"mask shape does not match scores {scores.t.shape}")
        sd = scores.t.data
        out: list[float] = []
        for i in range(q):
            row = sd[i * k : (i + 1) * k]
            mrow = mask[i]
            allowed = [v for v, ok in zip(row, mrow) if ok]
            if not allowed:
                raise ContractViolationError(f"fully masked softmax row {i}")
            top = max(allowed)
            exps = [math.exp(v - top) if ok else 0.0 for v, ok in zip(row, mrow)]
            inv = 1.0 / sum(exps)
            out.extend(e * inv for e in exps)

        def bwd(g: list[float], acc) -> None:
            # dL/ds = p * (g - sum(g*p)); masked entries have p == 0.
            ds: list[float] = []
            for i in range(q):
                off = i * k
                prow = out[off : off + k]
                grow = g[off : off + k]
                dot = sum(map(_opmul, grow, prow))
                ds.extend(p * (gv - dot) for p, gv in zip(prow, grow))
            acc(scores, ds)

        return self._out((q, k), out, bwd)

    def cross_entropy(self, logits: Node, targets: Sequence[int], loss_mask: Sequence[bool]) -> Node:
        """Mean NLL over unmasked positions; log-sum-exp stabilized."""
        t, v = logits.t.shape
        targets = list(targets)
        loss_mask = list(loss_mask)
        if len(targets) != t or len(loss_mask) != t:
            raise DimensionError("targets/loss_mask length must match logit rows")
        if any(loss_mask[i] and not (0 <= targets[i] < v) for i in range(t)):
            raise ContractViolationError("target id out of vocabulary range")
        active = [i for i in range(t) if loss_mask[i]]
        if not active:
            raise ContractViolationError("all positions masked in cross_entropy")
        ld = logits.t.data
        probs_cache: dict[int, list[float]] = {}
        total = 0.0
        for i in active:
            row = ld[i * v : (i + 1) * v]
            top = max(row)
            exps = [math.exp(x - top) for x in row]
            z = sum(exps)
            total += math.log(z) + top - row[targets[i]]
            probs_cache[i] = [e / z for e in exps]
        n_active = len(active)
        out = [total / n_active]

        def bwd(g: list[float], acc) -> None:
            scale = g[0] / n_active
            dl = [0.0] * (t * v)
            for i in active:
                off = i * v
                probs = probs_cache[i]
                for j in range(v):
                    dl[off + j] = probs[j] * scale
                dl[off + targets[i]] -= scale
            acc(logits, dl)

        return self._out((1, 1), out, bwd)
