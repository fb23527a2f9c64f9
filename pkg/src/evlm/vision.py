"""Small ViT-style encoder exposing per-layer outputs, with uniform tapping
of the deepest layers and the tap-to-cross-attention assignment rule.

Taps are the raw pre-norm block outputs: there is no final norm and no head,
so the deepest tap is exactly the last residual stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .errors import ConfigError, DimensionError
from .numerics import Graph, Node, Tensor, derive_seed

FFN_MULT = 4  # hidden width of each block's FFN relative to feature_dim


@dataclass(frozen=True)
class EncoderConfig:
    """Toy defaults exercise every mechanism in seconds on a CPU."""

    layers: int = 12
    patch_count: int = 17  # 16 patches + class token
    feature_dim: int = 32
    tap_window: int = 8
    num_taps: int = 4

    def __post_init__(self):
        if self.num_taps < 1:
            raise ConfigError("num_taps must be >= 1")
        if self.tap_window < self.num_taps:
            raise ConfigError("tap_window must be >= num_taps")
        if self.layers < self.tap_window:
            raise ConfigError("layers must be >= tap_window")
        if self.patch_count < 1 or self.feature_dim < 1:
            raise ConfigError("patch_count and feature_dim must be positive")


@dataclass
class HierarchicalFeatures:
    """One tapped feature sequence per scheduled layer, shallow to deep."""

    taps: list  # Tensor or Node payloads, each (patch_count, feature_dim)
    source_layers: list[int]


def tap_schedule(layers: int, tap_window: int, num_taps: int) -> list[int]:
    """0-based layer indices of the taps: uniform stride window/num_taps over
    the last `tap_window` layers, always ending at the final layer."""
    if num_taps > tap_window:
        raise ConfigError("num_taps exceeds tap_window")
    if tap_window > layers:
        raise ConfigError("tap_window exceeds layer count")
    base = layers - tap_window - 1
    return [base + ((j + 1) * tap_window + num_taps - 1) // num_taps for j in range(num_taps)]


def assign_taps_to_xattn(num_taps: int, num_xattn: int) -> list[int]:
    """Tap index used by each cross-attention layer: contiguous blocks in
    order, shallowest tap feeding the earliest layers."""
    if num_xattn < num_taps:
        raise ConfigError("need at least as many cross-attention layers as taps")
    return [(t * num_taps) // num_xattn for t in range(num_xattn)]


class VisionEncoder:
    """Stack of pre-norm transformer blocks (single-head attention, gelu FFN),
    parameterized by plain tensors so callers control gradient flow."""

    def __init__(self, cfg: EncoderConfig, seed: int, prefix: str = "vision"):
        self.cfg = cfg
        self.prefix = prefix
        d = cfg.feature_dim
        hdim = FFN_MULT * d
        p: dict[str, Tensor] = {}
        for i in range(cfg.layers):
            b = f"block{i}."
            for name in ("wq", "wk", "wv", "wo"):
                p[b + name] = Tensor.randn((d, d), derive_seed(seed, f"{prefix}.{b}{name}"), d**-0.5)
            p[b + "ln1.gain"] = Tensor.full((1, d), 1.0)
            p[b + "ln1.bias"] = Tensor.zeros(1, d)
            p[b + "ln2.gain"] = Tensor.full((1, d), 1.0)
            p[b + "ln2.bias"] = Tensor.zeros(1, d)
            p[b + "w_in"] = Tensor.randn((d, hdim), derive_seed(seed, f"{prefix}.{b}w_in"), d**-0.5)
            p[b + "w_out"] = Tensor.randn((hdim, d), derive_seed(seed, f"{prefix}.{b}w_out"), hdim**-0.5)
        self.params = p
        self.schedule = tap_schedule(cfg.layers, cfg.tap_window, cfg.num_taps)

    @staticmethod
    def block_index(name: str) -> int:
        return int(name.split(".", 1)[0].removeprefix("block"))

    def encode_nodes(self, g: Graph, patches: Node, nodes: Mapping[str, Node]) -> HierarchicalFeatures:
        """Run all blocks inside an existing graph; nodes maps this encoder's
        parameter names to graph nodes."""
        cfg = self.cfg
        if patches.t.shape != (cfg.patch_count, cfg.feature_dim):
            raise DimensionError(
                f"patches {patches.t.shape} != ({cfg.patch_count}, {cfg.feature_dim})"
            )
        s = cfg.patch_count
        full_mask = [[True] * s for _ in range(s)]
        inv_scale = cfg.feature_dim**-0.5
        x = patches
        wanted = set(self.schedule)
        taps: dict[int, Node] = {}
        for i in range(cfg.layers):
            b = f"block{i}."
            h = g.layer_norm(x, nodes[b + "ln1.gain"], nodes[b + "ln1.bias"])
            q = g.matmul(h, nodes[b + "wq"])
            k = g.matmul(h, nodes[b + "wk"])
            v = g.matmul(h, nodes[b + "wv"])
            probs = g.softmax_masked(g.scale(g.matmul(q, g.transpose(k)), inv_scale), full_mask)
            x = g.add(x, g.matmul(g.matmul(probs, v), nodes[b + "wo"]))
            h = g.layer_norm(x, nodes[b + "ln2.gain"], nodes[b + "ln2.bias"])
            x = g.add(x, g.matmul(g.gelu(g.matmul(h, nodes[b + "w_in"])), nodes[b + "w_out"]))
            if i in wanted:
                taps[i] = x
        return HierarchicalFeatures([taps[i] for i in self.schedule], list(self.schedule))

    def encode(self, patches: Tensor) -> HierarchicalFeatures:
        """Standalone forward pass returning plain tensors."""
        g = Graph()
        nodes = {name: g.leaf(t) for name, t in self.params.items()}
        feats = self.encode_nodes(g, g.leaf(patches), nodes)
        return HierarchicalFeatures([n.t for n in feats.taps], feats.source_layers)
