"""Gated cross-attention layer and the attention-permission masks that govern
it: learnable media tokens standing in for each image, zero-padded visual
keys so text always has a null target, and the image/video mask modes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .errors import ConfigError, DimensionError, SequenceError
from .numerics import Graph, Node, Tensor, derive_seed

MEDIA_LEN_DEFAULT = 16  # learnable tokens inserted per image


@dataclass(frozen=True)
class Text:
    token: int


@dataclass(frozen=True)
class MediaSlot:
    image: int
    slot: int


@dataclass(frozen=True)
class ImageMarker:
    """Placeholder for image i in raw text passed to insert_media_tokens."""

    index: int


Element = Text | MediaSlot


@dataclass
class InterleavedSequence:
    """Ordered stream of text tokens and per-image media-token slots.

    Each image occupies one contiguous run of media_len slots, and runs appear
    in ascending image order.
    """

    elements: list[Element]
    media_len: int = MEDIA_LEN_DEFAULT
    num_images: int = 0

    def __post_init__(self):
        runs: list[int] = []
        pos = 0
        n = len(self.elements)
        while pos < n:
            el = self.elements[pos]
            if isinstance(el, Text):
                pos += 1
                continue
            img = el.image
            run = self.elements[pos : pos + self.media_len]
            ok = len(run) == self.media_len and all(
                isinstance(e, MediaSlot) and e.image == img and e.slot == s
                for s, e in enumerate(run)
            )
            if not ok:
                raise SequenceError(f"image {img} run is not {self.media_len} contiguous slots")
            runs.append(img)
            pos += self.media_len
        if runs != list(range(len(runs))):
            raise SequenceError(f"image runs must be 0..n-1 in order, got {runs}")
        if self.num_images != len(runs):
            raise SequenceError(f"num_images={self.num_images} but found {len(runs)} runs")

    def __len__(self) -> int:
        return len(self.elements)


def insert_media_tokens(
    items: Iterable[int | ImageMarker], media_len: int = MEDIA_LEN_DEFAULT
) -> InterleavedSequence:
    """Expand each image marker into media_len slots, preserving text order.

    Markers must reference images 0..n-1 in order, each exactly once.
    """
    elements: list[Element] = []
    next_image = 0
    for item in items:
        if isinstance(item, ImageMarker):
            if item.index != next_image:
                raise SequenceError(
                    f"image marker {item.index} out of order (expected {next_image})"
                )
            elements.extend(MediaSlot(item.index, s) for s in range(media_len))
            next_image += 1
        else:
            elements.append(Text(int(item)))
    return InterleavedSequence(elements, media_len=media_len, num_images=next_image)


# -- masks --------------------------------------------------------------------


@dataclass
class CrossMask:
    """Boolean permission matrix [len(seq) x (num_images*s_img + pad_len)].

    Columns are partitioned into per-image feature blocks followed by a
    trailing all-zero pad block; every row allows at least one column.
    """

    allow: list[list[bool]]
    pad_len: int

    @property
    def cols(self) -> int:
        return len(self.allow[0]) if self.allow else self.pad_len


def _mask_dims(seq: InterleavedSequence, s_img: int, pad_len: int) -> int:
    if s_img <= 0:
        raise ConfigError("s_img must be positive")
    if pad_len <= 0:
        raise ConfigError("pad_len must be positive")
    return seq.num_images * s_img + pad_len


def build_cross_mask_image(seq: InterleavedSequence, s_img: int, pad_len: int = 1) -> CrossMask:
    """Image mode: media slots see exactly their own image block; text sees
    the block of the most recent preceding image plus the pad block (pad only
    if no image precedes)."""
    cols = _mask_dims(seq, s_img, pad_len)
    allow: list[list[bool]] = []
    last_image = -1
    for el in seq.elements:
        row = [False] * cols
        if isinstance(el, MediaSlot):
            last_image = el.image
            row[el.image * s_img : (el.image + 1) * s_img] = [True] * s_img
        else:
            if last_image >= 0:
                row[last_image * s_img : (last_image + 1) * s_img] = [True] * s_img
            row[cols - pad_len :] = [True] * pad_len
        allow.append(row)
    return CrossMask(allow, pad_len)


def build_cross_mask_video(seq: InterleavedSequence, s_img: int, pad_len: int = 1) -> CrossMask:
    """Video mode: media slots still see only their own frame block, but text
    sees every frame block plus the pad block."""
    cols = _mask_dims(seq, s_img, pad_len)
    n_feat = seq.num_images * s_img
    allow: list[list[bool]] = []
    for el in seq.elements:
        row = [False] * cols
        if isinstance(el, MediaSlot):
            row[el.image * s_img : (el.image + 1) * s_img] = [True] * s_img
        else:
            row[:n_feat] = [True] * n_feat
            row[cols - pad_len :] = [True] * pad_len
        allow.append(row)
    return CrossMask(allow, pad_len)


def build_self_mask(seq: InterleavedSequence) -> list[list[bool]]:
    """Plain causal mask over the whole interleaved stream."""
    n = len(seq)
    return [[j <= i for j in range(n)] for i in range(n)]


def format_mask_dump(allow: Sequence[Sequence[bool]], pad_len: int, mode: str) -> str:
    """Plain-text grid consumed by the CLI: header then one 1/0 line per row."""
    cols = len(allow[0]) if allow else pad_len
    lines = [f"{len(allow)} {cols} {pad_len} {mode}"]
    lines.extend("".join("1" if v else "0" for v in row) for row in allow)
    return "\n".join(lines) + "\n"


# -- gated cross-attention layer -------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(x + 0.5)


def branch_widths(h_llm: int, r_xc: float, r_xf: float) -> tuple[int, int]:
    """(attention inner width, FFN hidden width); both must round to >= 1."""
    a = _round_half_up(r_xc * h_llm)
    f = _round_half_up(r_xf * h_llm)
    if a < 1 or f < 1:
        raise ConfigError(f"branch widths round to ({a}, {f}); need >= 1")
    return a, f


class GatedXAttn:
    """Single-head cross-attention plus FFN, each behind a scalar tanh gate
    initialized at zero so the host stream is untouched at step zero.

    All projections are bias-free: zero-valued keys/values contribute exactly
    nothing, and the gate-zero identity is bit-exact.
    """

    def __init__(
        self,
        h_llm: int,
        d_img: int,
        r_xc: float,
        r_xf: float,
        seed: int,
        prefix: str = "xattn",
    ):
        a, f = branch_widths(h_llm, r_xc, r_xf)
        self.attn_width = a
        self.ffn_width = f

        def w(name: str, shape: tuple[int, int], std: float) -> Tensor:
            return Tensor.randn(shape, derive_seed(seed, f"{prefix}.{name}"), std)

        self.params: dict[str, Tensor] = {
            "wq": w("wq", (h_llm, a), h_llm**-0.5),
            "wk": w("wk", (d_img, a), d_img**-0.5),
            "wv": w("wv", (d_img, a), d_img**-0.5),
            "wo": w("wo", (a, h_llm), a**-0.5),
            "ffn.w_in": w("ffn.w_in", (h_llm, f), h_llm**-0.5),
            "ffn.w_out": w("ffn.w_out", (f, h_llm), f**-0.5),
            "alpha_attn": Tensor.zeros(1, 1),
            "alpha_ffn": Tensor.zeros(1, 1),
        }

    def dense_ffn_branch(
        self, g: Graph, nodes: Mapping[str, Node]
    ) -> Callable[[Node], Node]:
        def branch(h: Node) -> Node:
            return g.matmul(g.gelu(g.matmul(h, nodes["ffn.w_in"])), nodes["ffn.w_out"])

        return branch

    def forward_nodes(
        self,
        g: Graph,
        hidden: Node,
        kv: Node,
        mask: CrossMask,
        nodes: Mapping[str, Node],
        ffn_branch: Callable[[Node], Node] | None = None,
    ) -> Node:
        """hidden + tanh(a_attn)*XAttn(hidden, kv) then + tanh(a_ffn)*FFN(.).

        kv must already carry the pad_len all-zero rows; the mask column count
        must match its row count. ffn_branch swaps in a replacement FFN (the
        MoE block) while staying behind the same gate.
        """
        if len(mask.allow) != hidden.t.rows:
            raise DimensionError(
                f"mask has {len(mask.allow)} rows for {hidden.t.rows} query positions"
            )
        if mask.cols != kv.t.rows:
            raise DimensionError(f"mask has {mask.cols} columns for {kv.t.rows} key rows")
        q = g.matmul(hidden, nodes["wq"])
        k = g.matmul(kv, nodes["wk"])
        v = g.matmul(kv, nodes["wv"])
        scores = g.scale(g.matmul(q, g.transpose(k)), self.attn_width**-0.5)
        attn = g.matmul(g.matmul(g.softmax_masked(scores, mask.allow), v), nodes["wo"])
        h1 = g.add(hidden, g.smul(attn, g.tanh(nodes["alpha_attn"])))
        if ffn_branch is None:
            ffn_branch = self.dense_ffn_branch(g, nodes)
        return g.add(h1, g.smul(ffn_branch(h1), g.tanh(nodes["alpha_ffn"])))

    def forward(
        self, hidden: Tensor, kv: Tensor, mask: CrossMask, ffn_branch=None
    ) -> Tensor:
        g = Graph()
        nodes = {name: g.leaf(t) for name, t in self.params.items()}
        return self.forward_nodes(g, g.leaf(hidden), g.leaf(kv), mask, nodes, ffn_branch).t


def build_padded_kv(g: Graph, taps: Sequence[Node], pad_len: int, d_img: int) -> Node:
    """Stack one tap per image and append pad_len all-zero key/value rows."""
    if pad_len <= 0:
        raise ConfigError("pad_len must be positive")
    pad = g.constant(Tensor.zeros(pad_len, d_img))
    return g.concat_rows([*taps, pad])
