"""Toy decoder LM with a gated cross-attention layer before every decoder
block, text-only cross-entropy, stage-wise freezing, a synthetic smoke
training loop, and the loss-argmin classification probe."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import ConfigError, ContractViolationError, DimensionError, SequenceError
from .fusion import (
    GatedXAttn,
    ImageMarker,
    InterleavedSequence,
    MediaSlot,
    Text,
    build_cross_mask_image,
    build_cross_mask_video,
    build_padded_kv,
    build_self_mask,
    insert_media_tokens,
)
from .moe import DenseFFN, ExpertBank, MoEConfig, RoutingStats, aux_loss_node, moe_forward_nodes, upcycle
from .numerics import Graph, Node, Tensor, derive_seed
from .vision import EncoderConfig, VisionEncoder, assign_taps_to_xattn

ALL_GROUPS = (
    "llm",
    "xattn",
    "vit_front",
    "vit_back_half",
    "vit_last_quarter",
    "media_tokens",
    "moe",
)

# Trainable groups per training stage. Stage two and continual unfreeze the
# whole latter half of the visual encoder, i.e. both back-half groups.
STAGE_TRAINABLE = {
    "pretrain_phase1": frozenset({"xattn", "media_tokens"}),
    "pretrain_phase2": frozenset({"xattn", "media_tokens", "vit_back_half", "vit_last_quarter"}),
    "continual": frozenset({"xattn", "media_tokens", "vit_back_half", "vit_last_quarter"}),
    "sft": frozenset({"xattn", "media_tokens", "moe", "vit_last_quarter"}),
}


def freeze_stage(stage: str) -> dict[str, bool]:
    """Trainability of every parameter group in the given stage."""
    if stage not in STAGE_TRAINABLE:
        raise ConfigError(f"unknown stage {stage!r} (expected one of {sorted(STAGE_TRAINABLE)})")
    trainable = STAGE_TRAINABLE[stage]
    return {group: group in trainable for group in ALL_GROUPS}


@dataclass(frozen=True)
class ModelConfig:
    llm_layers: int
    h_llm: int
    heads: int
    vocab: int
    media_len: int = 16
    r_xc: float = 0.2
    r_xf: float = 0.5
    moe: MoEConfig | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mask_mode: str = "image"
    pad_len: int = 1
    ffn_mult: int = 4  # decoder FFN width relative to h_llm
    max_seq: int = 64  # positional table size

    def __post_init__(self):
        if self.llm_layers < self.encoder.num_taps:
            raise ConfigError("llm_layers must be >= encoder.num_taps")
        if self.h_llm % self.heads != 0:
            raise ConfigError(f"heads={self.heads} must divide h_llm={self.h_llm}")
        for name in ("r_xc", "r_xf"):
            r = getattr(self, name)
            if not 0.0 < r <= 1.0:
                raise ConfigError(f"{name}={r} outside (0, 1]")
        if self.mask_mode not in ("image", "video"):
            raise ConfigError(f"mask_mode must be image or video, got {self.mask_mode!r}")
        if self.vocab < 2 or self.media_len < 1 or self.pad_len < 1:
            raise ConfigError("vocab >= 2, media_len >= 1, pad_len >= 1 required")


def next_token_targets(seq: InterleavedSequence) -> tuple[list[int], list[bool]]:
    """Next-token ids over the stream plus the text-only loss mask: position i
    contributes exactly when the token it predicts (i+1) is a text element."""
    n = len(seq)
    targets = [0] * n
    mask = [False] * n
    for i in range(n - 1):
        nxt = seq.elements[i + 1]
        if isinstance(nxt, Text):
            targets[i] = nxt.token
            mask[i] = True
    return targets, mask


class FusedModel:
    """Owns every parameter tensor, grouped for stage-wise freezing."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        h, v = cfg.h_llm, cfg.vocab
        self.vision = VisionEncoder(cfg.encoder, seed, prefix="vision")
        self.tap_assignment = assign_taps_to_xattn(cfg.encoder.num_taps, cfg.llm_layers)

        params: dict[str, Tensor] = {}
        group_of: dict[str, str] = {}

        def reg(name: str, t: Tensor, group: str) -> None:
            params[name] = t
            group_of[name] = group

        # visual encoder, grouped front / back-half / last-quarter by depth
        layers = cfg.encoder.layers
        quarter_start = layers - math.ceil(layers / 4)
        half_start = layers - math.ceil(layers / 2)
        for name, t in self.vision.params.items():
            i = VisionEncoder.block_index(name)
            if i >= quarter_start:
                group = "vit_last_quarter"
            elif i >= half_start:
                group = "vit_back_half"
            else:
                group = "vit_front"
            reg(f"vision.{name}", t, group)

        # shared media-token table, one row per slot, reused for every image
        reg("media.table", Tensor.randn((cfg.media_len, h), derive_seed(seed, "media.table"), h**-0.5), "media_tokens")

        # decoder
        reg("llm.tok_emb", Tensor.randn((v, h), derive_seed(seed, "llm.tok_emb"), h**-0.5), "llm")
        reg("llm.pos_emb", Tensor.randn((cfg.max_seq, h), derive_seed(seed, "llm.pos_emb"), h**-0.5), "llm")
        fh = cfg.ffn_mult * h
        for t in range(cfg.llm_layers):
            b = f"llm.block{t}."
            for w in ("wq", "wk", "wv", "wo"):
                reg(b + w, Tensor.randn((h, h), derive_seed(seed, b + w), h**-0.5), "llm")
            reg(b + "ln1.gain", Tensor.full((1, h), 1.0), "llm")
            reg(b + "ln1.bias", Tensor.zeros(1, h), "llm")
            reg(b + "ln2.gain", Tensor.full((1, h), 1.0), "llm")
            reg(b + "ln2.bias", Tensor.zeros(1, h), "llm")
            reg(b + "w_in", Tensor.randn((h, fh), derive_seed(seed, b + "w_in"), h**-0.5), "llm")
            reg(b + "w_out", Tensor.randn((fh, h), derive_seed(seed, b + "w_out"), fh**-0.5), "llm")
        reg("llm.ln_f.gain", Tensor.full((1, h), 1.0), "llm")
        reg("llm.ln_f.bias", Tensor.zeros(1, h), "llm")
        reg("llm.head", Tensor.randn((h, v), derive_seed(seed, "llm.head"), h**-0.5), "llm")

        # one gated cross-attention layer before every decoder layer
        self.xattn_layers: list[GatedXAttn] = []
        self.banks: list[ExpertBank] | None = [] if cfg.moe is not None else None
        for t in range(cfg.llm_layers):
            layer = GatedXAttn(
                h, cfg.encoder.feature_dim, cfg.r_xc, cfg.r_xf, seed, prefix=f"xattn.{t}"
            )
            self.xattn_layers.append(layer)
            prefix = f"xattn.{t}."
            if cfg.moe is None:
                for name, t_param in layer.params.items():
                    reg(prefix + name, t_param, "xattn")
            else:
                # the dense FFN is consumed by upcycling; the bank replaces it
                dense = DenseFFN(layer.params.pop("ffn.w_in"), layer.params.pop("ffn.w_out"))
                for name, t_param in layer.params.items():
                    reg(prefix + name, t_param, "xattn")
                bank = upcycle(dense, cfg.moe)
                self.banks.append(bank)
                for name, t_param in bank.param_items(prefix=f"xattn.{t}.moe"):
                    reg(name, t_param, "moe")

        self.params = params
        self.group_of = group_of
        self.meta: dict[str, str] = {}  # free-form checkpoint metadata
        self.last_routing_stats: list[RoutingStats] | None = None  # per xattn layer

    # -- parameter plumbing -------------------------------------------------

    def param_nodes(self, g: Graph) -> dict[str, Node]:
        return {name: g.param(t) for name, t in self.params.items()}

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {group: [] for group in ALL_GROUPS}
        for name, group in self.group_of.items():
            out[group].append(name)
        return out

    def freeze_stage(self, stage: str) -> dict[str, bool]:
        return freeze_stage(stage)

    # -- forward -----------------------------------------------------------

    def encode_images(
        self, g: Graph, images: Sequence[Tensor], nodes: Mapping[str, Node]
    ) -> list[list[Node]]:
        """Per image, the tapped feature sequences (inside this graph)."""
        vision_nodes = {
            name.removeprefix("vision."): node
            for name, node in nodes.items()
            if name.startswith("vision.")
        }
        taps = []
        for patches in images:
            feats = self.vision.encode_nodes(g, g.constant(patches), vision_nodes)
            taps.append(feats.taps)
        return taps

    def encode_images_tensors(self, images: Sequence[Tensor]) -> list[list[Tensor]]:
        """Frozen-vision fast path: encode once outside any training graph."""
        return [self.vision.encode(p).taps for p in images]

    def _embed_stream(self, g: Graph, seq: InterleavedSequence, nodes: Mapping[str, Node]) -> Node:
        n = len(seq)
        if n == 0:
            raise SequenceError("empty sequence")
        if n > self.cfg.max_seq:
            raise DimensionError(f"sequence length {n} exceeds max_seq {self.cfg.max_seq}")
        text_ids = [e.token for e in seq.elements if isinstance(e, Text)]
        slot_ids = [e.slot for e in seq.elements if isinstance(e, MediaSlot)]
        if any(not 0 <= t < self.cfg.vocab for t in text_ids):
            raise SequenceError("token id outside vocabulary")
        parts: list[Node] = []
        if text_ids:
            parts.append(g.row_select(nodes["llm.tok_emb"], text_ids))
        if slot_ids:
            parts.append(g.row_select(nodes["media.table"], slot_ids))
        cat = parts[0] if len(parts) == 1 else g.concat_rows(parts)
        perm = []
        t_seen = m_seen = 0
        for e in seq.elements:
            if isinstance(e, Text):
                perm.append(t_seen)
                t_seen += 1
            else:
                perm.append(len(text_ids) + m_seen)
                m_seen += 1
        emb = g.row_select(cat, perm)
        pos = g.row_select(nodes["llm.pos_emb"], list(range(n)))
        return g.add(emb, pos)

    def _decoder_block(
        self, g: Graph, x: Node, t: int, self_mask: list[list[bool]], nodes: Mapping[str, Node]
    ) -> Node:
        cfg = self.cfg
        b = f"llm.block{t}."
        h = cfg.h_llm
        hd = h // cfg.heads
        hn = g.layer_norm(x, nodes[b + "ln1.gain"], nodes[b + "ln1.bias"])
        q = g.matmul(hn, nodes[b + "wq"])
        k = g.matmul(hn, nodes[b + "wk"])
        v = g.matmul(hn, nodes[b + "wv"])
        heads_out = []
        inv = hd**-0.5
        for head in range(cfg.heads):
            lo, hi = head * hd, (head + 1) * hd
            qh, kh, vh = (g.col_slice(m, lo, hi) for m in (q, k, v))
            probs = g.softmax_masked(g.scale(g.matmul(qh, g.transpose(kh)), inv), self_mask)
            heads_out.append(g.matmul(probs, vh))
        merged = heads_out[0] if len(heads_out) == 1 else g.concat_cols(heads_out)
        x = g.add(x, g.matmul(merged, nodes[b + "wo"]))
        hn = g.layer_norm(x, nodes[b + "ln2.gain"], nodes[b + "ln2.bias"])
        return g.add(x, g.matmul(g.gelu(g.matmul(hn, nodes[b + "w_in"])), nodes[b + "w_out"]))

    def forward_nodes(
        self,
        g: Graph,
        seq: InterleavedSequence,
        taps: Sequence[Sequence[Node]],
        nodes: Mapping[str, Node],
        text_only: bool = False,
        mask_mode: str | None = None,
        moe_stats: dict[int, RoutingStats] | None = None,
    ) -> Node:
        """Logits over the interleaved stream; taps is one tap list per image
        (already nodes of g), ignored when text_only."""
        cfg = self.cfg
        if not text_only and len(taps) != seq.num_images:
            raise DimensionError(f"{seq.num_images} images in sequence, {len(taps)} tap lists")
        x = self._embed_stream(g, seq, nodes)
        self_mask = build_self_mask(seq)
        if not text_only:
            mode = mask_mode or cfg.mask_mode
            builder = build_cross_mask_image if mode == "image" else build_cross_mask_video
            cross_mask = builder(seq, cfg.encoder.patch_count, cfg.pad_len)
            kv_cache: dict[int, Node] = {}
        for t in range(cfg.llm_layers):
            if not text_only:
                j = self.tap_assignment[t]
                if j not in kv_cache:
                    kv_cache[j] = build_padded_kv(
                        g, [img_taps[j] for img_taps in taps], cfg.pad_len, cfg.encoder.feature_dim
                    )
                layer = self.xattn_layers[t]
                prefix = f"xattn.{t}."
                lnodes = {name: nodes[prefix + name] for name in layer.params}
                ffn_branch = None
                if self.banks is not None:
                    bank = self.banks[t]
                    stats = None
                    if moe_stats is not None:
                        if t not in moe_stats:  # shared across samples in one graph
                            moe_stats[t] = RoutingStats(
                                bank.cfg.num_experts,
                                prob_nodes=[] if bank.cfg.aux_loss_weight > 0 else None,
                            )
                        stats = moe_stats[t]
                    moe_prefix = f"xattn.{t}.moe"

                    def ffn_branch(h1, _bank=bank, _stats=stats, _prefix=moe_prefix):
                        return moe_forward_nodes(g, h1, _bank, nodes, prefix=_prefix, stats=_stats)

                x = layer.forward_nodes(g, x, kv_cache[j], cross_mask, lnodes, ffn_branch=ffn_branch)
            x = self._decoder_block(g, x, t, self_mask, nodes)
        x = g.layer_norm(x, nodes["llm.ln_f.gain"], nodes["llm.ln_f.bias"])
        return g.matmul(x, nodes["llm.head"])

    def forward(
        self,
        seq: InterleavedSequence,
        images: Sequence[Tensor] = (),
        text_only: bool = False,
        mask_mode: str | None = None,
    ) -> Tensor:
        g = Graph()
        nodes = self.param_nodes(g)
        taps = [] if text_only else self.encode_images(g, images, nodes)
        return self.forward_nodes(g, seq, taps, nodes, text_only=text_only, mask_mode=mask_mode).t

    # -- loss ----------------------------------------------------------------

    def loss_nodes(
        self,
        g: Graph,
        logits: Node,
        seq: InterleavedSequence,
        targets: Sequence[int] | None = None,
    ) -> Node:
        tgt, mask = next_token_targets(seq)
        if targets is not None:
            tgt = list(targets)
        if not any(mask):
            raise ContractViolationError("sequence has no text predictions to score")
        return g.cross_entropy(logits, tgt, mask)

    def loss(
        self,
        seq: InterleavedSequence,
        images: Sequence[Tensor] = (),
        targets: Sequence[int] | None = None,
        mask_mode: str | None = None,
    ) -> float:
        g = Graph()
        nodes = self.param_nodes(g)
        taps = self.encode_images(g, images, nodes)
        logits = self.forward_nodes(g, seq, taps, nodes, mask_mode=mask_mode)
        return self.loss_nodes(g, logits, seq, targets).t.item()

    # -- training ---------------------------------------------------------------

    def sgd_step(
        self,
        batch: Sequence[tuple[InterleavedSequence, Sequence[Tensor] | Sequence[Sequence[Tensor]]]],
        lr: float,
        trainable_groups: Mapping[str, bool],
        taps_precomputed: bool = False,
    ) -> float:
        """One full-batch SGD step; returns the pre-step batch loss.

        With taps_precomputed, each batch entry carries per-image tap tensor
        lists (frozen-vision fast path) instead of raw patch tensors.
        """
        if not batch:
            raise ConfigError("empty batch")
        g = Graph()
        nodes = self.param_nodes(g)
        total: Node | None = None
        moe_stats: dict[int, RoutingStats] | None = {} if self.banks is not None else None
        for seq, imgs in batch:
            if taps_precomputed:
                taps = [[g.constant(t) for t in img_taps] for img_taps in imgs]
            else:
                taps = self.encode_images(g, imgs, nodes)
            logits = self.forward_nodes(g, seq, taps, nodes, moe_stats=moe_stats)
            sample_loss = self.loss_nodes(g, logits, seq)
            total = sample_loss if total is None else g.add(total, sample_loss)
        mean = g.scale(total, 1.0 / len(batch))
        if self.cfg.moe is not None and self.cfg.moe.aux_loss_weight > 0 and moe_stats:
            aux_total: Node | None = None
            for stats in moe_stats.values():
                term = aux_loss_node(g, stats)
                aux_total = term if aux_total is None else g.add(aux_total, term)
            weight = self.cfg.moe.aux_loss_weight / len(moe_stats)
            mean = g.add(mean, g.scale(aux_total, weight))
        if moe_stats is not None:
            # plain copies (no graph references) for reporting
            self.last_routing_stats = [
                RoutingStats(s.num_experts, s.tokens, list(s.assignments), list(s.prob_sums))
                for _, s in sorted(moe_stats.items())
            ]
        g.backward(mean)
        for name, t in self.params.items():
            if trainable_groups.get(self.group_of[name], False):
                grad = g.grad(nodes[name]).data
                data = t.data
                for i, gv in enumerate(grad):
                    data[i] -= lr * gv
        return mean.t.item()


# -- synthetic smoke task ----------------------------------------------------

TOK_BOS = 0
TOK_SHOWS = 1
TOK_CLASS_BASE = 2  # class c is token TOK_CLASS_BASE + c


def caption_tokens(class_id: int) -> list[int]:
    return [TOK_BOS, TOK_SHOWS, TOK_CLASS_BASE + class_id]


def synthetic_patches(
    enc: EncoderConfig, class_id: int, sample: int, seed: int, noise: float = 0.25
) -> Tensor:
    """Class-specific base pattern plus per-sample Gaussian jitter."""
    shape = (enc.patch_count, enc.feature_dim)
    base = Tensor.randn(shape, derive_seed(seed, f"smoke.class{class_id}"))
    jitter = Tensor.randn(shape, derive_seed(seed, f"smoke.sample{class_id}.{sample}"), noise)
    return Tensor(shape, [a + b for a, b in zip(base.data, jitter.data)], check=False)


def caption_sequence(cfg: ModelConfig, class_id: int) -> InterleavedSequence:
    return insert_media_tokens(
        [ImageMarker(0), *caption_tokens(class_id)], media_len=cfg.media_len
    )


@dataclass
class SmokeResult:
    model: FusedModel
    losses: list[float]  # initial loss followed by the loss after each step

    @property
    def converged(self) -> bool:
        return len(self.losses) > 1 and self.losses[-1] < 0.5 * self.losses[0]


def smoke_config() -> ModelConfig:
    """Default toy configuration for the synthetic 4-class task."""
    return ModelConfig(
        llm_layers=2,
        h_llm=16,
        heads=2,
        vocab=12,
        media_len=8,
        encoder=EncoderConfig(layers=4, patch_count=5, feature_dim=8, tap_window=4, num_taps=2),
        max_seq=32,
    )


def train_smoke(
    cfg: ModelConfig,
    steps: int,
    seed: int,
    lr: float = 0.5,
    stage: str = "pretrain_phase1",
    classes: int = 4,
    per_class: int = 2,
) -> SmokeResult:
    """Full-batch SGD on the deterministic captioned-classes task.

    The dataset is generated in-process from the seed. When the stage freezes
    the whole visual encoder, image taps are encoded once up front.
    """
    if classes < 1 or per_class < 1:
        raise ConfigError("classes and per_class must be >= 1")
    if cfg.vocab < TOK_CLASS_BASE + classes:
        raise ConfigError(f"vocab must be >= {TOK_CLASS_BASE + classes} for {classes} classes")
    model = FusedModel(cfg, seed)
    trainable = model.freeze_stage(stage)
    vision_frozen = not any(
        trainable[group] for group in ("vit_front", "vit_back_half", "vit_last_quarter")
    )

    batch = []
    for c in range(classes):
        seq = caption_sequence(cfg, c)
        for s in range(per_class):
            patches = synthetic_patches(cfg.encoder, c, s, seed)
            imgs = model.encode_images_tensors([patches]) if vision_frozen else [patches]
            batch.append((seq, imgs))

    losses = []
    for _ in range(steps):
        losses.append(model.sgd_step(batch, lr, trainable, taps_precomputed=vision_frozen))
    # evaluate the final state so the curve is steps+1 long
    losses.append(model.sgd_step(batch, 0.0, {}, taps_precomputed=vision_frozen))
    return SmokeResult(model=model, losses=losses)


def loss_probe(
    model: FusedModel, patches: Tensor, candidates: Sequence[Sequence[int]]
) -> tuple[int, list[float]]:
    """Index of the candidate caption with the lowest loss (ties -> lowest
    index) plus the per-candidate losses."""
    if not candidates:
        raise ConfigError("loss_probe needs at least one candidate")
    losses = []
    for tokens in candidates:
        seq = insert_media_tokens([ImageMarker(0), *tokens], media_len=model.cfg.media_len)
        losses.append(model.loss(seq, [patches]))
    best = min(range(len(losses)), key=lambda i: (losses[i], i))
    return best, losses


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = "evlm-checkpoint v1"


def _config_pairs(cfg: ModelConfig) -> list[tuple[str, str]]:
    pairs = [
        ("llm_layers", str(cfg.llm_layers)),
        ("h_llm", str(cfg.h_llm)),
        ("heads", str(cfg.heads)),
        ("vocab", str(cfg.vocab)),
        ("media_len", str(cfg.media_len)),
        ("r_xc", repr(cfg.r_xc)),
        ("r_xf", repr(cfg.r_xf)),
        ("mask_mode", cfg.mask_mode),
        ("pad_len", str(cfg.pad_len)),
        ("ffn_mult", str(cfg.ffn_mult)),
        ("max_seq", str(cfg.max_seq)),
        ("encoder.layers", str(cfg.encoder.layers)),
        ("encoder.patch_count", str(cfg.encoder.patch_count)),
        ("encoder.feature_dim", str(cfg.encoder.feature_dim)),
        ("encoder.tap_window", str(cfg.encoder.tap_window)),
        ("encoder.num_taps", str(cfg.encoder.num_taps)),
        ("moe.enabled", "1" if cfg.moe else "0"),
    ]
    if cfg.moe:
        pairs += [
            ("moe.n_replicas", str(cfg.moe.n_replicas)),
            ("moe.segments", str(cfg.moe.segments)),
            ("moe.top_k", str(cfg.moe.top_k)),
            ("moe.use_world_expert", "1" if cfg.moe.use_world_expert else "0"),
            ("moe.aux_loss_weight", repr(cfg.moe.aux_loss_weight)),
        ]
    return pairs


def _config_from_pairs(kv: dict[str, str]) -> ModelConfig:
    moe = None
    if kv.get("moe.enabled") == "1":
        moe = MoEConfig(
            n_replicas=int(kv["moe.n_replicas"]),
            segments=int(kv["moe.segments"]),
            top_k=int(kv["moe.top_k"]),
            use_world_expert=kv["moe.use_world_expert"] == "1",
            aux_loss_weight=float(kv["moe.aux_loss_weight"]),
        )
    return ModelConfig(
        llm_layers=int(kv["llm_layers"]),
        h_llm=int(kv["h_llm"]),
        heads=int(kv["heads"]),
        vocab=int(kv["vocab"]),
        media_len=int(kv["media_len"]),
        r_xc=float(kv["r_xc"]),
        r_xf=float(kv["r_xf"]),
        moe=moe,
        encoder=EncoderConfig(
            layers=int(kv["encoder.layers"]),
            patch_count=int(kv["encoder.patch_count"]),
            feature_dim=int(kv["encoder.feature_dim"]),
            tap_window=int(kv["encoder.tap_window"]),
            num_taps=int(kv["encoder.num_taps"]),
        ),
        mask_mode=kv["mask_mode"],
        pad_len=int(kv["pad_len"]),
        ffn_mult=int(kv["ffn_mult"]),
        max_seq=int(kv["max_seq"]),
    )


def save_checkpoint(model: FusedModel, path: str) -> None:
    """Flat text manifest: version, config echo, metadata, then per-parameter
    group, name, shape, and repr'd float data (bit-exact round trip)."""
    lines = [CHECKPOINT_MAGIC]
    lines.extend(f"config {k}={v}" for k, v in _config_pairs(model.cfg))
    lines.extend(f"meta {k}={v}" for k, v in sorted(model.meta.items()))
    for name in sorted(model.params):
        t = model.params[name]
        shape = " ".join(str(s) for s in t.shape)
        lines.append(f"param {model.group_of[name]} {name} {shape}")
        lines.append(" ".join(repr(v) for v in t.data))
    lines.append("end")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path: str) -> FusedModel:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not a recognized checkpoint")
    kv: dict[str, str] = {}
    meta: dict[str, str] = {}
    i = 1
    while i < len(lines) and lines[i].startswith(("config ", "meta ")):
        kind, _, rest = lines[i].partition(" ")
        key, _, value = rest.partition("=")
        (kv if kind == "config" else meta)[key] = value
        i += 1
    model = FusedModel(_config_from_pairs(kv), seed=0)
    model.meta = meta
    seen: set[str] = set()
    while i < len(lines) and lines[i] != "end":
        head = lines[i].split()
        if head[0] != "param" or len(head) < 4:
            raise ConfigError(f"malformed checkpoint line: {lines[i]!r}")
        _, group, name, *shape = head
        data = [float(v) for v in lines[i + 1].split()]
        if name not in model.params:
            raise ConfigError(f"checkpoint has unknown parameter {name}")
        expect = model.params[name]
        if tuple(int(s) for s in shape) != expect.shape:
            raise ConfigError(f"shape mismatch for {name}")
        if model.group_of[name] != group:
            raise ConfigError(f"group mismatch for {name}")
        expect.data[:] = data
        seen.add(name)
        i += 2
    if seen != set(model.params):
        missing = sorted(set(model.params) - seen)
        raise ConfigError(f"checkpoint missing parameters, e.g. {missing[:3]}")
    return model
