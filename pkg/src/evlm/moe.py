"""Fine-grained Mixture-of-Experts built by upcycling a dense FFN: replicate
the FFN N times, slice each replica's hidden units into M narrow experts, and
add an always-on full-width world expert. Routing is token-choice top-k with
softmax-renormalized gates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from .errors import ConfigError, DimensionError
from .numerics import Graph, Node, Tensor, derive_seed


@dataclass(frozen=True)
class MoEConfig:
    n_replicas: int = 4
    segments: int = 4
    top_k: int = 4
    use_world_expert: bool = True
    aux_loss_weight: float = 0.0

    def __post_init__(self):
        if self.n_replicas < 1 or self.segments < 1:
            raise ConfigError("n_replicas and segments must be >= 1")
        if not 1 <= self.top_k <= self.n_replicas * self.segments:
            raise ConfigError(f"top_k must be in [1, {self.n_replicas * self.segments}]")
        if self.aux_loss_weight < 0:
            raise ConfigError("aux_loss_weight must be >= 0")

    @property
    def num_experts(self) -> int:
        return self.n_replicas * self.segments


@dataclass
class DenseFFN:
    """Bias-free two-matrix block: expand h -> H, gelu, contract H -> h."""

    w_in: Tensor  # (h, H)
    w_out: Tensor  # (H, h)

    @classmethod
    def init(cls, h: int, hidden: int, seed: int, prefix: str = "ffn") -> "DenseFFN":
        return cls(
            Tensor.randn((h, hidden), derive_seed(seed, f"{prefix}.w_in"), h**-0.5),
            Tensor.randn((hidden, h), derive_seed(seed, f"{prefix}.w_out"), hidden**-0.5),
        )

    @property
    def width(self) -> int:
        return self.w_in.shape[0]

    @property
    def hidden(self) -> int:
        return self.w_in.shape[1]

    def apply_nodes(self, g: Graph, x: Node, w_in: Node, w_out: Node) -> Node:
        return g.matmul(g.gelu(g.matmul(x, w_in)), w_out)

    def apply(self, x: Tensor) -> Tensor:
        g = Graph()
        return self.apply_nodes(g, g.leaf(x), g.leaf(self.w_in), g.leaf(self.w_out)).t


@dataclass
class RoutingStats:
    """Plain per-batch record of router behavior (CLI-reportable).

    Set prob_nodes to an empty list before the forward pass to additionally
    collect the per-token full-softmax probabilities as graph nodes, which
    keeps the aux loss differentiable.
    """

    num_experts: int
    tokens: int = 0
    assignments: list[int] = field(default_factory=list)  # per expert, over tokens*k slots
    prob_sums: list[float] = field(default_factory=list)  # full-softmax prob mass per expert
    prob_nodes: list[Node] | None = None

    def __post_init__(self):
        if not self.assignments:
            self.assignments = [0] * self.num_experts
        if not self.prob_sums:
            self.prob_sums = [0.0] * self.num_experts


@dataclass
class ExpertBank:
    """N*M slice-experts plus the world expert and the routing layer.

    At initialization expert (r, m) is the m-th hidden slice of replica r of
    the dense FFN, so summing one replica's experts reproduces the dense
    output, and the world expert is a verbatim copy.
    """

    cfg: MoEConfig
    experts: list[DenseFFN]  # index r * segments + m
    world: DenseFFN
    router: Tensor  # (h, N*M), zero-initialized

    def param_items(self, prefix: str = "moe") -> list[tuple[str, Tensor]]:
        items: list[tuple[str, Tensor]] = [(f"{prefix}.router", self.router)]
        for i, e in enumerate(self.experts):
            items.append((f"{prefix}.expert{i}.w_in", e.w_in))
            items.append((f"{prefix}.expert{i}.w_out", e.w_out))
        items.append((f"{prefix}.world.w_in", self.world.w_in))
        items.append((f"{prefix}.world.w_out", self.world.w_out))
        return items


def upcycle(dense: DenseFFN, cfg: MoEConfig) -> ExpertBank:
    """Replicate-and-segment the dense FFN into an expert bank.

    Slicing along the hidden dimension is the unique split with the exact
    slice-sum identity sum_m expert_(r,m)(x) == dense(x).
    """
    h, hidden = dense.width, dense.hidden
    if hidden % cfg.segments != 0:
        raise ConfigError(f"segments={cfg.segments} does not divide hidden width {hidden}")
    sw = hidden // cfg.segments
    experts: list[DenseFFN] = []
    for _r in range(cfg.n_replicas):
        for m in range(cfg.segments):
            lo, hi = m * sw, (m + 1) * sw
            w_in = Tensor(
                (h, sw),
                [dense.w_in.data[i * hidden + j] for i in range(h) for j in range(lo, hi)],
                check=False,
            )
            w_out = Tensor((sw, h), dense.w_out.data[lo * h : hi * h].copy(), check=False)
            experts.append(DenseFFN(w_in, w_out))
    return ExpertBank(
        cfg=cfg,
        experts=experts,
        world=DenseFFN(dense.w_in.copy(), dense.w_out.copy()),
        router=Tensor.zeros(h, cfg.num_experts),
    )


def route(x: Tensor, bank: ExpertBank) -> tuple[list[int], list[float]]:
    """Top-k expert indices for one token plus softmax-renormalized gates.

    Ties break deterministically toward the lower expert index.
    """
    if x.shape != (1, bank.router.shape[0]):
        raise DimensionError(f"route expects (1, {bank.router.shape[0]}), got {x.shape}")
    g = Graph()
    logits = g.matmul(g.leaf(x), g.leaf(bank.router)).t.data
    order = sorted(range(len(logits)), key=lambda i: (-logits[i], i))
    chosen = sorted(order[: bank.cfg.top_k])
    gates = (
        g.softmax_masked(
            g.leaf(Tensor((1, len(chosen)), [logits[i] for i in chosen])),
            [[True] * len(chosen)],
        )
        .t.data
    )
    return chosen, gates


def moe_forward_nodes(
    g: Graph,
    x: Node,
    bank: ExpertBank,
    nodes: Mapping[str, Node],
    prefix: str = "moe",
    stats: RoutingStats | None = None,
    unit_gates: bool = False,
) -> Node:
    """Per token: world(x) + sum over top-k of gate_i * expert_i(x).

    Differentiable through the selected gates and every active expert; the
    hard selection itself is treated as locally constant. unit_gates is a
    test hook that skips gate renormalization (every selected gate is 1).
    """
    cfg = bank.cfg
    n_tok, h = x.t.shape
    if h != bank.router.shape[0]:
        raise DimensionError(f"token width {h} != router input {bank.router.shape[0]}")
    router = nodes[f"{prefix}.router"]
    all_true_k = [[True] * cfg.top_k]
    out_rows: list[Node] = []
    for i in range(n_tok):
        row = g.row_select(x, [i])
        logits = g.matmul(row, router)  # (1, N*M)
        lvals = logits.t.data
        order = sorted(range(cfg.num_experts), key=lambda j: (-lvals[j], j))
        chosen = sorted(order[: cfg.top_k])
        gates = None if unit_gates else g.softmax_masked(g.col_select(logits, chosen), all_true_k)
        acc: Node | None = None
        for slot, ei in enumerate(chosen):
            e = bank.experts[ei]
            out = e.apply_nodes(
                g, row, nodes[f"{prefix}.expert{ei}.w_in"], nodes[f"{prefix}.expert{ei}.w_out"]
            )
            gated = out if gates is None else g.smul(out, g.col_select(gates, [slot]))
            acc = gated if acc is None else g.add(acc, gated)
        if cfg.use_world_expert:
            world = bank.world.apply_nodes(
                g, row, nodes[f"{prefix}.world.w_in"], nodes[f"{prefix}.world.w_out"]
            )
            acc = world if acc is None else g.add(acc, world)
        out_rows.append(acc)
        if stats is not None:
            stats.tokens += 1
            for ei in chosen:
                stats.assignments[ei] += 1
            full = g.softmax_masked(logits, [[True] * cfg.num_experts])
            for ei in range(cfg.num_experts):
                stats.prob_sums[ei] += full.t.data[ei]
            if stats.prob_nodes is not None:
                stats.prob_nodes.append(full)
    return g.concat_rows(out_rows)


def moe_forward(
    x: Tensor, bank: ExpertBank, stats: RoutingStats | None = None, unit_gates: bool = False
) -> Tensor:
    g = Graph()
    nodes = {name: g.leaf(t) for name, t in bank.param_items()}
    return moe_forward_nodes(g, g.leaf(x), bank, nodes, stats=stats, unit_gates=unit_gates).t


def aux_load_balance_loss(stats: RoutingStats) -> float:
    """Load-balance penalty NM * sum_e f_e * P_e (pre-weight).

    f_e is expert e's fraction of routing slots and P_e its mean full-softmax
    probability; perfectly uniform routing scores exactly 1.
    """
    if stats.tokens == 0:
        return 0.0
    slots = sum(stats.assignments)
    n = stats.num_experts
    return n * sum(
        (a / slots) * (p / stats.tokens) for a, p in zip(stats.assignments, stats.prob_sums)
    )


def aux_loss_node(g: Graph, stats: RoutingStats) -> Node:
    """Differentiable counterpart of aux_load_balance_loss; gradients reach
    the router through the softmax probabilities while the routed fractions
    are treated as locally constant."""
    if stats.prob_nodes is None or stats.tokens == 0:
        raise ConfigError("stats were collected without prob_nodes")
    probs = g.concat_rows(stats.prob_nodes)  # (tokens, N*M)
    mean = g.matmul(g.constant(Tensor.full((1, stats.tokens), 1.0 / stats.tokens)), probs)
    slots = sum(stats.assignments)
    fractions = g.constant(
        Tensor((stats.num_experts, 1), [a / slots for a in stats.assignments])
    )
    return g.scale(g.matmul(mean, fractions), float(stats.num_experts))
