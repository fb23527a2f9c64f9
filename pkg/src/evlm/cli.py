"""Single command-line entry point: cost reports, mask dumps, smoke training,
the loss-argmin probe, and the upcycling identity check.

Exit codes are a stable contract: 0 success, 2 usage/config error,
3 convergence criterion unmet, 4 numeric failure, 5 invariant violation.
All randomness is controlled by the root seed; EVLM_SEED overrides config
defaults (an explicit --seed flag outranks both).
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from dataclasses import dataclass

from .errors import ContractViolationError, EvlmError, NonFiniteError
from .flops import (
    FlopsScenario,
    format_report_record,
    format_report_table,
    preset,
    ratio,
)
from .fusion import ImageMarker, build_cross_mask_image, build_cross_mask_video, format_mask_dump, insert_media_tokens
from .model import (
    ModelConfig,
    caption_tokens,
    load_checkpoint,
    loss_probe,
    save_checkpoint,
    smoke_config,
    synthetic_patches,
    train_smoke,
)
from .moe import DenseFFN, MoEConfig, upcycle
from .numerics import Tensor, derive_seed
from .vision import EncoderConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CRITERION = 3
EXIT_NUMERIC = 4
EXIT_INVARIANT = 5

UPCYCLE_TOL = 1e-12


# -- run configuration --------------------------------------------------------


@dataclass
class RunConfig:
    model: ModelConfig
    seed: int = 0
    steps: int = 200
    lr: float = 0.5
    stage: str = "pretrain_phase1"
    classes: int = 4
    per_class: int = 2


_ALLOWED_KEYS = {
    "run": {"seed"},
    "model": {
        "llm_layers",
        "h_llm",
        "heads",
        "vocab",
        "media_len",
        "r_xc",
        "r_xf",
        "mask_mode",
        "pad_len",
        "ffn_mult",
        "max_seq",
    },
    "encoder": {"layers", "patch_count", "feature_dim", "tap_window", "num_taps"},
    "moe": {"enabled", "n_replicas", "segments", "top_k", "use_world_expert", "aux_loss_weight"},
    "train": {"steps", "lr", "stage", "classes", "per_class"},
}


def load_run_config(path: str) -> RunConfig:
    """key=value sections mirroring the model/encoder/moe configs; unknown
    keys are rejected and every dataclass invariant is re-validated."""
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path)
    if not read:
        raise EvlmError(f"cannot read config file {path!r}")
    for section in parser.sections():
        if section not in _ALLOWED_KEYS:
            raise EvlmError(f"unknown config section [{section}]")
        unknown = set(parser[section]) - _ALLOWED_KEYS[section]
        if unknown:
            raise EvlmError(f"unknown keys in [{section}]: {sorted(unknown)}")

    base = smoke_config()

    def get(section, key, cast, default):
        if parser.has_option(section, key):
            return cast(parser.get(section, key))
        return default

    encoder = EncoderConfig(
        layers=get("encoder", "layers", int, base.encoder.layers),
        patch_count=get("encoder", "patch_count", int, base.encoder.patch_count),
        feature_dim=get("encoder", "feature_dim", int, base.encoder.feature_dim),
        tap_window=get("encoder", "tap_window", int, base.encoder.tap_window),
        num_taps=get("encoder", "num_taps", int, base.encoder.num_taps),
    )
    moe = None
    if get("moe", "enabled", lambda v: v.strip() == "1", False):
        moe = MoEConfig(
            n_replicas=get("moe", "n_replicas", int, 4),
            segments=get("moe", "segments", int, 4),
            top_k=get("moe", "top_k", int, 4),
            use_world_expert=get("moe", "use_world_expert", lambda v: v.strip() == "1", True),
            aux_loss_weight=get("moe", "aux_loss_weight", float, 0.0),
        )
    model = ModelConfig(
        llm_layers=get("model", "llm_layers", int, base.llm_layers),
        h_llm=get("model", "h_llm", int, base.h_llm),
        heads=get("model", "heads", int, base.heads),
        vocab=get("model", "vocab", int, base.vocab),
        media_len=get("model", "media_len", int, base.media_len),
        r_xc=get("model", "r_xc", float, base.r_xc),
        r_xf=get("model", "r_xf", float, base.r_xf),
        moe=moe,
        encoder=encoder,
        mask_mode=get("model", "mask_mode", str, base.mask_mode),
        pad_len=get("model", "pad_len", int, base.pad_len),
        ffn_mult=get("model", "ffn_mult", int, base.ffn_mult),
        max_seq=get("model", "max_seq", int, base.max_seq),
    )
    return RunConfig(
        model=model,
        seed=get("run", "seed", int, 0),
        steps=get("train", "steps", int, 200),
        lr=get("train", "lr", float, 0.5),
        stage=get("train", "stage", str, "pretrain_phase1"),
        classes=get("train", "classes", int, 4),
        per_class=get("train", "per_class", int, 2),
    )


def _resolve_seed(flag_value: int | None, config_value: int) -> int:
    if flag_value is not None:
        return flag_value
    env = os.environ.get("EVLM_SEED")
    if env is not None:
        return int(env)
    return config_value


# -- cost ----------------------------------------------------------------------


_SCENARIO_KEYS = {"B", "s_img", "s_txt", "h_llm", "d_img", "r_xc", "r_xf", "media_len"}


def cmd_cost(args) -> int:
    if args.preset:
        report = ratio(preset(args.preset), preset_name=args.preset)
    else:
        kv = {}
        for item in args.scenario:
            key, sep, value = item.partition("=")
            if not sep or key not in _SCENARIO_KEYS:
                raise EvlmError(f"bad scenario field {item!r} (keys: {sorted(_SCENARIO_KEYS)})")
            kv[key] = value
        missing = {"B", "s_img", "s_txt", "h_llm", "d_img"} - set(kv)
        if missing:
            raise EvlmError(f"scenario is missing {sorted(missing)}")
        sc = FlopsScenario(
            batch=int(kv["B"]),
            s_img=int(kv["s_img"]),
            s_txt=int(kv["s_txt"]),
            h_llm=int(kv["h_llm"]),
            d_img=int(kv["d_img"]),
            r_xc=float(kv.get("r_xc", 0.2)),
            r_xf=float(kv.get("r_xf", 0.5)),
            media_len=int(kv.get("media_len", 16)),
        )
        report = ratio(sc)
    formatter = format_report_record if args.format == "record" else format_report_table
    sys.stdout.write(formatter(report))
    return EXIT_OK


# -- mask ------------------------------------------------------------------------


def parse_seq_spec(spec: str, media_len: int):
    """Mini-language: whitespace-separated I/T tokens, images auto-indexed."""
    items = []
    image = 0
    tokens = spec.split()
    if not tokens:
        raise EvlmError("empty sequence spec")
    for tok in tokens:
        if tok == "I":
            items.append(ImageMarker(image))
            image += 1
        elif tok == "T":
            items.append(0)
        else:
            raise EvlmError(f"bad sequence token {tok!r} (expected I or T)")
    return insert_media_tokens(items, media_len=media_len)


def cmd_mask(args) -> int:
    seq = parse_seq_spec(args.seq, args.media_len)
    builder = build_cross_mask_image if args.mode == "image" else build_cross_mask_video
    mask = builder(seq, args.s_img, args.pad)
    sys.stdout.write(format_mask_dump(mask.allow, mask.pad_len, args.mode))
    return EXIT_OK


# -- train-smoke --------------------------------------------------------------------


def cmd_train_smoke(args) -> int:
    run = load_run_config(args.config) if args.config else RunConfig(model=smoke_config())
    seed = _resolve_seed(args.seed, run.seed)
    steps = args.steps if args.steps is not None else run.steps
    lr = args.lr if args.lr is not None else run.lr
    result = train_smoke(
        run.model,
        steps=steps,
        seed=seed,
        lr=lr,
        stage=args.stage or run.stage,
        classes=run.classes,
        per_class=run.per_class,
    )
    print(f"seed={seed}")
    print(f"steps={steps}")
    print(f"lr={lr!r}")
    print(f"stage={args.stage or run.stage}")
    for i, value in enumerate(result.losses):
        print(f"loss_{i}={value!r}")
    print(f"initial={result.losses[0]!r}")
    print(f"final={result.losses[-1]!r}")
    print(f"converged={1 if result.converged else 0}")
    if result.model.last_routing_stats:
        for layer, stats in enumerate(result.model.last_routing_stats):
            counts = ",".join(str(c) for c in stats.assignments)
            print(f"routing_layer{layer}={counts}")
    result.model.meta = {"seed": str(seed), "classes": str(run.classes)}
    save_checkpoint(result.model, args.out)
    print(f"checkpoint={args.out}")
    return EXIT_OK if result.converged else EXIT_CRITERION


# -- probe ------------------------------------------------------------------------------


def cmd_probe(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise EvlmError(f"checkpoint {args.checkpoint!r} not found")
    model = load_checkpoint(args.checkpoint)
    candidates = [c for c in args.candidates.split(",") if c != ""]
    if not candidates:
        raise EvlmError("no candidate classes given")
    class_ids = [int(c) for c in candidates]
    seed = _resolve_seed(args.seed, int(model.meta.get("seed", "0")))
    patches = synthetic_patches(model.cfg.encoder, args.image, args.sample, seed)
    best, losses = loss_probe(model, patches, [caption_tokens(c) for c in class_ids])
    print(f"image_class={args.image}")
    print(f"sample={args.sample}")
    print(f"seed={seed}")
    for cid, value in zip(class_ids, losses):
        print(f"candidate_{cid}={value!r}")
    print(f"argmin={best}")
    print(f"predicted_class={class_ids[best]}")
    return EXIT_OK


# -- upcycle-check -----------------------------------------------------------------------


def cmd_upcycle_check(args) -> int:
    cfg = MoEConfig(n_replicas=args.n, segments=args.m, top_k=1)  # routing is irrelevant here
    seed = _resolve_seed(args.seed, 0)
    dense = DenseFFN.init(args.width, args.hidden, seed)
    bank = upcycle(dense, cfg)
    worst = 0.0
    for trial in range(100):
        x = Tensor.randn((1, args.width), derive_seed(seed, f"upcycle.x{trial}"))
        want = dense.apply(x)
        for r in range(cfg.n_replicas):
            total = [0.0] * args.width
            for seg in range(cfg.segments):
                out = bank.experts[r * cfg.segments + seg].apply(x)
                total = [a + b for a, b in zip(total, out.data)]
            worst = max(worst, max(abs(a - b) for a, b in zip(total, want.data)))
        world = bank.world.apply(x)
        worst = max(worst, max(abs(a - b) for a, b in zip(world.data, want.data)))
    print(f"replicas={cfg.n_replicas}")
    print(f"segments={cfg.segments}")
    print(f"width={args.width}")
    print(f"hidden={args.hidden}")
    print(f"trials=100")
    print(f"max_deviation={worst!r}")
    print(f"tolerance={UPCYCLE_TOL!r}")
    ok = worst < UPCYCLE_TOL
    print(f"ok={1 if ok else 0}")
    return EXIT_OK if ok else EXIT_INVARIANT


# -- entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evlm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("cost", help="analytical FLOPs report")
    g = c.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset", choices=["pretrain", "continual"])
    g.add_argument("--scenario", nargs="+", metavar="KEY=VALUE")
    c.add_argument("--format", choices=["table", "record"], default="table")
    c.set_defaults(func=cmd_cost)

    m = sub.add_parser("mask", help="dump a cross-attention permission mask")
    m.add_argument("--mode", choices=["image", "video"], required=True)
    m.add_argument("--seq", required=True, help="e.g. 'I T T I T'")
    m.add_argument("--s-img", type=int, default=4, dest="s_img")
    m.add_argument("--pad", type=int, default=1)
    m.add_argument("--media-len", type=int, default=1, dest="media_len")
    m.set_defaults(func=cmd_mask)

    t = sub.add_parser("train-smoke", help="synthetic-task SGD smoke run")
    t.add_argument("--config", help="key=value section config file")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--stage", choices=["pretrain_phase1", "pretrain_phase2", "continual", "sft"])
    t.add_argument("--out", default="smoke.ckpt")
    t.set_defaults(func=cmd_train_smoke)

    pr = sub.add_parser("probe", help="loss-argmin classification probe")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", type=int, required=True, help="synthetic class id")
    pr.add_argument("--candidates", required=True, help="comma-separated class ids")
    pr.add_argument("--sample", type=int, default=1000, help="held-out sample index")
    pr.add_argument("--seed", type=int)
    pr.set_defaults(func=cmd_probe)

    u = sub.add_parser("upcycle-check", help="verify the replicate-and-segment identities")
    u.add_argument("--n", type=int, default=4, help="replicas")
    u.add_argument("--m", type=int, default=4, help="segments per replica")
    u.add_argument("--width", type=int, default=8, help="token width h")
    u.add_argument("--hidden", type=int, default=16, help="dense FFN hidden width")
    u.add_argument("--seed", type=int)
    u.set_defaults(func=cmd_upcycle_check)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NonFiniteError, OverflowError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractViolationError as exc:
        print(f"error: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (EvlmError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
