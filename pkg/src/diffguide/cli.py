"""Command-line entry point: ``diffguide {synth,train,eval,infer,profile}``."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

from .config import PRESETS, ModelConfig, preset

log = logging.getLogger("diffguide")


def _thread_limit():
    """Cap BLAS threads when ``LDG_THREADS`` is set."""
    value = os.environ.get("LDG_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(value))


def _split_overrides(extra: list[str]) -> dict[str, str]:
    """Turn trailing ``--key value`` / ``--key=value`` pairs into config overrides."""
    pairs, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise SystemExit(f"unexpected argument {tok!r}; overrides look like --key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise SystemExit(f"override {tok} needs a value")
            value = extra[i + 1]
            i += 2
        pairs[key] = value
    return pairs


def resolve_config(config_arg: str | None, overrides: dict[str, str]) -> ModelConfig:
    """``--config`` names a preset or a key=value file; overrides apply on top."""
    if config_arg is None:
        base = preset("default")
    elif config_arg in PRESETS:
        base = preset(config_arg)
    else:
        base = ModelConfig.load(config_arg)
    return ModelConfig.from_pairs(overrides, base)


def cmd_synth(args, extra):
    from .data import save_dataset, synth_generate

    ds = synth_generate(args.n, args.size, args.seed, change_fraction=args.change_fraction)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} pairs of {args.size}x{args.size} to {args.out} (change fraction {ds.change_fraction():.3f})")


def cmd_train(args, extra):
    from .data import load_dataset, split
    from .train import TrainSettings, train

    config = resolve_config(args.config, _split_overrides(extra))
    ds = load_dataset(args.data)
    train_ds, val_ds = split(ds, args.val_fraction)
    settings = TrainSettings(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                             weight_decay=args.weight_decay, seed=config.seed, target_f1=args.target_f1,
                             memory_budget=args.memory_budget_mb * 2**20 if args.memory_budget_mb else None)
    result = train(config, train_ds, val_ds, settings, out_dir=args.out)
    print(f"best F1 {result.best_f1:.4f} at epoch {result.best_epoch} ({result.seconds:.0f}s); "
          f"checkpoint {Path(args.out) / 'best.ckpt'}")


def cmd_eval(args, extra):
    from .checkpoint import load_checkpoint
    from .data import load_dataset, perturb
    from .losses import METRIC_NAMES
    from .train import evaluate

    model, _, _ = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    if args.perturb:
        ds = perturb(ds, args.perturb, args.sigma, seed=args.seed)
    scores = evaluate(model, ds)
    print(",".join(METRIC_NAMES))
    print(",".join(f"{scores[k]:.4f}" for k in METRIC_NAMES))


def cmd_infer(args, extra):
    from .train import infer

    change = infer(args.ckpt, args.pre, args.post, args.out, args.logits)
    print(f"wrote {args.out} ({change.mean() * 100:.2f}% changed)")


def cmd_profile(args, extra):
    from .profiler import profile, reference_comparison, sweep

    config = resolve_config(args.config, _split_overrides(extra))
    report = profile(config, (1, 3, args.input_size, args.input_size))
    print(reference_comparison(report))
    if args.sweep:
        for r in sweep(config):
            print(r.format())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffguide", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic bi-temporal dataset")
    s.add_argument("--n", type=int, default=400)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--change-fraction", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train on an A/B/label folder; extra --key value pairs override the config")
    s.add_argument("--config", help=f"preset ({', '.join(PRESETS)}) or key=value file")
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--weight-decay", type=float, default=5e-4)
    s.add_argument("--val-fraction", type=float, default=0.2)
    s.add_argument("--memory-budget-mb", type=float)
    s.add_argument("--target-f1", type=float, help="stop once validation F1 reaches this value")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint, optionally on perturbed inputs")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--perturb", choices=("gauss_noise", "gauss_blur"))
    s.add_argument("--sigma", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("infer", help="write the change map of one image pair")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--pre", required=True)
    s.add_argument("--post", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--logits", help="optional .npy path for the raw logits")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("profile", help="parameter / FLOP / memory report")
    s.add_argument("--config", default="reference")
    s.add_argument("--input-size", type=int, default=256)
    s.add_argument("--sweep", action="store_true", help="also report input sizes 256 to 1024")
    s.set_defaults(fn=cmd_profile)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and args.command not in ("train", "profile"):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    with _thread_limit():
        args.fn(args, extra)
    return 0


if __name__ == "__main__":
    sys.exit(main())
