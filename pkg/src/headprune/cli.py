"""Command-line front end.

    headprune train  --corpus text.txt --steps 2000 --out-dir runs/base
    headprune prune  --checkpoint runs/base/baseline.ckpt --lambda 0.2 --steps 1000 --out-dir runs/p
    headprune eval   --checkpoint runs/p/pruned.ckpt
    headprune cost   --arch both --sweep 11
    headprune ablate --checkpoint runs/base/baseline.ckpt --lambda 0.2 --steps 1000 --out-dir runs/abl

Exit codes: 0 success, 2 usage, 3 data or file error, 4 numeric failure,
5 equivalence-check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from .config import RunConfig
from .cost_model import ArchSpec, sparsity_sweep, sweep_csv
from .errors import DataError, EquivalenceError, NumericError
from .gating import DETERMINISTIC
from .runs import (
    load_model,
    load_splits,
    metric_name,
    prune_baseline,
    run_ablation,
    train_baseline,
    vocab_from_header,
)
from .trainer import evaluate

log = logging.getLogger("headprune")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_EQUIV = 0, 2, 3, 4, 5
MODEL_KEYS = ("d", "n_heads", "n_persist", "n_layers", "seg_len", "mem_len")

# flag dest -> RunConfig field, for flags that default to None (i.e. "not given")
RUN_FLAGS = {
    "seed": "seed",
    "lambda_": "lambda_",
    "steps": "steps",
    "lambda_warmup_frac": "lambda_warmup_frac",
    "freeze_frac": "freeze_frac",
    "checkpoint": "checkpoint",
    "out_dir": "out_dir",
    "metrics_format": "metrics_format",
    "corpus": "corpus",
    "train_path": "train_path",
    "valid_path": "valid_path",
    "test_path": "test_path",
    "lanes": "lanes",
    "threads": "threads",
    "log_interval": "log_interval",
    "eval_split": "eval_split",
}
SWITCHES = ("no_lambda_warmup", "no_gate_init", "no_output_scaling")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value run configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", dest="lambda_", type=float, help="target sparsity penalty")
    p.add_argument("--steps", type=int)
    p.add_argument("--lambda-warmup-frac", type=float, help="fraction of steps for the linear lambda ramp (0.05)")
    p.add_argument("--freeze-frac", type=float, help="fraction of steps after which gates freeze (0.20)")
    p.add_argument("--no-lambda-warmup", action="store_true", default=None)
    p.add_argument("--no-gate-init", action="store_true", default=None)
    p.add_argument("--no-output-scaling", action="store_true", default=None)
    p.add_argument("--checkpoint")
    p.add_argument("--out-dir")
    p.add_argument("--metrics-format", choices=("json", "csv"))
    p.add_argument("--corpus", help="single text file, split into train/valid/test")
    p.add_argument("--train", dest="train_path")
    p.add_argument("--valid", dest="valid_path")
    p.add_argument("--test", dest="test_path")
    p.add_argument("--lanes", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--log-interval", type=int)
    p.add_argument("--eval-split", choices=("train", "valid", "test"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="headprune", description="Head pruning for all-attention language models.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (
        ("train", "train a dense baseline"),
        ("prune", "gated fine-tuning from a baseline, then structural pruning"),
        ("eval", "evaluate a checkpoint"),
        ("ablate", "full method plus one-technique-off variants from a baseline"),
    ):
        p = sub.add_parser(name, help=help_)
        _run_args(p)
        if name == "ablate":
            p.add_argument("--vanilla", action="store_true", help="also run all three techniques disabled")
            p.add_argument("--match-vanilla", action="store_true",
                           help="tune the vanilla run's lambda to match the full method's sparsity")

    c = sub.add_parser("cost", help="closed-form parameter and MAC counts")
    c.add_argument("--arch", choices=("allatt", "txl", "both"), default="both")
    c.add_argument("--d", type=int, default=512)
    c.add_argument("--heads", type=int, default=8)
    c.add_argument("--layers", type=int, default=16)
    c.add_argument("--n-persist", type=int, default=2048)
    c.add_argument("--d-ff", type=int, default=2048)
    c.add_argument("--t", type=int, default=192)
    c.add_argument("--s", type=int, default=192)
    c.add_argument("--sweep", type=int, default=11, help="number of evenly spaced sparsity levels in [0, 1]")
    c.add_argument("--out", help="write the CSV here instead of stdout")
    return ap


def resolve_config(args, header: dict | None = None) -> RunConfig:
    """Defaults < checkpoint's run config < --config file < flags."""
    cfg = RunConfig()
    if header is not None:
        stored = header.get("meta", {}).get("run_config")
        if stored:
            cfg = cfg.updated(stored)
        cfg = cfg.updated({k: header["config"][k] for k in MODEL_KEYS})
    if args.config:
        cfg = RunConfig.load(args.config, cfg)
    changes = {RUN_FLAGS[k]: v for k, v in vars(args).items() if k in RUN_FLAGS and v is not None}
    changes.update({k: True for k in SWITCHES if getattr(args, k, None)})
    cfg = cfg.updated(changes)
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg = cfg.updated({k: v})
    if header is not None:
        # the architecture is fixed by the checkpoint
        cfg = cfg.updated({k: header["config"][k] for k in MODEL_KEYS})
    return cfg


def _threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


def _need_checkpoint(cfg: RunConfig):
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    return load_model(cfg.checkpoint)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    with _threads(cfg.threads):
        splits = load_splits(cfg)
        res = train_baseline(cfg, splits, cfg.out_dir)
    print(json.dumps({**res.summary, "checkpoint": str(res.paths["checkpoint"])}))
    return EXIT_OK


def cmd_prune(args) -> int:
    header = _checkpoint_header(args)
    cfg = resolve_config(args, header)
    model, _, header = _need_checkpoint(cfg)
    with _threads(cfg.threads):
        splits = load_splits(cfg, vocab_from_header(header))
        res = prune_baseline(cfg, splits, model, cfg.out_dir)
    print(json.dumps({**res.summary, "gated": str(res.paths["gated"]), "pruned": str(res.paths["pruned"])}))
    return EXIT_OK


def cmd_eval(args) -> int:
    header = _checkpoint_header(args)
    cfg = resolve_config(args, header)
    model, gates, header = _need_checkpoint(cfg)
    if gates is not None:
        gates.set_mode(DETERMINISTIC)
    with _threads(cfg.threads):
        splits = load_splits(cfg, vocab_from_header(header))
        ev = evaluate(model, splits[cfg.eval_split], gates=gates, lanes=cfg.eval_lanes,
                      max_segments=cfg.eval_max_segments, level=cfg.level)
    name = metric_name(cfg)
    out = {"checkpoint": cfg.checkpoint, "split": cfg.eval_split, "metric": name, name: ev[name],
           "nll": ev["nll"], "tokens": ev["tokens"]}
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        (Path(args.out_dir) / "eval.json").write_text(json.dumps(out, indent=2) + "\n")
    print(f"{name} {ev[name]:.6f}", file=sys.stderr)
    print(json.dumps(out))
    return EXIT_OK


def cmd_ablate(args) -> int:
    header = _checkpoint_header(args)
    cfg = resolve_config(args, header)
    model, _, header = _need_checkpoint(cfg)
    variants = ["full", "-lambda_warmup", "-gate_init", "-output_scaling"] + (["vanilla"] if args.vanilla else [])
    with _threads(cfg.threads):
        splits = load_splits(cfg, vocab_from_header(header))
        rows = run_ablation(cfg, splits, model, variants, cfg.out_dir, match_vanilla=args.match_vanilla)
    name = metric_name(cfg)
    print(f"{'variant':<18}{'flags':>6}{'heads':>7}{name:>10}{'delta':>10}")
    for r in rows:
        print(f"{r['variant']:<18}{r['flags']:>6}{r['pruned_heads']:>7}{r[name]:>10.4f}{r['delta']:>+10.4f}")
    return EXIT_OK


def cmd_cost(args) -> int:
    if args.sweep < 2:
        raise UsageError("--sweep needs at least 2 points")
    spec = ArchSpec("allatt", args.d, args.heads, args.layers, args.t, args.s, args.n_persist, args.d_ff)
    arches = ("allatt", "txl") if args.arch == "both" else (args.arch,)
    text = sweep_csv(sparsity_sweep(spec, args.sweep, arches))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _checkpoint_header(args) -> dict | None:
    """Header of the checkpoint named on the command line or in --config."""
    path = args.checkpoint
    if path is None and args.config:
        path = RunConfig.load(args.config).checkpoint or None
    if path is None:
        raise UsageError("--checkpoint is required")
    from .checkpoint import read_header

    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return read_header(path)


COMMANDS = {"train": cmd_train, "prune": cmd_prune, "eval": cmd_eval, "ablate": cmd_ablate, "cost": cmd_cost}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"headprune: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if not getattr(args, "quiet", False):
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"headprune: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except EquivalenceError as e:
        print(f"headprune: equivalence check failed: {e}", file=sys.stderr)
        return EXIT_EQUIV
    except NumericError as e:
        print(f"headprune: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, IsADirectoryError, UnicodeDecodeError) as e:
        print(f"headprune: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (KeyError, ValueError) as e:
        # bad config keys/values and unrepresentable cost-model sparsities
        print(f"headprune: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
