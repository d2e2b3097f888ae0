"""End-to-end runs: baseline training, pruning, ablations, checkpoint I/O.

These are the library entry points behind the CLI subcommands.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .cost_model import ArchSpec, allatt_params
from .data import CorpusSplit, Vocab, segment_batches, split_text, tokenize_corpus
from .errors import DataError, EquivalenceError
from .gating import DETERMINISTIC, STOCHASTIC, GateSet
from .model import AllAttentionLM, ModelConfig
from .trainer import (
    apply_structural_prune,
    as_dtype,
    evaluate,
    extract_prune_mask,
    make_state,
    run_training,
    verify_prune_equivalence,
)

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "nll", "ppl_or_bpc", "lambda", "lr", "expected_sparsity", "hard_sparsity")
EQUIVALENCE_RTOL = 1e-6


# -- data ---------------------------------------------------------------------


def _read(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    return p.read_text(encoding="utf-8")


def load_splits(cfg: RunConfig, vocab: Vocab | None = None) -> dict[str, CorpusSplit]:
    """Tokenised train/valid/test splits; reuses ``vocab`` when given."""
    if cfg.corpus:
        train, valid, test = split_text(_read(cfg.corpus), cfg.valid_frac, cfg.test_frac)
    elif cfg.train_path:
        train = _read(cfg.train_path)
        valid = _read(cfg.valid_path) if cfg.valid_path else ""
        test = _read(cfg.test_path) if cfg.test_path else ""
    else:
        raise DataError("no corpus given (set corpus or train_path)")
    if vocab is None:
        return tokenize_corpus(train, valid, test, cfg.tokenizer, cfg.max_vocab)
    if not train:
        raise DataError("train split is empty")
    return {n: CorpusSplit(n, vocab.encode(t), vocab) for n, t in (("train", train), ("valid", valid), ("test", test))}


# -- metrics log ---------------------------------------------------------------


class MetricsLog:
    """Appends one record per logging interval as JSON lines or CSV rows."""

    def __init__(self, path: Path | None, fmt: str = "json", level: str = "char"):
        self.path = path
        self.fmt = fmt
        self.level = level
        self.records: list[dict] = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("" if fmt == "json" else ",".join(METRIC_FIELDS) + "\n")

    def __call__(self, m: dict) -> None:
        nll = m["nll"]
        rec = {
            "step": m["step"],
            "nll": nll,
            "ppl_or_bpc": nll / np.log(2.0) if self.level == "char" else float(np.exp(nll)),
            "lambda": m["lambda"],
            "lr": m["lr"],
            "expected_sparsity": m.get("expected_sparsity", 0.0),
            "hard_sparsity": m.get("hard_sparsity", 0.0),
        }
        self.records.append(rec)
        log.info("step %(step)d nll %(nll).4f lambda %(lambda).4g hard_sparsity %(hard_sparsity).4f", rec)
        if self.path is None:
            return
        with open(self.path, "a", encoding="utf-8") as f:
            if self.fmt == "json":
                f.write(json.dumps(rec) + "\n")
            else:
                csv.writer(f, lineterminator="\n").writerow([rec[k] for k in METRIC_FIELDS])

    def event(self, rec: dict) -> None:
        """Non-interval records (evaluations) go to JSON logs only."""
        if self.path is not None and self.fmt == "json":
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(rec) + "\n")


def metric_name(cfg: RunConfig) -> str:
    return "bpc" if cfg.level == "char" else "ppl"


# -- checkpoints -------------------------------------------------------------------


def save_model(path, model: AllAttentionLM, meta: dict, gates: GateSet | None = None, extra: dict | None = None):
    arrays = dict(model.state_arrays())
    if gates is not None:
        arrays.update(gates.state_arrays())
    if extra:
        arrays.update(extra)
    save_checkpoint(path, model.cfg.to_dict(), arrays, meta)


def load_model(path) -> tuple[AllAttentionLM, GateSet | None, dict]:
    """Model (and gates, if stored) from a checkpoint plus its header."""
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header, arrays = load_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    dtype = arrays["embed"].dtype
    model = AllAttentionLM(cfg, seed=0, dtype=dtype)
    model.load_arrays(arrays)
    gates = None
    if "gates.layer0" in arrays:
        g = header["meta"].get("gates", {})
        gates = GateSet.from_arrays(
            {k: v for k, v in arrays.items() if k.startswith("gates.")},
            mode=g.get("mode", DETERMINISTIC),
            output_scaling=g.get("output_scaling", True),
        )
    return model, gates, header


def vocab_from_header(header: dict) -> Vocab:
    return Vocab.from_dict(header["meta"]["vocab"])


# -- runs ---------------------------------------------------------------------------


@dataclass
class RunResult:
    model: AllAttentionLM
    trace: list[dict]
    eval: dict
    summary: dict
    gates: GateSet | None = None
    pruned: AllAttentionLM | None = None
    paths: dict = field(default_factory=dict)


def _eval(model, splits, cfg: RunConfig, gates=None) -> dict:
    return evaluate(
        model,
        splits[cfg.eval_split],
        gates=gates,
        lanes=cfg.eval_lanes,
        max_segments=cfg.eval_max_segments,
        level=cfg.level,
    )


def train_baseline(cfg: RunConfig, splits: dict[str, CorpusSplit], out_dir=None) -> RunResult:
    vocab = splits["train"].vocab
    model = AllAttentionLM(cfg.model_config(len(vocab)), seed=cfg.seed, dtype=cfg.np_dtype)
    state = make_state(model, cfg.baseline_schedule(), cfg.seed, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    out = Path(out_dir) if out_dir else None
    mlog = MetricsLog(out / f"train_metrics.{'jsonl' if cfg.metrics_format == 'json' else 'csv'}" if out else None,
                      cfg.metrics_format, cfg.level)
    trace = run_training(state, splits["train"], cfg.steps, cfg.lanes, mlog, cfg.log_interval)
    ev = _eval(model, splits, cfg)
    name = metric_name(cfg)
    mlog.event({"event": "eval", "step": state.step, "split": cfg.eval_split, name: ev[name], "nll": ev["nll"]})
    summary = {
        "kind": "baseline",
        "steps": state.step,
        "eval_split": cfg.eval_split,
        name: ev[name],
        "eval_nll": ev["nll"],
        "eval_tokens": ev["tokens"],
        "params_non_embedding": model.count_params("non_embedding"),
        "params_total": model.count_params("all"),
    }
    res = RunResult(model, trace, ev, summary)
    if out:
        meta = {"kind": "baseline", "vocab": vocab.to_dict(), "run_config": cfg.to_dict(), "step": state.step}
        res.paths["checkpoint"] = out / "baseline.ckpt"
        save_model(res.paths["checkpoint"], model, meta, extra=state.optimizer.state_arrays("opt"))
        cfg.save(out / "run_config.txt")
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return res


def _equivalence_batches(splits, cfg: RunConfig, n_segments: int = 3, lanes: int = 2) -> list[np.ndarray]:
    ids = splits[cfg.eval_split].ids if len(splits[cfg.eval_split]) >= lanes * cfg.seg_len else splits["train"].ids
    out = []
    for seg in segment_batches(ids, cfg.seg_len, lanes):
        if seg.index >= n_segments:
            break
        out.append(seg.inputs)
    return out


def check_equivalence(model: AllAttentionLM, gates: GateSet, pruned: AllAttentionLM, batches) -> float:
    """Gated-vs-pruned agreement, compared in float64."""
    g64 = GateSet.from_arrays(
        {k: v.astype(np.float64) for k, v in gates.state_arrays().items()},
        mode=DETERMINISTIC,
        output_scaling=gates.output_scaling,
    )
    return verify_prune_equivalence(
        as_dtype(model, np.float64), g64, as_dtype(pruned, np.float64), batches, EQUIVALENCE_RTOL
    )


def prune_baseline(
    cfg: RunConfig, splits: dict[str, CorpusSplit], baseline: AllAttentionLM, out_dir=None
) -> RunResult:
    """Gated fine-tuning from ``baseline`` followed by structural head removal.

    Raises :class:`EquivalenceError` if the pruned model does not reproduce
    the gated model's logits.
    """
    model = as_dtype(baseline, cfg.np_dtype)
    mcfg = model.cfg
    gates = GateSet(
        mcfg.n_layers,
        mcfg.n_heads,
        init=cfg.effective_gate_init,
        output_scaling=not cfg.no_output_scaling,
        dtype=cfg.np_dtype,
    )
    state = make_state(
        model,
        cfg.prune_schedule(),
        cfg.seed,
        gates=gates,
        weight_decay=cfg.weight_decay,
        gate_lr=cfg.gate_lr,
        grad_clip=cfg.grad_clip,
    )
    out = Path(out_dir) if out_dir else None
    mlog = MetricsLog(out / f"prune_metrics.{'jsonl' if cfg.metrics_format == 'json' else 'csv'}" if out else None,
                      cfg.metrics_format, cfg.level)
    trace = run_training(state, splits["train"], cfg.steps, cfg.lanes, mlog, cfg.log_interval)
    if gates.mode == STOCHASTIC:
        gates.freeze()
    mask = extract_prune_mask(gates)
    pruned = apply_structural_prune(model, mask, gates.output_scaling)

    eq_err = check_equivalence(model, gates, pruned, _equivalence_batches(splits, cfg))
    spec = ArchSpec("allatt", mcfg.d, mcfg.n_heads, mcfg.n_layers, mcfg.seg_len, mcfg.mem_len, mcfg.n_persist)
    hpl = mask.heads_per_layer()
    expected_params = allatt_params(spec, heads_per_layer=hpl, include_aux=True)
    if pruned.count_params("non_embedding") != expected_params:
        raise EquivalenceError(
            f"pruned parameter count {pruned.count_params('non_embedding')} != cost model {expected_params}"
        )

    ev = _eval(pruned, splits, cfg)
    name = metric_name(cfg)
    mlog.event({"event": "eval", "step": state.step, "split": cfg.eval_split, name: ev[name], "nll": ev["nll"]})
    summary = {
        "kind": "prune",
        "seed": cfg.seed,
        "lambda": cfg.lambda_,
        "techniques": {
            "lambda_warmup": not cfg.no_lambda_warmup,
            "gate_init": not cfg.no_gate_init,
            "output_scaling": not cfg.no_output_scaling,
        },
        "steps": state.step,
        "pruned_heads": mask.n_pruned,
        "total_heads": mcfg.n_layers * mcfg.n_heads,
        "hard_sparsity": mask.sparsity,
        "expected_sparsity": gates.expected_sparsity(),
        "heads_per_layer": hpl,
        "kept_heads": mask.kept(),
        "eval_split": cfg.eval_split,
        name: ev[name],
        "eval_nll": ev["nll"],
        "eval_tokens": ev["tokens"],
        "equivalence_rel_error": eq_err,
        "params_non_embedding": pruned.count_params("non_embedding"),
        "params_heads": pruned.count_params("heads"),
        "params_non_embedding_dense": baseline.count_params("non_embedding"),
    }
    res = RunResult(model, trace, ev, summary, gates=gates, pruned=pruned)
    if out:
        gate_meta = {"mode": gates.mode, "output_scaling": gates.output_scaling, "init": cfg.effective_gate_init,
                     "beta": gates.cfg.beta, "gamma": gates.cfg.gamma, "zeta": gates.cfg.zeta}
        vocab = splits["train"].vocab.to_dict()
        opt = {**state.optimizer.state_arrays("opt"), **state.gate_optimizer.state_arrays("opt.gates")}
        res.paths["gated"] = out / "gated.ckpt"
        res.paths["pruned"] = out / "pruned.ckpt"
        save_model(res.paths["gated"], model, {"kind": "gated", "vocab": vocab, "gates": gate_meta,
                                               "run_config": cfg.to_dict(), "step": state.step}, gates, opt)
        save_model(res.paths["pruned"], pruned, {"kind": "pruned", "vocab": vocab, "kept_heads": mask.kept(),
                                                 "run_config": cfg.to_dict(), "step": state.step})
        cfg.save(out / "run_config.txt")
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return res


# -- ablations ----------------------------------------------------------------------

VARIANTS = {
    "full": {},
    "-lambda_warmup": {"no_lambda_warmup": True},
    "-gate_init": {"no_gate_init": True},
    "-output_scaling": {"no_output_scaling": True},
    "vanilla": {"no_lambda_warmup": True, "no_gate_init": True, "no_output_scaling": True},
}


def _flags(cfg: RunConfig) -> str:
    return "".join("X" if f else "O" for f in (cfg.no_lambda_warmup, cfg.no_gate_init, cfg.no_output_scaling))


def matched_vanilla(
    cfg: RunConfig,
    splits,
    baseline: AllAttentionLM,
    target_heads: int,
    tolerance: int = 2,
    max_tries: int = 4,
) -> tuple[RunResult, list[tuple[float, int]]]:
    """Vanilla run whose lambda is searched so its pruned-head count lands on
    ``target_heads``.

    Lambda is halved or doubled until the target is bracketed, then
    interpolated in log-lambda. The search stops at an exact match or after
    ``max_tries`` runs. Returns the closest run (ties go to the earlier one)
    and the ``(lambda, pruned_heads)`` attempts. ``tolerance`` only decides
    whether the search is worth continuing past the first bracket.
    """
    vcfg = cfg.replace(**VARIANTS["vanilla"])
    lo = hi = None  # (lambda, heads) with heads below / above target
    lam = cfg.lambda_
    best, attempts = None, []
    for _ in range(max_tries):
        res = prune_baseline(vcfg.replace(lambda_=lam), splits, baseline)
        heads = res.summary["pruned_heads"]
        attempts.append((lam, heads))
        if best is None or abs(heads - target_heads) < abs(best.summary["pruned_heads"] - target_heads):
            best = res
        if heads == target_heads:
            break
        if heads > target_heads:
            hi = (lam, heads)
        else:
            lo = (lam, heads)
        if lo is None:
            lam = hi[0] / 2
        elif hi is None:
            lam = lo[0] * 2
        else:
            frac = (target_heads - lo[1]) / (hi[1] - lo[1])
            lam = float(np.exp(np.log(lo[0]) + frac * (np.log(hi[0]) - np.log(lo[0]))))
            if any(abs(lam - a) < 1e-12 for a, _ in attempts):
                break
    if abs(best.summary["pruned_heads"] - target_heads) > tolerance:
        log.warning("vanilla sparsity %d not within %d heads of %d", best.summary["pruned_heads"], tolerance, target_heads)
    return best, attempts


def run_ablation(
    cfg: RunConfig,
    splits,
    baseline: AllAttentionLM,
    variants=("full", "-lambda_warmup", "-gate_init", "-output_scaling"),
    out_dir=None,
    match_vanilla: bool = False,
) -> list[dict]:
    """One prune run per variant with a shared seed; rows carry deltas vs ``full``.

    With ``match_vanilla`` an extra ``vanilla@matched`` row is produced whose
    lambda is tuned to land within two heads of the full method's sparsity.
    """
    name = metric_name(cfg)
    rows = []
    results = {}
    for v in variants:
        vcfg = cfg.replace(**VARIANTS[v])
        sub = Path(out_dir) / v.lstrip("-") if out_dir else None
        res = prune_baseline(vcfg, splits, baseline, sub)
        results[v] = res
        rows.append({"variant": v, "flags": _flags(vcfg), "seed": cfg.seed, "lambda": vcfg.lambda_,
                     "pruned_heads": res.summary["pruned_heads"], "hard_sparsity": res.summary["hard_sparsity"],
                     name: res.summary[name]})
    if match_vanilla:
        target = results["full"].summary["pruned_heads"] if "full" in results else 0
        res, _ = matched_vanilla(cfg, splits, baseline, target)
        rows.append({"variant": "vanilla@matched", "flags": "XXX", "seed": cfg.seed,
                     "lambda": res.summary["lambda"], "pruned_heads": res.summary["pruned_heads"],
                     "hard_sparsity": res.summary["hard_sparsity"], name: res.summary[name]})
    ref = next((r[name] for r in rows if r["variant"] == "full"), None)
    for r in rows:
        r["delta"] = None if ref is None else r[name] - ref
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "ablation.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return rows
