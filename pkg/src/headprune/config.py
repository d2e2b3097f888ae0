"""Run configuration and its flat ``key = value`` file format."""

import dataclasses
import types
import typing
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .model import ModelConfig
from .trainer import PruneSchedule


@dataclass
class RunConfig:
    # model
    d: int = 64
    n_heads: int = 8
    n_persist: int = 64
    n_layers: int = 3
    seg_len: int = 32
    mem_len: typing.Optional[int] = None
    dropout_attn: float = 0.0
    dropout_hidden: float = 0.0
    dtype: str = "float32"
    # data
    corpus: str = ""
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    tokenizer: str = "char"
    max_vocab: typing.Optional[int] = None
    valid_frac: float = 0.05
    test_frac: float = 0.05
    # optimisation
    seed: int = 0
    steps: int = 2000
    lanes: int = 8
    lr_peak: float = 1e-2
    prune_lr_peak: float = 1e-3
    lr_final: float = 1e-4
    lr_warmup_frac: float = 0.025
    weight_decay: float = 0.0
    grad_clip: float = 0.25
    threads: int = 1
    # pruning
    lambda_: float = 0.02
    lambda_warmup_frac: float = 0.05
    freeze_frac: float = 0.20
    gate_init: float = 2.0
    gate_lr: float = 0.05
    no_lambda_warmup: bool = False
    no_gate_init: bool = False
    no_output_scaling: bool = False
    # io
    checkpoint: str = ""
    out_dir: str = "runs"
    log_interval: int = 50
    metrics_format: str = "json"
    eval_split: str = "valid"
    eval_lanes: int = 8
    eval_max_segments: typing.Optional[int] = None

    def __post_init__(self):
        if self.metrics_format not in ("json", "csv"):
            raise ValueError(f"metrics_format must be json or csv, got {self.metrics_format!r}")
        if self.tokenizer not in ("char", "word"):
            raise ValueError(f"tokenizer must be char or word, got {self.tokenizer!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def level(self) -> str:
        return "char" if self.tokenizer == "char" else "word"

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            d=self.d,
            n_heads=self.n_heads,
            n_persist=self.n_persist,
            n_layers=self.n_layers,
            seg_len=self.seg_len,
            mem_len=self.mem_len,
            vocab_size=vocab_size,
            dropout_attn=self.dropout_attn,
            dropout_hidden=self.dropout_hidden,
        )

    def baseline_schedule(self) -> PruneSchedule:
        return PruneSchedule.from_fractions(
            self.steps, 0.0, 0.0, None, self.lr_peak, self.lr_final, self.lr_warmup_frac
        )

    def prune_schedule(self) -> PruneSchedule:
        return PruneSchedule.from_fractions(
            self.steps,
            self.lambda_,
            0.0 if self.no_lambda_warmup else self.lambda_warmup_frac,
            self.freeze_frac,
            self.prune_lr_peak,
            self.lr_final,
            self.lr_warmup_frac,
        )

    @property
    def effective_gate_init(self) -> float:
        return 0.0 if self.no_gate_init else self.gate_init

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # -- flat text format ---------------------------------------------------
    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{_file_key(f.name)} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        values = parse_flat(text)
        return (base or cls()).updated(values)

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"), base)

    def updated(self, values: dict) -> "RunConfig":
        """Copy with string or typed ``values`` coerced to the field types."""
        hints = typing.get_type_hints(type(self))
        known = {f.name for f in fields(self)}
        changes = {}
        for key, raw in values.items():
            name = _field_name(key)
            if name not in known:
                raise KeyError(f"unknown config key {key!r}")
            changes[name] = coerce(raw, hints[name])
        return self.replace(**changes)


def _file_key(name: str) -> str:
    return "lambda" if name == "lambda_" else name


def _field_name(key: str) -> str:
    key = key.strip().replace("-", "_")
    return "lambda_" if key == "lambda" else key


def parse_flat(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def coerce(raw, hint):
    if typing.get_origin(hint) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("", "none")):
            return None
        return coerce(raw, args[0])
    if not isinstance(raw, str):
        return hint(raw)
    if hint is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off", ""):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return hint(raw.strip())
