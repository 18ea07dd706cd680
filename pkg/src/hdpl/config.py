"""Run configuration: sectioned key-value files plus flag overrides.

Sections follow the hyperparameter table grouping::

    [architecture]   d_model, n_layers, n_heads, head_dim, d_hidden, vocab_size, seq_len
    [optimization]   peak_lr, min_lr, weight_decay, warmup_steps, max_steps, batch_size, ...
    [hybrid]         mode, hybrid_set, rank, k_groups, beta, kl_granularity
    [run]            seed, output_dir, corpus, val_fraction, log/eval/checkpoint intervals

Defaults are the full-scale configuration.  Gradient clipping, the
logging cadence and eval batch count are local choices.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .model import DEFAULT_HYBRID_SET, ModelConfig
from .training import ScheduleConfig, TrainConfig


class ConfigError(ValueError):
    pass


SECTIONS = {
    "architecture": ("d_model", "n_layers", "n_heads", "head_dim", "d_hidden", "vocab_size", "seq_len"),
    "optimization": (
        "peak_lr", "min_lr", "weight_decay", "warmup_steps", "max_steps", "batch_size",
        "beta1", "beta2", "adam_eps", "grad_clip",
    ),
    "hybrid": ("mode", "hybrid_set", "rank", "k_groups", "beta", "kl_granularity"),
    "run": (
        "seed", "output_dir", "corpus", "val_fraction", "log_interval", "eval_interval",
        "checkpoint_interval", "eval_batches",
    ),
}


@dataclass
class RunConfig:
    # architecture
    d_model: int = 512
    n_layers: int = 4
    n_heads: int = 8
    head_dim: int = 64
    d_hidden: int = 2048
    vocab_size: int = 49152
    seq_len: int = 2048
    # optimization
    peak_lr: float = 8e-4
    min_lr: float = 8e-5
    weight_decay: float = 0.1
    warmup_steps: int = 1000
    max_steps: int = 20000
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    grad_clip: float | None = 1.0
    # hybrid
    mode: str = "hybrid"
    hybrid_set: tuple[str, ...] = DEFAULT_HYBRID_SET
    rank: int = 128
    k_groups: int = 8
    beta: float = 0.001
    kl_granularity: str = "element"
    # run
    seed: int = 42
    output_dir: str = "runs/default"
    corpus: tuple[str, ...] = field(default_factory=tuple)
    val_fraction: float = 0.1
    log_interval: int = 10
    eval_interval: int = 250
    checkpoint_interval: int = 250
    eval_batches: int | None = 8

    def __post_init__(self):
        self.hybrid_set = tuple(self.hybrid_set)
        self.corpus = tuple(self.corpus)
        try:
            self.model_config()
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            head_dim=self.head_dim,
            d_hidden=self.d_hidden,
            vocab_size=self.vocab_size,
            seq_len=self.seq_len,
            rank=self.rank,
            k_groups=self.k_groups,
            beta=self.beta,
            hybrid_set=self.hybrid_set,
            mode=self.mode,
            kl_granularity=self.kl_granularity,
        )

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.peak_lr, self.min_lr, self.warmup_steps, self.max_steps)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            seq_len=self.seq_len,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            grad_clip=self.grad_clip,
            log_interval=self.log_interval,
            eval_interval=self.eval_interval,
            checkpoint_interval=self.checkpoint_interval,
            eval_batches=self.eval_batches,
        )

    def replace(self, **changes) -> RunConfig:
        changes = {k: v for k, v in changes.items() if v is not None}
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hybrid_set"] = list(self.hybrid_set)
        d["corpus"] = list(self.corpus)
        return d

    def to_ini(self) -> str:
        lines = []
        for section, keys in SECTIONS.items():
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_format(getattr(self, key))}")
            lines.append("")
        return "\n".join(lines)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key: str, raw: str) -> Any:
    kind = _FIELD_TYPES[key]
    text = raw.strip()
    if "None" in kind and text.lower() in ("none", "off", ""):
        return None
    if kind.startswith("tuple"):
        return tuple(part.strip() for part in text.split(",") if part.strip())
    try:
        if kind.startswith("int"):
            return int(text.replace("_", ""))
        if kind.startswith("float"):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from exc
    return text


def parse_config_text(text: str, base_dir: Path | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values: dict[str, Any] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _coerce(key, raw)
    if base_dir is not None and "corpus" in values:
        values["corpus"] = tuple(str((base_dir / p).resolve()) if not Path(p).is_absolute() else p for p in values["corpus"])
    return RunConfig(**values)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, path.parent)
