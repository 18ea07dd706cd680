"""Desk-scale experiments shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .cli import format_summary_table, main as cli_main
from .config import load_config
from .data import Corpus, tokenize_bytes
from .hdpl_op import LN2
from .model import ModelConfig, TransformerModel
from .training import MetricsRecord, ScheduleConfig, TrainConfig, init_train_state, train_loop

PANGRAMS = (
    b"The quick brown fox jumps over the lazy dog while seven wizards quietly hex "
    b"a jovial sphinx; pack my box with five dozen liquor jugs, and then count the "
    b"stars above the silent harbor until dawn breaks over 1024 sleeping gulls. "
)


def overfit_sequence(length: int = 256) -> Corpus:
    """One fixed byte sequence; batch offsets wrap, so it repeats end to end."""
    return Corpus(tokenize_bytes((PANGRAMS * (length // len(PANGRAMS) + 1))[:length]))


def overfit_model_config(seq_len: int = 64) -> ModelConfig:
    return ModelConfig(
        d_model=64, n_layers=2, n_heads=4, head_dim=16, d_hidden=256, vocab_size=256,
        seq_len=seq_len, rank=16, k_groups=4, beta=0.001,
    )


@dataclass
class OverfitResult:
    records: list[MetricsRecord]
    aux_bound: float
    threshold: float

    @property
    def first_below(self) -> int | None:
        """First logged step whose training CE is under the threshold."""
        return next((r.step for r in self.records if r.train_loss < self.threshold), None)

    @property
    def aux_in_bounds(self) -> bool:
        return all(0.0 < r.aux_loss < self.aux_bound for r in self.records)


def overfit_run(
    steps: int = 1000,
    seed: int = 42,
    batch_size: int = 8,
    seq_len: int = 64,
    peak_lr: float = 3e-3,
    threshold: float = 0.5,
) -> OverfitResult:
    """Memorize one 256-byte sequence with the micro hybrid model, logging every step."""
    cfg = overfit_model_config(seq_len)
    schedule = ScheduleConfig(peak_lr, peak_lr / 10, 50, steps)
    tcfg = TrainConfig(batch_size=batch_size, seq_len=seq_len, log_interval=1, eval_interval=0)
    state = init_train_state(TransformerModel(cfg, seed=seed), schedule, tcfg, seed)
    _, records = train_loop(state, overfit_sequence(), None, tcfg)
    n_hybrid = cfg.n_layers * len(cfg.active_hybrid_set)
    return OverfitResult(records, n_hybrid * cfg.beta * LN2, threshold)


def compare_modes(config_path: str | Path, out_root: str | Path, max_steps: int | None = None, seed: int | None = None) -> dict:
    """Train baseline and hybrid from one config and seed; write a side-by-side summary.

    Returns ``{"rows": [...], "table": str, "metrics": {mode: path}}``.
    """
    out_root = Path(out_root)
    rows, metrics = [], {}
    for mode in ("baseline", "hybrid"):
        out = out_root / mode
        argv = ["train", "--config", str(config_path), "--mode", mode, "--output-dir", str(out), "--json"]
        if max_steps is not None:
            argv += ["--max-steps", str(max_steps)]
        if seed is not None:
            argv += ["--seed", str(seed)]
        code = cli_main(argv)
        if code != 0:
            raise RuntimeError(f"{mode} run exited with status {code}")
        rows.append(json.loads((out / "summary.json").read_text()))
        metrics[mode] = out / "metrics.jsonl"
    table = format_summary_table(rows)
    (out_root / "summary.txt").write_text(table + "\n")
    (out_root / "summary.json").write_text(json.dumps(rows, indent=2))
    return {"rows": rows, "table": table, "metrics": metrics, "config": load_config(config_path)}
