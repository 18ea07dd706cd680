"""AdamW, warmup + cosine schedule, and the train/validate loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import Corpus, next_batch, sequential_blocks
from .model import TransformerModel, model_forward
from .rng import RngState

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class ScheduleConfig:
    peak_lr: float = 8e-4
    min_lr: float = 8e-5
    warmup_steps: int = 1000
    max_steps: int = 20000

    def __post_init__(self):
        if not 0.0 <= self.min_lr <= self.peak_lr:
            raise ValueError(f"need 0 <= min_lr <= peak_lr, got {self.min_lr}, {self.peak_lr}")
        if self.warmup_steps < 0 or (self.max_steps > 0 and self.warmup_steps >= self.max_steps):
            raise ValueError(f"need warmup_steps < max_steps, got {self.warmup_steps}, {self.max_steps}")


@dataclass
class TrainConfig:
    batch_size: int = 32
    seq_len: int = 2048
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    grad_clip: float | None = 1.0  # None disables clipping
    log_interval: int = 10
    eval_interval: int = 250
    checkpoint_interval: int = 250
    eval_batches: int | None = 8


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1

    @classmethod
    def zeros_like(cls, params: dict[str, ad.Tensor], **hyper) -> OptimizerState:
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            **hyper,
        )


@dataclass
class TrainState:
    model: TransformerModel
    opt: OptimizerState
    schedule: ScheduleConfig
    rng: RngState
    step: int = 0
    best_val: float = math.inf


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    aux_loss: float
    lr: float
    tokens_per_sec: float
    wall_ms: float
    val_loss: float | None = None

    def to_json(self) -> str:
        d = {
            "step": self.step,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "aux_loss": self.aux_loss,
            "lr": self.lr,
            "tokens_per_sec": self.tokens_per_sec,
            "wall_ms": self.wall_ms,
        }
        if self.val_loss is None:
            del d["val_loss"]
        return json.dumps(d)

    def deterministic_fields(self) -> tuple:
        return (self.step, self.train_loss, self.val_loss, self.aux_loss, self.lr)


def lr_at(schedule: ScheduleConfig, step: int) -> float:
    s = schedule
    if step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    if step >= s.max_steps:
        return s.min_lr
    progress = (step - s.warmup_steps) / (s.max_steps - s.warmup_steps)
    return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + math.cos(math.pi * progress))


def adamw_step(state: OptimizerState, params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update, in place."""
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total


def init_train_state(model: TransformerModel, schedule: ScheduleConfig, cfg: TrainConfig, seed: int) -> TrainState:
    opt = OptimizerState.zeros_like(
        model.named_parameters(),
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    return TrainState(model=model, opt=opt, schedule=schedule, rng=RngState(seed, 0))


def evaluate(model: TransformerModel, corpus: Corpus, batch_size: int, seq_len: int, max_batches: int | None = None) -> float:
    """Token-weighted eval-mode cross-entropy over the corpus; no aux term."""
    total, count = 0.0, 0
    for batch in sequential_blocks(corpus, batch_size, seq_len, max_batches):
        res = model_forward(model, batch.inputs, batch.targets, training=False)
        if res.aux_total.item() != 0.0:
            raise AssertionError("eval-mode aux loss must be exactly zero")
        total += float(res.ce_loss.item()) * batch.inputs.size
        count += batch.inputs.size
    if count == 0:
        raise ValueError("validation corpus yields no complete block")
    return total / count


def train_step(state: TrainState, train: Corpus, cfg: TrainConfig) -> tuple[float, float, float]:
    """One optimizer update; returns (ce, aux, lr)."""
    model = state.model
    rng = state.rng.at(state.step)
    batch = next_batch(train, cfg.batch_size, cfg.seq_len, rng)
    res = model_forward(model, batch.inputs, batch.targets, rng=rng, training=True)
    loss = res.total_loss
    ce, aux = float(res.ce_loss.item()), float(res.aux_total.item())
    if not math.isfinite(float(loss.item())):
        raise NonFiniteLossError(f"non-finite loss at step {state.step}: ce={ce}, aux={aux}")
    model.zero_grad()
    ad.backward(loss)
    params = model.named_parameters()
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    if cfg.grad_clip is not None:
        clip_grad_norm(grads, cfg.grad_clip)
    lr = lr_at(state.schedule, state.step + 1)
    adamw_step(state.opt, params, grads, lr)
    model.zero_grad()
    state.step += 1
    state.rng = state.rng.at(state.step)
    return ce, aux, lr


def train_loop(
    state: TrainState,
    train: Corpus,
    val: Corpus | None,
    cfg: TrainConfig,
    max_steps: int | None = None,
    metrics_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    save_fn: Callable[[TrainState, Path], None] | None = None,
) -> tuple[TrainState, list[MetricsRecord]]:
    """Run until ``state.step == max_steps`` (default: the schedule's max_steps)."""
    end = state.schedule.max_steps if max_steps is None else max_steps
    records: list[MetricsRecord] = []
    metrics_file = open(metrics_path, "a") if metrics_path is not None else None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    tokens_per_step = cfg.batch_size * cfg.seq_len
    t_last = time.perf_counter()
    steps_since = 0

    def emit(rec: MetricsRecord):
        records.append(rec)
        if metrics_file is not None:
            metrics_file.write(rec.to_json() + "\n")
            metrics_file.flush()

    try:
        while state.step < end:
            t0 = time.perf_counter()
            try:
                ce, aux, lr = train_step(state, train, cfg)
            except NonFiniteLossError:
                emit(MetricsRecord(state.step, float("nan"), float("nan"), lr_at(state.schedule, state.step + 1), 0.0, 0.0))
                raise
            steps_since += 1
            step = state.step
            do_eval = val is not None and cfg.eval_interval > 0 and (step % cfg.eval_interval == 0 or step == end)
            do_log = do_eval or step % cfg.log_interval == 0 or step == end
            val_loss = None
            if do_eval:
                val_loss = evaluate(state.model, val, cfg.batch_size, cfg.seq_len, cfg.eval_batches)
            if do_log:
                now = time.perf_counter()
                elapsed = now - t_last
                emit(
                    MetricsRecord(
                        step=step,
                        train_loss=ce,
                        aux_loss=aux,
                        lr=lr,
                        tokens_per_sec=tokens_per_step * steps_since / max(elapsed, 1e-9),
                        wall_ms=(now - t0) * 1000.0,
                        val_loss=val_loss,
                    )
                )
                t_last, steps_since = now, 0
            if ckpt_dir is not None and save_fn is not None:
                if val_loss is not None and val_loss < state.best_val:
                    state.best_val = val_loss
                    save_fn(state, ckpt_dir / "best.ckpt")
                if cfg.checkpoint_interval > 0 and step % cfg.checkpoint_interval == 0:
                    save_fn(state, ckpt_dir / f"step_{step:07d}.ckpt")
            elif val_loss is not None:
                state.best_val = min(state.best_val, val_loss)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return state, records


def metrics_summary(records: list[MetricsRecord]) -> dict:
    vals = [r.val_loss for r in records if r.val_loss is not None]
    return {
        "steps": records[-1].step if records else 0,
        "final_train_loss": records[-1].train_loss if records else None,
        "final_val_loss": vals[-1] if vals else None,
        "min_val_loss": min(vals) if vals else None,
        "final_aux_loss": records[-1].aux_loss if records else None,
    }


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(MetricsRecord(**d))
    return out
