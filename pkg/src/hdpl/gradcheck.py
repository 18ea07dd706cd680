"""Central finite-difference checks of reverse-mode gradients (float64)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .hdpl_op import LN2, kl_elements
from .model import ModelConfig, TransformerModel, model_forward
from .rng import RngState

# below this magnitude gradients are compared absolutely; central differences
# at h=1e-5 carry ~1e-10 of rounding noise on O(1) losses
ABS_FLOOR = 1e-6


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_function(fn: Callable[..., ad.Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5) -> list[float]:
    """Max relative error per input of ``sum(fn(*inputs))`` at float64."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    ad.backward(ad.sum_(fn(*tensors)))

    def value():
        return float(ad.sum_(fn(*[ad.Tensor(a) for a in arrays])).item())

    errors = []
    for a, t in zip(arrays, tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        errors.append(max_relative_error(analytic, numerical_grad(value, a, h)))
    return errors


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    # per hybrid layer, fraction of KL elements above ln 2 at the checked point
    clamped: dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def check_model(
    model: TransformerModel,
    tokens: np.ndarray,
    targets: np.ndarray,
    rng: RngState,
    objective: str = "total",
    h: float = 1e-5,
) -> dict[str, float]:
    """Per-parameter max relative error for a training-mode loss.

    ``rng`` is fixed across all evaluations, so the reparameterization noise
    is frozen.  ``objective`` is ``"total"`` (CE + aux) or ``"aux"``.
    """
    if model.dtype != np.float64:
        model = model.astype(np.float64)

    def loss() -> ad.Tensor:
        res = model_forward(model, tokens, targets, rng=rng, training=True)
        return res.total_loss if objective == "total" else res.aux_total

    model.zero_grad()
    out = loss()
    if not out.requires_grad:
        return {}
    ad.backward(out)
    params = model.named_parameters()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    model.zero_grad()
    errors = {}
    for name, p in params.items():
        numeric = numerical_grad(lambda: float(loss().item()), p.data, h)
        errors[name] = max_relative_error(analytic[name], numeric)
    return errors


def micro_config(mode: str = "hybrid", **overrides) -> ModelConfig:
    base = dict(
        d_model=16, n_layers=1, n_heads=2, head_dim=8, d_hidden=32, vocab_size=11,
        seq_len=4, rank=4, k_groups=2, beta=0.001, mode=mode,
    )
    base.update(overrides)
    return ModelConfig(**base)


def run_grad_check(
    configs: Sequence[ModelConfig],
    seed: int = 42,
    batch_size: int = 2,
    tolerance: float = 1e-3,
) -> GradCheckReport:
    """Check every parameter of every config; hybrid configs also check the aux term alone."""
    errors: dict[str, float] = {}
    clamped: dict[str, float] = {}
    for cfg in configs:
        model = TransformerModel(cfg, seed=seed, dtype=np.float64)
        rng = RngState(seed, 7)
        stream = rng.integers(1, batch_size * (cfg.seq_len + 1), cfg.vocab_size)
        block = stream.reshape(batch_size, cfg.seq_len + 1)
        objectives = ["total", "aux"] if cfg.active_hybrid_set else ["total"]
        if cfg.active_hybrid_set:
            res = model_forward(model, block[:, :-1], block[:, 1:], rng=rng, training=True, record_latents=True)
            for rec in res.latents:
                kl = kl_elements(ad.Tensor(rec.mu), ad.Tensor(rec.logvar)).data
                clamped[f"{cfg.mode}/{rec.layer_id}"] = float(np.mean(kl > LN2))
        for objective in objectives:
            for name, err in check_model(model, block[:, :-1], block[:, 1:], rng, objective).items():
                errors[f"{cfg.mode}/{objective}/{name}"] = err
    return GradCheckReport(errors, tolerance, clamped)
