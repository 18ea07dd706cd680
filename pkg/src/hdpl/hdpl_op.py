"""Hybrid dual-path linear layer.

The output is the sum of two paths over the same input:

* a block-diagonal projection: the feature axis is cut into ``k_groups``
  contiguous groups and each group gets its own small weight block;
* a variational low-rank path: ``mu`` and ``logvar`` encoders of rank
  ``rank``, a reparameterized sample ``z`` (``z = mu`` in eval mode), then
  ``w_dec @ silu(z)``.

Training-mode calls also return a clamped KL penalty against a standard-normal
prior.  No sub-projection carries a bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import INIT_STREAM, RngState

LN2 = math.log(2.0)
KL_GRANULARITIES = ("element", "token")


@dataclass
class HdplLayer:
    d_in: int
    d_out: int
    k_groups: int
    rank: int
    beta: float
    w_blocks: Tensor  # [K, d_out/K, d_in/K]
    w_mu: Tensor  # [R, d_in]
    w_logvar: Tensor  # [R, d_in]
    w_dec: Tensor  # [d_out, R]
    stream: int = 0  # noise stream id

    def __post_init__(self):
        check_dims(self.d_in, self.d_out, self.k_groups, self.rank)

    def parameters(self) -> dict[str, Tensor]:
        return {
            "w_blocks": self.w_blocks,
            "w_mu": self.w_mu,
            "w_logvar": self.w_logvar,
            "w_dec": self.w_dec,
        }

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters().values())


@dataclass
class HdplOutput:
    y: Tensor
    aux_loss: Tensor
    mu: Tensor
    logvar: Tensor
    z: Tensor


def check_dims(d_in: int, d_out: int, k_groups: int, rank: int) -> None:
    if k_groups < 1 or d_in % k_groups or d_out % k_groups:
        raise ValueError(f"d_in={d_in} and d_out={d_out} must both be divisible by k_groups={k_groups}")
    if not 1 <= rank < d_in:
        raise ValueError(f"rank must satisfy 1 <= rank < d_in, got rank={rank}, d_in={d_in}")


def count_hdpl_params(d_in: int, d_out: int, k_groups: int, rank: int) -> int:
    check_dims(d_in, d_out, k_groups, rank)
    return d_in * d_out // k_groups + 2 * d_in * rank + d_out * rank


def hdpl_macs(d_in: int, d_out: int, k_groups: int, rank: int) -> int:
    """Multiply-accumulates per token; every weight is used exactly once."""
    return count_hdpl_params(d_in, d_out, k_groups, rank)


def init_hdpl(
    d_in: int,
    d_out: int,
    k_groups: int,
    rank: int,
    beta: float,
    rng: RngState,
    stream: int = 0,
    dtype=np.float32,
) -> HdplLayer:
    check_dims(d_in, d_out, k_groups, rank)
    base = INIT_STREAM + 4 * stream

    def draw(i, shape, std):
        return Tensor((rng.normal(base + i, shape) * std).astype(dtype), requires_grad=True)

    enc_std = 1.0 / math.sqrt(d_in)
    return HdplLayer(
        d_in=d_in,
        d_out=d_out,
        k_groups=k_groups,
        rank=rank,
        beta=beta,
        w_blocks=draw(0, (k_groups, d_out // k_groups, d_in // k_groups), enc_std),
        w_mu=draw(1, (rank, d_in), enc_std),
        w_logvar=draw(2, (rank, d_in), enc_std),
        w_dec=draw(3, (d_out, rank), 1.0 / math.sqrt(rank)),
        stream=stream,
    )


def expand_blocks(w_blocks: np.ndarray) -> np.ndarray:
    """Dense [d_out, d_in] matrix diag(W_1, ..., W_K)."""
    k, bo, bi = w_blocks.shape
    dense = np.zeros((k * bo, k * bi), dtype=w_blocks.dtype)
    for g in range(k):
        dense[g * bo : (g + 1) * bo, g * bi : (g + 1) * bi] = w_blocks[g]
    return dense


def block_diag_forward(layer: HdplLayer, x: Tensor) -> Tensor:
    if x.shape[-1] != layer.d_in:
        raise ad.ShapeError(f"expected last dim {layer.d_in}, got input {x.shape}")
    k = layer.k_groups
    if k == 1:
        # same call sequence as a dense layer, so K=1 matches it bit for bit
        return ad.linear(x, ad.reshape(layer.w_blocks, (layer.d_out, layer.d_in)))
    lead = x.shape[:-1]
    groups = ad.reshape(x, (-1, k, layer.d_in // k))
    groups = ad.permute(groups, (1, 0, 2))  # [K, N, d_in/K]
    out = ad.matmul(groups, ad.transpose(layer.w_blocks))  # [K, N, d_out/K]
    out = ad.permute(out, (1, 0, 2))
    return ad.reshape(out, (*lead, layer.d_out))


def vae_encode(layer: HdplLayer, x: Tensor) -> tuple[Tensor, Tensor]:
    if x.shape[-1] != layer.d_in:
        raise ad.ShapeError(f"expected last dim {layer.d_in}, got input {x.shape}")
    return ad.linear(x, layer.w_mu), ad.linear(x, layer.w_logvar)


def reparameterize(mu: Tensor, logvar: Tensor, rng: RngState | None, training: bool, stream: int = 0) -> Tensor:
    """``mu + exp(logvar / 2) * eps`` in training; ``mu`` itself otherwise."""
    if mu.shape != logvar.shape:
        raise ad.ShapeError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    if not training:
        return mu
    if rng is None:
        raise ValueError("training-mode sampling needs an RngState")
    eps = Tensor(rng.normal(stream, mu.shape).astype(mu.dtype))
    return mu + ad.exp(logvar * 0.5) * eps


def kl_elements(mu: Tensor, logvar: Tensor) -> Tensor:
    """-(1 + logvar - mu^2 - exp(logvar)) / 2, written so rounding keeps it >= 0."""
    return (mu * mu + (ad.expm1(logvar) - logvar)) * 0.5


def bounded_kl(mu: Tensor, logvar: Tensor, beta: float, granularity: str = "element") -> Tensor:
    """Mean of per-element KL clamped at ln 2, times ``beta``.

    ``granularity="token"`` sums the KL over the latent axis first and clamps
    one value per position instead.
    """
    if mu.shape != logvar.shape:
        raise ad.ShapeError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    kl = kl_elements(mu, logvar)
    if granularity == "token":
        kl = ad.sum_(kl, axis=-1)
    elif granularity != "element":
        raise ValueError(f"unknown kl granularity {granularity!r}")
    return ad.mean(ad.clamp_max(kl, LN2)) * beta


def hdpl_forward(
    layer: HdplLayer,
    x: Tensor,
    rng: RngState | None,
    training: bool,
    z_override: Tensor | np.ndarray | None = None,
    kl_granularity: str = "element",
) -> HdplOutput:
    y_local = block_diag_forward(layer, x)
    mu, logvar = vae_encode(layer, x)
    if z_override is not None:
        z = ad.as_tensor(z_override, like=mu)
        if z.shape != mu.shape:
            raise ad.ShapeError(f"latent override shape {z.shape} != {mu.shape}")
    else:
        z = reparameterize(mu, logvar, rng, training, layer.stream)
    if training:
        aux = bounded_kl(mu, logvar, layer.beta, kl_granularity)
    else:
        aux = Tensor(np.zeros((), dtype=x.dtype))
    y = y_local + ad.linear(ad.silu(z), layer.w_dec)
    return HdplOutput(y=y, aux_loss=aux, mu=mu, logvar=logvar, z=z)
