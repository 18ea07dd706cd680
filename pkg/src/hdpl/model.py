"""Llama-style decoder with optional hybrid projections.

Every block is ``x + W_o(attn(rope(q), rope(k), v))`` followed by
``x + W_down(silu(gate) * up)``, both fed through RMSNorm.  Any projection
named in ``ModelConfig.hybrid_set`` is an :class:`HdplLayer`; the rest are
bias-free dense matrices.  Embedding and output head are untied.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .hdpl_op import KL_GRANULARITIES, HdplLayer, count_hdpl_params, hdpl_forward, init_hdpl
from .rng import INIT_STREAM, RngState

PROJECTIONS = ("q", "k", "v", "o", "gate", "up", "down")
ATTN_PROJECTIONS = ("q", "k", "v", "o")
FFN_PROJECTIONS = ("gate", "up", "down")
DEFAULT_HYBRID_SET = ("q", "k", "v", "gate", "up")

NORM_EPS = 1e-5
ROPE_BASE = 10000.0
EMBED_STD = 0.02
_DENSE_STREAM = INIT_STREAM + (1 << 24)


@dataclass
class ModelConfig:
    d_model: int = 512
    n_layers: int = 4
    n_heads: int = 8
    head_dim: int = 64
    d_hidden: int = 2048
    vocab_size: int = 49152
    seq_len: int = 2048
    rank: int = 128
    k_groups: int = 8
    beta: float = 0.001
    hybrid_set: tuple[str, ...] = DEFAULT_HYBRID_SET
    mode: str = "hybrid"
    kl_granularity: str = "element"

    def __post_init__(self):
        self.hybrid_set = tuple(self.hybrid_set)
        if self.n_heads * self.head_dim != self.d_model:
            raise ValueError(f"n_heads*head_dim = {self.n_heads * self.head_dim} != d_model = {self.d_model}")
        if self.head_dim % 2:
            raise ValueError(f"head_dim must be even for rotary embeddings, got {self.head_dim}")
        unknown = set(self.hybrid_set) - set(PROJECTIONS)
        if unknown:
            raise ValueError(f"unknown projections in hybrid_set: {sorted(unknown)}")
        if self.mode not in ("baseline", "hybrid"):
            raise ValueError(f"mode must be baseline or hybrid, got {self.mode!r}")
        if self.kl_granularity not in KL_GRANULARITIES:
            raise ValueError(f"kl_granularity must be one of {KL_GRANULARITIES}")
        for name in self.active_hybrid_set:
            d_in, d_out = self.projection_dims(name)
            count_hdpl_params(d_in, d_out, self.k_groups, self.rank)

    @property
    def active_hybrid_set(self) -> tuple[str, ...]:
        """Projections that are actually HDPL; empty in baseline mode."""
        if self.mode == "baseline":
            return ()
        return tuple(p for p in PROJECTIONS if p in self.hybrid_set)

    def projection_dims(self, name: str) -> tuple[int, int]:
        if name in ATTN_PROJECTIONS:
            return self.d_model, self.d_model
        if name in ("gate", "up"):
            return self.d_model, self.d_hidden
        if name == "down":
            return self.d_hidden, self.d_model
        raise KeyError(name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hybrid_set"] = list(self.hybrid_set)
        return d


def count_model_params(config: ModelConfig) -> int:
    """Closed-form stored-float count; allocates nothing."""
    d, v = config.d_model, config.vocab_size
    per_block = 2 * d  # two norm gains
    for name in PROJECTIONS:
        d_in, d_out = config.projection_dims(name)
        if name in config.active_hybrid_set:
            per_block += count_hdpl_params(d_in, d_out, config.k_groups, config.rank)
        else:
            per_block += d_in * d_out
    return 2 * v * d + config.n_layers * per_block + d


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Name and shape of every parameter tensor, in storage order."""
    d, k, r = config.d_model, config.k_groups, config.rank
    shapes = [("tok_emb", (config.vocab_size, d))]
    for i in range(config.n_layers):
        for name in ("attn_norm", *ATTN_PROJECTIONS, "ffn_norm", *FFN_PROJECTIONS):
            prefix = f"blocks.{i}.{name}"
            if name.endswith("_norm"):
                shapes.append((prefix, (d,)))
                continue
            d_in, d_out = config.projection_dims(name)
            if name in config.active_hybrid_set:
                shapes += [
                    (f"{prefix}.w_blocks", (k, d_out // k, d_in // k)),
                    (f"{prefix}.w_mu", (r, d_in)),
                    (f"{prefix}.w_logvar", (r, d_in)),
                    (f"{prefix}.w_dec", (d_out, r)),
                ]
            else:
                shapes.append((f"{prefix}.weight", (d_out, d_in)))
    shapes += [("final_norm", (d,)), ("lm_head", (config.vocab_size, d))]
    return shapes


@dataclass
class Block:
    attn_norm: Tensor
    ffn_norm: Tensor
    proj: dict[str, HdplLayer | Tensor]


@dataclass
class LatentRecord:
    layer_id: str
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray


@dataclass
class ForwardResult:
    logits: Tensor
    ce_loss: Tensor | None
    aux_total: Tensor
    latents: list[LatentRecord] | None = None
    aux_terms: dict[str, Tensor] = field(default_factory=dict)

    @property
    def total_loss(self) -> Tensor:
        if self.ce_loss is None:
            raise ValueError("no targets were given, so there is no loss")
        return self.ce_loss + self.aux_total


class TransformerModel:
    def __init__(self, config: ModelConfig, seed: int = 42, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self._overrides: dict[str, np.ndarray] = {}
        rng = RngState(seed)
        d = config.d_model

        def normal(stream, shape, std):
            return Tensor((rng.normal(_DENSE_STREAM + stream, shape) * std).astype(dtype), requires_grad=True)

        def ones(n):
            return Tensor(np.ones(n, dtype=dtype), requires_grad=True)

        self.tok_emb = normal(0, (config.vocab_size, d), EMBED_STD)
        self.blocks: list[Block] = []
        dense_stream = 1
        hybrid_index = 0
        for _ in range(config.n_layers):
            proj: dict[str, HdplLayer | Tensor] = {}
            for name in PROJECTIONS:
                d_in, d_out = config.projection_dims(name)
                if name in config.active_hybrid_set:
                    proj[name] = init_hdpl(
                        d_in, d_out, config.k_groups, config.rank, config.beta, rng, stream=hybrid_index, dtype=dtype
                    )
                    hybrid_index += 1
                else:
                    proj[name] = normal(dense_stream, (d_out, d_in), 1.0 / math.sqrt(d_in))
                    dense_stream += 1
            self.blocks.append(Block(attn_norm=ones(d), ffn_norm=ones(d), proj=proj))
        self.final_norm = ones(d)
        self.lm_head = normal(dense_stream, (config.vocab_size, d), EMBED_STD)

    def named_parameters(self) -> dict[str, Tensor]:
        params = {"tok_emb": self.tok_emb}
        for i, block in enumerate(self.blocks):
            for name in ("attn_norm", *ATTN_PROJECTIONS, "ffn_norm", *FFN_PROJECTIONS):
                prefix = f"blocks.{i}.{name}"
                if name == "attn_norm":
                    params[prefix] = block.attn_norm
                elif name == "ffn_norm":
                    params[prefix] = block.ffn_norm
                elif isinstance(block.proj[name], HdplLayer):
                    for pname, p in block.proj[name].parameters().items():
                        params[f"{prefix}.{pname}"] = p
                else:
                    params[f"{prefix}.weight"] = block.proj[name]
        params["final_norm"] = self.final_norm
        params["lm_head"] = self.lm_head
        return params

    def num_params(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def hybrid_layers(self) -> dict[str, HdplLayer]:
        return {
            f"blocks.{i}.{name}": layer
            for i, block in enumerate(self.blocks)
            for name, layer in block.proj.items()
            if isinstance(layer, HdplLayer)
        }

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        for name, p in params.items():
            if name not in arrays or arrays[name].shape != p.shape:
                raise ValueError(f"missing or mis-shaped parameter {name}")
            p.data = np.array(arrays[name], dtype=self.dtype)

    def astype(self, dtype) -> TransformerModel:
        """Copy of this model with every parameter cast to ``dtype``."""
        clone = TransformerModel.__new__(TransformerModel)
        clone.config = self.config
        clone.dtype = np.dtype(dtype)
        clone._overrides = {}
        def conv(t: Tensor) -> Tensor:
            return Tensor(t.data.astype(dtype), requires_grad=True)

        clone.tok_emb = conv(self.tok_emb)
        clone.blocks = []
        for block in self.blocks:
            proj = {}
            for name, p in block.proj.items():
                if isinstance(p, HdplLayer):
                    proj[name] = HdplLayer(
                        p.d_in, p.d_out, p.k_groups, p.rank, p.beta,
                        conv(p.w_blocks), conv(p.w_mu), conv(p.w_logvar), conv(p.w_dec), p.stream,
                    )
                else:
                    proj[name] = conv(p)
            clone.blocks.append(Block(conv(block.attn_norm), conv(block.ffn_norm), proj))
        clone.final_norm = conv(self.final_norm)
        clone.lm_head = conv(self.lm_head)
        return clone


# ---------------------------------------------------------------------------
# building blocks


def rmsnorm(x: Tensor, gain: Tensor, eps: float = NORM_EPS) -> Tensor:
    if gain.shape != (x.shape[-1],):
        raise ad.ShapeError(f"gain {gain.shape} does not match features {x.shape[-1]}")
    ms = ad.mean(x * x, axis=-1, keepdims=True)
    return x * ad.rsqrt(ms + eps) * gain


@lru_cache(maxsize=32)
def _rope_tables(seq_len: int, head_dim: int, base: float, dtype_name: str):
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype_name), np.sin(angles).astype(dtype_name)


def apply_rope(x: Tensor, base: float = ROPE_BASE) -> Tensor:
    """Rotate pairs (x[2i], x[2i+1]) at position p by p * base**(-2i/head_dim).

    ``x`` is [B, H, L, head_dim].
    """
    *lead, seq_len, head_dim = x.shape
    if head_dim % 2:
        raise ValueError(f"rotary embedding needs an even head_dim, got {head_dim}")
    cos, sin = _rope_tables(seq_len, head_dim, float(base), x.dtype.name)
    pairs = x.data.reshape(*lead, seq_len, head_dim // 2, 2)
    even, odd = pairs[..., 0], pairs[..., 1]
    out = np.stack([even * cos - odd * sin, even * sin + odd * cos], axis=-1).reshape(x.shape)

    def bw(g):
        gp = g.reshape(pairs.shape)
        ge, go = gp[..., 0], gp[..., 1]
        return (np.stack([ge * cos + go * sin, go * cos - ge * sin], axis=-1).reshape(x.shape),)

    return ad.make_op("rope", out, (x,), bw)


@lru_cache(maxsize=32)
def _causal_mask(seq_len: int, dtype_name: str) -> np.ndarray:
    mask = np.triu(np.full((seq_len, seq_len), -np.inf), k=1)
    return mask.astype(dtype_name)


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(head_dim) + causal mask) v over [B, H, L, head_dim]."""
    if not q.shape == k.shape == v.shape:
        raise ad.ShapeError(f"q {q.shape}, k {k.shape}, v {v.shape} must match")
    seq_len, head_dim = q.shape[-2:]
    scores = ad.matmul(q, ad.transpose(k)) * (1.0 / math.sqrt(head_dim))
    scores = scores + Tensor(_causal_mask(seq_len, q.dtype.name))
    return ad.matmul(ad.softmax(scores, axis=-1), v)


class _Ctx:
    """Per-forward bookkeeping: RNG, mode, aux terms and latent taps."""

    def __init__(self, model: TransformerModel, rng, training, record_latents):
        self.model = model
        self.rng = rng
        self.training = training
        self.record = record_latents
        self.aux: dict[str, Tensor] = {}
        self.latents: list[LatentRecord] = []

    def project(self, layer_id: str, layer, x: Tensor) -> Tensor:
        if not isinstance(layer, HdplLayer):
            return ad.linear(x, layer)
        out = hdpl_forward(
            layer,
            x,
            self.rng,
            self.training,
            z_override=self.model._overrides.get(layer_id),
            kl_granularity=self.model.config.kl_granularity,
        )
        self.aux[layer_id] = out.aux_loss
        if self.record:
            self.latents.append(LatentRecord(layer_id, out.mu.data.copy(), out.logvar.data.copy(), out.z.data.copy()))
        return out.y


def _sum_aux(terms: list[Tensor], dtype) -> Tensor:
    total = Tensor(np.zeros((), dtype=dtype))
    for t in terms:
        total = total + t
    return total


def attention_block(x: Tensor, block: Block, layer_idx: int, config: ModelConfig, ctx: _Ctx) -> tuple[Tensor, Tensor]:
    b, seq_len, d = x.shape
    h, hd = config.n_heads, config.head_dim
    prefix = f"blocks.{layer_idx}"
    xn = rmsnorm(x, block.attn_norm)
    before = len(ctx.aux)

    def heads(name):
        y = ctx.project(f"{prefix}.{name}", block.proj[name], xn)
        return ad.permute(ad.reshape(y, (b, seq_len, h, hd)), (0, 2, 1, 3))

    q, k, v = apply_rope(heads("q")), apply_rope(heads("k")), heads("v")
    attn = ad.reshape(ad.permute(causal_attention(q, k, v), (0, 2, 1, 3)), (b, seq_len, d))
    out = x + ctx.project(f"{prefix}.o", block.proj["o"], attn)
    return out, _sum_aux(list(ctx.aux.values())[before:], x.dtype)


def ffn_block(x: Tensor, block: Block, layer_idx: int, config: ModelConfig, ctx: _Ctx) -> tuple[Tensor, Tensor]:
    prefix = f"blocks.{layer_idx}"
    xn = rmsnorm(x, block.ffn_norm)
    before = len(ctx.aux)
    g = ctx.project(f"{prefix}.gate", block.proj["gate"], xn)
    u = ctx.project(f"{prefix}.up", block.proj["up"], xn)
    out = x + ctx.project(f"{prefix}.down", block.proj["down"], ad.silu(g) * u)
    return out, _sum_aux(list(ctx.aux.values())[before:], x.dtype)


def model_forward(
    model: TransformerModel,
    tokens,
    targets=None,
    rng: RngState | None = None,
    training: bool = False,
    record_latents: bool = False,
) -> ForwardResult:
    config = model.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [B, L], got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError(f"token id out of range [0, {config.vocab_size})")
    if training and model._overrides:
        raise RuntimeError("latent overrides are only allowed in eval mode")
    if training and rng is None and config.active_hybrid_set:
        raise ValueError("training a hybrid model needs an RngState")

    ctx = _Ctx(model, rng, training, record_latents)
    x = ad.embedding(model.tok_emb, tokens)
    aux_parts = []
    for i, block in enumerate(model.blocks):
        x, aux_attn = attention_block(x, block, i, config, ctx)
        x, aux_ffn = ffn_block(x, block, i, config, ctx)
        aux_parts += [aux_attn, aux_ffn]
    x = rmsnorm(x, model.final_norm)
    logits = ad.linear(x, model.lm_head)

    ce = None
    if targets is not None:
        targets = np.asarray(targets)
        if targets.shape != tokens.shape:
            raise ValueError(f"targets {targets.shape} must match tokens {tokens.shape}")
        ce = ad.cross_entropy(ad.reshape(logits, (-1, config.vocab_size)), targets.reshape(-1))
    return ForwardResult(
        logits=logits,
        ce_loss=ce,
        aux_total=_sum_aux(aux_parts, model.dtype),
        latents=ctx.latents if record_latents else None,
        aux_terms=ctx.aux,
    )


# ---------------------------------------------------------------------------
# latent taps


def tap_latents(result: ForwardResult) -> list[LatentRecord]:
    if result.latents is None:
        raise ValueError("forward pass ran without record_latents=True")
    return list(result.latents)


class LatentOverride(contextlib.AbstractContextManager):
    """Handle returned by :func:`override_latent`; ``remove()`` undoes it."""

    def __init__(self, model: TransformerModel, layer_id: str):
        self.model = model
        self.layer_id = layer_id

    def remove(self) -> None:
        self.model._overrides.pop(self.layer_id, None)

    def __exit__(self, *exc):
        self.remove()
        return False


def override_latent(model: TransformerModel, layer_id: str, z) -> LatentOverride:
    """Substitute ``z`` for the latent of one hybrid layer in eval forwards."""
    layers = model.hybrid_layers()
    if layer_id not in layers:
        raise KeyError(f"unknown hybrid layer {layer_id!r}; have {list(layers)}")
    z = np.asarray(z, dtype=model.dtype)
    if z.ndim != 3 or z.shape[-1] != layers[layer_id].rank:
        raise ad.ShapeError(f"override must be [B, L, {layers[layer_id].rank}], got {z.shape}")
    model._overrides[layer_id] = z
    return LatentOverride(model, layer_id)
