"""Scaled dot-product attention, multi-head attention and DropHead.

DropHead zeroes whole attention heads during training. Each head is dropped
independently with probability ``p``. A draw that would drop every head is
rejected and redrawn. Kept heads are multiplied by ``H / count_kept`` so the
expected output matches the unmasked one.

Per-head projections are stored packed: ``wq`` is ``d x d`` and head ``i``
owns columns ``i*d_head:(i+1)*d_head`` (same for ``wk`` and ``wv``). Head
``i`` feeds rows ``i*d_head:(i+1)*d_head`` of ``wo``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

TRAINING = "training"
INFERENCE = "inference"
PER_EXAMPLE = "per_example"
PER_BATCH = "per_batch"
BEFORE_WO = "before_wo"
AFTER_WO = "after_wo"


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


@dataclass
class AttentionParams:
    num_heads: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor | None = None

    def __post_init__(self):
        d = self.wq.shape[0]
        if self.num_heads < 1 or d % self.num_heads:
            raise ValueError(f"num_heads={self.num_heads} must divide d_model={d}")
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(d, d)}")
        if self.bo is not None and self.bo.shape != (d,):
            raise ShapeError(f"bo has shape {self.bo.shape}, expected {(d,)}")

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads

    def head_columns(self, head: int) -> slice:
        if not 0 <= head < self.num_heads:
            raise IndexError(f"head {head} out of range for {self.num_heads} heads")
        return slice(head * self.d_head, (head + 1) * self.d_head)

    def head_weights(self, head: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Views of (W_Q, W_K, W_V) for one head, each ``d x d_head``."""
        cols = self.head_columns(head)
        return self.wq.data[:, cols], self.wk.data[:, cols], self.wv.data[:, cols]

    def tensors(self) -> dict[str, Tensor]:
        out = {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}
        if self.bo is not None:
            out["bo"] = self.bo
        return out

    @classmethod
    def init(cls, d_model: int, num_heads: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        w = [Tensor(xavier_uniform(rng, d_model, d_model, dtype), requires_grad=True) for _ in range(4)]
        bo = Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True) if bias else None
        return cls(num_heads, *w, bo=bo)


@dataclass(eq=False)
class HeadMask:
    """Binary keep-vector over heads; 1 keeps a head, 0 drops it."""

    xi: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi)
        if xi.ndim != 1 or (xi.dtype != bool and not ((xi == 0) | (xi == 1)).all()):
            raise ValueError("head mask must be a binary vector")
        self.xi = xi.astype(np.uint8)
        if not self.xi.any():
            raise ValueError("head mask drops every head")

    @property
    def num_heads(self) -> int:
        return self.xi.size

    @property
    def kept(self) -> int:
        return int(self.xi.sum())

    @property
    def gamma(self) -> Fraction:
        return Fraction(self.kept, self.num_heads)

    def factors(self) -> np.ndarray:
        """Per-head multiplier: ``H / kept`` for kept heads, 0 for dropped."""
        return self.xi * (self.num_heads / self.kept)


@dataclass(frozen=True)
class DropHeadConfig:
    p: float
    mode: str = TRAINING
    granularity: str = PER_EXAMPLE
    seed: int = 0
    layer: int = 0
    step: int = 0
    rescale: str = BEFORE_WO

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"DropHead rate must be in [0, 1), got {self.p}")
        if self.mode not in (TRAINING, INFERENCE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.granularity not in (PER_EXAMPLE, PER_BATCH):
            raise ValueError(f"unknown mask granularity {self.granularity!r}")
        if self.rescale not in (BEFORE_WO, AFTER_WO):
            raise ValueError(f"unknown rescale placement {self.rescale!r}")
        if min(self.seed, self.layer, self.step) < 0:
            raise ValueError("seed, layer and step must be nonnegative")

    @property
    def rng_stream_id(self) -> tuple[int, int, int]:
        return (self.seed, self.layer, self.step)

    @property
    def active(self) -> bool:
        return self.mode == TRAINING

    def at(self, **changes) -> "DropHeadConfig":
        return replace(self, **changes)


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    causal: bool = False,
    key_mask: np.ndarray | None = None,
    dropout: tuple[float, np.random.Generator] | None = None,
) -> tuple[Tensor, Tensor]:
    """``softmax(q k^T / sqrt(d_k)) v`` over the last two axes.

    ``key_mask`` marks real (non-padding) keys, shaped ``[B, l_k]`` for inputs
    with a leading batch axis. ``dropout`` = (rate, rng) applies elementwise
    dropout to the attention weights after the softmax.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key widths differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value lengths differ: {k.shape} vs {v.shape}")
    lq, lk = q.shape[-2], k.shape[-2]
    if causal and lq != lk:
        raise ShapeError(f"causal attention needs l_q == l_k, got {lq} and {lk}")
    scores = ops.mul(ops.matmul(q, ops.swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    mask = None
    if causal:
        mask = np.tri(lq, lk, dtype=bool)
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        km = km.reshape(km.shape[:1] + (1,) * (scores.ndim - 2) + km.shape[1:])
        mask = km if mask is None else mask & km
    weights = ops.softmax_rows(scores, mask)
    attn = weights
    if dropout is not None and dropout[0] > 0:
        attn = ops.dropout(weights, dropout[0], dropout[1])
    return ops.matmul(attn, v), weights


def sample_head_mask(cfg: DropHeadConfig, num_heads: int, example: int = 0) -> HeadMask:
    """Draw one head mask from the stream ``(seed, layer, step, example)``."""
    if not cfg.active:
        raise ValueError("head masks are only sampled in training mode")
    if num_heads < 1:
        raise ValueError("num_heads must be positive")
    rng = np.random.default_rng((cfg.seed, cfg.layer, cfg.step, example))
    while True:
        keep = rng.random(num_heads) >= cfg.p
        if keep.any():
            return HeadMask(keep)


def sample_head_masks(cfg: DropHeadConfig, num_heads: int, batch: int) -> list[HeadMask]:
    if cfg.granularity == PER_BATCH:
        return [sample_head_mask(cfg, num_heads, 0)] * batch
    return [sample_head_mask(cfg, num_heads, b) for b in range(batch)]


def apply_drophead(head_outputs, mask: HeadMask):
    """Zero dropped heads and scale kept ones by ``H / count_kept``.

    ``head_outputs`` is either a list of per-head tensors or a single tensor
    whose third-from-last axis indexes heads.
    """
    if isinstance(head_outputs, (list, tuple)):
        if len(head_outputs) != mask.num_heads:
            raise ShapeError(f"mask covers {mask.num_heads} heads, got {len(head_outputs)} outputs")
        return [ops.mul(h, float(f)) for h, f in zip(head_outputs, mask.factors())]
    if head_outputs.ndim < 3 or head_outputs.shape[-3] != mask.num_heads:
        raise ShapeError(f"mask covers {mask.num_heads} heads, outputs have shape {head_outputs.shape}")
    f = mask.factors()
    if head_outputs.ndim > 3:
        f = np.broadcast_to(f, head_outputs.shape[:-2])
    return ops.scale_heads(head_outputs, f)


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    B, l, d = x.shape
    return ops.transpose(ops.reshape(x, (B, l, num_heads, d // num_heads)), (0, 2, 1, 3))


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    params: AttentionParams,
    cfg: DropHeadConfig | None = None,
    causal: bool = False,
    *,
    key_mask: np.ndarray | None = None,
    masks: Sequence[HeadMask] | None = None,
    head_scale: np.ndarray | None = None,
    gate: Tensor | np.ndarray | None = None,
    attn_dropout: tuple[float, np.random.Generator] | None = None,
) -> Tensor:
    """Multi-head attention with optional DropHead.

    Inputs are ``[l, d]`` or ``[B, l, d]``. When ``cfg`` is in training mode a
    mask is sampled per example (or per batch) and applied to the head
    outputs. In inference mode ``cfg`` is ignored.

    ``masks`` fixes the DropHead masks instead of sampling them (one per
    example). ``head_scale`` [H] is a static per-head multiplier used by the
    ablation and pruning diagnostics; ``gate`` [H] or [B, H] is a
    differentiable multiplier used for importance scores.
    """
    unbatched = x_q.ndim == 2
    if unbatched:
        x_q = ops.reshape(x_q, (1,) + x_q.shape)
        x_kv = ops.reshape(x_kv, (1,) + x_kv.shape)
        if key_mask is not None:
            key_mask = np.asarray(key_mask)[None]
    d, H = params.d_model, params.num_heads
    if x_q.shape[-1] != d or x_kv.shape[-1] != d:
        raise ShapeError(f"inputs {x_q.shape}, {x_kv.shape} do not match d_model={d}")
    if x_q.shape[0] != x_kv.shape[0]:
        raise ShapeError(f"batch extents differ: {x_q.shape} vs {x_kv.shape}")
    B, lq = x_q.shape[0], x_q.shape[1]

    q = _split_heads(ops.matmul(x_q, params.wq), H)
    k = _split_heads(ops.matmul(x_kv, params.wk), H)
    v = _split_heads(ops.matmul(x_kv, params.wv), H)
    heads, _ = scaled_dot_attention(q, k, v, causal=causal, key_mask=key_mask, dropout=attn_dropout)

    if masks is None and cfg is not None and cfg.active:
        masks = sample_head_masks(cfg, H, B)
    after_wo = None
    if masks is not None:
        if len(masks) != B:
            raise ShapeError(f"got {len(masks)} head masks for a batch of {B}")
        if cfg is not None and cfg.rescale == AFTER_WO:
            heads = ops.scale_heads(heads, np.stack([m.xi for m in masks]).astype(heads.dtype))
            after_wo = np.array([H / m.kept for m in masks], dtype=heads.dtype)
        else:
            heads = ops.scale_heads(heads, np.stack([m.factors() for m in masks]))
    if head_scale is not None:
        heads = ops.scale_heads(heads, np.broadcast_to(np.asarray(head_scale, dtype=heads.dtype), (B, H)))
    if gate is not None:
        heads = ops.scale_heads(heads, gate)

    concat = ops.reshape(ops.transpose(heads, (0, 2, 1, 3)), (B, lq, d))
    out = ops.matmul(concat, params.wo)
    if params.bo is not None:
        out = out + params.bo
    if after_wo is not None:
        out = ops.reshape(ops.scale_heads(ops.reshape(out, (B, 1, lq, d)), after_wo[:, None]), (B, lq, d))
    if unbatched:
        out = ops.reshape(out, (lq, d))
    return out


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    @classmethod
    def init(cls, d_model: int, d_ff: int, rng: np.random.Generator, dtype=np.float64):
        return cls(
            Tensor(xavier_uniform(rng, d_model, d_ff, dtype), requires_grad=True),
            Tensor(np.zeros(d_ff, dtype=dtype), requires_grad=True),
            Tensor(xavier_uniform(rng, d_ff, d_model, dtype), requires_grad=True),
            Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True),
        )


ACTIVATIONS = {"relu": ops.relu, "tanh": ops.tanh, "linear": lambda x: x}


def feed_forward_block(
    x: Tensor,
    params: FeedForwardParams,
    activation: str = "relu",
    dropout: tuple[float, np.random.Generator] | None = None,
) -> Tensor:
    """Two affine maps with a nonlinearity (and optional unit dropout) between."""
    d = x.shape[-1]
    if params.w1.shape[0] != d or params.w2.shape[1] != d:
        raise ShapeError(f"feed-forward weights {params.w1.shape}, {params.w2.shape} do not fit width {d}")
    try:
        act = ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"unknown activation {activation!r}") from None
    h = act(ops.matmul(x, params.w1) + params.b1)
    if dropout is not None and dropout[0] > 0:
        h = ops.dropout(h, dropout[0], dropout[1])
    return ops.matmul(h, params.w2) + params.b2
