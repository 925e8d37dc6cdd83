"""Pre-norm transformer classifier and encoder-decoder transducer.

Every attention sublayer is a :class:`Site` with a stable index. The index is
the layer component of the DropHead random stream and the key used by the
analysis code. Sites are numbered encoder self-attention first, then for each
decoder layer its self-attention followed by its cross-attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .attention import (
    INFERENCE,
    AttentionParams,
    DropHeadConfig,
    FeedForwardParams,
    HeadMask,
    multi_head_attention,
    feed_forward_block,
)
from .data import BOS, EOS, PAD
from .tensor import Tensor

CLASSIFIER = "classifier"
SEQ2SEQ = "seq2seq"
ENC_ENC, ENC_DEC, DEC_DEC = "enc_enc", "enc_dec", "dec_dec"
ATTENTION_TYPES = (ENC_ENC, ENC_DEC, DEC_DEC)

# Stream tags for unit dropout; DropHead streams are 4-tuples and never collide.
_FF_STREAM = 1000
_ATTN_STREAM = 2000


@dataclass
class Placement:
    enc_enc: bool = True
    enc_dec: bool = True
    dec_dec: bool = True

    def __getitem__(self, kind: str) -> bool:
        return getattr(self, kind)

    def any(self) -> bool:
        return self.enc_enc or self.enc_dec or self.dec_dec


@dataclass
class ModelConfig:
    architecture: str = SEQ2SEQ
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 32
    max_len: int = 32
    num_classes: int = 2
    ff_dropout: float = 0.1
    dtype: str = "float32"
    placement: Placement = field(default_factory=Placement)
    # seq2seq only: reuse the embedding table as the logit projection.
    tie_output: bool = True

    def __post_init__(self):
        if self.architecture not in (CLASSIFIER, SEQ2SEQ):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.num_heads < 1 or self.d_model % self.num_heads:
            raise ValueError(f"num_heads={self.num_heads} must divide d_model={self.d_model}")
        if min(self.num_layers, self.d_ff, self.max_len) < 1:
            raise ValueError("num_layers, d_ff and max_len must be positive")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be at least 4")
        if not 0.0 <= self.ff_dropout < 1.0:
            raise ValueError("ff_dropout must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass(frozen=True)
class Site:
    index: int
    stack: str
    layer: int
    kind: str

    @property
    def prefix(self) -> str:
        part = {ENC_ENC: "self", DEC_DEC: "self", ENC_DEC: "cross"}[self.kind]
        return f"{'enc' if self.stack == 'encoder' else 'dec'}.{self.layer}.{part}"


@dataclass
class ForwardOptions:
    """Per-call knobs.

    ``drophead`` is the base DropHead config; its ``layer`` is replaced by the
    site index and it only applies at sites enabled by the model's placement
    flags. Unit dropout (feed-forward and attention weights) runs only when
    ``training`` is true. ``fixed_masks`` maps a site index to one HeadMask per
    example and overrides sampling. ``head_keep`` maps a site index to a
    binary keep-vector applied at any mode (ablation/pruning); kept heads are
    rescaled by ``H / kept`` unless ``rescale_kept`` is false. ``gates`` maps a
    site index to a per-head multiplier for importance scores.
    """

    training: bool = False
    seed: int = 0
    step: int = 0
    drophead: DropHeadConfig | None = None
    attn_dropout: float = 0.0
    ff_dropout: float | None = None
    fixed_masks: dict[int, list[HeadMask]] = field(default_factory=dict)
    head_keep: dict[int, np.ndarray] = field(default_factory=dict)
    rescale_kept: bool = True
    gates: dict[int, object] = field(default_factory=dict)


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


class TransformerModel:
    """Parameter container; forward passes are the module-level functions."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.positions = sinusoidal_positions(config.max_len, config.d_model).astype(config.np_dtype)
        self.sites = _enumerate_sites(config)
        expected = _param_shapes(config)
        if list(params) != list(expected):
            missing = set(expected) ^ set(params)
            raise ValueError(f"parameter set does not match config (differs at {sorted(missing)[:5]})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {shape}")

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "TransformerModel":
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        d = config.d_model
        params: dict[str, Tensor] = {}
        for name, shape in _param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if name == "embed":
                arr = rng.normal(0.0, d**-0.5, size=shape)
            elif leaf == "g":
                arr = np.ones(shape)
            elif len(shape) == 1:
                arr = np.zeros(shape)
            else:
                bound = math.sqrt(6.0 / (shape[0] + shape[1]))
                arr = rng.uniform(-bound, bound, size=shape)
            params[name] = Tensor(arr.astype(dt), requires_grad=True, name=name)
        return cls(config, params)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def attention(self, site: Site | int) -> AttentionParams:
        site = self.sites[site] if isinstance(site, int) else site
        p = site.prefix
        P = self.params
        return AttentionParams(
            self.config.num_heads, P[p + ".wq"], P[p + ".wk"], P[p + ".wv"], P[p + ".wo"], P[p + ".bo"]
        )

    def sites_of(self, kind: str) -> list[Site]:
        return [s for s in self.sites if s.kind == kind]

    def _ff(self, prefix: str) -> FeedForwardParams:
        P = self.params
        return FeedForwardParams(P[prefix + ".w1"], P[prefix + ".b1"], P[prefix + ".w2"], P[prefix + ".b2"])

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return ops.layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"])


def _enumerate_sites(cfg: ModelConfig) -> list[Site]:
    sites = [Site(i, "encoder", i, ENC_ENC) for i in range(cfg.num_layers)]
    if cfg.architecture == SEQ2SEQ:
        for i in range(cfg.num_layers):
            sites.append(Site(len(sites), "decoder", i, DEC_DEC))
            sites.append(Site(len(sites), "decoder", i, ENC_DEC))
    return sites


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (V, d)}

    def attn(p):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.{w}"] = (d, d)
        shapes[f"{p}.bo"] = (d,)

    def ln(p):
        shapes[f"{p}.g"] = (d,)
        shapes[f"{p}.b"] = (d,)

    def ff(p):
        shapes.update({f"{p}.w1": (d, f), f"{p}.b1": (f,), f"{p}.w2": (f, d), f"{p}.b2": (d,)})

    for i in range(cfg.num_layers):
        ln(f"enc.{i}.ln1")
        attn(f"enc.{i}.self")
        ln(f"enc.{i}.ln2")
        ff(f"enc.{i}.ff")
    ln("enc.ln")
    if cfg.architecture == SEQ2SEQ:
        for i in range(cfg.num_layers):
            ln(f"dec.{i}.ln1")
            attn(f"dec.{i}.self")
            ln(f"dec.{i}.ln2")
            attn(f"dec.{i}.cross")
            ln(f"dec.{i}.ln3")
            ff(f"dec.{i}.ff")
        ln("dec.ln")
        if not cfg.tie_output:
            shapes["out.w"] = (d, V)
        shapes["out.b"] = (V,)
    else:
        shapes["cls.w"] = (d, cfg.num_classes)
        shapes["cls.b"] = (cfg.num_classes,)
    return shapes


def _as_batch(tokens) -> tuple[np.ndarray, bool]:
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim == 1:
        return t[None], True
    if t.ndim != 2:
        raise ValueError(f"token array must be 1-D or 2-D, got shape {t.shape}")
    return t, False


def _embed(model: TransformerModel, tokens: np.ndarray) -> Tensor:
    cfg = model.config
    l = tokens.shape[1]
    if l > cfg.max_len:
        raise ValueError(f"sequence length {l} exceeds max_len={cfg.max_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise IndexError(f"token index out of range for vocabulary of {cfg.vocab_size}")
    x = ops.mul(ops.embedding(model.params["embed"], tokens), math.sqrt(cfg.d_model))
    return ops.add(x, model.positions[:l])


def _attend(model, site: Site, x_q, x_kv, key_mask, causal, opts: ForwardOptions) -> Tensor:
    H = model.config.num_heads
    cfg = None
    if opts.drophead is not None and model.config.placement[site.kind]:
        # Inference-mode forwards never sample masks, whatever the config says.
        mode = opts.drophead.mode if opts.training else INFERENCE
        cfg = replace(opts.drophead, layer=site.index, step=opts.step, seed=opts.seed, mode=mode)
    masks = opts.fixed_masks.get(site.index)
    head_scale = None
    keep = opts.head_keep.get(site.index)
    if keep is not None:
        keep = np.asarray(keep, dtype=np.float64)
        if keep.shape != (H,) or keep.sum() < 1:
            raise ValueError(f"site {site.index}: head_keep must be a length-{H} binary vector keeping >= 1 head")
        head_scale = keep * (H / keep.sum()) if opts.rescale_kept else keep
    attn_dropout = None
    if opts.training and opts.attn_dropout > 0:
        attn_dropout = (opts.attn_dropout, np.random.default_rng((opts.seed, _ATTN_STREAM + site.index, opts.step)))
    return multi_head_attention(
        x_q,
        x_kv,
        model.attention(site),
        cfg,
        causal,
        key_mask=key_mask,
        masks=masks,
        head_scale=head_scale,
        gate=opts.gates.get(site.index),
        attn_dropout=attn_dropout,
    )


def _ff_block(model, x: Tensor, ln: str, ff: str, ff_index: int, opts: ForwardOptions) -> Tensor:
    rate = model.config.ff_dropout if opts.ff_dropout is None else opts.ff_dropout
    dropout = None
    if opts.training and rate > 0:
        dropout = (rate, np.random.default_rng((opts.seed, _FF_STREAM + ff_index, opts.step)))
    return feed_forward_block(model._ln(x, ln), model._ff(ff), dropout=dropout)


def encode(model: TransformerModel, src: np.ndarray, opts: ForwardOptions | None = None) -> Tensor:
    """Encoder stack over a padded ``[B, l]`` batch; returns final-normed states."""
    opts = opts or ForwardOptions()
    key_mask = src != PAD
    x = _embed(model, src)
    for site in model.sites_of(ENC_ENC):
        p = f"enc.{site.layer}"
        h = model._ln(x, p + ".ln1")
        x = x + _attend(model, site, h, h, key_mask, False, opts)
        x = x + _ff_block(model, x, p + ".ln2", p + ".ff", site.layer, opts)
    return model._ln(x, "enc.ln")


def decode(model: TransformerModel, memory: Tensor, src: np.ndarray, tgt_in: np.ndarray,
           opts: ForwardOptions | None = None) -> Tensor:
    """Decoder stack; returns next-token logits ``[B, l_t, V]``."""
    opts = opts or ForwardOptions()
    cfg = model.config
    src_mask = src != PAD
    tgt_mask = tgt_in != PAD
    x = _embed(model, tgt_in)
    for i in range(cfg.num_layers):
        self_site = model.sites[cfg.num_layers + 2 * i]
        cross_site = model.sites[cfg.num_layers + 2 * i + 1]
        p = f"dec.{i}"
        h = model._ln(x, p + ".ln1")
        x = x + _attend(model, self_site, h, h, tgt_mask, True, opts)
        h = model._ln(x, p + ".ln2")
        x = x + _attend(model, cross_site, h, memory, src_mask, False, opts)
        x = x + _ff_block(model, x, p + ".ln3", p + ".ff", cfg.num_layers + i, opts)
    x = model._ln(x, "dec.ln")
    if cfg.tie_output:
        proj = ops.transpose(model.params["embed"], (1, 0))
    else:
        proj = model.params["out.w"]
    return ops.matmul(x, proj) + model.params["out.b"]


def forward_seq2seq(model: TransformerModel, src, tgt_in, opts: ForwardOptions | None = None) -> Tensor:
    """Logits for the next token at every decoder input position.

    Unbatched inputs give ``[l_t, V]``; batched inputs give ``[B, l_t, V]``.
    """
    if model.config.architecture != SEQ2SEQ:
        raise ValueError("forward_seq2seq needs a seq2seq model")
    src, single = _as_batch(src)
    tgt_in, _ = _as_batch(tgt_in)
    if src.shape[0] != tgt_in.shape[0]:
        raise ValueError("src and tgt batch sizes differ")
    logits = decode(model, encode(model, src, opts), src, tgt_in, opts)
    if single:
        logits = ops.reshape(logits, logits.shape[1:])
    return logits


def forward_classifier(model: TransformerModel, tokens, opts: ForwardOptions | None = None) -> Tensor:
    """Class logits from the mean-pooled encoder output."""
    if model.config.architecture != CLASSIFIER:
        raise ValueError("forward_classifier needs a classifier model")
    tokens, single = _as_batch(tokens)
    pooled = ops.masked_mean(encode(model, tokens, opts), tokens != PAD)
    logits = ops.matmul(pooled, model.params["cls.w"]) + model.params["cls.b"]
    if single:
        logits = ops.reshape(logits, logits.shape[1:])
    return logits


def seq2seq_loss(model, src, tgt, opts=None, per_example: bool = False) -> tuple[Tensor, Tensor]:
    """Token-level cross-entropy for a padded BOS..EOS target batch.

    The decoder reads ``tgt[:, :-1]`` and predicts ``tgt[:, 1:]``. With
    ``per_example`` the loss is the sum over examples of each example's mean
    token loss (used for per-example gradients); otherwise it is the mean over
    all real target tokens.
    """
    src, _ = _as_batch(src)
    tgt, _ = _as_batch(tgt)
    logits = forward_seq2seq(model, src, tgt[:, :-1], opts)
    targets = tgt[:, 1:]
    valid = targets != PAD
    if per_example:
        w = valid / valid.sum(axis=1, keepdims=True)
    else:
        w = valid / valid.sum()
    B, l, V = logits.shape
    loss = ops.cross_entropy_loss(ops.reshape(logits, (B * l, V)), targets.reshape(-1), w.reshape(-1))
    return loss, logits


def classifier_loss(model, tokens, labels, opts=None, per_example: bool = False) -> tuple[Tensor, Tensor]:
    tokens, _ = _as_batch(tokens)
    logits = forward_classifier(model, tokens, opts)
    n = tokens.shape[0]
    w = np.ones(n) if per_example else np.full(n, 1.0 / n)
    return ops.cross_entropy_loss(logits, labels, w), logits


def greedy_decode(model: TransformerModel, src, max_len: int) -> list:
    """Argmax decoding until EOS or ``max_len`` tokens; DropHead is never active.

    Unbatched ``src`` returns one token list; batched returns a list of lists.
    """
    src, single = _as_batch(src)
    B = src.shape[0]
    if max_len <= 0:
        return [] if single else [[] for _ in range(B)]
    max_len = min(max_len, model.config.max_len - 1)
    memory = encode(model, src)
    ys = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    out: list[list[int]] = [[] for _ in range(B)]
    for _ in range(max_len):
        logits = decode(model, memory, src, ys).data[:, -1]
        nxt = logits.argmax(axis=-1)
        for b in range(B):
            if not done[b]:
                if nxt[b] == EOS:
                    done[b] = True
                else:
                    out[b].append(int(nxt[b]))
        if done.all():
            break
        ys = np.concatenate([ys, nxt[:, None]], axis=1)
    return out[0] if single else out
