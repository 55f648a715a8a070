"""Locally constrained compact encoder, Transformer baseline, top-K masking.

The compact encoder stacks layers of (local aggregation + FFN) residual
blocks in pre-norm form; the baseline swaps the aggregation for multi-head
self-attention, optionally sparsified with top-K masks in feature or
geometric space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, CountError, ShapeError
from .layers import FFN, Affine, LayerNorm, knn_graph, local_aggregate, token_mlp

VARIANTS = ("LCM", "TRANSFORMER", "TRANSFORMER_TOPK_FEATURE", "TRANSFORMER_TOPK_GEOMETRY")
ABLATIONS = ("A", "B", "C", "D")


@dataclass
class EncoderConfig:
    variant: str = "LCM"
    n_layers: int = 12
    d: int = 384
    d_h: int = 80          # local-aggregation hidden width
    d_ffn: int = 128
    k_local: int = 5
    n_heads: int = 6       # attention variants
    top_k: int | None = None
    ablation: str = "D"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}")
        if self.variant.startswith("TRANSFORMER") and self.d % self.n_heads:
            raise ConfigError("model dim must divide evenly across heads")
        if "TOPK" in self.variant and self.top_k is None:
            raise ConfigError("top_k required for top-K variants")

    @property
    def is_attention(self) -> bool:
        return self.variant.startswith("TRANSFORMER")


@dataclass
class LALWeights:
    down: Affine   # 2d -> d_h
    up: Affine     # d_h -> d
    k_local: int

    @classmethod
    def init(cls, d, d_h, k_local, rng, dtype=np.float32):
        return cls(Affine.init(2 * d, d_h, rng, dtype), Affine.init(d_h, d, rng, dtype), k_local)


@dataclass
class MLPOnlyWeights:
    """Ablation B: Down/Up mapping per token, no neighborhood access."""

    down: Affine   # d -> d_h
    up: Affine     # d_h -> d

    @classmethod
    def init(cls, d, d_h, rng, dtype=np.float32):
        return cls(Affine.init(d, d_h, rng, dtype), Affine.init(d_h, d, rng, dtype))


@dataclass
class EncoderLayerWeights:
    lal: LALWeights | MLPOnlyWeights | None
    ffn: FFN | None
    ln1: LayerNorm | None
    ln2: LayerNorm | None

    @classmethod
    def init(cls, cfg: EncoderConfig, rng, dtype=np.float32):
        abl = cfg.ablation
        lal = None
        ln1 = None
        if abl in ("C", "D"):
            k = cfg.k_local
            lal = LALWeights.init(cfg.d, cfg.d_h, k, rng, dtype)
            ln1 = LayerNorm.init(cfg.d, dtype)
        elif abl == "B":
            lal = MLPOnlyWeights.init(cfg.d, cfg.d_h, rng, dtype)
            ln1 = LayerNorm.init(cfg.d, dtype)
        ffn = None
        ln2 = None
        if abl in ("A", "B", "D"):
            ffn = FFN.init(cfg.d, cfg.d_ffn, rng, dtype)
            ln2 = LayerNorm.init(cfg.d, dtype)
        return cls(lal=lal, ffn=ffn, ln1=ln1, ln2=ln2)


@dataclass
class AttentionWeights:
    wq: Affine
    wk: Affine
    wv: Affine
    wo: Affine
    n_heads: int

    @classmethod
    def init(cls, d, n_heads, rng, dtype=np.float32):
        return cls(
            *(Affine.init(d, d, rng, dtype) for _ in range(4)),
            n_heads=n_heads,
        )


@dataclass
class TransformerLayerWeights:
    attn: AttentionWeights
    ffn: FFN
    ln1: LayerNorm
    ln2: LayerNorm

    @classmethod
    def init(cls, cfg: EncoderConfig, rng, dtype=np.float32):
        return cls(
            attn=AttentionWeights.init(cfg.d, cfg.n_heads, rng, dtype),
            ffn=FFN.init(cfg.d, cfg.d_ffn, rng, dtype),
            ln1=LayerNorm.init(cfg.d, dtype),
            ln2=LayerNorm.init(cfg.d, dtype),
        )


@dataclass
class EncoderWeights:
    config: EncoderConfig
    layers: list = field(default_factory=list)

    @classmethod
    def init(cls, cfg: EncoderConfig, rng, dtype=np.float32):
        maker = TransformerLayerWeights if cfg.is_attention else EncoderLayerWeights
        return cls(config=cfg, layers=[maker.init(cfg, rng, dtype) for _ in range(cfg.n_layers)])


# ---------------------------------------------------------------------------
# forward passes


def local_aggregation(tokens: T.Tensor, centers, w: LALWeights, knn_idx=None) -> T.Tensor:
    """LAL sublayer: aggregate each token's k nearest neighbor features."""
    if knn_idx is None:
        knn_idx = knn_graph(centers, w.k_local)
    return local_aggregate(tokens, knn_idx, w.down, w.up)


def encoder_layer_forward(tokens, pos_emb, centers, w: EncoderLayerWeights, knn_idx=None):
    """One compact encoder layer: x +=  LAL(LN1(x)); x += FFN(LN2(x))."""
    x = T.add(tokens, pos_emb) if pos_emb is not None else tokens
    if isinstance(w.lal, LALWeights):
        if knn_idx is None:
            knn_idx = knn_graph(centers, w.lal.k_local)
        x = T.add(x, local_aggregate(w.ln1(x), knn_idx, w.lal.down, w.lal.up))
    elif isinstance(w.lal, MLPOnlyWeights):
        x = T.add(x, token_mlp(w.ln1(x), w.lal.down, w.lal.up))
    if w.ffn is not None:
        x = T.add(x, w.ffn(w.ln2(x)))
    return x


def multihead_attention(tokens: T.Tensor, w: AttentionWeights, mask=None, top_k_feature=None):
    """Pre-projected softmax attention; `mask` is additive with 0 / -inf entries.

    `top_k_feature` masks each head's raw logits to its K largest per row.
    """
    batched = tokens.ndim == 3
    x = tokens if batched else T.reshape(tokens, (1,) + tuple(tokens.shape))
    bt, n, d = x.shape
    h = w.n_heads
    if d % h:
        raise ShapeError("token dim must divide across heads")
    dh = d // h

    def split_heads(t):  # (bt, n, d) -> (bt*h, n, dh)
        t = T.reshape(t, (bt, n, h, dh))
        t = T.transpose(t, (0, 2, 1, 3))
        return T.reshape(t, (bt * h, n, dh))

    q = split_heads(w.wq(x))
    k = split_heads(w.wk(x))
    v = split_heads(w.wv(x))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    if top_k_feature is not None:
        logit_mask = np.stack(
            [topk_attention_mask(s, top_k_feature, "FEATURE") for s in scores.data]
        ).astype(scores.dtype)
        scores = T.add(scores, T.Tensor(logit_mask))
    if mask is not None:
        m = np.asarray(mask)
        if m.ndim == 2:
            m = np.broadcast_to(m, (bt * h,) + m.shape)
        else:  # per-item mask (bt, n, n) -> repeat across heads
            m = np.repeat(m, h, axis=0)
        scores = T.add(scores, T.Tensor(m.astype(scores.dtype)))
    att = T.softmax_rows(scores)
    out = T.matmul(att, v)                            # (bt*h, n, dh)
    out = T.reshape(out, (bt, h, n, dh))
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (bt, n, d))
    out = w.wo(out)
    return out if batched else T.reshape(out, (n, d))


def topk_attention_mask(scores_or_centers, k: int, space: str) -> np.ndarray:
    """Additive mask keeping per row the K best entries (0 kept, -inf dropped).

    FEATURE keeps the K largest raw logits; GEOMETRY keeps the K nearest
    centers (self always kept). Ties resolve to the lower index.
    """
    src = scores_or_centers.data if isinstance(scores_or_centers, T.Tensor) else np.asarray(scores_or_centers)
    if space == "FEATURE":
        n = src.shape[0]
        if src.shape != (n, n):
            raise ShapeError("feature-space masking needs a square logit matrix")
        if not 1 <= k <= n:
            raise CountError(f"top-K {k} out of range for {n} tokens")
        order = np.argsort(-src, axis=1, kind="stable")
    elif space == "GEOMETRY":
        n = src.shape[0]
        if not 1 <= k <= n:
            raise CountError(f"top-K {k} out of range for {n} tokens")
        diff = src[:, None, :] - src[None, :, :]
        d2 = (diff * diff).sum(axis=-1)
        np.fill_diagonal(d2, -1.0)  # self is always the top choice
        order = np.argsort(d2, axis=1, kind="stable")
    else:
        raise ConfigError(f"unknown top-K space {space!r}")
    mask = np.full((n, n), -np.inf)
    rows = np.repeat(np.arange(n), k)
    mask[rows, order[:, :k].reshape(-1)] = 0.0
    return mask


def transformer_layer_forward(tokens, pos_emb, w: TransformerLayerWeights, mask=None, top_k_feature=None):
    x = T.add(tokens, pos_emb) if pos_emb is not None else tokens
    x = T.add(x, multihead_attention(w.ln1(x), w.attn, mask=mask, top_k_feature=top_k_feature))
    x = T.add(x, w.ffn(w.ln2(x)))
    return x


def _geometry_mask(centers, k):
    centers = np.asarray(centers)
    if centers.ndim == 2:
        return topk_attention_mask(centers, k, "GEOMETRY")
    return np.stack([topk_attention_mask(c, k, "GEOMETRY") for c in centers])


def compact_encoder_forward(e0: T.Tensor, ep, centers, enc: EncoderWeights) -> T.Tensor:
    """Stack of compact layers; positional embedding re-added at every layer.

    The KNN table is computed once over the input centers and shared by all
    layers.
    """
    cfg = enc.config
    knn_idx = knn_graph(centers, cfg.k_local) if cfg.ablation in ("C", "D") else None
    x = e0
    for w in enc.layers:
        x = encoder_layer_forward(x, ep, centers, w, knn_idx=knn_idx)
    return x


def transformer_encoder_forward(e0: T.Tensor, ep, centers, enc: EncoderWeights) -> T.Tensor:
    cfg = enc.config
    mask = None
    top_k_feature = None
    if cfg.variant == "TRANSFORMER_TOPK_GEOMETRY":
        mask = _geometry_mask(centers, cfg.top_k)
    elif cfg.variant == "TRANSFORMER_TOPK_FEATURE":
        top_k_feature = cfg.top_k
    x = e0
    for w in enc.layers:
        x = transformer_layer_forward(x, ep, w, mask=mask, top_k_feature=top_k_feature)
    return x


def encoder_forward(e0, ep, centers, enc: EncoderWeights) -> T.Tensor:
    if enc.config.is_attention:
        return transformer_encoder_forward(e0, ep, centers, enc)
    return compact_encoder_forward(e0, ep, centers, enc)
