"""Analytic parameter and FLOP counters.

Counting convention (used consistently everywhere):
  - one multiply-add counts as 2 FLOPs; a bias add is 1 FLOP per output;
  - attention counts the QK^T and AV products (4*N^2*d per layer) plus
    softmax/scaling bookkeeping at 6 FLOPs per logit per head;
  - KNN/FPS squared distances count 8 FLOPs each (3 sub, 3 mul, 2 add);
  - activations cost 1 FLOP per element, layer norm 8 per element,
    max/mean pooling 1 per element.

Totals are what the efficiency comparison uses. The complexity-vs-length
study fits slopes on the token-mixing component alone (attention product
chain vs. local aggregation), which is the part whose growth the two
architectures actually disagree on; the per-token projection/FFN terms are
identical in kind for both models and would mask the asymptotics at small
patch counts.
"""

from __future__ import annotations

import numpy as np

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .mpm import ModelConfig


def affine_params(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def affine_flops(rows: int, d_in: int, d_out: int) -> int:
    return 2 * rows * d_in * d_out + rows * d_out


# ---------------------------------------------------------------------------
# parameters


def encoder_layer_params(cfg: EncoderConfig) -> int:
    d = cfg.d
    total = 0
    if cfg.is_attention:
        total += 4 * affine_params(d, d)          # q, k, v, o
        total += affine_params(d, cfg.d_ffn) + affine_params(cfg.d_ffn, d)
        total += 2 * 2 * d                        # two layer norms
        return total
    abl = cfg.ablation
    if abl in ("C", "D"):
        total += affine_params(2 * d, cfg.d_h) + affine_params(cfg.d_h, d) + 2 * d
    elif abl == "B":
        total += affine_params(d, cfg.d_h) + affine_params(cfg.d_h, d) + 2 * d
    if abl in ("A", "B", "D"):
        total += affine_params(d, cfg.d_ffn) + affine_params(cfg.d_ffn, d) + 2 * d
    return total


def decoder_layer_params(cfg: DecoderConfig) -> int:
    d = cfg.d
    total = 0
    if cfg.sublayer_kind == "SSM":
        di, ds = cfg.d_inner, cfg.d_state
        total += di * ds                          # a_log
        total += affine_params(d, 2 * di)
        total += 2 * affine_params(di, ds)        # B and C projections
        total += affine_params(di, 1)
        total += affine_params(di, d)
    elif cfg.sublayer_kind == "ATTENTION":
        total += 4 * affine_params(d, d)
    else:  # LAL
        total += affine_params(2 * d, cfg.d_h) + affine_params(cfg.d_h, d)
    if cfg.ffn_kind == "LCFFN":
        total += affine_params(2 * d, cfg.d_h) + affine_params(cfg.d_h, d)
    else:
        total += affine_params(d, cfg.d_ffn) + affine_params(cfg.d_ffn, d)
    total += 2 * 2 * d
    return total


def count_params(config) -> int:
    """Exact learnable scalar count for an encoder stack or a full model."""
    if isinstance(config, EncoderConfig):
        return config.n_layers * encoder_layer_params(config)
    if isinstance(config, DecoderConfig):
        return config.m_layers * decoder_layer_params(config)
    cfg: ModelConfig = config
    d = cfg.d
    total = affine_params(3, cfg.embed_hidden) + affine_params(cfg.embed_hidden, d)
    total += affine_params(3, cfg.pe_hidden) + affine_params(cfg.pe_hidden, d)   # EPE
    total += count_params(cfg.encoder)
    if cfg.decoder is not None:
        total += affine_params(3, cfg.pe_hidden) + affine_params(cfg.pe_hidden, d)  # DPE
        total += d                                                                  # mask query
        total += count_params(cfg.decoder)
        rh = cfg.recon_hidden or d
        total += affine_params(d, rh) + affine_params(rh, cfg.k_group * 3)
    if cfg.n_classes is not None:
        h1, h2 = cfg.head_hidden
        total += affine_params(2 * d, h1) + affine_params(h1, h2) + affine_params(h2, cfg.n_classes)
    return total


# ---------------------------------------------------------------------------
# FLOPs


def _encoder_layer_flops(cfg: EncoderConfig, n: int) -> dict:
    d = cfg.d
    comp = {"mixing": 0, "proj": 0, "ffn": 0, "norm": 0}
    if cfg.is_attention:
        h = cfg.n_heads
        comp["proj"] = 4 * affine_flops(n, d, d)
        comp["mixing"] = 4 * n * n * d + 6 * h * n * n
        comp["ffn"] = affine_flops(n, d, cfg.d_ffn) + n * cfg.d_ffn + affine_flops(n, cfg.d_ffn, d)
        comp["norm"] = 2 * 8 * n * d
        return comp
    abl = cfg.ablation
    if abl in ("C", "D"):
        k = cfg.k_local
        comp["mixing"] = (
            affine_flops(n * k, 2 * d, cfg.d_h)
            + 2 * n * k * cfg.d_h              # activation + max pool
            + affine_flops(n, cfg.d_h, d)
        )
        comp["norm"] += 8 * n * d
    elif abl == "B":
        comp["mixing"] = (
            affine_flops(n, d, cfg.d_h) + n * cfg.d_h + affine_flops(n, cfg.d_h, d)
        )
        comp["norm"] += 8 * n * d
    if abl in ("A", "B", "D"):
        comp["ffn"] = affine_flops(n, d, cfg.d_ffn) + n * cfg.d_ffn + affine_flops(n, cfg.d_ffn, d)
        comp["norm"] += 8 * n * d
    return comp


def _decoder_layer_flops(cfg: DecoderConfig, n: int) -> dict:
    d = cfg.d
    comp = {"mixing": 0, "proj": 0, "ffn": 0, "norm": 16 * n * d}
    if cfg.sublayer_kind == "SSM":
        di, ds = cfg.d_inner, cfg.d_state
        comp["proj"] = affine_flops(n, d, 2 * di) + affine_flops(n, di, d) + 2 * n * di
        comp["mixing"] = (
            affine_flops(n, di, 1) + n                        # delta + softplus
            + 2 * affine_flops(n, di, ds)                     # B, C
            + 10 * n * di * ds                                # discretize + recurrence
            + 2 * n * di                                      # gate silu + mul
        )
        q = len(cfg.ordering.kinds) if cfg.ordering is not None else 1
        comp["mixing"] *= q
    elif cfg.sublayer_kind == "ATTENTION":
        h = cfg.n_heads
        comp["proj"] = 4 * affine_flops(n, d, d)
        comp["mixing"] = 4 * n * n * d + 6 * h * n * n
    else:
        comp["mixing"] = (
            affine_flops(n * cfg.k_local, 2 * d, cfg.d_h)
            + 2 * n * cfg.k_local * cfg.d_h
            + affine_flops(n, cfg.d_h, d)
        )
    if cfg.ffn_kind == "LCFFN":
        comp["ffn"] = (
            affine_flops(n * cfg.k_local, 2 * d, cfg.d_h)
            + 2 * n * cfg.k_local * cfg.d_h
            + affine_flops(n, cfg.d_h, d)
        )
    else:
        comp["ffn"] = affine_flops(n, d, cfg.d_ffn) + n * cfg.d_ffn + affine_flops(n, cfg.d_ffn, d)
    return comp


def count_flops_detail(config: ModelConfig, n_points: int, n_patches: int,
                       k_group: int | None = None, visible_fraction: float = 1.0) -> dict:
    """Component breakdown of one analytic forward pass.

    Defaults describe the classification forward (all patches visible).
    `visible_fraction` < 1 models the pretraining encoder input instead.
    """
    cfg = config
    k_group = k_group or cfg.k_group
    d = cfg.d
    n_enc = max(1, int(round(visible_fraction * n_patches)))
    comp = {}
    comp["sampling"] = n_patches * n_points * 9 + n_patches * n_points * 8
    rows = n_enc * k_group
    comp["embed"] = (
        affine_flops(rows, 3, cfg.embed_hidden)
        + rows * cfg.embed_hidden
        + affine_flops(rows, cfg.embed_hidden, d)
        + rows * d
    )
    comp["pe"] = affine_flops(n_enc, 3, cfg.pe_hidden) + n_enc * cfg.pe_hidden + affine_flops(n_enc, cfg.pe_hidden, d)
    enc = cfg.encoder
    mixing = proj = ffn = norm = 0
    layer = _encoder_layer_flops(enc, n_enc)
    mixing += enc.n_layers * layer["mixing"]
    proj += enc.n_layers * layer["proj"]
    ffn += enc.n_layers * layer["ffn"]
    norm += enc.n_layers * layer["norm"]
    if not enc.is_attention and enc.ablation in ("C", "D"):
        mixing += 8 * n_enc * n_enc  # shared KNN graph, built once per forward
    if enc.variant == "TRANSFORMER_TOPK_GEOMETRY":
        mixing += 8 * n_enc * n_enc
    comp["mixing"] = mixing
    comp["proj"] = proj
    comp["ffn"] = ffn
    comp["norm"] = norm
    if cfg.decoder is not None and visible_fraction < 1.0:
        dec = cfg.decoder
        comp["pe"] += affine_flops(n_patches, 3, cfg.pe_hidden) + n_patches * cfg.pe_hidden + affine_flops(n_patches, cfg.pe_hidden, d)
        dl = _decoder_layer_flops(dec, n_patches)
        comp["decoder"] = dec.m_layers * sum(dl.values())
        if dec.ffn_kind == "LCFFN" or dec.sublayer_kind == "LAL":
            comp["decoder"] += 8 * n_patches * n_patches
        n_masked = n_patches - n_enc
        rh = cfg.recon_hidden or d
        comp["recon"] = (
            affine_flops(n_masked, d, rh) + n_masked * rh + affine_flops(n_masked, rh, k_group * 3)
        )
    if cfg.n_classes is not None:
        h1, h2 = cfg.head_hidden
        comp["head"] = (
            3 * n_enc * d
            + affine_flops(1, 2 * d, h1) + h1
            + affine_flops(1, h1, h2) + h2
            + affine_flops(1, h2, cfg.n_classes)
        )
    comp["total"] = int(sum(v for kname, v in comp.items() if kname != "total"))
    return comp


def count_flops(config: ModelConfig, n_points: int, n_patches: int,
                k_group: int | None = None) -> int:
    """Analytic forward-pass FLOP total (classification layout)."""
    return count_flops_detail(config, n_points, n_patches, k_group)["total"]


def mixing_flops(config: ModelConfig, n_patches: int) -> int:
    """Token-mixing FLOPs at a given patch count (the scaling-study series)."""
    return count_flops_detail(config, n_points=16 * n_patches, n_patches=n_patches)["mixing"]


def fit_loglog(xs, ys):
    """Least-squares slope and R^2 of log(y) against log(x)."""
    lx = np.log(np.asarray(xs, dtype=np.float64))
    ly = np.log(np.asarray(ys, dtype=np.float64))
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(((ly - pred) ** 2).sum())
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


# ---------------------------------------------------------------------------
# reference configurations at the published operating point


def paper_transformer_classifier(n_classes: int = 15) -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(
            variant="TRANSFORMER", n_layers=12, d=384, d_ffn=1536, n_heads=6
        ),
        k_group=32,
        embed_hidden=128,
        pe_hidden=128,
        n_classes=n_classes,
        head_hidden=(256, 256),
    )


def paper_lcm_classifier(n_classes: int = 15) -> ModelConfig:
    # d_h/d_ffn fixed by the calibration scan below (2.68M total)
    return ModelConfig(
        encoder=EncoderConfig(
            variant="LCM", n_layers=12, d=384, d_h=80, d_ffn=128, k_local=5
        ),
        k_group=32,
        embed_hidden=128,
        pe_hidden=128,
        n_classes=n_classes,
        head_hidden=(256, 256),
    )


def calibrate_lcm_widths(target: float = 2.7e6, cap: float = 3.2e6) -> dict:
    """Grid-scan LAL/FFN widths for the paper-scale compact encoder.

    Returns the (d_h, d_ffn) pair whose full-classifier parameter count lands
    closest to `target` without exceeding `cap`, plus the scanned table.
    """
    table = []
    best = None
    for d_h in range(32, 161, 8):
        for d_ffn in range(64, 513, 32):
            cfg = paper_lcm_classifier()
            cfg.encoder.d_h = d_h
            cfg.encoder.d_ffn = d_ffn
            n = count_params(cfg)
            table.append((d_h, d_ffn, n))
            if n <= cap and (best is None or abs(n - target) < abs(best[2] - target)):
                best = (d_h, d_ffn, n)
    return {"best": best, "table": table}
