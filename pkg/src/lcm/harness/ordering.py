"""Patch-ordering study: pretrain loss spread across orderings, FFN vs LCFFN,
plus the measured cost of combined-order scans."""

from __future__ import annotations

import logging
import os
import time

import numpy as np

from .. import mpm
from .. import tensor as T
from ..geometry import OrderingSpec
from .config import RunConfig, model_config_from, train_config_from
from .metrics import RunRecord, write_json, write_metrics
from .pretrain import _batch_dict, eval_val_loss
from .synth import build_manifest, realize_dataset

log = logging.getLogger(__name__)


def _cell_pretrain(cfg: RunConfig, dataset, ordering: str, ffn_kind: str, seed: int) -> float:
    tc = train_config_from(cfg, "train")
    tc.rng_seed = seed
    tc.epochs = cfg["ordering.epochs"]
    tc.warmup_epochs = min(1, tc.epochs)
    tc.batch_size = min(tc.batch_size, 32)
    model_cfg = model_config_from(cfg, with_decoder=True, n_classes=None)
    model_cfg.decoder.ffn_kind = ffn_kind
    model_cfg.decoder.ordering = OrderingSpec.parse(ordering, cfg["model.hilbert_bits"])
    model = mpm.build_model(model_cfg, np.random.default_rng(seed))
    opt = mpm.AdamWState()
    train = dataset["train"]
    n = len(train["points"])
    steps_per_epoch = (n + tc.batch_size - 1) // tc.batch_size
    total = steps_per_epoch * tc.epochs
    for epoch in range(tc.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence((seed, 11, epoch)).generate_state(1)[0]
        ).permutation(n)
        for step in range(steps_per_epoch):
            idx = order[step * tc.batch_size : (step + 1) * tc.batch_size]
            if len(idx) == 0:
                continue
            batch = _batch_dict(train, idx, tc, epoch, step)
            lr = mpm.cosine_lr(opt.step, total, steps_per_epoch * tc.warmup_epochs, tc.lr)
            mpm.pretrain_step(batch, model, opt, tc, lr=lr)
    return eval_val_loss(model, dataset["val"], tc)


def measure_scan_cost_ratio(cfg: RunConfig, combined: str = None) -> dict:
    """Wall time of the ordered-scan stage, combined orders vs a single order.

    Combined orderings concatenate the permuted sequence, so only the scan
    stage (delta/B/C projections plus the recurrence over q*N tokens) grows
    with the order count; the in/out projections and the LCFFN see the same
    N tokens either way. Measurements interleave the two variants so machine
    state is shared, and report the medians.
    """
    from ..decoder import _apply_permutation_long, _orderings_for, ssm_scan
    from ..decoder import SSMWeights

    combined = combined or cfg["ordering.combined"]
    repeats = cfg["ordering.timing_repeats"]
    model_cfg = model_config_from(cfg, with_decoder=True, n_classes=None)
    dcfg = model_cfg.decoder
    rng = np.random.default_rng(cfg["seed"])
    b, n = 32, cfg["train.n_patches"]
    stream = T.Tensor(rng.normal(size=(b, n, dcfg.d_inner)).astype(np.float32))
    centers = rng.normal(size=(b, n, 3))
    w = SSMWeights.init(dcfg.d, dcfg.d_inner, dcfg.d_state, np.random.default_rng(0))
    bits = cfg["model.hilbert_bits"]
    perm1 = _orderings_for(centers, OrderingSpec.parse(combined[0], bits))[0]
    perms_q = _orderings_for(centers, OrderingSpec.parse(combined, bits))
    cat_q = np.concatenate(perms_q, axis=1)

    def single_pass() -> float:
        t0 = time.perf_counter()
        ssm_scan(_apply_permutation_long(stream, perm1), w)
        return time.perf_counter() - t0

    def multi_pass() -> float:
        t0 = time.perf_counter()
        ssm_scan(_apply_permutation_long(stream, cat_q), w)
        return time.perf_counter() - t0

    for _ in range(3):  # warm both code paths and the allocator
        single_pass()
        multi_pass()
    singles, multis = [], []
    for _ in range(repeats):
        singles.append(single_pass())
        multis.append(multi_pass())
    # least-interfered sample on each side; interleaving shares machine state
    single = float(np.min(singles))
    multi = float(np.min(multis))
    q = len(combined)
    ratio = multi / single
    return {"single_order": combined[0], "combined_order": combined, "q": q,
            "single_seconds": single, "combined_seconds": multi, "ratio": ratio,
            "within_25pct_of_q": bool(0.75 * q <= ratio <= 1.25 * q)}


def run_ordering_study(cfg: RunConfig, out_dir=None) -> dict:
    out_dir = out_dir or cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved.cfg"), "w", encoding="utf-8") as fh:
        fh.write(cfg.resolved_text() + "\n")
    small = RunConfig(dict(cfg.values))
    small.values["data.train_per_class"] = cfg["ordering.train_per_class"]
    small.values["data.val_per_class"] = cfg["ordering.val_per_class"]
    manifest = build_manifest(small)
    dataset = realize_dataset(manifest, cfg["train.n_patches"], cfg["model.k_group"])

    orders = list(cfg["ordering.orders"])
    seeds = list(range(cfg["ordering.seeds"]))
    record = RunRecord(meta={"command": "ordering-study", "precision": "float32", "workers": cfg.workers})
    cells = []
    for ffn_kind in ("FFN", "LCFFN"):
        for order in orders:
            for seed in seeds:
                t0 = time.perf_counter()
                val = _cell_pretrain(cfg, dataset, order, ffn_kind, seed)
                cells.append({"ffn_kind": ffn_kind, "ordering": order, "seed": seed,
                              "val_chamfer": val})
                record.add(seed, f"{ffn_kind}/{order}", "val_chamfer", val)
                log.info("%s %s seed %d -> %.6f (%.1fs)", ffn_kind, order, seed, val,
                         time.perf_counter() - t0)

    spreads = {}
    for ffn_kind in ("FFN", "LCFFN"):
        per_seed = []
        for seed in seeds:
            vals = [c["val_chamfer"] for c in cells
                    if c["ffn_kind"] == ffn_kind and c["seed"] == seed]
            per_seed.append(max(vals) - min(vals))
        spreads[ffn_kind] = per_seed
    lcffn_tighter = sum(l <= f for l, f in zip(spreads["LCFFN"], spreads["FFN"]))
    cost = measure_scan_cost_ratio(cfg)
    report = {
        "cells": cells,
        "n_cells": len(cells),
        "spreads": spreads,
        "ffn_spread_all_positive": all(s > 0 for s in spreads["FFN"]),
        "lcffn_spread_leq_ffn_count": lcffn_tighter,
        "n_seeds": len(seeds),
        "combined_order_cost": cost,
    }
    write_metrics(record, out_dir, "ordering_metrics")
    write_json(report, out_dir, "ordering_report.json")
    return report
