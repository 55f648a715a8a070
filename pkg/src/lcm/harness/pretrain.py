"""Masked-reconstruction pretraining driver."""

from __future__ import annotations

import logging
import os
import time

import numpy as np

from .. import mpm
from .config import RunConfig, model_config_from, train_config_from
from .metrics import RunRecord, write_json, write_metrics
from .synth import realize_dataset, run_synth

log = logging.getLogger(__name__)


def _mask_split(tc, n_patches, stream, epoch, step, slot):
    seed = int(
        np.random.SeedSequence((tc.rng_seed, 13, stream, epoch, step, slot)).generate_state(1)[0]
    )
    return mpm.MaskSpec(tc.unmask_ratio, rng_seed=seed).split(n_patches)


def _batch_dict(split, idx, tc, epoch, step, stream=0):
    centers, patches = mpm.patches_from_cache(
        split["points"][idx], split["center_idx"][idx], split["group_idx"][idx]
    )
    vis, msk = [], []
    for slot in range(len(idx)):
        v, m = _mask_split(tc, tc.n_patches, stream, epoch, step, slot)
        vis.append(v)
        msk.append(m)
    return {
        "centers": centers.astype(np.float32),
        "patches": patches.astype(np.float32),
        "visible": np.stack(vis),
        "masked": np.stack(msk),
    }


def eval_val_loss(model, val, tc, batch_size: int = 128) -> float:
    """Forward-only Chamfer loss on the val split with fixed mask seeds."""
    n = len(val["points"])
    total = 0.0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        batch = _batch_dict(val, idx, tc, epoch=0, step=start, stream=1)
        loss = mpm.pretrain_forward(
            model, batch["centers"], batch["patches"], batch["visible"], batch["masked"],
            dtype=tc.dtype,
        )
        total += float(loss.data) * len(idx)
    return total / n


def run_pretrain(cfg: RunConfig, out_dir=None, dataset=None) -> dict:
    out_dir = out_dir or cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved.cfg"), "w", encoding="utf-8") as fh:
        fh.write(cfg.resolved_text() + "\n")
    tc = train_config_from(cfg, "train")
    if dataset is None:
        manifest = run_synth(cfg, out_dir)
        dataset = realize_dataset(manifest, tc.n_patches, cfg["model.k_group"])
    model_cfg = model_config_from(cfg, with_decoder=True, n_classes=None)
    model = mpm.build_model(model_cfg, np.random.default_rng(cfg["seed"]))
    opt = mpm.AdamWState()
    if cfg["train.resume"]:
        mpm.load_checkpoint(cfg["train.resume"], model, opt_state=opt)
        log.info("resumed from %s at step %d", cfg["train.resume"], opt.step)

    train = dataset["train"]
    val = dataset.get("val")
    n_train = len(train["points"])
    steps_per_epoch = (n_train + tc.batch_size - 1) // tc.batch_size
    total_steps = steps_per_epoch * tc.epochs
    warmup_steps = steps_per_epoch * tc.warmup_epochs
    record = RunRecord(meta={"command": "pretrain", "seed": cfg["seed"],
                             "precision": tc.precision, "workers": tc.workers,
                             "n_train": n_train, "steps_per_epoch": steps_per_epoch})

    val_loss_epoch0 = eval_val_loss(model, val, tc) if val is not None else None
    if val_loss_epoch0 is not None:
        record.add(0, "val", "chamfer", val_loss_epoch0)
        log.info("epoch 0 val chamfer %.6f", val_loss_epoch0)

    start_epoch = opt.step // steps_per_epoch
    val_loss = val_loss_epoch0
    train_loss = None
    for epoch in range(start_epoch, tc.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence((tc.rng_seed, 11, epoch)).generate_state(1)[0]
        ).permutation(n_train)
        t_epoch = time.perf_counter()
        loss_sum = 0.0
        for step in range(steps_per_epoch):
            idx = order[step * tc.batch_size : (step + 1) * tc.batch_size]
            if len(idx) == 0:
                continue
            batch = _batch_dict(train, idx, tc, epoch, step)
            lr = mpm.cosine_lr(opt.step, total_steps, warmup_steps, tc.lr)
            t0 = time.perf_counter()
            loss = mpm.pretrain_step(batch, model, opt, tc, lr=lr)
            loss_sum += loss * len(idx)
            record.add_step(step=opt.step, epoch=epoch + 1, loss=loss, lr=lr,
                            seconds=round(time.perf_counter() - t0, 4))
        train_loss = loss_sum / n_train
        record.add(epoch + 1, "train", "chamfer", train_loss)
        if val is not None and ((epoch + 1) % cfg["train.val_every"] == 0 or epoch + 1 == tc.epochs):
            val_loss = eval_val_loss(model, val, tc)
            record.add(epoch + 1, "val", "chamfer", val_loss)
        log.info("epoch %d train %.6f val %s (%.1fs)", epoch + 1, train_loss,
                 f"{val_loss:.6f}" if val_loss is not None else "-",
                 time.perf_counter() - t_epoch)

    ckpt_path = os.path.join(out_dir, "pretrained.lcm")
    mpm.save_checkpoint(model, ckpt_path, opt_state=opt)
    paths = write_metrics(record, out_dir, "pretrain_metrics")
    summary = {
        "checkpoint": ckpt_path,
        "val_loss_epoch0": val_loss_epoch0,
        "val_loss_final": val_loss,
        "train_loss_final": train_loss,
        "epochs": tc.epochs,
        "steps": opt.step,
        "metrics": paths,
    }
    write_json(summary, out_dir, "pretrain_summary.json")
    return summary
