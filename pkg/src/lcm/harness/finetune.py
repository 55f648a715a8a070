"""Classifier fine-tuning driver with paired pretrained-vs-scratch runs."""

from __future__ import annotations

import logging
import os

import numpy as np

from .. import mpm
from .config import RunConfig, model_config_from, train_config_from
from .metrics import RunRecord, write_json, write_metrics
from .synth import realize_dataset, run_synth

log = logging.getLogger(__name__)


def _label_subset(train: dict, fraction: float, seed: int) -> dict:
    """Per-class deterministic subsample for low-label experiments."""
    if fraction >= 1.0:
        return train
    labels = train["labels"]
    keep = []
    rng = np.random.default_rng(np.random.SeedSequence((seed, 301)).generate_state(1)[0])
    for cls in np.unique(labels):
        rows = np.flatnonzero(labels == cls)
        n_keep = max(1, int(round(fraction * len(rows))))
        keep.append(rng.choice(rows, size=n_keep, replace=False))
    keep = np.sort(np.concatenate(keep))
    return {k: v[keep] for k, v in train.items()}


def _train_one(cfg: RunConfig, dataset: dict, seed: int, init_ckpt=None) -> dict:
    tc = train_config_from(cfg, "finetune")
    tc.rng_seed = seed
    n_classes = len(cfg["data.classes"])
    model_cfg = model_config_from(cfg, with_decoder=False, n_classes=n_classes)
    model = mpm.build_model(model_cfg, np.random.default_rng(seed))
    if init_ckpt:
        mpm.load_encoder_into(model, init_ckpt)
    opt = mpm.AdamWState()
    train = _label_subset(dataset["train"], cfg["finetune.label_fraction"], seed)
    steps_per_epoch = (len(train["points"]) + tc.batch_size - 1) // tc.batch_size
    total = steps_per_epoch * tc.epochs
    warm = steps_per_epoch * tc.warmup_epochs
    lr_fn = lambda step: mpm.cosine_lr(step, total, warm, tc.lr)
    val_every = cfg["finetune.val_every"]
    history = []
    for epoch in range(tc.epochs):
        data = dict(train)
        if "val" in dataset and ((epoch + 1) % val_every == 0 or epoch + 1 == tc.epochs):
            data["val"] = dataset["val"]
        metrics = mpm.finetune_classifier_epoch(
            model, opt, data, tc, epoch, lr_fn=lr_fn,
            frozen_encoder=cfg["finetune.frozen"], augment=cfg["finetune.augment"],
        )
        history.append(metrics)
        log.info("seed %d epoch %d loss %.4f train_acc %.4f val_acc %s", seed, epoch + 1,
                 metrics["train_loss"], metrics["train_acc"],
                 f"{metrics.get('val_acc', float('nan')):.4f}" if "val_acc" in metrics else "-")
    return {"history": history, "final": history[-1], "model": model}


def run_finetune(cfg: RunConfig, out_dir=None, dataset=None) -> dict:
    out_dir = out_dir or cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved.cfg"), "w", encoding="utf-8") as fh:
        fh.write(cfg.resolved_text() + "\n")
    if dataset is None:
        manifest = run_synth(cfg, out_dir)
        dataset = realize_dataset(manifest, cfg["train.n_patches"], cfg["model.k_group"])
    record = RunRecord(meta={"command": "finetune", "seed": cfg["seed"],
                             "precision": "float32", "workers": cfg.workers})
    seeds = list(cfg["finetune.seeds"])
    init = cfg["finetune.init"]
    compare = cfg["finetune.compare"]
    per_seed = {}
    for seed in seeds:
        variants = {}
        runs = [("pretrained", init), ("scratch", None)] if compare else [
            ("pretrained" if init else "scratch", init)
        ]
        for tag, ckpt in runs:
            result = _train_one(cfg, dataset, seed, init_ckpt=ckpt)
            final = result["final"]
            variants[tag] = final
            for epoch, m in enumerate(result["history"], start=1):
                record.add(epoch, f"train/{tag}/s{seed}", "loss", m["train_loss"])
                record.add(epoch, f"train/{tag}/s{seed}", "accuracy", m["train_acc"])
                if "val_acc" in m:
                    record.add(epoch, f"val/{tag}/s{seed}", "accuracy", m["val_acc"])
        per_seed[seed] = {tag: v.get("val_acc", v["train_acc"]) for tag, v in variants.items()}
    summary = {"per_seed": per_seed, "seeds": seeds, "compare": compare,
               "label_fraction": cfg["finetune.label_fraction"]}
    for tag in ("pretrained", "scratch"):
        vals = [per_seed[s][tag] for s in seeds if tag in per_seed[s]]
        if vals:
            summary[f"mean_{tag}"] = float(np.mean(vals))
            summary[f"std_{tag}"] = float(np.std(vals))
    paths = write_metrics(record, out_dir, "finetune_metrics")
    summary["metrics"] = paths
    write_json(summary, out_dir, "finetune_summary.json")
    return summary
