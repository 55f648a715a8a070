"""Synthetic dataset driver: deterministic clouds plus a regeneration manifest."""

from __future__ import annotations

import hashlib
import json

import numpy as np

from ..errors import ConfigError
from ..geometry import SHAPE_KINDS, synth_shape
from ..mpm import build_patch_index_cache
from .config import RunConfig
from .metrics import write_json

_SPLIT_CODE = {"train": 0, "val": 1}


def cloud_seed(master_seed: int, split: str, class_idx: int, item_idx: int) -> int:
    ss = np.random.SeedSequence((master_seed, _SPLIT_CODE[split], class_idx, item_idx))
    return int(ss.generate_state(1)[0])


def build_manifest(cfg: RunConfig) -> dict:
    classes = tuple(cfg["data.classes"])
    for kind in classes:
        if kind not in SHAPE_KINDS:
            raise ConfigError(f"unknown shape class {kind!r}")
    counts = {"train": cfg["data.train_per_class"], "val": cfg["data.val_per_class"]}
    if counts["train"] < 1 or counts["val"] < 0:
        raise ConfigError("per-class counts must be positive")
    entries = []
    for split, per_class in counts.items():
        for ci, kind in enumerate(classes):
            for ii in range(per_class):
                entries.append({
                    "split": split,
                    "kind": kind,
                    "label": ci,
                    "index": ii,
                    "seed": cloud_seed(cfg["seed"], split, ci, ii),
                })
    manifest = {
        "classes": list(classes),
        "train_per_class": counts["train"],
        "val_per_class": counts["val"],
        "n_points": cfg["data.n_points"],
        "noise": cfg["data.noise"],
        "master_seed": cfg["seed"],
        "entries": entries,
    }
    canon = json.dumps(manifest, sort_keys=True).encode()
    manifest["manifest_hash"] = hashlib.sha256(canon).hexdigest()
    return manifest


def cloud_from_entry(manifest: dict, entry: dict):
    return synth_shape(entry["kind"], manifest["n_points"], manifest["noise"], entry["seed"])


def realize_dataset(manifest: dict, n_patches: int, k_group: int, with_cache: bool = True) -> dict:
    """Materialize the manifest into per-split arrays plus patch index tables."""
    out = {}
    for split in ("train", "val"):
        rows = [e for e in manifest["entries"] if e["split"] == split]
        if not rows:
            continue
        points = np.stack([cloud_from_entry(manifest, e).points for e in rows])
        labels = np.array([e["label"] for e in rows], dtype=np.int64)
        split_data = {"points": points, "labels": labels}
        if with_cache:
            cidx, gidx = build_patch_index_cache(points, n_patches, k_group)
            split_data["center_idx"] = cidx
            split_data["group_idx"] = gidx
        out[split] = split_data
    out["manifest"] = manifest
    return out


def run_synth(cfg: RunConfig, out_dir=None) -> dict:
    """Build the manifest (and optionally write it); returns the manifest."""
    manifest = build_manifest(cfg)
    if out_dir is not None:
        write_json(manifest, out_dir, "dataset_manifest.json")
    return manifest
