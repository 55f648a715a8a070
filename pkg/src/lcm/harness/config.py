"""Run configuration: flat dotted-key text files plus flag overrides.

Unknown keys are rejected with the offending line; every run echoes the
fully resolved configuration to its output directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from ..decoder import DecoderConfig
from ..encoder import EncoderConfig
from ..errors import ConfigError
from ..geometry import SHAPE_KINDS, OrderingSpec
from ..mpm import ModelConfig, TrainConfig

_UNSET = object()


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _str_list(text: str):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _opt_str(text: str):
    return None if text.strip().lower() in ("", "none") else text.strip()


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


# key -> (default, parser)
SCHEMA = {
    "seed": (0, int),
    "out": ("runs/latest", str),
    "workers": (0, int),                       # 0 -> LCM_NUM_WORKERS or 1
    "data.classes": (SHAPE_KINDS, _str_list),
    "data.train_per_class": (250, int),
    "data.val_per_class": (50, int),
    "data.n_points": (1024, int),
    "data.noise": (0.01, float),
    "model.arch": ("lcm", str),
    "model.d": (128, int),
    "model.n_layers": (2, int),
    "model.d_h": (64, int),
    "model.d_ffn": (256, int),
    "model.k_local": (5, int),
    "model.n_heads": (4, int),
    "model.top_k": (None, _opt_int),
    "model.ablation": ("D", str),
    "model.k_group": (32, int),
    "model.embed_hidden": (64, int),
    "model.pe_hidden": (128, int),
    "model.dec_layers": (2, int),
    "model.d_inner": (96, int),
    "model.d_state": (8, int),
    "model.dec_d_h": (64, int),
    "model.dec_ffn": ("lcffn", str),
    "model.dec_d_ffn": (256, int),
    "model.ordering": ("Y", str),
    "model.hilbert_bits": (8, int),
    "model.head_hidden": ((256, 128), _int_list),
    "train.epochs": (50, int),
    "train.batch_size": (64, int),
    "train.lr": (1e-3, float),
    "train.weight_decay": (0.05, float),
    "train.warmup_epochs": (10, int),
    "train.unmask_ratio": (0.4, float),
    "train.n_patches": (64, int),
    "train.val_every": (1, int),
    "train.augment": (False, _bool),
    "train.resume": (None, _opt_str),
    "finetune.epochs": (12, int),
    "finetune.lr": (5e-4, float),
    "finetune.batch_size": (64, int),
    "finetune.warmup_epochs": (1, int),
    "finetune.weight_decay": (0.05, float),
    "finetune.init": (None, _opt_str),
    "finetune.frozen": (False, _bool),
    "finetune.augment": (True, _bool),
    "finetune.seeds": ((0,), _int_list),
    "finetune.label_fraction": (1.0, float),
    "finetune.compare": (False, _bool),
    "finetune.val_every": (1, int),
    "benchmark.sweep": ((64, 128, 256, 512, 1024), _int_list),
    "benchmark.latency_runs": (20, int),
    "benchmark.warmups": (3, int),
    "benchmark.latency": (True, _bool),
    "propcheck.seeds": (5, int),
    "propcheck.inject_fault": ("none", str),
    "ordering.orders": (("X", "Y", "Z", "H"), _str_list),
    "ordering.seeds": (3, int),
    "ordering.epochs": (3, int),
    "ordering.train_per_class": (25, int),
    "ordering.val_per_class": (5, int),
    "ordering.combined": ("HXYZ", str),
    "ordering.timing_repeats": (9, int),
}


@dataclass
class RunConfig:
    values: dict

    def get(self, key: str):
        return self.values[key]

    def __getitem__(self, key: str):
        return self.values[key]

    def resolved_text(self) -> str:
        def fmt(v):
            if isinstance(v, tuple):
                return ",".join(str(x) for x in v)
            return str(v)

        return "\n".join(f"{k}={fmt(self.values[k])}" for k in sorted(self.values))

    @property
    def workers(self) -> int:
        w = self.values["workers"]
        if w > 0:
            return w
        env = os.environ.get("LCM_NUM_WORKERS")
        return max(1, int(env)) if env else 1


def _parse_assignment(text: str, where: str) -> tuple:
    if "=" not in text:
        raise ConfigError(f"{where}: expected key=value, got {text!r}")
    key, _, raw = text.partition("=")
    key = key.strip()
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown key {key!r}")
    _, parser = SCHEMA[key]
    try:
        return key, parser(raw.strip())
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from exc


def load_config(path=None, overrides=()) -> RunConfig:
    """Parse `path` (optional) then apply `key=value` overrides in order."""
    values = {k: default for k, (default, _) in SCHEMA.items()}
    if path is not None:
        try:
            lines = open(path, "r", encoding="utf-8").read().splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for lineno, line in enumerate(lines, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            key, value = _parse_assignment(stripped, f"{path}:{lineno}")
            values[key] = value
    for item in overrides:
        key, value = _parse_assignment(item, f"override {item!r}")
        values[key] = value
    return RunConfig(values=values)


# ---------------------------------------------------------------------------
# config -> model/train objects

_ARCHES = {
    "lcm": "LCM",
    "transformer": "TRANSFORMER",
    "transformer_topk_feature": "TRANSFORMER_TOPK_FEATURE",
    "transformer_topk_geometry": "TRANSFORMER_TOPK_GEOMETRY",
}


def model_config_from(cfg: RunConfig, with_decoder: bool, n_classes: int | None) -> ModelConfig:
    arch = cfg["model.arch"].lower()
    if arch not in _ARCHES:
        raise ConfigError(f"unknown model.arch {arch!r}")
    enc = EncoderConfig(
        variant=_ARCHES[arch],
        n_layers=cfg["model.n_layers"],
        d=cfg["model.d"],
        d_h=cfg["model.d_h"],
        d_ffn=cfg["model.d_ffn"],
        k_local=cfg["model.k_local"],
        n_heads=cfg["model.n_heads"],
        top_k=cfg["model.top_k"],
        ablation=cfg["model.ablation"],
    )
    dec = None
    if with_decoder:
        kind = cfg["model.dec_ffn"].lower()
        if kind not in ("ffn", "lcffn"):
            raise ConfigError(f"unknown model.dec_ffn {kind!r}")
        dec = DecoderConfig(
            m_layers=cfg["model.dec_layers"],
            d=cfg["model.d"],
            d_inner=cfg["model.d_inner"],
            d_state=cfg["model.d_state"],
            d_h=cfg["model.dec_d_h"],
            k_local=cfg["model.k_local"],
            n_heads=cfg["model.n_heads"],
            ffn_kind=kind.upper(),
            d_ffn=cfg["model.dec_d_ffn"],
            ordering=OrderingSpec.parse(cfg["model.ordering"], cfg["model.hilbert_bits"]),
        )
    return ModelConfig(
        encoder=enc,
        decoder=dec,
        k_group=cfg["model.k_group"],
        embed_hidden=cfg["model.embed_hidden"],
        pe_hidden=cfg["model.pe_hidden"],
        n_classes=n_classes,
        head_hidden=tuple(cfg["model.head_hidden"]),
    )


def train_config_from(cfg: RunConfig, section: str = "train") -> TrainConfig:
    if section == "train":
        return TrainConfig(
            lr=cfg["train.lr"],
            weight_decay=cfg["train.weight_decay"],
            epochs=cfg["train.epochs"],
            warmup_epochs=cfg["train.warmup_epochs"],
            batch_size=cfg["train.batch_size"],
            workers=cfg.workers,
            rng_seed=cfg["seed"],
            n_patches=cfg["train.n_patches"],
            unmask_ratio=cfg["train.unmask_ratio"],
        )
    return TrainConfig(
        lr=cfg["finetune.lr"],
        weight_decay=cfg["finetune.weight_decay"],
        epochs=cfg["finetune.epochs"],
        warmup_epochs=cfg["finetune.warmup_epochs"],
        batch_size=cfg["finetune.batch_size"],
        workers=cfg.workers,
        rng_seed=cfg["seed"],
        n_patches=cfg["train.n_patches"],
        unmask_ratio=cfg["train.unmask_ratio"],
    )
