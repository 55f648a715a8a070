"""Masked point modeling: patchify/mask, embedding, positional encodings,
reconstruction head, training steps, optimizer, and checkpoint I/O."""

from __future__ import annotations

import dataclasses
import logging
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import DecoderConfig, DecoderWeights, decoder_forward
from .encoder import EncoderConfig, EncoderWeights, encoder_forward
from .errors import ConfigError, CountError, DataError, DivergenceError, FormatError
from .geometry import PatchSet, PointCloud, chamfer_batched, farthest_point_sample, knn_indices
from .layers import Affine, parameter_list

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LCM1"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class MaskSpec:
    unmask_ratio: float = 0.4
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.unmask_ratio < 1.0:
            raise ConfigError("unmask ratio must lie strictly inside (0, 1)")

    def split(self, n_patches: int):
        nv = int(round(self.unmask_ratio * n_patches))
        if nv < 1 or n_patches - nv < 1:
            raise CountError(
                f"unmask ratio {self.unmask_ratio} leaves an empty side for N={n_patches}"
            )
        perm = np.random.default_rng(self.rng_seed).permutation(n_patches)
        return np.sort(perm[:nv]), np.sort(perm[nv:])


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    epochs: int = 50
    warmup_epochs: int = 10
    batch_size: int = 64
    workers: int = 1
    precision: str = "float32"
    rng_seed: int = 0
    n_patches: int = 64
    unmask_ratio: float = 0.4

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warmup must not exceed total epochs")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    decoder: DecoderConfig | None = None
    k_group: int = 32
    embed_hidden: int = 128
    pe_hidden: int = 128
    recon_hidden: int | None = None      # None -> encoder.d
    n_classes: int | None = None
    head_hidden: tuple = (256, 256)

    def __post_init__(self):
        if self.decoder is not None and self.decoder.d != self.encoder.d:
            raise ConfigError("encoder and decoder widths must agree")

    @property
    def d(self) -> int:
        return self.encoder.d


# ---------------------------------------------------------------------------
# weights


@dataclass
class EmbedWeights:
    lin1: Affine   # 3 -> hidden
    lin2: Affine   # hidden -> d

    @classmethod
    def init(cls, hidden, d, rng, dtype=np.float32):
        return cls(Affine.init(3, hidden, rng, dtype), Affine.init(hidden, d, rng, dtype))


@dataclass
class PosEncMLP:
    lin1: Affine   # 3 -> hidden
    lin2: Affine   # hidden -> d

    @classmethod
    def init(cls, hidden, d, rng, dtype=np.float32):
        return cls(Affine.init(3, hidden, rng, dtype), Affine.init(hidden, d, rng, dtype))


@dataclass
class PosEncWeights:
    epe: PosEncMLP
    dpe: PosEncMLP | None


@dataclass
class ReconHead:
    lin1: Affine   # d -> hidden
    lin2: Affine   # hidden -> k_group * 3
    k_group: int

    @classmethod
    def init(cls, d, hidden, k_group, rng, dtype=np.float32):
        return cls(Affine.init(d, hidden, rng, dtype), Affine.init(hidden, k_group * 3, rng, dtype), k_group)


@dataclass
class ClsHead:
    lin1: Affine   # 2d -> h1
    lin2: Affine   # h1 -> h2
    lin3: Affine   # h2 -> n_classes

    @classmethod
    def init(cls, d, hidden, n_classes, rng, dtype=np.float32):
        h1, h2 = hidden
        return cls(
            Affine.init(2 * d, h1, rng, dtype),
            Affine.init(h1, h2, rng, dtype),
            Affine.init(h2, n_classes, rng, dtype),
        )

    def __call__(self, pooled: T.Tensor) -> T.Tensor:
        return self.lin3(T.gelu(self.lin2(T.gelu(self.lin1(pooled)))))


@dataclass
class Model:
    config: ModelConfig
    embed: EmbedWeights
    pos_enc: PosEncWeights
    encoder: EncoderWeights
    decoder: DecoderWeights | None = None
    mask_query: T.Tensor | None = None
    recon: ReconHead | None = None
    cls_head: ClsHead | None = None


def build_model(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Model:
    d = cfg.d
    decoder = None
    dpe = None
    mask_query = None
    recon = None
    if cfg.decoder is not None:
        decoder = DecoderWeights.init(cfg.decoder, rng, dtype)
        dpe = PosEncMLP.init(cfg.pe_hidden, d, rng, dtype)
        mask_query = T.Tensor(
            rng.normal(scale=0.02, size=d).astype(dtype), requires_grad=True
        )
        recon = ReconHead.init(d, cfg.recon_hidden or d, cfg.k_group, rng, dtype)
    cls_head = None
    if cfg.n_classes is not None:
        cls_head = ClsHead.init(d, cfg.head_hidden, cfg.n_classes, rng, dtype)
    return Model(
        config=cfg,
        embed=EmbedWeights.init(cfg.embed_hidden, d, rng, dtype),
        pos_enc=PosEncWeights(epe=PosEncMLP.init(cfg.pe_hidden, d, rng, dtype), dpe=dpe),
        encoder=EncoderWeights.init(cfg.encoder, rng, dtype),
        decoder=decoder,
        mask_query=mask_query,
        recon=recon,
        cls_head=cls_head,
    )


def model_config_text(cfg: ModelConfig) -> str:
    """Flat dotted-key rendering used as the checkpoint's config echo."""
    flat = {}

    def walk(obj, prefix):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            for f in dataclasses.fields(obj):
                walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
        elif isinstance(obj, (tuple, list)):
            flat[prefix] = ",".join(str(v) for v in obj)
        else:
            flat[prefix] = str(obj)

    walk(cfg, "")
    return "\n".join(f"{k}={flat[k]}" for k in sorted(flat))


# ---------------------------------------------------------------------------
# pipeline stages


def patchify_and_mask(pc: PointCloud, n_patches: int, k_group: int, mask: MaskSpec) -> PatchSet:
    """FPS centers, KNN grouping, then a seeded random visible/masked split."""
    if n_patches > pc.n_points or k_group > pc.n_points:
        raise CountError("patch or group count exceeds cloud size")
    centers, center_idx = farthest_point_sample(pc, n_patches)
    group_idx = knn_indices(centers, pc.points, k_group)
    patches = pc.points[group_idx] - centers[:, None, :]
    visible, masked = mask.split(n_patches)
    return PatchSet(
        centers=centers,
        patches=patches,
        visible_idx=visible,
        masked_idx=masked,
        unmask_ratio=mask.unmask_ratio,
    )


def _rows_mlp(x: T.Tensor, lin1: Affine, lin2: Affine) -> T.Tensor:
    """Apply a two-layer MLP over the last axis of any leading shape."""
    lead = tuple(x.shape[:-1])
    flat = T.reshape(x, (int(np.prod(lead)), x.shape[-1]))
    out = lin2(T.gelu(lin1(flat)))
    return T.reshape(out, lead + (lin2.d_out,))


def embed_patches(patches, w: EmbedWeights) -> T.Tensor:
    """Shared per-point MLP then channel-wise max over each patch's points."""
    x = patches if isinstance(patches, T.Tensor) else T.Tensor(patches)
    lead = tuple(x.shape[:-2])
    k = x.shape[-2]
    rows = int(np.prod(lead)) if lead else 1
    flat = T.reshape(x, (rows * k, 3))
    h = w.lin2(T.gelu(w.lin1(flat)))
    pooled = T.amax(T.reshape(h, (rows, k, w.lin2.d_out)), axis=1)
    return T.reshape(pooled, lead + (w.lin2.d_out,))


def positional_encoding(coords, w: PosEncWeights, which: str = "ENCODER") -> T.Tensor:
    """Two-layer MLP from 3-D coordinates to d-dim embeddings (EPE or DPE)."""
    x = coords if isinstance(coords, T.Tensor) else T.Tensor(coords)
    mlp = w.epe if which == "ENCODER" else w.dpe
    if mlp is None:
        raise ConfigError("model has no decoder positional encoding")
    return _rows_mlp(x, mlp.lin1, mlp.lin2)


def reconstruct(r: T.Tensor, head: ReconHead) -> T.Tensor:
    """Decoder features -> relative coordinates per masked patch."""
    lead = tuple(r.shape[:-1])
    out = _rows_mlp(r, head.lin1, head.lin2)
    return T.reshape(out, lead + (head.k_group, 3))


def pretrain_forward(model: Model, centers, patches, visible_idx, masked_idx,
                     dtype=np.float32, timing=None) -> T.Tensor:
    """Full masked-reconstruction loss for one batch.

    centers (B,N,3), patches (B,N,K,3) in canonical FPS order; visible and
    masked index arrays (B,nv)/(B,nm) select the split per item. Visible
    tokens run through the compact encoder; mask queries are appended and the
    decoder output's masked tail is reconstructed and scored with Chamfer
    distance against the true relative patches, averaged over patches and
    batch.
    """
    b, n, k, _ = patches.shape
    nv = visible_idx.shape[1]
    nm = masked_idx.shape[1]
    take = lambda arr, idx: np.take_along_axis(arr, idx.reshape(b, -1, *(1,) * (arr.ndim - 2)), axis=1)
    c_vis = take(centers, visible_idx)
    c_msk = take(centers, masked_idx)
    p_vis = take(patches, visible_idx)
    p_msk = take(patches, masked_idx)

    e0 = embed_patches(T.Tensor(p_vis.astype(dtype)), model.embed)
    ep = positional_encoding(T.Tensor(c_vis.astype(dtype)), model.pos_enc, "ENCODER")
    en = encoder_forward(e0, ep, c_vis, model.encoder)

    q = T.expand(T.reshape(model.mask_query, (1, 1, model.config.d)), (b, nm, model.config.d))
    t0 = T.concat([en, q], axis=1)
    c_all = np.concatenate([c_vis, c_msk], axis=1)
    tp = positional_encoding(T.Tensor(c_all.astype(dtype)), model.pos_enc, "DECODER")
    tm = decoder_forward(t0, tp, c_all, model.decoder, timing=timing)
    r = T.slice_along(tm, 1, nv, n)
    rec = reconstruct(r, model.recon)

    pred = T.reshape(rec, (b * nm, k, 3))
    target = T.Tensor(p_msk.reshape(b * nm, k, 3).astype(dtype))
    return T.tmean(chamfer_batched(pred, target))


def classifier_forward(model: Model, patches, centers, dtype=np.float32) -> T.Tensor:
    """Encoder over all patches, max+mean pooling, MLP head -> logits."""
    e0 = embed_patches(T.Tensor(np.asarray(patches, dtype=dtype)), model.embed)
    ep = positional_encoding(T.Tensor(np.asarray(centers, dtype=dtype)), model.pos_enc, "ENCODER")
    en = encoder_forward(e0, ep, np.asarray(centers), model.encoder)
    pooled = T.concat([T.amax(en, axis=1), T.tmean(en, axis=1)], axis=1)
    return model.cls_head(pooled)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_update(named_params, grads, state: AdamWState, lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Decoupled-weight-decay Adam step over (name, tensor) pairs.

    `grads` is a tensor-keyed GradMap (or name-keyed dict); missing entries
    count as zero gradient. This is the single sanctioned mutation point for
    parameters.
    """
    state.step += 1
    b1, b2 = betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in named_params:
        if isinstance(grads, dict):
            g = grads.get(name)
        else:
            g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype, copy=False)


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float,
              min_lr: float = 0.0) -> float:
    """Linear warmup then cosine decay; `step` counts completed steps."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + np.cos(np.pi * min(progress, 1.0)))


# ---------------------------------------------------------------------------
# training steps


def _chunk_ranges(n: int, workers: int):
    bounds = np.linspace(0, n, workers + 1).astype(int)
    return [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run_chunks(fn, ranges, workers):
    if len(ranges) == 1 or workers <= 1:
        return [fn(r) for r in ranges]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, ranges))


def pretrain_step(batch, model: Model, opt_state: AdamWState, cfg: TrainConfig,
                  lr: float | None = None, patchify_fn=None, step_seed: int = 0) -> float:
    """One optimizer step of masked-point pretraining over a cloud batch.

    `batch` is a list of PointCloud (or a prebuilt dict with centers/patches
    arrays). Per-item mask splits are seeded from (cfg.rng_seed, step_seed,
    item). Worker chunks evaluate on private tapes and merge gradients in
    chunk order, so a fixed worker count reproduces bitwise.
    """
    if isinstance(batch, dict):
        centers, patches = batch["centers"], batch["patches"]
    else:
        sets = []
        for i, pc in enumerate(batch):
            seed = int(np.random.SeedSequence((cfg.rng_seed, step_seed, i)).generate_state(1)[0])
            if patchify_fn is not None:
                sets.append(patchify_fn(pc, seed))
            else:
                spec = MaskSpec(cfg.unmask_ratio, rng_seed=seed)
                sets.append(patchify_and_mask(pc, cfg.n_patches, model.config.k_group, spec))
        centers = np.stack([s.centers for s in sets])
        patches = np.stack([s.patches for s in sets])
        vis = np.stack([s.visible_idx for s in sets])
        msk = np.stack([s.masked_idx for s in sets])
        batch = {"centers": centers, "patches": patches, "visible": vis, "masked": msk}
        centers, patches = batch["centers"], batch["patches"]
    vis, msk = batch["visible"], batch["masked"]

    b = centers.shape[0]
    params = parameter_list(model)
    total = T.GradMap()
    losses = []

    def chunk_loss(rg):
        a, z = rg
        with T.Tape() as tape:
            loss = pretrain_forward(
                model, centers[a:z], patches[a:z], vis[a:z], msk[a:z], dtype=cfg.dtype
            )
            scaled = T.scale(loss, (z - a) / b)
        return scaled, tape

    results = _run_chunks(chunk_loss, _chunk_ranges(b, cfg.workers), cfg.workers)
    for scaled, tape in results:
        losses.append(float(scaled.data))
        total.add_into(T.backward(scaled, tape))
    batch_loss = float(sum(losses))
    if not np.isfinite(batch_loss):
        raise DivergenceError(f"non-finite pretraining loss {batch_loss}")
    adamw_update(params, total, opt_state, lr if lr is not None else cfg.lr,
                 betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    return batch_loss


def classifier_step(model: Model, opt_state: AdamWState, patches, centers, labels,
                    cfg: TrainConfig, lr: float, trainable=None) -> tuple:
    """One supervised step; returns (loss, n_correct)."""
    params = trainable if trainable is not None else parameter_list(model)
    labels = np.asarray(labels)
    b = len(labels)
    total = T.GradMap()
    loss_val = 0.0
    correct = 0

    def chunk(rg):
        a, z = rg
        with T.Tape() as tape:
            logits = classifier_forward(model, patches[a:z], centers[a:z], dtype=cfg.dtype)
            loss = T.scale(T.cross_entropy_mean(logits, labels[a:z]), (z - a) / b)
        return rg, loss, tape, logits.data.argmax(axis=1)

    for (a, z), loss, tape, pred in _run_chunks(chunk, _chunk_ranges(b, cfg.workers), cfg.workers):
        loss_val += float(loss.data)
        correct += int((pred == labels[a:z]).sum())
        total.add_into(T.backward(loss, tape))
    if not np.isfinite(loss_val):
        raise DivergenceError("non-finite classification loss")
    adamw_update(params, total, opt_state, lr, betas=cfg.betas, eps=cfg.eps,
                 weight_decay=cfg.weight_decay)
    return loss_val, correct


def evaluate_classifier(model: Model, patches, centers, labels, batch_size: int = 128,
                        dtype=np.float32) -> float:
    """Forward-only accuracy over a split."""
    labels = np.asarray(labels)
    n = len(labels)
    if np.any(labels < 0) or (model.config.n_classes is not None and np.any(labels >= model.config.n_classes)):
        raise DataError("label out of range")
    correct = 0
    for a in range(0, n, batch_size):
        z = min(a + batch_size, n)
        logits = classifier_forward(model, patches[a:z], centers[a:z], dtype=dtype)
        correct += int((logits.data.argmax(axis=1) == labels[a:z]).sum())
    return correct / n


def finetune_classifier_epoch(model: Model, opt_state: AdamWState, dataset: dict,
                              cfg: TrainConfig, epoch: int, lr_fn=None,
                              frozen_encoder: bool = False, augment: bool = True) -> dict:
    """One classification epoch over a cached-patch dataset.

    `dataset` carries points (n,L,3), labels (n,), center_idx (n,N) and
    group_idx (n,N,K) index tables; patches are re-derived per epoch after
    the rigid augmentation, which leaves the cached index tables valid.
    Returns train loss/accuracy (and val accuracy when a val split is given).
    """
    labels = np.asarray(dataset["labels"])
    n = len(labels)
    n_classes = model.config.n_classes
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(f"labels must lie in [0,{n_classes})")
    order = np.random.default_rng(
        np.random.SeedSequence((cfg.rng_seed, 7001, epoch)).generate_state(1)[0]
    ).permutation(n)
    trainable = _trainable_params(model, frozen_encoder)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    loss_sum = 0.0
    correct = 0
    t0 = time.perf_counter()
    for bstart in range(0, n, cfg.batch_size):
        idx = order[bstart : bstart + cfg.batch_size]
        pts = dataset["points"][idx]
        if augment:
            rngs = [
                np.random.default_rng(
                    np.random.SeedSequence((cfg.rng_seed, 7002, epoch, int(i))).generate_state(1)[0]
                )
                for i in idx
            ]
            pts = np.stack([augment_cloud(p, r) for p, r in zip(pts, rngs)])
        centers, patches = patches_from_cache(
            pts, dataset["center_idx"][idx], dataset["group_idx"][idx]
        )
        lr = lr_fn(opt_state.step) if lr_fn is not None else cfg.lr
        loss, ncorr = classifier_step(
            model, opt_state, patches, centers, labels[idx], cfg, lr, trainable=trainable
        )
        loss_sum += loss * len(idx)
        correct += ncorr
    metrics = {
        "train_loss": loss_sum / n,
        "train_acc": correct / n,
        "seconds": time.perf_counter() - t0,
        "steps": steps_per_epoch,
    }
    if "val" in dataset:
        val = dataset["val"]
        vcenters, vpatches = patches_from_cache(val["points"], val["center_idx"], val["group_idx"])
        metrics["val_acc"] = evaluate_classifier(model, vpatches, vcenters, val["labels"])
    return metrics


def _trainable_params(model: Model, frozen_encoder: bool):
    params = parameter_list(model)
    if not frozen_encoder:
        return params
    trainable = []
    for name, p in params:
        if name.startswith("cls_head"):
            trainable.append((name, p))
        else:
            # frozen weights drop off the tape entirely, so the backward
            # sweep only visits the head
            p.requires_grad = False
    return trainable


# ---------------------------------------------------------------------------
# augmentation and patch caching


def augment_cloud(points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random rotation about z plus a uniform scale.

    Both transforms preserve nearest-neighbor structure exactly, so cached
    FPS/KNN index tables remain valid for the augmented cloud.
    """
    theta = rng.uniform(0.0, 2.0 * np.pi)
    s = rng.uniform(0.8, 1.25)
    c, si = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -si, 0.0], [si, c, 0.0], [0.0, 0.0, 1.0]])
    return (points @ rot.T) * s


def build_patch_index_cache(points_array: np.ndarray, n_patches: int, k_group: int):
    """Precompute per-cloud FPS center and KNN group index tables."""
    center_idx = np.empty((len(points_array), n_patches), dtype=np.int64)
    group_idx = np.empty((len(points_array), n_patches, k_group), dtype=np.int64)
    for i, pts in enumerate(points_array):
        pc = PointCloud(pts)
        _, cidx = farthest_point_sample(pc, n_patches)
        center_idx[i] = cidx
        group_idx[i] = knn_indices(pts[cidx], pts, k_group)
    return center_idx, group_idx


def patches_from_cache(points: np.ndarray, center_idx: np.ndarray, group_idx: np.ndarray):
    """Centers and relative patches from cached index tables; batched."""
    centers = np.take_along_axis(points, center_idx[..., None], axis=1)
    b, n, k = group_idx.shape
    grouped = np.take_along_axis(
        points, group_idx.reshape(b, n * k)[..., None], axis=1
    ).reshape(b, n, k, 3)
    return centers, grouped - centers[:, :, None, :]


# ---------------------------------------------------------------------------
# checkpoint format: magic "LCM1", u32 version, length-prefixed config text,
# then per parameter: name, rank, extents, float32 payload (little-endian)


def _checkpoint_entries(model: Model, opt_state: AdamWState | None):
    entries = [(name, p.data) for name, p in parameter_list(model)]
    if opt_state is not None:
        entries.append(("opt.step", np.array([opt_state.step], dtype=np.float32)))
        for name in sorted(opt_state.m):
            entries.append((f"opt.m.{name}", opt_state.m[name]))
            entries.append((f"opt.v.{name}", opt_state.v[name]))
    return entries


def save_checkpoint(model: Model, path, opt_state: AdamWState | None = None) -> None:
    """Atomic (temp + rename) binary dump of every named parameter."""
    config_text = model_config_text(model.config).encode("utf-8")
    entries = _checkpoint_entries(model, opt_state)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(config_text)))
        fh.write(config_text)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            blob = name.encode("utf-8")
            arr32 = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", arr32.ndim))
            fh.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
            fh.write(arr32.tobytes())
    os.replace(tmp, path)


def read_checkpoint(path) -> dict:
    """Parse a checkpoint fully before returning; truncation -> FormatError."""
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    pos = 0

    def pull(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError("checkpoint truncated")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(pull(4)) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack("<I", pull(4))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", pull(4))
    config_text = bytes(pull(clen)).decode("utf-8")
    (count,) = struct.unpack("<I", pull(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", pull(4))
        name = bytes(pull(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", pull(4))
        shape = struct.unpack(f"<{rank}I", pull(4 * rank))
        n_items = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(pull(4 * n_items), dtype="<f4").reshape(shape)
        arrays[name] = arr.copy()
    if pos != len(raw):
        raise FormatError("trailing bytes after checkpoint payload")
    return {"version": version, "config_text": config_text, "arrays": arrays}


def load_checkpoint(path, model: Model, opt_state: AdamWState | None = None,
                    expect_config: bool = True) -> Model:
    """Restore parameters (and optimizer state) in place; config must match."""
    data = read_checkpoint(path)
    if expect_config and data["config_text"] != model_config_text(model.config):
        raise FormatError("checkpoint config does not match model config")
    arrays = data["arrays"]
    for name, p in parameter_list(model):
        if name not in arrays:
            raise FormatError(f"checkpoint missing parameter {name!r}")
        if tuple(arrays[name].shape) != tuple(p.shape):
            raise FormatError(f"shape mismatch for {name!r}")
        p.data = arrays[name].astype(p.dtype)
    if opt_state is not None and "opt.step" in arrays:
        opt_state.step = int(arrays["opt.step"][0])
        for name, p in parameter_list(model):
            if f"opt.m.{name}" in arrays:
                opt_state.m[name] = arrays[f"opt.m.{name}"].astype(np.float32).copy()
                opt_state.v[name] = arrays[f"opt.v.{name}"].astype(np.float32).copy()
    return model


def load_encoder_into(model: Model, ckpt_path) -> dict:
    """Initialize the encoder-side weights of a finetune model from a
    pretraining checkpoint, leaving the fresh head untouched.

    Returns {"loaded": [...], "skipped": [...], "missing": [...]}; both lists
    are also logged.
    """
    data = read_checkpoint(ckpt_path)
    arrays = data["arrays"]
    prefixes = ("embed.", "pos_enc.epe.", "encoder.")
    loaded, missing = [], []
    for name, p in parameter_list(model):
        if not name.startswith(prefixes):
            continue
        if name in arrays and tuple(arrays[name].shape) == tuple(p.shape):
            p.data = arrays[name].astype(p.dtype)
            loaded.append(name)
        else:
            missing.append(name)
    skipped = [n for n in arrays if not n.startswith(prefixes) and not n.startswith("opt.")]
    log.info(
        "encoder init from %s: %d loaded, %d missing, %d checkpoint-only",
        ckpt_path, len(loaded), len(missing), len(skipped),
    )
    return {"loaded": loaded, "missing": missing, "skipped": skipped}
