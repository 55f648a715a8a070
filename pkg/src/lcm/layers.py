"""Shared learnable building blocks: affine maps, layer norm, local aggregation.

Both the encoder's local aggregation layer and the decoder's locally
constrained feedforward share the same mechanics (`local_aggregate`), so the
single implementation lives here.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import CountError, ShapeError


@dataclass
class Affine:
    w: T.Tensor  # (d_in, d_out)
    b: T.Tensor  # (d_out,)

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        w = rng.normal(scale=1.0 / np.sqrt(d_in), size=(d_in, d_out))
        return cls(
            w=T.Tensor(w.astype(dtype), requires_grad=True),
            b=T.Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True),
        )

    @property
    def d_in(self) -> int:
        return self.w.shape[0]

    @property
    def d_out(self) -> int:
        return self.w.shape[1]

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.linear(x, self.w, self.b)


@dataclass
class LayerNorm:
    gamma: T.Tensor
    beta: T.Tensor
    eps: float = 1e-5

    @classmethod
    def init(cls, d: int, dtype=np.float32):
        return cls(
            gamma=T.Tensor(np.ones(d, dtype=dtype), requires_grad=True),
            beta=T.Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        )

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


@dataclass
class FFN:
    """Two-layer feedforward with GELU."""

    lin1: Affine
    lin2: Affine

    @classmethod
    def init(cls, d: int, d_hidden: int, rng, dtype=np.float32):
        return cls(Affine.init(d, d_hidden, rng, dtype), Affine.init(d_hidden, d, rng, dtype))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return self.lin2(T.gelu(self.lin1(x)))


def knn_graph(centers: np.ndarray, k: int) -> np.ndarray:
    """KNN index table over token centers; (n,3) -> (n,k) or (B,n,3) -> (B,n,k).

    Built once per forward pass and shared by every layer that needs it.
    """
    centers = np.asarray(centers, dtype=np.float64)
    batched = centers.ndim == 3
    cs = centers if batched else centers[None]
    n = cs.shape[1]
    if k > n or k < 1:
        raise CountError(f"k={k} out of range for {n} tokens")
    diff = cs[:, :, None, :] - cs[:, None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    idx = np.argsort(d2, axis=-1, kind="stable")[..., :k]
    return idx if batched else idx[0]


def local_aggregate(tokens: T.Tensor, knn_idx: np.ndarray, down: Affine, up: Affine) -> T.Tensor:
    """Gather k neighbors per token, concat [token; neighbor], Down MLP + GELU,
    max-pool over neighbors, Up MLP.

    tokens: (n, d) or (B, n, d); knn_idx: matching (n, k) or (B, n, k).
    The concat + Down product is evaluated as a split matmul: the center half
    is computed once per token and broadcast over its k neighbors.
    """
    batched = tokens.ndim == 3
    if not batched:
        x = T.reshape(tokens, (1,) + tuple(tokens.shape))
        idx = np.asarray(knn_idx)[None]
    else:
        x = tokens
        idx = np.asarray(knn_idx)
    bt, n, d = x.shape
    if down.d_in != 2 * d:
        raise ShapeError(f"down map expects 2*{d} inputs, has {down.d_in}")
    d_h = down.d_out
    k = idx.shape[-1]
    flat = T.reshape(x, (bt * n, d))
    flat_idx = (idx + (np.arange(bt) * n)[:, None, None]).reshape(bt * n * k)
    neighbors = T.gather_rows(flat, flat_idx)                        # (bt*n*k, d)
    w_center = T.slice_along(down.w, 0, 0, d)
    w_neighbor = T.slice_along(down.w, 0, d, 2 * d)
    h_center = T.reshape(T.matmul(flat, w_center), (bt * n, 1, d_h))
    h_neighbor = T.add(T.matmul(neighbors, w_neighbor), down.b)
    pre = T.add(T.reshape(h_neighbor, (bt * n, k, d_h)), h_center)   # broadcast over k
    pooled = T.amax(T.gelu(pre), axis=1)                             # (bt*n, d_h)
    out = up(pooled)
    out = T.reshape(out, (bt, n, d))
    return out if batched else T.reshape(out, (n, d))


def token_mlp(tokens: T.Tensor, down: Affine, up: Affine) -> T.Tensor:
    """Per-token Down/Up mapping without any neighborhood access (ablation B)."""
    return up(T.gelu(down(tokens)))


def named_parameters(obj, prefix: str = ""):
    """Walk a dataclass tree and yield (name, tensor) for trainable leaves."""
    if isinstance(obj, T.Tensor):
        if obj.requires_grad:
            yield prefix, obj
        return
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_parameters(getattr(obj, f.name), name)
        return
    if isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            name = f"{prefix}.{i}" if prefix else str(i)
            yield from named_parameters(v, name)
        return
    if isinstance(obj, dict):
        for kk, v in obj.items():
            name = f"{prefix}.{kk}" if prefix else str(kk)
            yield from named_parameters(v, name)


def parameter_list(obj) -> list:
    """Unique-named parameter list for a weight tree."""
    params = list(named_parameters(obj))
    names = [n for n, _ in params]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ValueError(f"duplicate parameter names: {dupes}")
    return params


def count_values(obj) -> int:
    return sum(p.size for _, p in named_parameters(obj))
