"""Point-cloud primitives: sampling, grouping, distances, orderings, shapes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, CountError

AXIS_INDEX = {"X": 0, "Y": 1, "Z": 2}
SHAPE_KINDS = ("sphere", "cube", "torus", "cylinder", "cone", "pyramid", "helix", "plane-cross")


@dataclass
class PointCloud:
    """Raw L x 3 coordinates plus an optional class id."""

    points: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise CountError(f"point cloud must be L x 3 with L >= 1, got {self.points.shape}")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass
class PatchSet:
    """FPS centers with grouped relative patches and a visible/masked split."""

    centers: np.ndarray          # (N, 3)
    patches: np.ndarray          # (N, K_group, 3), relative to center
    visible_idx: np.ndarray      # sorted, ascending
    masked_idx: np.ndarray
    unmask_ratio: float

    @property
    def n_patches(self) -> int:
        return self.centers.shape[0]

    def validate(self) -> None:
        n = self.n_patches
        nv = int(round(self.unmask_ratio * n))
        assert len(self.visible_idx) == nv
        assert len(self.masked_idx) == n - nv
        together = np.sort(np.concatenate([self.visible_idx, self.masked_idx]))
        assert np.array_equal(together, np.arange(n)), "mask split must partition [0,N)"


@dataclass(frozen=True)
class OrderingSpec:
    """Serialization order(s) for patch tokens: X/Y/Z axis sorts or Hilbert."""

    kinds: tuple = ("Y",)
    hilbert_bits: int = 8

    def __post_init__(self):
        if not self.kinds:
            raise ConfigError("ordering needs at least one kind")
        for k in self.kinds:
            if k not in ("X", "Y", "Z", "H"):
                raise ConfigError(f"unknown ordering kind {k!r}")
        if not 1 <= self.hilbert_bits <= 16:
            raise ConfigError("hilbert_bits must be in [1, 16]")

    @classmethod
    def parse(cls, text: str, hilbert_bits: int = 8) -> "OrderingSpec":
        return cls(kinds=tuple(text.strip().upper()), hilbert_bits=hilbert_bits)

    def permutations(self, centers: np.ndarray):
        out = []
        for k in self.kinds:
            if k == "H":
                out.append(hilbert_order(centers, self.hilbert_bits))
            else:
                out.append(order_by_axis(centers, k))
        return out

    def __str__(self) -> str:
        return "".join(self.kinds)


def farthest_point_sample(pc: PointCloud, n: int, seed_idx: int = 0):
    """Greedy max-min subsample; returns (centers, indices)."""
    pts = pc.points
    total = pts.shape[0]
    if not 1 <= n <= total:
        raise CountError(f"cannot sample {n} centers from {total} points")
    if not 0 <= seed_idx < total:
        raise CountError(f"seed index {seed_idx} out of range")
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = seed_idx
    d2 = ((pts - pts[seed_idx]) ** 2).sum(axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(d2))
        chosen[i] = nxt
        d2 = np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return pts[chosen].copy(), chosen


def knn_indices(queries: np.ndarray, keys: np.ndarray, k: int) -> np.ndarray:
    """Brute-force k nearest neighbors, ascending distance, ties by lower index."""
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    m = keys.shape[0]
    if k > m or k < 1:
        raise CountError(f"k={k} out of range for {m} keys")
    diff = queries[:, None, :] - keys[None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


def group_patches(pc: PointCloud, centers: np.ndarray, k_group: int) -> np.ndarray:
    """Per center: its k_group nearest cloud points, relative to the center."""
    if k_group > pc.n_points:
        raise CountError(f"k_group={k_group} exceeds cloud size {pc.n_points}")
    idx = knn_indices(centers, pc.points, k_group)
    return pc.points[idx] - centers[:, None, :]


def chamfer_l2(a, b) -> T.Tensor:
    """Symmetric mean squared nearest-neighbor distance; differentiable."""
    a = a if isinstance(a, T.Tensor) else T.Tensor(a)
    b = b if isinstance(b, T.Tensor) else T.Tensor(b)
    n, m = a.shape[0], b.shape[0]
    if n < 1 or m < 1:
        raise CountError("chamfer distance needs non-empty point sets")
    diff = T.sub(T.reshape(a, (n, 1, 3)), T.reshape(b, (1, m, 3)))
    d2 = T.tsum(T.mul(diff, diff), axis=2)
    return T.add(T.tmean(T.amin(d2, axis=1)), T.tmean(T.amin(d2, axis=0)))


def chamfer_batched(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    """Per-pair Chamfer over aligned batches a: (P,K,3), b: (P,K2,3) -> (P,).

    Uses the |a|^2 + |b|^2 - 2ab expansion (BLAS-friendly); `chamfer_l2`
    keeps the exact difference form for single pairs.
    """
    p, ka = a.shape[0], a.shape[1]
    kb = b.shape[1]
    aa = T.tsum(T.mul(a, a), axis=2, keepdims=True)           # (P, K, 1)
    bb = T.reshape(T.tsum(T.mul(b, b), axis=2), (p, 1, kb))   # (P, 1, K2)
    ab = T.matmul(a, T.transpose(b, (0, 2, 1)))               # (P, K, K2)
    d2 = T.add(T.add(T.scale(ab, -2.0), aa), bb)
    return T.add(T.tmean(T.amin(d2, axis=2), axis=1), T.tmean(T.amin(d2, axis=1), axis=1))


def order_by_axis(centers: np.ndarray, axis) -> np.ndarray:
    """Stable ascending sort of centers along one coordinate axis."""
    col = AXIS_INDEX[axis] if isinstance(axis, str) else int(axis)
    return np.argsort(np.asarray(centers)[:, col], kind="stable")


def _hilbert_index(cells: np.ndarray, bits: int) -> np.ndarray:
    """3-D Hilbert index of integer cells via the transpose-form transform."""
    x = cells.astype(np.uint64).copy()
    ndim = 3
    q = np.uint64(1 << (bits - 1))
    one = np.uint64(1)
    while q > one:
        p = q - one
        for i in range(ndim):
            hit = (x[:, i] & q) != 0
            # invert low bits of x[:,0] where bit set, else exchange with x[:,i]
            x[hit, 0] ^= p
            t = (x[:, 0] ^ x[:, i]) & p
            t[hit] = 0
            x[:, 0] ^= t
            x[:, i] ^= t
        q >>= one
    for i in range(1, ndim):
        x[:, i] ^= x[:, i - 1]
    t = np.zeros(len(x), dtype=np.uint64)
    q = np.uint64(1 << (bits - 1))
    while q > one:
        hit = (x[:, ndim - 1] & q) != 0
        t[hit] ^= q - one
        q >>= one
    for i in range(ndim):
        x[:, i] ^= t
    # interleave transpose bits, axis 0 most significant within each group
    h = np.zeros(len(x), dtype=np.uint64)
    for b in range(bits - 1, -1, -1):
        for i in range(ndim):
            h = (h << one) | ((x[:, i] >> np.uint64(b)) & one)
    return h


def hilbert_order(centers: np.ndarray, bits: int = 8) -> np.ndarray:
    """Sort by 3-D Hilbert cell index; ties keep original order.

    Each axis is min-max normalized to [0,1] (constant axes map to 0) and
    quantized to 2^bits cells, clamping fp overshoot.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if bits < 1:
        raise CountError("hilbert bits must be >= 1")
    lo = centers.min(axis=0)
    span = centers.max(axis=0) - lo
    span[span == 0] = 1.0
    unit = np.clip((centers - lo) / span, 0.0, 1.0)
    cells = np.minimum((unit * (1 << bits)).astype(np.int64), (1 << bits) - 1)
    return np.argsort(_hilbert_index(cells, bits), kind="stable")


# ---------------------------------------------------------------------------
# synthetic shapes

_SYMMETRIC = {"sphere", "cube", "torus", "cylinder", "plane-cross"}


def _unit_disc(rng, n):
    r = np.sqrt(rng.uniform(0, 1, n))
    phi = rng.uniform(0, 2 * np.pi, n)
    return r * np.cos(phi), r * np.sin(phi)


def _surface_sample(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "sphere":
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "cube":
        axis = rng.integers(0, 3, n)
        sign = rng.choice([-1.0, 1.0], n)
        uv = rng.uniform(-1, 1, (n, 2))
        pts = np.empty((n, 3))
        for a in range(3):
            rows = axis == a
            others = [c for c in range(3) if c != a]
            pts[rows, a] = sign[rows]
            pts[np.ix_(rows, others)] = uv[rows]
        return pts
    if kind == "torus":
        big_r, small_r = 1.0, 0.35
        theta = np.empty(n)
        filled = 0
        while filled < n:
            cand = rng.uniform(0, 2 * np.pi, 2 * (n - filled))
            accept = rng.uniform(0, 1, cand.size) < (1 + (small_r / big_r) * np.cos(cand)) / (
                1 + small_r / big_r
            )
            take = cand[accept][: n - filled]
            theta[filled : filled + take.size] = take
            filled += take.size
        phi = rng.uniform(0, 2 * np.pi, n)
        ring = big_r + small_r * np.cos(theta)
        return np.stack([ring * np.cos(phi), ring * np.sin(phi), small_r * np.sin(theta)], axis=1)
    if kind == "cylinder":
        radius, half_h = 0.6, 1.0
        lateral = 2 * np.pi * radius * 2 * half_h
        caps = 2 * np.pi * radius**2
        on_side = rng.uniform(0, 1, n) < lateral / (lateral + caps)
        phi = rng.uniform(0, 2 * np.pi, n)
        pts = np.empty((n, 3))
        pts[on_side] = np.stack(
            [
                radius * np.cos(phi[on_side]),
                radius * np.sin(phi[on_side]),
                rng.uniform(-half_h, half_h, int(on_side.sum())),
            ],
            axis=1,
        )
        n_cap = int((~on_side).sum())
        cx, cy = _unit_disc(rng, n_cap)
        pts[~on_side] = np.stack(
            [radius * cx, radius * cy, rng.choice([-half_h, half_h], n_cap)], axis=1
        )
        return pts
    if kind == "cone":
        radius, height = 0.8, 2.0
        apex_z, base_z = 1.0, -1.0
        slant = np.hypot(radius, height)
        lateral = np.pi * radius * slant
        base = np.pi * radius**2
        on_side = rng.uniform(0, 1, n) < lateral / (lateral + base)
        pts = np.empty((n, 3))
        ns = int(on_side.sum())
        frac = np.sqrt(rng.uniform(0, 1, ns))  # area grows with distance from apex
        phi = rng.uniform(0, 2 * np.pi, ns)
        pts[on_side] = np.stack(
            [
                frac * radius * np.cos(phi),
                frac * radius * np.sin(phi),
                apex_z - frac * height,
            ],
            axis=1,
        )
        nb = n - ns
        bx, by = _unit_disc(rng, nb)
        pts[~on_side] = np.stack([radius * bx, radius * by, np.full(nb, base_z)], axis=1)
        return pts
    if kind == "pyramid":
        half, apex_z, base_z = 0.8, 0.8, -0.8
        apex = np.array([0.0, 0.0, apex_z])
        corners = np.array(
            [[-half, -half, base_z], [half, -half, base_z], [half, half, base_z], [-half, half, base_z]]
        )
        tris = [(apex, corners[i], corners[(i + 1) % 4]) for i in range(4)]
        tris += [(corners[0], corners[1], corners[2]), (corners[0], corners[2], corners[3])]
        areas = np.array(
            [0.5 * np.linalg.norm(np.cross(b - a, c - a)) for (a, b, c) in tris]
        )
        pick = rng.choice(len(tris), n, p=areas / areas.sum())
        u = np.sqrt(rng.uniform(0, 1, n))
        v = rng.uniform(0, 1, n)
        pts = np.empty((n, 3))
        for ti, (a, b, c) in enumerate(tris):
            rows = pick == ti
            uu, vv = u[rows, None], v[rows, None]
            pts[rows] = a * (1 - uu) + b * (uu * (1 - vv)) + c * (uu * vv)
        return pts
    if kind == "helix":
        turns, tube = 2.0, 0.15
        t = rng.uniform(0, 2 * np.pi * turns, n)
        phi = rng.uniform(0, 2 * np.pi, n)
        center = np.stack([np.cos(t), np.sin(t), t / (np.pi * turns) - 1.0], axis=1)
        normal = np.stack([-np.cos(t), -np.sin(t), np.zeros(n)], axis=1)
        tangent = np.stack([-np.sin(t), np.cos(t), np.full(n, 1.0 / (np.pi * turns))], axis=1)
        tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
        binormal = np.cross(tangent, normal)
        return center + tube * (normal * np.cos(phi)[:, None] + binormal * np.sin(phi)[:, None])
    if kind == "plane-cross":
        plane = rng.integers(0, 2, n)
        uv = rng.uniform(-1, 1, (n, 2))
        pts = np.zeros((n, 3))
        xz = plane == 0
        pts[xz, 0] = uv[xz, 0]
        pts[xz, 2] = uv[xz, 1]
        pts[~xz, 1] = uv[~xz, 0]
        pts[~xz, 2] = uv[~xz, 1]
        return pts
    raise ConfigError(f"unknown shape kind {kind!r}")


def synth_shape(kind: str, n_points: int, noise_sigma: float = 0.0, rng_seed: int = 0) -> PointCloud:
    """Sample a surface, jitter, then center and scale to unit max radius.

    Centrally symmetric kinds are sampled in antithetic pairs so the sample
    centroid vanishes by construction (exact surface geometry survives the
    centering step; use an even n_points for bit-clean symmetry).
    """
    if kind not in SHAPE_KINDS:
        raise ConfigError(f"unknown shape kind {kind!r}; known: {SHAPE_KINDS}")
    if n_points < 64:
        raise CountError("n_points must be >= 64")
    rng = np.random.default_rng(rng_seed)
    if kind in _SYMMETRIC:
        half = (n_points + 1) // 2
        base = _surface_sample(kind, half, rng)
        pts = np.concatenate([base, -base], axis=0)[:n_points]
    else:
        pts = _surface_sample(kind, n_points, rng)
    if noise_sigma > 0:
        pts = pts + rng.normal(scale=noise_sigma, size=pts.shape)
    pts = pts - pts.mean(axis=0)
    radius = np.linalg.norm(pts, axis=1).max()
    if radius > 0:
        pts = pts / radius
    return PointCloud(points=pts, label=SHAPE_KINDS.index(kind))


def save_xyz(points: np.ndarray, path) -> None:
    """Debug dump: one 'x y z' triple per line, 6 decimals."""
    with open(path, "w", encoding="ascii") as fh:
        for p in np.asarray(points):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")


def load_xyz(path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64).reshape(-1, 3)
