"""Independent brute-force oracles used by unit and acceptance tests.

These deliberately avoid the library's vectorized code paths: plain Python
loops and sorts, so they stay independent of what they check.
"""

import numpy as np


def knn_bruteforce(queries, keys, k):
    out = []
    for q in queries:
        dists = []
        for j, key in enumerate(keys):
            d = 0.0
            for c in range(3):
                d += (q[c] - key[c]) ** 2
            dists.append((d, j))
        dists.sort()
        out.append([j for (_, j) in dists[:k]])
    return np.asarray(out, dtype=np.int64)


def chamfer_double_loop(a, b):
    total_ab = 0.0
    for p in a:
        best = None
        for q in b:
            d = float(((p - q) ** 2).sum())
            best = d if best is None else min(best, d)
        total_ab += best
    total_ba = 0.0
    for q in b:
        best = None
        for p in a:
            d = float(((p - q) ** 2).sum())
            best = d if best is None else min(best, d)
        total_ba += best
    return total_ab / len(a) + total_ba / len(b)


def fps_is_greedy_maxmin(points, indices):
    """Every selected point must have max-min distance among the remaining."""
    selected = [indices[0]]
    for idx in indices[1:]:
        remaining = [j for j in range(len(points)) if j not in selected]
        best = {}
        for j in remaining:
            best[j] = min(float(((points[j] - points[s]) ** 2).sum()) for s in selected)
        if best[idx] < max(best.values()) - 1e-12:
            return False
        selected.append(idx)
    return True


def rotation_matrix(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    return np.array(
        [
            [c + x * x * (1 - c), x * y * (1 - c) - z * s, x * z * (1 - c) + y * s],
            [y * x * (1 - c) + z * s, c + y * y * (1 - c), y * z * (1 - c) - x * s],
            [z * x * (1 - c) - y * s, z * y * (1 - c) + x * s, c + z * z * (1 - c)],
        ]
    )
