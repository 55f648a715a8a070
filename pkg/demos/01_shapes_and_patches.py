"""Synthetic shapes, farthest-point sampling, and patch grouping.

Walks the geometry pipeline a training step relies on: generate a cloud,
pick patch centers, group neighborhoods, and split them into visible and
masked sets.
"""

import numpy as np

from lcm import geometry as G
from lcm import mpm

cloud = G.synth_shape("torus", n_points=1024, noise_sigma=0.01, rng_seed=7)
print(f"torus cloud: {cloud.n_points} points, centroid {cloud.points.mean(axis=0).round(6)}, "
      f"max radius {np.linalg.norm(cloud.points, axis=1).max():.4f}")

centers, idx = G.farthest_point_sample(cloud, 64)
print(f"FPS picked 64 centers; first five indices: {idx[:5].tolist()}")

patches = G.group_patches(cloud, centers, 32)
print(f"patches: {patches.shape} (relative coords, mean |offset| "
      f"{np.abs(patches).mean():.4f})")

spec = mpm.MaskSpec(unmask_ratio=0.4, rng_seed=0)
patch_set = mpm.patchify_and_mask(cloud, 64, 32, spec)
print(f"visible {len(patch_set.visible_idx)} / masked {len(patch_set.masked_idx)} "
      f"(r={patch_set.unmask_ratio})")

G.save_xyz(centers, "/tmp/torus_centers.xyz")
print("dumped centers to /tmp/torus_centers.xyz (one 'x y z' per line)")

a = G.synth_shape("sphere", 256, 0.0, rng_seed=1).points
b = G.synth_shape("cube", 256, 0.0, rng_seed=1).points
print(f"chamfer(sphere, cube) = {G.chamfer_l2(a, b).item():.4f}; "
      f"chamfer(sphere, sphere) = {G.chamfer_l2(a, a).item():.4f}")
