"""Registering a newly built map section into an existing map.

A new section arrives in its own frame with its own scale. Shared 3D points
give a scale estimate (median of distance ratios), a robust rigid fit, and an
ICP refinement over the full clouds.

Run with ``python3 demos/03_map_augmentation.py``.
"""

# %% Cut a section out and move it
import numpy as np

from mapdelta.mapupdate import augment_map, section_points, transform_image
from mapdelta.model import MapBundle, RigidTransform
from mapdelta.registration import rotation_angle_deg
from mapdelta.synth import SceneSpec, generate_scene

scene = generate_scene(SceneSpec(seed=4, n_map_images=4, n_query_images=0))
old = scene.bundle
rng = np.random.default_rng(0)

angle = 0.6
axis = np.array([0.2, 0.3, 0.93]) / np.linalg.norm([0.2, 0.3, 0.93])
K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
R = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K
t, s = np.array([12.0, -4.0, 2.5]), 1.6
# Old frame = R (s * section) + t, so the section frame is the inverse.
to_section = RigidTransform(R.T, -R.T @ t / s, 1 / s)
ids = old.ids("map")[:2]
section = MapBundle({f"new_{i}": transform_image(old[i], to_section, f"new_{i}") for i in ids}, old.descriptor_len)

# %% Correspondences: 1 cm of noise, and a fifth of them wrong
a = section_points(MapBundle({i: old[i] for i in ids}, old.descriptor_len))
b = to_section.apply(a) + rng.normal(0, 0.01, a.shape)
bad = rng.choice(len(a), len(a) // 5, replace=False)
b[bad] += rng.normal(0, 3.0, (len(bad), 3))
print(f"{len(a)} correspondences, {len(bad)} corrupted")

# %% Register and merge
merged, rep = augment_map(old, section, a, b)
print(f"ok={rep.ok} scale={rep.scale:.4f} (true {s})")
print(f"RANSAC inliers {rep.ransac_inliers}, rms {rep.ransac_rms:.2e} m")
print(f"ICP rms history: {[round(v, 6) for v in rep.icp_rms]}")
T = rep.icp_T
print(f"rotation error {rotation_angle_deg(T[:3, :3].T @ R):.2e} deg, "
      f"translation error {np.linalg.norm(T[:3, 3] - t):.2e} m")
print(f"merged map: {len(old)} -> {len(merged)} images, new ids {sorted(rep.merged_ids.values())}")
