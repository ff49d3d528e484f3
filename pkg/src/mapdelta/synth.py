"""Synthetic scenes with exact ground truth.

A scene is a set of textured vertical planar facades seen by upright pinhole
cameras walking along the facade. Every facade carries a grid of square
patches; the patch grid is the visual segmentation, and rectangles on the
facade can be declared changed (new appearance in query images) or exempt
(labelled with a semantic class the pipeline ignores).

World frame: x east, y north, z up. Camera frame: x right, y down, z forward.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .homography import fit_h8
from .model import CameraPose, Features, ImageRecord, LabelRaster, MapBundle

BUILDING, GROUND, SKY, PLANT, HUMAN = 1, 2, 3, 4, 5
VIS_GROUND, VIS_SKY = 1, 2
_PATCH_ID0 = 3

# camera-to-world rotation of a camera looking north with image y pointing down
_R_NORTH = np.column_stack([(1.0, 0.0, 0.0), (0.0, 0.0, -1.0), (0.0, 1.0, 0.0)])


@dataclass
class PlaneSpec:
    """Vertical rectangle: ``origin + s*u_dir + t*(0,0,1)`` for s in [0, width], t in [0, height]."""

    origin: tuple[float, float, float] = (-21.0, 15.0, 0.0)
    u_dir: tuple[float, float, float] = (1.0, 0.0, 0.0)
    width: float = 42.0
    height: float = 8.0
    density: float = 16.0  # features per square meter
    patch: float = 1.5  # visual segment size, meters


@dataclass
class RegionSpec:
    """Rectangle in a plane's (s, t) coordinates."""

    plane: int = 0
    s0: float = 0.0
    s1: float = 0.0
    t0: float = 0.0
    t1: float = 0.0
    class_id: int = PLANT

    def contains(self, plane_idx: np.ndarray, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        return (plane_idx == self.plane) & (s >= self.s0) & (s < self.s1) & (t >= self.t0) & (t < self.t1)


@dataclass
class SceneSpec:
    seed: int = 0
    n_map_images: int = 10
    n_query_images: int = 10
    width: int = 720
    height: int = 540
    focal_px: float = 500.0
    camera_height: float = 1.6
    map_x_range: tuple[float, float] = (-4.5, 4.5)
    query_x_range: tuple[float, float] = (-4.5, 1.5)
    query_y_jitter: float = 0.3
    yaw_jitter: float = 0.02  # rad, std-dev
    map_roll: float = 0.0  # rad, applied to every map image
    query_pose_noise: float = 0.0  # m, noise on the stored query positions
    planes: list[PlaneSpec] = field(default_factory=lambda: [PlaneSpec()])
    changes: list[RegionSpec] = field(
        default_factory=lambda: [RegionSpec(plane=0, s0=19.5, s1=22.5, t0=1.5, t1=4.5, class_id=BUILDING)]
    )
    exempt_regions: list[RegionSpec] = field(
        default_factory=lambda: [RegionSpec(plane=0, s0=15.0, s1=18.0, t0=0.0, t1=3.0, class_id=PLANT)]
    )
    exempt_changes: bool = True  # exempt regions also look different in queries
    descriptor_len: int = 32
    pixel_sigma: float = 0.5
    desc_sigma: float = 0.1
    detect_prob: float = 0.97
    outlier_frac: float = 0.03  # spurious single-view detections, no 3D value
    near_points: int = 0  # clutter features closer than 3 m, per image
    global_dim: int = 64
    global_noise: float = 0.02

    def validate(self) -> "SceneSpec":
        if not self.planes:
            raise ValueError("scene needs at least one plane")
        if self.n_map_images < 0 or self.n_query_images < 0:
            raise ValueError("image counts must be non-negative")
        for r in list(self.changes) + list(self.exempt_regions):
            if not 0 <= r.plane < len(self.planes):
                raise ValueError(f"region refers to missing plane {r.plane}")
            if not (r.s1 > r.s0 and r.t1 > r.t0):
                raise ValueError("region must have positive extent")
        if self.descriptor_len <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("descriptor_len and image size must be positive")
        if not 0 < self.detect_prob <= 1 or not 0 <= self.outlier_frac < 1:
            raise ValueError("detect_prob must be in (0, 1], outlier_frac in [0, 1)")
        return self

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "SceneSpec":
        doc = dict(doc)
        if "planes" in doc:
            doc["planes"] = [PlaneSpec(**p) for p in doc["planes"]]
        for key in ("changes", "exempt_regions"):
            if key in doc:
                doc[key] = [RegionSpec(**r) for r in doc[key]]
        for key in ("map_x_range", "query_x_range"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc).validate()

    @classmethod
    def load(cls, path) -> "SceneSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def acceptance_spec(seed: int = 7) -> SceneSpec:
    """10 map / 10 query images, one planted change, one changing exempt region."""
    return SceneSpec(seed=seed)


def no_change_spec(seed: int = 7) -> SceneSpec:
    return SceneSpec(seed=seed, changes=[], exempt_changes=False)


def exempt_only_spec(seed: int = 7) -> SceneSpec:
    return SceneSpec(seed=seed, changes=[], exempt_changes=True)


def yaw_rotation(psi: float) -> np.ndarray:
    c, s = np.cos(psi), np.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def roll_rotation(phi: float) -> np.ndarray:
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def camera_rotation(yaw: float = 0.0, roll: float = 0.0) -> np.ndarray:
    return yaw_rotation(yaw) @ _R_NORTH @ roll_rotation(roll)


@dataclass
class Camera:
    pose: CameraPose
    focal: float
    width: int
    height: int

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.focal, 0, self.width / 2], [0, self.focal, self.height / 2], [0, 0, 1.0]])

    def project(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and camera-frame depth of world points."""
        pc = self.pose.world_to_camera(pts)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = np.column_stack(
                [self.focal * pc[:, 0] / z + self.width / 2, self.focal * pc[:, 1] / z + self.height / 2]
            )
        return px, z

    def rays(self) -> np.ndarray:
        """World-frame ray directions through every pixel center, (h*w, 3)."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        d = np.column_stack(
            [
                (xs.ravel() + 0.5 - self.width / 2) / self.focal,
                (ys.ravel() + 0.5 - self.height / 2) / self.focal,
                np.ones(xs.size),
            ]
        )
        return d @ self.pose.orientation.T


@dataclass
class Surface:
    """Per-pixel ray casting result for one image."""

    plane: np.ndarray  # (h, w) int, -1 where no plane is hit
    s: np.ndarray
    t: np.ndarray
    depth: np.ndarray  # ray parameter along the unit-z camera ray
    ground: np.ndarray  # (h, w) bool


@dataclass
class GroundTruth:
    cameras: dict[str, Camera]
    change_masks: dict[str, np.ndarray]
    changed_features: dict[str, set[int]]
    feature_point_ids: dict[str, np.ndarray]  # per image: world point id per feature, -1 spurious
    point_world: np.ndarray  # (n_points, 3)
    point_changed: np.ndarray  # (n_points,) bool
    point_exempt: np.ndarray  # (n_points,) bool
    surfaces: dict[str, Surface] = field(repr=False, default_factory=dict)

    def homography(self, src_id: str, dst_id: str, plane: PlaneSpec) -> np.ndarray:
        """Exact homography induced by ``plane`` from image ``src_id`` to ``dst_id``."""
        o = np.asarray(plane.origin, dtype=float)
        u = np.asarray(plane.u_dir, dtype=float)
        s = np.linspace(0, plane.width, 7)
        t = np.linspace(0, plane.height, 5)
        S, T = np.meshgrid(s, t)
        pts = o + S.ravel()[:, None] * u + T.ravel()[:, None] * np.array([0, 0, 1.0])
        pa, za = self.cameras[src_id].project(pts)
        pb, zb = self.cameras[dst_id].project(pts)
        ok = (za > 0) & (zb > 0)
        return fit_h8(pa[ok], pb[ok])


@dataclass
class Scene:
    spec: SceneSpec
    bundle: MapBundle
    truth: GroundTruth


def _plane_frame(p: PlaneSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    o = np.asarray(p.origin, dtype=float)
    u = np.asarray(p.u_dir, dtype=float)
    u = u / np.linalg.norm(u)
    v = np.array([0.0, 0.0, 1.0])
    n = np.cross(u, v)
    return o, u, v, n


def cast(camera: Camera, planes: list[PlaneSpec]) -> Surface:
    C = camera.pose.position
    d = camera.rays()
    npx = len(d)
    best_t = np.full(npx, np.inf)
    best_plane = np.full(npx, -1)
    best_s = np.zeros(npx)
    best_v = np.zeros(npx)
    for k, p in enumerate(planes):
        o, u, v, n = _plane_frame(p)
        den = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = ((o - C) @ n) / den
        hit = C + lam[:, None] * d
        s = (hit - o) @ u
        t = (hit - o) @ v
        ok = (lam > 0) & np.isfinite(lam) & (s >= 0) & (s < p.width) & (t >= 0) & (t < p.height) & (lam < best_t)
        best_t[ok] = lam[ok]
        best_plane[ok] = k
        best_s[ok] = s[ok]
        best_v[ok] = t[ok]
    ground = (best_plane < 0) & (d[:, 2] < 0)
    shape = (camera.height, camera.width)
    return Surface(
        plane=best_plane.reshape(shape),
        s=best_s.reshape(shape),
        t=best_v.reshape(shape),
        depth=best_t.reshape(shape),
        ground=ground.reshape(shape),
    )


def _patch_ids(spec: SceneSpec) -> tuple[list[int], list[tuple[int, int]]]:
    offsets, dims = [], []
    nxt = _PATCH_ID0
    for p in spec.planes:
        ns = int(np.ceil(p.width / p.patch))
        nt = int(np.ceil(p.height / p.patch))
        offsets.append(nxt)
        dims.append((ns, nt))
        nxt += ns * nt
    if nxt > 0xFFFF:
        raise ValueError("too many patches for 16-bit visual labels")
    return offsets, dims


def _rasters(spec: SceneSpec, surf: Surface) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    offsets, dims = _patch_ids(spec)
    sem = np.where(surf.ground, GROUND, SKY).astype(np.uint16)
    vis = np.where(surf.ground, VIS_GROUND, VIS_SKY).astype(np.uint16)
    changed = np.zeros(surf.plane.shape, dtype=bool)
    for k, p in enumerate(spec.planes):
        on = surf.plane == k
        if not on.any():
            continue
        si = np.minimum((surf.s[on] / p.patch).astype(np.int64), dims[k][0] - 1)
        ti = np.minimum((surf.t[on] / p.patch).astype(np.int64), dims[k][1] - 1)
        vis[on] = offsets[k] + si * dims[k][1] + ti
        sem[on] = BUILDING
    for r in spec.exempt_regions:
        sem[r.contains(surf.plane, surf.s, surf.t)] = r.class_id
    for r in spec.changes:
        changed |= r.contains(surf.plane, surf.s, surf.t)
    return sem, vis, changed


def _sample_points(spec: SceneSpec, rng: np.random.Generator):
    world, plane_of, s_of, t_of = [], [], [], []
    for k, p in enumerate(spec.planes):
        o, u, v, _ = _plane_frame(p)
        n = rng.poisson(p.density * p.width * p.height)
        s = rng.uniform(0, p.width, n)
        t = rng.uniform(0, p.height, n)
        world.append(o + s[:, None] * u + t[:, None] * v)
        plane_of.append(np.full(n, k))
        s_of.append(s)
        t_of.append(t)
    return np.vstack(world), np.concatenate(plane_of), np.concatenate(s_of), np.concatenate(t_of)


def _global_descriptor(vis: np.ndarray, patch_vecs: np.ndarray, noise: float, rng) -> np.ndarray:
    counts = np.bincount(vis.ravel().astype(np.int64), minlength=len(patch_vecs))[: len(patch_vecs)]
    counts[:_PATCH_ID0] = 0  # ground and sky carry no identity
    g = counts.astype(float) @ patch_vecs
    if not np.any(g):
        g = rng.standard_normal(patch_vecs.shape[1])
    g = g / np.linalg.norm(g)
    g = g + noise * rng.standard_normal(len(g))
    return g / np.linalg.norm(g)


def generate_scene(spec: SceneSpec) -> Scene:
    """Build a bundle and its ground truth; fully determined by ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    D = spec.descriptor_len

    world, plane_of, s_of, t_of = _sample_points(spec, rng)
    n_pts = len(world)
    base_desc = rng.standard_normal((n_pts, D))
    new_desc = rng.standard_normal((n_pts, D))
    changed_pt = np.zeros(n_pts, dtype=bool)
    for r in spec.changes:
        changed_pt |= r.contains(plane_of, s_of, t_of)
    exempt_pt = np.zeros(n_pts, dtype=bool)
    for r in spec.exempt_regions:
        exempt_pt |= r.contains(plane_of, s_of, t_of)
    query_changed = changed_pt | (exempt_pt if spec.exempt_changes else False)

    offsets, dims = _patch_ids(spec)
    n_vis = offsets[-1] + dims[-1][0] * dims[-1][1]
    patch_vecs = rng.standard_normal((n_vis, spec.global_dim))

    cams: dict[str, tuple[str, Camera, Camera]] = {}
    mx = np.linspace(*spec.map_x_range, spec.n_map_images) if spec.n_map_images else []
    for i, x in enumerate(mx):
        yaw = rng.normal(0.0, spec.yaw_jitter) if spec.yaw_jitter > 0 else 0.0
        pose = CameraPose([x, 0.0, spec.camera_height], camera_rotation(yaw, spec.map_roll))
        cam = Camera(pose, spec.focal_px, spec.width, spec.height)
        cams[f"m{i:03d}"] = ("map", cam, cam)
    qx = np.linspace(*spec.query_x_range, spec.n_query_images) if spec.n_query_images else []
    for i, x in enumerate(qx):
        y = rng.uniform(0.0, spec.query_y_jitter) if spec.query_y_jitter > 0 else 0.0
        yaw = rng.normal(0.0, spec.yaw_jitter) if spec.yaw_jitter > 0 else 0.0
        pose = CameraPose([x, y, spec.camera_height], camera_rotation(yaw))
        cam = Camera(pose, spec.focal_px, spec.width, spec.height)
        stored = cam
        if spec.query_pose_noise > 0:
            noisy = pose.position + rng.normal(0.0, spec.query_pose_noise, 3)
            stored = Camera(CameraPose(noisy, pose.orientation), cam.focal, cam.width, cam.height)
        cams[f"q{i:03d}"] = ("query", cam, stored)

    images: dict[str, ImageRecord] = {}
    truth = GroundTruth(
        cameras={},
        change_masks={},
        changed_features={},
        feature_point_ids={},
        point_world=world,
        point_changed=changed_pt,
        point_exempt=exempt_pt,
    )
    for iid in sorted(cams):
        kind, cam, stored = cams[iid]
        surf = cast(cam, spec.planes)
        sem, vis, changed_px = _rasters(spec, surf)

        px, z = cam.project(world)
        inb = (z > 0) & (px[:, 0] >= 0) & (px[:, 0] < spec.width) & (px[:, 1] >= 0) & (px[:, 1] < spec.height)
        vis_idx = np.flatnonzero(inb)
        # Occlusion: the pixel's first surface must be the point's own plane at its depth.
        r = px[vis_idx, 1].astype(np.int64)
        c = px[vis_idx, 0].astype(np.int64)
        same = surf.plane[r, c] == plane_of[vis_idx]
        vis_idx = vis_idx[same & (np.abs(surf.depth[r, c] - z[vis_idx]) < 0.05 * z[vis_idx] + 0.5)]
        vis_idx = vis_idx[rng.random(len(vis_idx)) < spec.detect_prob]

        obs_px = px[vis_idx] + rng.normal(0.0, spec.pixel_sigma, (len(vis_idx), 2))
        keep = (obs_px[:, 0] >= 0) & (obs_px[:, 0] < spec.width) & (obs_px[:, 1] >= 0) & (obs_px[:, 1] < spec.height)
        vis_idx, obs_px = vis_idx[keep], obs_px[keep]
        src_desc = base_desc[vis_idx]
        if kind == "query":
            qc = query_changed[vis_idx]
            src_desc = np.where(qc[:, None], new_desc[vis_idx], src_desc)
        desc = src_desc + rng.normal(0.0, spec.desc_sigma, src_desc.shape)
        obs_world = world[vis_idx]
        has_world = np.full(len(vis_idx), kind == "map")
        point_ids = vis_idx.astype(np.int64)

        n_out = int(round(spec.outlier_frac * len(vis_idx) / max(1e-9, 1 - spec.outlier_frac)))
        if n_out:
            out_px = np.column_stack(
                [rng.uniform(0, spec.width, n_out), rng.uniform(0, spec.height, n_out)]
            )
            obs_px = np.vstack([obs_px, out_px])
            desc = np.vstack([desc, rng.standard_normal((n_out, D))])
            obs_world = np.vstack([obs_world, np.zeros((n_out, 3))])
            has_world = np.concatenate([has_world, np.zeros(n_out, dtype=bool)])
            point_ids = np.concatenate([point_ids, np.full(n_out, -1)])

        if spec.near_points:
            k = spec.near_points
            near_px = np.column_stack([rng.uniform(0, spec.width, k), rng.uniform(0, spec.height, k)])
            dist = rng.uniform(1.0, 2.5, k)
            rays = np.column_stack(
                [(near_px[:, 0] - spec.width / 2) / spec.focal_px, (near_px[:, 1] - spec.height / 2) / spec.focal_px, np.ones(k)]
            )
            rays /= np.linalg.norm(rays, axis=1, keepdims=True)
            near_world = cam.pose.position + (dist[:, None] * rays) @ cam.pose.orientation.T
            obs_px = np.vstack([obs_px, near_px])
            desc = np.vstack([desc, rng.standard_normal((k, D))])
            obs_world = np.vstack([obs_world, near_world])
            has_world = np.concatenate([has_world, np.full(k, kind == "map")])
            point_ids = np.concatenate([point_ids, np.full(k, -2)])

        order = rng.permutation(len(obs_px))
        feats = Features(
            px=obs_px[order],
            desc=desc[order].astype(np.float32),
            world=obs_world[order],
            has_world=has_world[order],
            changed=np.zeros(len(order), dtype=np.int8),
        )
        point_ids = point_ids[order]
        gdesc = _global_descriptor(vis, patch_vecs, spec.global_noise, rng)
        images[iid] = ImageRecord(
            id=iid,
            kind=kind,
            pose=stored.pose,
            width=spec.width,
            height=spec.height,
            features=feats,
            global_desc=gdesc,
            semantic=LabelRaster(sem),
            visual=LabelRaster(vis),
        )
        truth.cameras[iid] = cam
        truth.change_masks[iid] = changed_px
        truth.surfaces[iid] = surf
        truth.feature_point_ids[iid] = point_ids
        real = point_ids >= 0
        truth.changed_features[iid] = set(np.flatnonzero(real & changed_pt[np.maximum(point_ids, 0)]).tolist())

    bundle = MapBundle(images=images, descriptor_len=D, created=f"synthetic seed={spec.seed}")
    bundle.validate()
    return Scene(spec, bundle, truth)


# -- end-to-end evaluation ---------------------------------------------------


def true_pairs(scene: Scene, max_dist: float, max_ang: float) -> list[tuple[str, str]]:
    """Pairs selected from the true (noise-free) camera poses."""
    from .pairing import select_pairs

    b = scene.bundle
    true_imgs = {iid: replace(b[iid], pose=scene.truth.cameras[iid].pose) for iid in b.ids()}
    qs = [true_imgs[i] for i in b.ids("query")]
    ms = [true_imgs[i] for i in b.ids("map")]
    return [(p.query_id, p.map_id) for p in select_pairs(qs, ms, max_dist, max_ang)]


def pair_truth_mask(scene: Scene, query_id: str, map_id: str) -> np.ndarray:
    """Planted change in the map image restricted to the true common field of view."""
    from .preprocess import common_fov_mask

    H = scene.truth.homography(query_id, map_id, scene.spec.planes[0])
    dims = (scene.spec.width, scene.spec.height)
    return scene.truth.change_masks[map_id] & common_fov_mask(H, dims, dims)


def corner_error(H_est: np.ndarray, H_true: np.ndarray, width: int, height: int) -> float:
    from .homography import warp_points

    c = np.array([[0, 0], [width, 0], [width, height], [0, height]], dtype=float)
    return float(np.mean(np.linalg.norm(warp_points(H_est, c) - warp_points(H_true, c), axis=1)))


def _section_registration(scene: Scene, cfg, n_images: int = 3, outlier_frac: float = 0.2) -> dict:
    """Cut a few map images out, move them by a known similarity, and register them back."""
    from .mapupdate import augment_map, section_points, transform_image
    from .model import RigidTransform
    from .registration import rotation_angle_deg

    rng = np.random.default_rng([scene.spec.seed, 0x5EC])
    ids = scene.bundle.ids("map")[:n_images]
    if not ids:
        return {"ok": False, "reason": "no map images"}
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = rng.uniform(0.2, 1.0)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    R0 = np.eye(3) + np.sin(ang) * K + (1 - np.cos(ang)) * K @ K
    t0 = rng.uniform(-20, 20, 3)
    s0 = float(rng.uniform(0.5, 2.0))
    # old = R0 (s0 * b) + t0, so b = R0^T (old - t0) / s0
    to_section = RigidTransform(R0.T, -R0.T @ t0 / s0, 1.0 / s0)
    section = MapBundle(
        images={f"s_{i}": transform_image(scene.bundle[i], to_section, f"s_{i}") for i in ids},
        descriptor_len=scene.bundle.descriptor_len,
        created=scene.bundle.created,
    )
    old_sub = MapBundle({i: scene.bundle[i] for i in ids}, scene.bundle.descriptor_len)
    a = section_points(old_sub)
    b = to_section.apply(a)
    n_out = int(outlier_frac * len(a))
    if n_out:
        j = rng.choice(len(a), n_out, replace=False)
        b[j] = b[rng.permutation(j)] + rng.normal(0, 2.0, (n_out, 3))
    merged, rep = augment_map(
        scene.bundle, section, a, b, cfg.reg_inlier_m, cfg.ransac_confidence, cfg.reg_max_iters,
        cfg.icp_max_iters, cfg.icp_tol, seed=cfg.seed,
    )
    out = {"ok": rep.ok, "reason": rep.reason, "true_scale": s0, "report": rep.to_json()}
    if not rep.ok:
        return out
    T = rep.icp_T
    out["scale_rel_err"] = abs(rep.scale - s0) / s0
    out["rot_err_deg"] = rotation_angle_deg(T[:3, :3].T @ R0)
    out["trans_err_m"] = float(np.linalg.norm(T[:3, 3] - t0))
    diffs = []
    for sid, new_id in rep.merged_ids.items():
        src = scene.bundle[sid[2:]].features
        dst = merged[new_id].features
        diffs.append(dst.world[dst.has_world] - src.world[src.has_world])
    d = np.vstack(diffs)
    out["merged_rms_m"] = float(np.sqrt(np.mean(np.sum(d**2, axis=1))))
    return out


def evaluate_pipeline(scene: Scene, cfg=None, log=None, registration: bool = True) -> dict:
    """Run every stage on a generated scene and score it against ground truth."""
    from .config import PipelineConfig
    from .metrics import confusion, evaluate_pairs, iou
    from .pipeline import (
        EventLog,
        TagSet,
        group_map_masks,
        run_aggregate,
        run_align,
        run_detect,
        run_pair_select,
        run_propagate,
        run_update,
        significance,
    )

    cfg = cfg or PipelineConfig()
    log = log or EventLog()
    b, spec = scene.bundle, scene.spec
    report: dict = {"seed": spec.seed, "errors": [], "seconds": {}}
    clock = log.clock

    def stage(name, fn):
        t = clock()
        try:
            return fn()
        except Exception as exc:  # reported, not raised
            report["errors"].append({"stage": name, "error": f"{type(exc).__name__}: {exc}"})
            return None
        finally:
            report["seconds"][name] = round(clock() - t, 4)

    pairs = stage("pair-select", lambda: run_pair_select(b, cfg, log)) or []
    truth_pairs = set(true_pairs(scene, cfg.max_dist, cfg.max_ang))
    got = {(p.query_id, p.map_id) for p in pairs}
    tp = len(got & truth_pairs)
    report["pairs"] = {
        "n_selected": len(got),
        "n_true": len(truth_pairs),
        "precision": tp / len(got) if got else 1.0,
        "recall": tp / len(truth_pairs) if truth_pairs else 1.0,
    }

    alignments = stage("align", lambda: run_align(b, pairs, cfg, log)) or []
    align_rep = {"n_accepted": 0, "n_rejected": 0, "dof": {"5": 0, "8": 0}, "corner_err_px": {}}
    for a in alignments:
        key = f"{a.pair.query_id}__{a.pair.map_id}"
        if not a.accepted:
            align_rep["n_rejected"] += 1
            continue
        align_rep["n_accepted"] += 1
        align_rep["dof"][str(a.chosen.dof)] += 1
        Ht = scene.truth.homography(a.pair.query_id, a.pair.map_id, spec.planes[0])
        align_rep["corner_err_px"][key] = corner_error(a.chosen.H, Ht, spec.width, spec.height)
    errs = list(align_rep["corner_err_px"].values())
    align_rep["max_corner_err_px"] = max(errs) if errs else None
    report["align"] = align_rep

    masks = stage("detect", lambda: run_detect(b, alignments, cfg, log)) or {}
    per_pair, scored = {}, {}
    for (q, m), (mm, _) in sorted(masks.items()):
        gt = pair_truth_mask(scene, q, m)
        region = scene.truth.change_masks[m]
        covered = bool(region.any() and gt.sum() >= 0.5 * region.sum())
        c = confusion(mm.bits, gt)
        per_pair[f"{q}__{m}"] = {"iou": iou(c), "covered": covered, "pred_px": int(mm.bits.sum()), "gt_px": int(gt.sum())}
        scored[f"{q}__{m}"] = (mm.bits, gt)
    cov = [v["iou"] for v in per_pair.values() if v["covered"]]
    report["detect"] = {
        "pairs": per_pair,
        "n_covered": len(cov),
        "min_covered_iou": min(cov) if cov else None,
        "n_nonempty": sum(1 for v in per_pair.values() if v["pred_px"] > 0),
        "metrics": evaluate_pairs(scored)["all"] if scored else None,
    }

    masters = stage("aggregate", lambda: run_aggregate(group_map_masks(masks), cfg, log)) or {}
    report["aggregate"] = {
        "n_masters": len(masters),
        "masters": {
            mid: {"support": mm.support, "iou": iou(confusion(mm.binary.bits, scene.truth.change_masks[mid]))}
            for mid, mm in sorted(masters.items())
        },
    }

    tags = stage("propagate", lambda: run_propagate(b, masters, cfg, log)) or TagSet()
    sig = stage("significance", lambda: significance(b, tags, cfg)) or {}
    updated = stage("update", lambda: run_update(b, tags))

    changed = tags.changed()
    n_planted = n_planted_gone = n_unchanged = n_unchanged_lost = n_tagged = n_tagged_true = 0
    consistent = True
    for iid in b.ids("map"):
        f = b[iid].features
        planted = np.zeros(len(f), dtype=bool)
        planted[sorted(scene.truth.changed_features[iid])] = True
        planted &= f.has_world
        unchanged = f.has_world & ~planted
        keep = np.ones(len(f), dtype=bool)
        keep[sorted(changed.get(iid, ()))] = False
        if updated is not None and len(updated[iid].features) != int(keep.sum()):
            consistent = False
        n_planted += int(planted.sum())
        n_planted_gone += int((planted & ~keep).sum())
        n_unchanged += int(unchanged.sum())
        n_unchanged_lost += int((unchanged & ~keep).sum())
        n_tagged += int((~keep).sum())
        n_tagged_true += int((planted & ~keep).sum())
    report["tags"] = {
        "n_direct": sum(len(v) for v in tags.direct.values()),
        "n_propagated": sum(len(v) for v in tags.propagated.values()),
        "propagated_images": sorted(tags.propagated),
        "precision": n_tagged_true / n_tagged if n_tagged else 1.0,
        "recall": n_planted_gone / n_planted if n_planted else 1.0,
        "significant_images": sorted(k for k, v in sig.items() if v),
    }
    report["update"] = {
        "n_planted": n_planted,
        "planted_removed_frac": n_planted_gone / n_planted if n_planted else 1.0,
        "n_unchanged": n_unchanged,
        "unchanged_lost_frac": n_unchanged_lost / n_unchanged if n_unchanged else 0.0,
        "counts_consistent": consistent and updated is not None,
    }
    if registration:
        report["registration"] = stage("registration", lambda: _section_registration(scene, cfg))
    report["seconds"]["total"] = round(sum(report["seconds"].values()), 4)
    return report
