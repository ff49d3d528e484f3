"""Domain types for localization-map bundles.

Pixel convention throughout the package: x to the right, y down, origin at the
top-left corner of the image. Rasters are stored row-major as ``(height, width)``
numpy arrays.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterator

import numpy as np

ORTHO_TOL = 1e-9
UNIT_TOL = 1e-6
DEFAULT_DESCRIPTOR_LEN = 512

_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.\-]*$")


class ValidationError(ValueError):
    """Raised when a value violates a type invariant.

    ``image_id`` and ``field`` identify the offending record when known.
    """

    def __init__(self, message: str, image_id: str | None = None, field: str | None = None):
        self.image_id = image_id
        self.field = field
        where = ""
        if image_id is not None:
            where = f"image {image_id!r}"
            if field is not None:
                where += f", field {field!r}"
            where += ": "
        super().__init__(where + message)


class Tag(IntEnum):
    UNTAGGED = 0
    UNCHANGED = 1
    CHANGED = 2


KINDS = ("map", "query")


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        return False
    return abs(np.linalg.det(R) - 1.0) <= tol


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Camera center in world meters and camera-to-world rotation.

    The camera frame is x right, y down, z forward; the line of sight is the
    camera +z axis expressed in the world frame.
    """

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=float).reshape(3, 3))

    @property
    def los(self) -> np.ndarray:
        return self.orientation[:, 2].copy()

    def validate(self, image_id: str | None = None) -> None:
        if not np.all(np.isfinite(self.position)):
            raise ValidationError("non-finite camera position", image_id, "pose.position")
        if not check_rotation(self.orientation):
            raise ValidationError("orientation is not a proper rotation", image_id, "pose.orientation")

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - self.position) @ self.orientation

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return np.array_equal(self.position, other.position) and np.array_equal(
            self.orientation, other.orientation
        )


@dataclass(frozen=True)
class FeaturePoint:
    px: tuple[float, float]
    descriptor: np.ndarray
    world: tuple[float, float, float] | None
    changed: Tag


@dataclass(eq=False)
class Features:
    """Struct-of-arrays feature store for one image.

    ``px`` (n, 2) float64, ``desc`` (n, D) float32, ``world`` (n, 3) float64,
    ``has_world`` (n,) bool, ``changed`` (n,) int8 holding :class:`Tag` values.
    World coordinates of rows without a 3D value are zero and meaningless.
    """

    px: np.ndarray
    desc: np.ndarray
    world: np.ndarray
    has_world: np.ndarray
    changed: np.ndarray

    def __post_init__(self):
        self.px = np.asarray(self.px, dtype=np.float64).reshape(-1, 2)
        n = len(self.px)
        desc = np.asarray(self.desc, dtype=np.float32)
        if desc.ndim != 2:
            desc = desc.reshape(n, -1) if n else desc.reshape(0, 0)
        if len(desc) != n:
            raise ValidationError(f"{len(desc)} descriptors for {n} features")
        self.desc = desc
        self.world = np.asarray(self.world, dtype=np.float64).reshape(n, 3)
        self.has_world = np.asarray(self.has_world, dtype=bool).reshape(n)
        if not self.has_world.all():
            self.world = np.where(self.has_world[:, None], self.world, 0.0)
        self.changed = np.asarray(self.changed, dtype=np.int8).reshape(n)

    @classmethod
    def empty(cls, descriptor_len: int) -> "Features":
        return cls(
            px=np.zeros((0, 2)),
            desc=np.zeros((0, descriptor_len), dtype=np.float32),
            world=np.zeros((0, 3)),
            has_world=np.zeros(0, dtype=bool),
            changed=np.zeros(0, dtype=np.int8),
        )

    @classmethod
    def from_arrays(cls, px, desc, world=None, has_world=None, changed=None) -> "Features":
        px = np.asarray(px, dtype=np.float64).reshape(-1, 2)
        n = len(px)
        if world is None:
            world = np.zeros((n, 3))
            has_world = np.zeros(n, dtype=bool) if has_world is None else has_world
        elif has_world is None:
            has_world = np.ones(n, dtype=bool)
        if changed is None:
            changed = np.full(n, Tag.UNTAGGED, dtype=np.int8)
        return cls(px=px, desc=desc, world=world, has_world=has_world, changed=changed)

    def __len__(self) -> int:
        return len(self.px)

    @property
    def descriptor_len(self) -> int:
        return self.desc.shape[1]

    def __getitem__(self, i: int) -> FeaturePoint:
        w = tuple(self.world[i]) if self.has_world[i] else None
        return FeaturePoint(tuple(self.px[i]), self.desc[i], w, Tag(int(self.changed[i])))

    def __iter__(self) -> Iterator[FeaturePoint]:
        return (self[i] for i in range(len(self)))

    def subset(self, keep: np.ndarray) -> "Features":
        return Features(
            px=self.px[keep],
            desc=self.desc[keep],
            world=self.world[keep],
            has_world=self.has_world[keep],
            changed=self.changed[keep],
        )

    def __eq__(self, other):
        if not isinstance(other, Features):
            return NotImplemented
        return (
            np.array_equal(self.px, other.px)
            and self.desc.shape == other.desc.shape
            and np.array_equal(self.desc, other.desc)
            and np.array_equal(self.has_world, other.has_world)
            and np.array_equal(self.world, other.world)
            and np.array_equal(self.changed, other.changed)
        )


@dataclass(eq=False)
class LabelRaster:
    labels: np.ndarray  # (height, width) uint16

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValidationError(f"label raster must be 2-D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
            raise ValidationError("labels outside the 16-bit range")
        self.labels = labels.astype(np.uint16)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LabelRaster):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)


@dataclass(eq=False)
class ChangeMask:
    image_id: str
    bits: np.ndarray  # (height, width) bool

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {bits.shape}")
        self.bits = bits.astype(bool)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def __eq__(self, other):
        if not isinstance(other, ChangeMask):
            return NotImplemented
        return self.image_id == other.image_id and np.array_equal(self.bits, other.bits)


@dataclass(eq=False)
class Homography:
    """Projective transform between two images with its RANSAC statistics.

    ``inliers`` is an (m, 2) int array of (index in image A, index in image B).
    """

    H: np.ndarray
    dof: int
    inliers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    sigma_xy: np.ndarray = field(default_factory=lambda: np.zeros(2))
    rmse: float = 0.0

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float).reshape(3, 3)
        if H[2, 2] == 0:
            raise ValidationError("H[2][2] must be nonzero")
        self.H = H / H[2, 2]
        self.inliers = np.asarray(self.inliers, dtype=np.int64).reshape(-1, 2)
        self.sigma_xy = np.asarray(self.sigma_xy, dtype=float).reshape(2)
        self.validate()

    def validate(self) -> None:
        if self.dof not in (5, 8):
            raise ValidationError(f"dof must be 5 or 8, got {self.dof}")
        if abs(np.linalg.det(self.H)) <= 1e-12:
            raise ValidationError("homography is singular")
        if self.dof == 5 and (self.H[0, 1] != 0 or self.H[1, 0] != 0 or self.H[2, 1] != 0):
            raise ValidationError("5DOF homography must have H01 == H10 == H21 == 0")

    @property
    def n_inliers(self) -> int:
        return len(self.inliers)

    def inverse(self) -> np.ndarray:
        Hi = np.linalg.inv(self.H)
        return Hi / Hi[2, 2]


@dataclass(eq=False)
class RigidTransform:
    """``x -> R @ (scale * x) + t``."""

    R: np.ndarray
    t: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        if not check_rotation(self.R):
            raise ValidationError("R is not a proper rotation")
        if not self.scale > 0:
            raise ValidationError("scale must be positive")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @property
    def T(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return (self.scale * pts) @ self.R.T + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(
            self.R @ other.R,
            self.scale * (self.R @ other.t) + self.t,
            self.scale * other.scale,
        )


@dataclass(eq=False)
class ImageRecord:
    id: str
    kind: str
    pose: CameraPose
    width: int
    height: int
    features: Features
    global_desc: np.ndarray | None = None
    semantic: LabelRaster | None = None
    visual: LabelRaster | None = None

    def __post_init__(self):
        if self.global_desc is not None:
            self.global_desc = np.asarray(self.global_desc, dtype=float).reshape(-1)

    def validate(self, descriptor_len: int | None = None) -> None:
        iid = self.id
        if not isinstance(iid, str) or not _ID_RE.match(iid):
            raise ValidationError(f"invalid image id {iid!r}", str(iid), "id")
        if self.kind not in KINDS:
            raise ValidationError(f"kind must be one of {KINDS}", iid, "kind")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValidationError("image dimensions must be positive", iid, "width/height")
        self.pose.validate(iid)
        f = self.features
        n = len(f)
        if n:
            if descriptor_len is not None and f.desc.shape[1] != descriptor_len:
                raise ValidationError(
                    f"descriptor length {f.desc.shape[1]} != bundle descriptor_len {descriptor_len}",
                    iid,
                    "features.descriptor",
                )
            if not np.all(np.isfinite(f.desc)):
                raise ValidationError("non-finite descriptor values", iid, "features.descriptor")
            if not np.all(np.isfinite(f.px)):
                raise ValidationError("non-finite feature pixel", iid, "features.px")
            x, y = f.px[:, 0], f.px[:, 1]
            if np.any(x < 0) or np.any(x >= self.width) or np.any(y < 0) or np.any(y >= self.height):
                raise ValidationError("feature pixel outside image bounds", iid, "features.px")
            if not np.all(np.isfinite(f.world[f.has_world])):
                raise ValidationError("non-finite world point", iid, "features.world")
            if not np.all(np.isin(f.changed, [t.value for t in Tag])):
                raise ValidationError("unknown change tag", iid, "features.changed")
        if self.global_desc is not None:
            g = self.global_desc
            if not np.all(np.isfinite(g)) or abs(np.linalg.norm(g) - 1.0) > UNIT_TOL:
                raise ValidationError("global descriptor must be unit norm", iid, "global_desc")
        for name in ("semantic", "visual"):
            r = getattr(self, name)
            if r is not None and (r.width != self.width or r.height != self.height):
                raise ValidationError(
                    f"raster is {r.width}x{r.height}, image is {self.width}x{self.height}", iid, name
                )

    @property
    def dims(self) -> tuple[int, int]:
        return (self.width, self.height)

    def with_features(self, features: Features) -> "ImageRecord":
        return replace(self, features=features)

    def __eq__(self, other):
        if not isinstance(other, ImageRecord):
            return NotImplemented
        if self.global_desc is None or other.global_desc is None:
            gd = self.global_desc is None and other.global_desc is None
        else:
            gd = np.array_equal(self.global_desc, other.global_desc)
        return (
            self.id == other.id
            and self.kind == other.kind
            and self.pose == other.pose
            and self.width == other.width
            and self.height == other.height
            and self.features == other.features
            and gd
            and self.semantic == other.semantic
            and self.visual == other.visual
        )


FORMAT_VERSION = 1


@dataclass(eq=False)
class MapBundle:
    images: dict[str, ImageRecord]
    descriptor_len: int = DEFAULT_DESCRIPTOR_LEN
    created: str = ""
    format_version: int = FORMAT_VERSION

    def validate(self) -> None:
        if int(self.descriptor_len) <= 0:
            raise ValidationError("descriptor_len must be positive")
        for key, img in self.images.items():
            if key != img.id:
                raise ValidationError(f"bundle key {key!r} does not match record id", img.id, "id")
            img.validate(self.descriptor_len)

    def ids(self, kind: str | None = None) -> list[str]:
        return sorted(i for i, im in self.images.items() if kind is None or im.kind == kind)

    def of_kind(self, kind: str) -> list[ImageRecord]:
        return [self.images[i] for i in self.ids(kind)]

    def __getitem__(self, image_id: str) -> ImageRecord:
        return self.images[image_id]

    def __len__(self) -> int:
        return len(self.images)

    def __eq__(self, other):
        if not isinstance(other, MapBundle):
            return NotImplemented
        return (
            self.descriptor_len == other.descriptor_len
            and self.created == other.created
            and self.format_version == other.format_version
            and sorted(self.images) == sorted(other.images)
            and all(self.images[k] == other.images[k] for k in self.images)
        )
