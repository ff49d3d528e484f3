"""Pipeline configuration: one flat JSON document holding every threshold."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .aggregate import DEFAULT_MIN_SUPPORT, DEFAULT_VOTE_THRESHOLD
from .alignment import AlignConfig
from .change import ChangeParams
from .preprocess import SemanticPolicy
from .propagate import PropagationParams

ENV_PREFIX = "MAPDELTA_"

# Label ids of the synthetic scheme: 2 ground, 3 sky, 4 plant, 5 human.
DEFAULT_EXEMPT = (2, 3, 4, 5)


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"config field {field_name!r}: {message}")


@dataclass
class PipelineConfig:
    # pair selection
    max_dist: float = 1.0
    max_ang: float = 0.2
    # alignment
    lowe_ratio: float = 0.8
    min_inliers: int = 80
    inlier_px: float = 3.0
    epipolar_px: float = 3.0
    ransac_confidence: float = 0.999
    ransac_max_iters: int = 2000
    # preprocess / change
    exempt_class_ids: list[int] = field(default_factory=lambda: list(DEFAULT_EXEMPT))
    min_feature_dist: float = 3.0
    visual_mult: float = 1.5
    geom_radius_px: float = 50.0
    blob_bad_ratio: float = 0.5
    min_blob_area: int = 200
    max_hole_area: int = 100
    # aggregation
    min_support: int = DEFAULT_MIN_SUPPORT
    vote_threshold: float = DEFAULT_VOTE_THRESHOLD
    # propagation
    min_global_corr: float = 0.25
    max_fov_sep: float = 0.4
    search_radius: float = 1.0
    significant_change_frac: float = 0.05
    # 3D registration
    reg_inlier_m: float = 0.2
    reg_max_iters: int = 5000
    icp_max_iters: int = 50
    icp_tol: float = 1e-6
    # run
    seed: int = 0
    workers: int = 1

    _POSITIVE = (
        "max_dist", "max_ang", "lowe_ratio", "inlier_px", "epipolar_px", "ransac_max_iters",
        "min_feature_dist", "visual_mult", "geom_radius_px", "blob_bad_ratio", "min_blob_area",
        "max_hole_area", "vote_threshold", "min_global_corr", "max_fov_sep", "search_radius",
        "significant_change_frac", "reg_inlier_m", "reg_max_iters", "icp_max_iters", "icp_tol", "workers",
    )
    _UNIT = ("blob_bad_ratio", "vote_threshold", "lowe_ratio", "ransac_confidence")
    _OPEN_UNIT = ("min_global_corr", "significant_change_frac", "ransac_confidence")

    def validate(self) -> "PipelineConfig":
        for name in self._POSITIVE:
            if not getattr(self, name) > 0:
                raise ConfigError(name, f"must be positive, got {getattr(self, name)!r}")
        for name in self._UNIT:
            if not 0 < getattr(self, name) <= 1:
                raise ConfigError(name, "must lie in (0, 1]")
        for name in self._OPEN_UNIT:
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(name, "must lie in (0, 1)")
        if self.min_inliers < 0:
            raise ConfigError("min_inliers", "must be non-negative")
        if self.min_support < 1:
            raise ConfigError("min_support", "must be at least 1")
        if self.max_ang > 3.141592653589793:
            raise ConfigError("max_ang", "must not exceed pi")
        for i in self.exempt_class_ids:
            if not 0 <= int(i) <= 0xFFFF:
                raise ConfigError("exempt_class_ids", f"id {i} outside the 16-bit range")
        return self

    # -- derived parameter objects --

    def align(self) -> AlignConfig:
        return AlignConfig(
            lowe_ratio=self.lowe_ratio,
            inlier_px=self.inlier_px,
            epipolar_px=self.epipolar_px,
            confidence=self.ransac_confidence,
            max_iters=self.ransac_max_iters,
            min_inliers=self.min_inliers,
            seed=self.seed,
        )

    def change(self) -> ChangeParams:
        return ChangeParams(
            visual_mult=self.visual_mult,
            geom_radius_px=self.geom_radius_px,
            blob_bad_ratio=self.blob_bad_ratio,
            min_blob_area_px=self.min_blob_area,
            max_hole_area_px=self.max_hole_area,
            min_feature_dist_m=self.min_feature_dist,
        )

    def policy(self) -> SemanticPolicy:
        return SemanticPolicy(frozenset(self.exempt_class_ids))

    def propagation(self) -> PropagationParams:
        return PropagationParams(
            min_global_corr=self.min_global_corr,
            max_fov_sep_rad=self.max_fov_sep,
            search_radius_m=self.search_radius,
            significant_change_frac=self.significant_change_frac,
        )

    # -- serialization --

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in doc.items():
            if key not in known:
                raise ConfigError(key, "unknown field")
            kwargs[key] = _coerce(key, known[key], value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path=None, env: dict | None = None) -> "PipelineConfig":
        doc = {}
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
            if not isinstance(doc, dict):
                raise ConfigError("<root>", "config must be a JSON object")
        cfg = cls.from_dict(doc)
        cfg.apply_env(os.environ if env is None else env)
        return cfg.validate()

    def apply_env(self, env) -> None:
        for f in fields(self):
            key = ENV_PREFIX + f.name.upper()
            if key in env:
                raw = env[key]
                try:
                    value = json.loads(raw)
                except json.JSONDecodeError:
                    value = raw
                setattr(self, f.name, _coerce(f.name, f, value))


def _coerce(name, f, value):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind == "int":
            if isinstance(value, bool) or float(value) != int(value):
                raise ValueError
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if kind.startswith("list"):
            if isinstance(value, (int, float)):
                value = [value]
            return [int(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(name, f"cannot interpret {value!r} as {kind}") from None
    return value
