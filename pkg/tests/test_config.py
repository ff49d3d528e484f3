import json

import pytest

from mapdelta.config import ConfigError, PipelineConfig


def test_defaults():
    c = PipelineConfig().validate()
    assert (c.max_dist, c.max_ang, c.lowe_ratio, c.min_inliers, c.inlier_px) == (1.0, 0.2, 0.8, 80, 3.0)
    assert (c.visual_mult, c.geom_radius_px, c.blob_bad_ratio, c.min_blob_area, c.max_hole_area) == (1.5, 50.0, 0.5, 200, 100)
    assert (c.min_feature_dist, c.min_support, c.vote_threshold) == (3.0, 20, 0.5)
    assert (c.min_global_corr, c.max_fov_sep, c.search_radius, c.significant_change_frac) == (0.25, 0.4, 1.0, 0.05)
    assert c.workers == 1


def test_json_round_trip(tmp_path):
    c = PipelineConfig(seed=4, exempt_class_ids=[3])
    p = tmp_path / "c.json"
    p.write_text(json.dumps(c.to_json()))
    assert PipelineConfig.load(p, env={}) == c


@pytest.mark.parametrize(
    "doc,field",
    [
        ({"search_radius": -1}, "search_radius"),
        ({"vote_threshold": 1.5}, "vote_threshold"),
        ({"min_global_corr": 1.0}, "min_global_corr"),
        ({"min_support": 0}, "min_support"),
        ({"min_inliers": 2.5}, "min_inliers"),
        ({"no_such_key": 1}, "no_such_key"),
        ({"exempt_class_ids": [70000]}, "exempt_class_ids"),
    ],
)
def test_validation_names_field(tmp_path, doc, field):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ConfigError) as e:
        PipelineConfig.load(p, env={})
    assert e.value.field == field


def test_env_overrides_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"min_support": 5}))
    c = PipelineConfig.load(p, env={"MAPDELTA_MIN_SUPPORT": "9", "MAPDELTA_EXEMPT_CLASS_IDS": "[2]"})
    assert c.min_support == 9 and c.exempt_class_ids == [2]


def test_derived_parameter_objects():
    c = PipelineConfig(geom_radius_px=20, search_radius=2.0, min_inliers=10)
    assert c.change().geom_radius_px == 20
    assert c.propagation().search_radius_m == 2.0
    assert c.align().min_inliers == 10
    assert c.policy().exempt_class_ids == frozenset({2, 3, 4, 5})
