import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from mapdelta.bundle import hash_tree, read_bundle
from mapdelta.cli import run
from mapdelta.config import PipelineConfig
from mapdelta.model import CameraPose, Features, ImageRecord, LabelRaster, MapBundle
from mapdelta.synth import SceneSpec, acceptance_spec, evaluate_pipeline, generate_scene

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# Ten queries cannot give a map image twenty pairs; the scene-level runs lower
# the support floor so masters and propagation are exercised at all.
SCENE_MIN_SUPPORT = 2


def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def make_image(iid="img0", kind="map", n=20, w=64, h=48, D=8, seed=0, pose=None, with_rasters=True, gdesc=True):
    rng = np.random.default_rng(seed)
    px = rng.uniform([0, 0], [w, h], (n, 2))
    desc = rng.normal(size=(n, D)).astype(np.float32)
    world = rng.normal(size=(n, 3)) * 5 + [0, 10, 0]
    has_world = rng.random(n) < 0.8
    feats = Features.from_arrays(px, desc, world, has_world)
    g = None
    if gdesc:
        g = rng.normal(size=16)
        g /= np.linalg.norm(g)
    return ImageRecord(
        id=iid,
        kind=kind,
        pose=pose or CameraPose(rng.normal(size=3), random_rotation(rng)),
        width=w,
        height=h,
        features=feats,
        global_desc=g,
        semantic=LabelRaster(rng.integers(1, 4, (h, w))) if with_rasters else None,
        visual=LabelRaster(rng.integers(0, 300, (h, w))) if with_rasters else None,
    )


def make_bundle(n_map=3, n_query=2, D=8, seed=0) -> MapBundle:
    images = {}
    for i in range(n_map):
        images[f"m{i}"] = make_image(f"m{i}", "map", D=D, seed=seed * 100 + i)
    for i in range(n_query):
        images[f"q{i}"] = make_image(f"q{i}", "query", D=D, seed=seed * 100 + 50 + i)
    return MapBundle(images=images, descriptor_len=D, created="test")


@pytest.fixture(scope="session")
def scene():
    return generate_scene(acceptance_spec())


@pytest.fixture(scope="session")
def scene_config():
    return PipelineConfig(min_support=SCENE_MIN_SUPPORT)


@pytest.fixture(scope="session")
def scene_report(scene, scene_config):
    return evaluate_pipeline(scene, scene_config)


def random_posed_images(rng, n, kind, spread=3.0, tilt=0.15, base=None):
    """Images scattered in a cube, orientations perturbed by about ``tilt`` from ``base``."""
    base = np.eye(3) if base is None else base
    out = []
    for i in range(n):
        w = rng.normal(size=3) * tilt
        K = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
        a = np.linalg.norm(w)
        dR = np.eye(3) + (np.sin(a) / a) * K + ((1 - np.cos(a)) / a**2) * K @ K
        pose = CameraPose(rng.uniform(-spread, spread, 3), dR @ base)
        out.append(ImageRecord(f"{kind[0]}{i:03d}", kind, pose, 8, 8, Features.empty(4)))
    return out


CLI_SPEC = SceneSpec(seed=5, n_map_images=3, n_query_images=3, map_x_range=(-0.6, 0.6), query_x_range=(-0.6, 0.6))


def cli_digest(path: Path) -> str:
    return hash_tree(path) if path.is_dir() else hashlib.sha256(path.read_bytes()).hexdigest()


def cli_chain(root: Path) -> dict[str, Path]:
    """Run every subcommand once under ``root``; returns output paths by step."""
    root.mkdir()
    spec = root / "spec.json"
    spec.write_text(json.dumps(CLI_SPEC.to_json()))
    out = {
        "config": root / "cfg.json",
        "synth": root / "bundle",
        "truth": root / "truth",
        "pair-select": root / "pairs.json",
        "align": root / "align.json",
        "detect": root / "masks",
        "aggregate": root / "masters",
        "propagate": root / "tags.json",
        "update": root / "updated",
        "eval": root / "eval.json",
        "augment": root / "merged",
        "e2e": root / "report.json",
    }
    g = ["--quiet", "--seed", "3"]
    steps = [
        ["config", "init", "--out", out["config"]],
        ["synth", "--spec", spec, "--out", out["synth"], "--truth", out["truth"]],
        ["pair-select", "--bundle", out["synth"], "--out", out["pair-select"]],
        ["align", "--bundle", out["synth"], "--pairs", out["pair-select"], "--out", out["align"]],
        ["detect", "--bundle", out["synth"], "--alignments", out["align"], "--out", out["detect"]],
        ["aggregate", "--bundle", out["synth"], "--masks", out["detect"], "--min-support", "1", "--out", out["aggregate"]],
        ["propagate", "--bundle", out["synth"], "--masters", out["aggregate"], "--out", out["propagate"]],
        ["update", "--bundle", out["synth"], "--tags", out["propagate"], "--out", out["update"]],
        ["eval", "--pred", out["detect"], "--gt", out["truth"] / "pairs", "--out", out["eval"]],
    ]
    for argv in steps:
        assert run(g + [str(a) for a in argv]) == 0, argv
    b = read_bundle(out["synth"])
    pts = [p.tolist() for p in b["m000"].features.world[b["m000"].features.has_world][:40]]
    corr = root / "corr.json"
    corr.write_text(json.dumps({"a": pts, "b": pts}))
    assert run(g + ["augment", "--old", str(out["synth"]), "--section", str(out["update"]), "--corr", str(corr),
                    "--out", str(out["augment"]), "--report", str(root / "aug.json")]) == 0
    assert run(g + ["e2e", "--spec", str(spec), "--config", str(out["config"]), "--report", str(out["e2e"])]) == 0
    return out


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    """The full subcommand chain run twice in separate directories."""
    base = tmp_path_factory.mktemp("cli")
    return cli_chain(base / "a"), cli_chain(base / "b")


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
