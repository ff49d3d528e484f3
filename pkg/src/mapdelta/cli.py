"""Command-line entry point: ``mapdelta <subcommand> ...``.

Exit status: 0 success, 1 pipeline-level rejection, 2 usage or configuration error.
Progress is logged as JSON lines on stderr; output files depend only on inputs,
configuration and seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .aggregate import MasterMask
from .alignment import AlignmentResult
from .bundle import (
    BundleError,
    read_bundle,
    read_mask,
    read_pgm,
    write_bundle,
    write_mask,
    write_pgm,
)
from .config import ConfigError, PipelineConfig
from .mapupdate import augment_map, correspondence_arrays, load_correspondences
from .metrics import evaluate_pairs
from .model import ChangeMask, ValidationError
from .pairing import PairCandidate
from .pipeline import (
    EventLog,
    TagSet,
    mask_name,
    run_aggregate,
    run_align,
    run_detect,
    run_pair_select,
    run_propagate,
    run_update,
    significance,
)

EXIT_OK, EXIT_REJECTED, EXIT_USAGE = 0, 1, 2
MASK_INDEX = "index.json"
MASTER_INDEX = "masters.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_json(obj, path) -> None:
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _clear_dir(path: Path, pattern: str) -> None:
    path.mkdir(parents=True, exist_ok=True)
    for p in path.glob(pattern):
        if p.is_file():
            p.unlink()


# -- subcommands ---------------------------------------------------------------


def cmd_config_init(args, cfg, log) -> int:
    doc = cfg.to_json()
    if args.out:
        _write_json(doc, args.out)
    else:
        sys.stdout.write(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_pair_select(args, cfg, log) -> int:
    bundle = read_bundle(args.bundle)
    pairs = run_pair_select(bundle, cfg, log)
    _write_json([p.to_json() for p in pairs], args.out)
    return EXIT_OK


def cmd_align(args, cfg, log) -> int:
    bundle = read_bundle(args.bundle)
    pairs = [PairCandidate.from_json(d) for d in _read_json(args.pairs)]
    results = run_align(bundle, pairs, cfg, log)
    _write_json([r.to_json() for r in results], args.out)
    return EXIT_OK


def cmd_detect(args, cfg, log) -> int:
    bundle = read_bundle(args.bundle)
    alignments = [AlignmentResult.from_json(d) for d in _read_json(args.alignments)]
    masks = run_detect(bundle, alignments, cfg, log)
    out = Path(args.out)
    _clear_dir(out, "*.pgm")
    index = []
    for (q, m), (map_mask, query_mask) in sorted(masks.items()):
        entry = {"query_id": q, "map_id": m}
        for side, mask in (("map", map_mask), ("query", query_mask)):
            name = mask_name(q, m, side) + ".pgm"
            write_mask(out / name, mask)
            entry[side] = name
        index.append(entry)
    _write_json(index, out / MASK_INDEX)
    return EXIT_OK


def _load_map_masks(masks_dir: Path) -> dict[str, list[ChangeMask]]:
    by_map: dict[str, list[ChangeMask]] = {}
    index_path = masks_dir / MASK_INDEX
    if index_path.exists():
        entries = [(e["map_id"], e["map"]) for e in _read_json(index_path)]
    else:
        entries = []
        for p in sorted(masks_dir.glob("*__*.map.pgm")):
            entries.append((p.name[: -len(".map.pgm")].split("__", 1)[1], p.name))
    for map_id, name in sorted(entries, key=lambda e: e[1]):
        by_map.setdefault(map_id, []).append(read_mask(masks_dir / name, map_id))
    return by_map


def cmd_aggregate(args, cfg, log) -> int:
    bundle = read_bundle(args.bundle)
    by_map = _load_map_masks(Path(args.masks))
    for map_id in by_map:
        if map_id not in bundle.images:
            raise ValidationError("mask refers to an image missing from the bundle", map_id, "map_id")
    masters = run_aggregate(by_map, cfg, log)
    out = Path(args.out)
    _clear_dir(out, "*.pgm")
    index = {}
    for map_id, mm in sorted(masters.items()):
        write_pgm(out / f"{map_id}.avg.pgm", np.round(mm.avg * 65535).astype(np.uint16), 65535)
        write_mask(out / f"{map_id}.mask.pgm", mm.binary)
        index[map_id] = {"support": mm.support, "avg": f"{map_id}.avg.pgm", "mask": f"{map_id}.mask.pgm"}
    _write_json(
        {"min_support": cfg.min_support, "vote_threshold": cfg.vote_threshold, "masters": index},
        out / MASTER_INDEX,
    )
    return EXIT_OK


def load_masters(path) -> dict[str, MasterMask]:
    root = Path(path)
    doc = _read_json(root / MASTER_INDEX)
    masters = {}
    for map_id, entry in doc["masters"].items():
        avg = read_pgm(root / entry["avg"]).astype(float) / 65535.0
        binary = read_mask(root / entry["mask"], map_id)
        if binary.shape != avg.shape:
            raise ValidationError("master raster shapes differ", map_id, "mask")
        masters[map_id] = MasterMask(map_id, int(entry["support"]), avg, binary)
    return masters


def cmd_propagate(args, cfg, log) -> int:
    bundle = read_bundle(args.bundle)
    masters = load_masters(args.masters)
    for map_id in masters:
        if map_id not in bundle.images:
            raise ValidationError("master refers to an image missing from the bundle", map_id, "map_id")
    tags = run_propagate(bundle, masters, cfg, log)
    _write_json(tags.to_json(significance(bundle, tags, cfg)), args.out)
    return EXIT_OK


def cmd_update(args, cfg, log) -> int:
    bundle = read_bundle(args.bundle)
    tags = TagSet.from_json(_read_json(args.tags))
    updated = run_update(bundle, tags)
    write_bundle(updated, args.out)
    log.emit("update", removed=tags.n_tagged())
    return EXIT_OK


def cmd_augment(args, cfg, log) -> int:
    old = read_bundle(args.old)
    section = read_bundle(args.section)
    a, b = correspondence_arrays(load_correspondences(_read_json(args.corr)))
    merged, report = augment_map(
        old, section, a, b, cfg.reg_inlier_m, cfg.ransac_confidence, cfg.reg_max_iters,
        cfg.icp_max_iters, cfg.icp_tol, seed=cfg.seed,
    )
    if args.report:
        _write_json(report.to_json(), args.report)
    log.emit("augment", ok=report.ok, reason=report.reason, n_inliers=report.ransac_inliers)
    if not report.ok:
        return EXIT_REJECTED
    write_bundle(merged, args.out)
    return EXIT_OK


def cmd_eval(args, cfg, log) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred = {p.name: p for p in pred_dir.glob("*.pgm")}
    gt = {p.name: p for p in gt_dir.glob("*.pgm")}
    common = sorted(set(pred) & set(gt))
    pairs = {name[: -len(".pgm")]: (read_mask(pred[name]).bits, read_mask(gt[name]).bits) for name in common}
    report = evaluate_pairs(pairs, macro=args.macro)
    report["missing_pred"] = sorted(n[: -len(".pgm")] for n in set(gt) - set(pred))
    _write_json(report, args.out)
    return EXIT_OK


def _load_spec(path):
    from .synth import SceneSpec, acceptance_spec

    return SceneSpec.load(path) if path else acceptance_spec()


def cmd_synth(args, cfg, log) -> int:
    from .synth import generate_scene, pair_truth_mask, true_pairs

    spec = _load_spec(args.spec)
    scene = generate_scene(spec)
    write_bundle(scene.bundle, args.out)
    if args.truth:
        root = Path(args.truth)
        _clear_dir(root / "images", "*.pgm")
        _clear_dir(root / "pairs", "*.pgm")
        for iid, bits in sorted(scene.truth.change_masks.items()):
            write_mask(root / "images" / f"{iid}.pgm", bits)
        pairs = true_pairs(scene, cfg.max_dist, cfg.max_ang)
        for q, m in pairs:
            write_mask(root / "pairs" / f"{mask_name(q, m, 'map')}.pgm", pair_truth_mask(scene, q, m))
        _write_json(
            {
                "spec": spec.to_json(),
                "changed_features": {k: sorted(v) for k, v in sorted(scene.truth.changed_features.items())},
                "true_pairs": [list(p) for p in pairs],
                "poses": {
                    iid: {
                        "position": cam.pose.position.tolist(),
                        "orientation": cam.pose.orientation.tolist(),
                    }
                    for iid, cam in sorted(scene.truth.cameras.items())
                },
            },
            root / "truth.json",
        )
    log.emit("synth", n_images=len(scene.bundle), seed=spec.seed)
    return EXIT_OK


def cmd_e2e(args, cfg, log) -> int:
    from .synth import evaluate_pipeline, generate_scene

    scene = generate_scene(_load_spec(args.spec))
    report = evaluate_pipeline(scene, cfg, log)
    log.emit("e2e", seconds=report.pop("seconds"))
    report["config"] = cfg.to_json()
    _write_json(report, args.report)
    return EXIT_REJECTED if report["errors"] else EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        g = _Parser(add_help=False)
        g.add_argument("--config", default=default, help="JSON config file (defaults for every threshold)")
        g.add_argument("--seed", type=int, default=default, help="override the config seed")
        g.add_argument("--workers", type=int, default=default, help="parallel workers for per-pair and per-image work")
        g.add_argument("--quiet", action="store_true", default=default or False, help="suppress progress on stderr")
        return g

    # Sub-level copies must not overwrite values given before the subcommand.
    common = global_flags(argparse.SUPPRESS)
    p = _Parser(prog="mapdelta", description="Map change detection and maintenance.", parents=[global_flags(None)])
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(fn=fn)
        return sp

    sp = add("config", cmd_config_init, "materialize the default configuration")
    sp.add_argument("action", choices=["init"])
    sp.add_argument("--out", help="write here instead of stdout")

    sp = add("pair-select", cmd_pair_select, "choose query/map pairs by pose")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--out", required=True)

    sp = add("align", cmd_align, "estimate a homography per pair")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--min-inliers", type=int, dest="min_inliers")
    sp.add_argument("--out", required=True)

    sp = add("detect", cmd_detect, "per-pair change masks")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--alignments", required=True)
    sp.add_argument("--out", required=True, help="mask directory")

    sp = add("aggregate", cmd_aggregate, "master masks per map image")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--masks", required=True)
    sp.add_argument("--min-support", type=int, dest="min_support")
    sp.add_argument("--threshold", type=float, dest="vote_threshold")
    sp.add_argument("--out", required=True, help="master directory")

    sp = add("propagate", cmd_propagate, "tag changed features, directly and by proximity")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--masters", required=True)
    sp.add_argument("--out", required=True, help="tags.json")

    sp = add("update", cmd_update, "remove tagged features from a bundle")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--tags", required=True)
    sp.add_argument("--out", required=True)

    sp = add("augment", cmd_augment, "register a new map section and merge it")
    sp.add_argument("--old", required=True)
    sp.add_argument("--section", required=True)
    sp.add_argument("--corr", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")

    sp = add("eval", cmd_eval, "score predicted masks against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--macro", action="store_true", help="average per-pair scores instead of summing counts")

    sp = add("synth", cmd_synth, "generate a synthetic bundle with ground truth")
    sp.add_argument("--spec")
    sp.add_argument("--out", required=True)
    sp.add_argument("--truth", help="directory for ground-truth masks and truth.json")

    sp = add("e2e", cmd_e2e, "run every stage on a synthetic scene and score it")
    sp.add_argument("--spec")
    sp.add_argument("--report", required=True)
    return p


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(getattr(args, "config", None))
    for name in ("seed", "workers", "min_inliers", "min_support", "vote_threshold"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg.validate()


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"mapdelta: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    log = EventLog(None if args.quiet else sys.stderr)
    try:
        return args.fn(args, cfg, log)
    except (BundleError, ValidationError, FileNotFoundError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"mapdelta {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.emit("error", command=args.command, error=str(exc))
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
