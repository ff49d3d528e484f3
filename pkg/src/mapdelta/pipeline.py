"""Stage orchestration shared by the CLI and the end-to-end evaluator."""

from __future__ import annotations

import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .aggregate import MasterMask, build_master, tag_changed_features
from .alignment import AlignmentResult, align_pair
from .change import detect_change
from .config import PipelineConfig
from .mapupdate import apply_tags, remove_changed
from .model import ChangeMask, MapBundle
from .pairing import PairCandidate, select_pairs
from .propagate import find_master_match, is_significantly_changed, propagate_change


class EventLog:
    """Line-delimited JSON events; silent when ``stream`` is None."""

    def __init__(self, stream=None, clock=time.perf_counter):
        self.stream = stream
        self.clock = clock

    def emit(self, stage: str, **fields) -> None:
        if self.stream is None:
            return
        rec = {"stage": stage, **fields}
        self.stream.write(json.dumps(rec, sort_keys=True, default=_jsonable) + "\n")
        self.stream.flush()

    def timed(self, stage: str):
        return _Timer(self, stage)


class _Timer:
    def __init__(self, log: EventLog, stage: str):
        self.log, self.stage, self.counts = log, stage, {}

    def __enter__(self):
        self.t0 = self.log.clock()
        return self

    def __exit__(self, *exc):
        self.log.emit(self.stage, seconds=round(self.log.clock() - self.t0, 6), **self.counts)
        return False


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def stderr_log() -> EventLog:
    return EventLog(sys.stderr)


def _fan_out(fn, items, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def mask_name(query_id: str, map_id: str, side: str) -> str:
    return f"{query_id}__{map_id}.{side}"


@dataclass
class TagSet:
    """Changed-feature indices per image, split by how they were found."""

    direct: dict[str, set[int]] = field(default_factory=dict)
    propagated: dict[str, set[int]] = field(default_factory=dict)
    source: dict[str, str] = field(default_factory=dict)  # propagated image -> master id

    def changed(self) -> dict[str, set[int]]:
        out: dict[str, set[int]] = {}
        for part in (self.direct, self.propagated):
            for iid, idx in part.items():
                out.setdefault(iid, set()).update(idx)
        return out

    def n_tagged(self) -> int:
        return sum(len(v) for v in self.changed().values())

    def to_json(self, significant: dict[str, bool] | None = None) -> dict:
        doc = {}
        for iid in sorted(set(self.direct) | set(self.propagated)):
            entry = {
                "direct": sorted(self.direct.get(iid, ())),
                "propagated": sorted(self.propagated.get(iid, ())),
            }
            if iid in self.source:
                entry["master"] = self.source[iid]
            if significant is not None:
                entry["significant"] = bool(significant.get(iid, False))
            doc[iid] = entry
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TagSet":
        ts = cls()
        for iid, entry in doc.items():
            if isinstance(entry, list):  # bare index list
                ts.direct[iid] = {int(i) for i in entry}
                continue
            if entry.get("direct"):
                ts.direct[iid] = {int(i) for i in entry["direct"]}
            if entry.get("propagated"):
                ts.propagated[iid] = {int(i) for i in entry["propagated"]}
            if "master" in entry:
                ts.source[iid] = entry["master"]
        return ts


def run_pair_select(bundle: MapBundle, cfg: PipelineConfig, log: EventLog | None = None) -> list[PairCandidate]:
    log = log or EventLog()
    with log.timed("pair-select") as t:
        pairs = select_pairs(bundle.of_kind("query"), bundle.of_kind("map"), cfg.max_dist, cfg.max_ang)
        t.counts["n_pairs"] = len(pairs)
    return pairs


def run_align(
    bundle: MapBundle, pairs: list[PairCandidate], cfg: PipelineConfig, log: EventLog | None = None
) -> list[AlignmentResult]:
    log = log or EventLog()
    acfg = cfg.align()

    def one(p: PairCandidate) -> AlignmentResult:
        t0 = log.clock()
        r = align_pair(bundle[p.query_id], bundle[p.map_id], acfg, p)
        log.emit(
            "align",
            pair=[p.query_id, p.map_id],
            accepted=r.accepted,
            dof=None if r.chosen is None else r.chosen.dof,
            failed_stage=r.failed_stage,
            counts=r.stage_counts,
            seconds=round(log.clock() - t0, 6),
        )
        return r

    return _fan_out(one, pairs, cfg.workers)


def run_detect(
    bundle: MapBundle, alignments: list[AlignmentResult], cfg: PipelineConfig, log: EventLog | None = None
) -> dict[tuple[str, str], tuple[ChangeMask, ChangeMask]]:
    """Map-side and query-side masks for every accepted alignment."""
    log = log or EventLog()
    params, policy = cfg.change(), cfg.policy()
    accepted = [a for a in alignments if a.accepted]

    def one(a: AlignmentResult):
        t0 = log.clock()
        m, q = detect_change(a, bundle, params, policy)
        log.emit(
            "detect",
            pair=[a.pair.query_id, a.pair.map_id],
            map_px=int(m.bits.sum()),
            query_px=int(q.bits.sum()),
            seconds=round(log.clock() - t0, 6),
        )
        return m, q

    results = _fan_out(one, accepted, cfg.workers)
    return {(a.pair.query_id, a.pair.map_id): r for a, r in zip(accepted, results)}


def group_map_masks(masks: dict[tuple[str, str], tuple[ChangeMask, ChangeMask]]) -> dict[str, list[ChangeMask]]:
    by_map: dict[str, list[ChangeMask]] = {}
    for (q, m) in sorted(masks):
        by_map.setdefault(m, []).append(masks[(q, m)][0])
    return by_map


def run_aggregate(
    by_map: dict[str, list[ChangeMask]], cfg: PipelineConfig, log: EventLog | None = None
) -> dict[str, MasterMask]:
    log = log or EventLog()
    masters = {}
    for map_id in sorted(by_map):
        mm = build_master(map_id, by_map[map_id], cfg.min_support, cfg.vote_threshold)
        log.emit("aggregate", map_id=map_id, support=len(by_map[map_id]), master=mm is not None)
        if mm is not None:
            masters[map_id] = mm
    return masters


def run_propagate(
    bundle: MapBundle, masters: dict[str, MasterMask], cfg: PipelineConfig, log: EventLog | None = None
) -> TagSet:
    """Direct tags from master masks, then proximity tags on map images without a master."""
    log = log or EventLog()
    params = cfg.propagation()
    tags = TagSet()
    master_points = {}
    for map_id in sorted(masters):
        img = bundle[map_id]
        idx = tag_changed_features(masters[map_id], img)
        tags.direct[map_id] = idx
        sel = np.fromiter(sorted(idx), dtype=np.int64, count=len(idx))
        master_points[map_id] = img.features.world[sel]
    candidates = [(masters[m], bundle[m]) for m in sorted(masters)]
    targets = [iid for iid in bundle.ids("map") if iid not in masters]

    def one(iid: str):
        if not candidates:
            return iid, None, set()
        hit = find_master_match(bundle[iid], candidates, params)
        if hit is None:
            return iid, None, set()
        src = hit[0].map_id
        return iid, src, propagate_change(master_points[src], bundle[iid], params.search_radius_m)

    for iid, src, idx in _fan_out(one, targets, cfg.workers):
        if src is None:
            continue
        tags.source[iid] = src
        if idx:
            tags.propagated[iid] = idx
        log.emit("propagate", image=iid, master=src, n_tagged=len(idx))
    return tags


def significance(bundle: MapBundle, tags: TagSet, cfg: PipelineConfig) -> dict[str, bool]:
    tagged = apply_tags(bundle, tags.changed())
    return {iid: is_significantly_changed(tagged[iid], cfg.significant_change_frac) for iid in tagged.ids("map")}


def run_update(bundle: MapBundle, tags: TagSet) -> MapBundle:
    changed = {iid: idx for iid, idx in tags.changed().items() if idx}
    return remove_changed(bundle, changed)


@dataclass
class PipelineRun:
    pairs: list[PairCandidate]
    alignments: list[AlignmentResult]
    masks: dict[tuple[str, str], tuple[ChangeMask, ChangeMask]]
    masters: dict[str, MasterMask]
    tags: TagSet
    significant: dict[str, bool]
    updated: MapBundle
    seconds: dict[str, float]


def run_all(bundle: MapBundle, cfg: PipelineConfig, log: EventLog | None = None) -> PipelineRun:
    log = log or EventLog()
    clock = log.clock
    secs = {}
    t = clock()
    pairs = run_pair_select(bundle, cfg, log)
    secs["pair-select"] = clock() - t
    t = clock()
    alignments = run_align(bundle, pairs, cfg, log)
    secs["align"] = clock() - t
    t = clock()
    masks = run_detect(bundle, alignments, cfg, log)
    secs["detect"] = clock() - t
    t = clock()
    masters = run_aggregate(group_map_masks(masks), cfg, log)
    secs["aggregate"] = clock() - t
    t = clock()
    tags = run_propagate(bundle, masters, cfg, log)
    sig = significance(bundle, tags, cfg)
    secs["propagate"] = clock() - t
    t = clock()
    updated = run_update(bundle, tags)
    secs["update"] = clock() - t
    return PipelineRun(pairs, alignments, masks, masters, tags, sig, updated, secs)
