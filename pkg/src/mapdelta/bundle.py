"""On-disk bundle format.

Layout::

    manifest.json          format_version, descriptor_len, created, images
    img/<id>.json          pose, kind, size, feature pixels / 3D points / tags
    img/<id>.desc          little-endian float32, n_features * descriptor_len
    img/<id>.sem.pgm       16-bit binary PGM semantic labels (optional)
    img/<id>.vis.pgm       16-bit binary PGM visual segment ids (optional)

Masks are stored separately as 8-bit binary PGM with values 0/255.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .model import (
    FORMAT_VERSION,
    CameraPose,
    ChangeMask,
    Features,
    ImageRecord,
    LabelRaster,
    MapBundle,
    ValidationError,
)

MANIFEST = "manifest.json"


class BundleError(ValueError):
    """Malformed or unreadable bundle directory."""


# -- PGM ---------------------------------------------------------------------


def write_pgm(path, arr: np.ndarray, maxval: int) -> None:
    arr = np.asarray(arr)
    h, w = arr.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    if maxval > 255:
        body = arr.astype(">u2").tobytes()
    else:
        body = arr.astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + body)


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise BundleError(f"{path}: not a binary PGM")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.find(b"\n", pos)
            if pos < 0:
                raise BundleError(f"{path}: truncated PGM header")
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise BundleError(f"{path}: truncated PGM header")
        fields.append(int(data[start:pos]))
    w, h, maxval = fields
    body = data[pos + 1 :]
    itemsize = 2 if maxval > 255 else 1
    if len(body) < w * h * itemsize:
        raise BundleError(f"{path}: truncated PGM payload")
    if itemsize == 2:
        return np.frombuffer(body, dtype=">u2", count=w * h).reshape(h, w).astype(np.uint16)
    return np.frombuffer(body, dtype=np.uint8, count=w * h).reshape(h, w).copy()


def write_mask(path, mask: ChangeMask | np.ndarray) -> None:
    bits = mask.bits if isinstance(mask, ChangeMask) else np.asarray(mask, dtype=bool)
    write_pgm(path, np.where(bits, 255, 0).astype(np.uint8), 255)


def read_mask(path, image_id: str = "") -> ChangeMask:
    return ChangeMask(image_id, read_pgm(path) > 127)


# -- bundle ------------------------------------------------------------------


def _dump_json(obj, path) -> None:
    # repr-based float formatting round-trips float64 exactly.
    text = json.dumps(obj, indent=1, sort_keys=True, allow_nan=False)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")


def _image_doc(img: ImageRecord) -> dict:
    f = img.features
    world = [list(map(float, w)) if hw else None for w, hw in zip(f.world, f.has_world)]
    doc = {
        "id": img.id,
        "kind": img.kind,
        "width": int(img.width),
        "height": int(img.height),
        "pose": {
            "position": [float(v) for v in img.pose.position],
            "orientation": [[float(v) for v in row] for row in img.pose.orientation],
        },
        "n_features": len(f),
        "px": [[float(x), float(y)] for x, y in f.px],
        "world": world,
        "changed": [int(c) for c in f.changed],
        "global_desc": None if img.global_desc is None else [float(v) for v in img.global_desc],
        "semantic": img.semantic is not None,
        "visual": img.visual is not None,
    }
    return doc


def write_bundle(bundle: MapBundle, path) -> None:
    """Write ``bundle`` to directory ``path``; output bytes depend only on the bundle."""
    bundle.validate()
    root = Path(path)
    (root / "img").mkdir(parents=True, exist_ok=True)
    ids = bundle.ids()
    keep = {f"{iid}.{ext}" for iid in ids for ext in ("json", "desc", "sem.pgm", "vis.pgm")}
    for stale in (root / "img").iterdir():
        if stale.is_file() and stale.name not in keep:
            stale.unlink()
    for iid in ids:
        img = bundle.images[iid]
        _dump_json(_image_doc(img), root / "img" / f"{iid}.json")
        desc = np.ascontiguousarray(img.features.desc, dtype="<f4")
        (root / "img" / f"{iid}.desc").write_bytes(desc.tobytes())
        for name, suffix in (("semantic", "sem"), ("visual", "vis")):
            raster = getattr(img, name)
            target = root / "img" / f"{iid}.{suffix}.pgm"
            if raster is not None:
                write_pgm(target, raster.labels, 65535)
            elif target.exists():
                target.unlink()
    manifest = {
        "format_version": bundle.format_version,
        "descriptor_len": int(bundle.descriptor_len),
        "created": bundle.created,
        "images": ids,
    }
    _dump_json(manifest, root / MANIFEST)


def _read_image(root: Path, iid: str, descriptor_len: int) -> ImageRecord:
    doc_path = root / "img" / f"{iid}.json"
    if not doc_path.exists():
        raise BundleError(f"image {iid!r}: missing {doc_path.name}")
    doc = json.loads(doc_path.read_text(encoding="utf-8"))
    n = int(doc["n_features"])
    raw = (root / "img" / f"{iid}.desc").read_bytes()
    expected = n * descriptor_len * 4
    if len(raw) != expected:
        if n and len(raw) % (4 * n) == 0:
            raise ValidationError(
                f"descriptor payload holds {len(raw) // 4} floats, expected {n} x {descriptor_len}",
                iid,
                "features.descriptor",
            )
        raise BundleError(f"image {iid!r}: truncated descriptor payload ({len(raw)} of {expected} bytes)")
    desc = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(n, descriptor_len)
    world_doc = doc["world"]
    has_world = np.array([w is not None for w in world_doc], dtype=bool)
    world = np.array([w if w is not None else (0.0, 0.0, 0.0) for w in world_doc], dtype=float)
    feats = Features(
        px=np.array(doc["px"], dtype=float).reshape(n, 2),
        desc=desc,
        world=world.reshape(n, 3),
        has_world=has_world,
        changed=np.array(doc["changed"], dtype=np.int8),
    )
    rasters = {}
    for name, suffix in (("semantic", "sem"), ("visual", "vis")):
        p = root / "img" / f"{iid}.{suffix}.pgm"
        if doc.get(name):
            if not p.exists():
                raise BundleError(f"image {iid!r}: missing {p.name}")
            rasters[name] = LabelRaster(read_pgm(p))
    pose = CameraPose(doc["pose"]["position"], doc["pose"]["orientation"])
    gd = doc.get("global_desc")
    return ImageRecord(
        id=doc["id"],
        kind=doc["kind"],
        pose=pose,
        width=int(doc["width"]),
        height=int(doc["height"]),
        features=feats,
        global_desc=None if gd is None else np.array(gd, dtype=float),
        semantic=rasters.get("semantic"),
        visual=rasters.get("visual"),
    )


def read_bundle(path) -> MapBundle:
    """Load and fully validate the bundle stored in directory ``path``."""
    root = Path(path)
    mpath = root / MANIFEST
    if not mpath.exists():
        raise BundleError(f"{root}: missing {MANIFEST}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise BundleError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    dlen = int(manifest["descriptor_len"])
    images = {}
    for iid in manifest["images"]:
        img = _read_image(root, iid, dlen)
        if img.id != iid:
            raise ValidationError("record id does not match manifest entry", iid, "id")
        if iid in images:
            raise ValidationError("duplicate image id", iid, "id")
        images[iid] = img
    bundle = MapBundle(images=images, descriptor_len=dlen, created=manifest.get("created", ""))
    bundle.validate()
    return bundle


def hash_tree(path) -> str:
    """sha256 over relative paths and contents of every file under ``path``."""
    import hashlib

    h = hashlib.sha256()
    root = Path(path)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode())
            h.update(b"\0")
            h.update(p.read_bytes())
    return h.hexdigest()
