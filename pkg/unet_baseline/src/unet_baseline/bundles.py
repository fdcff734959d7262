"""Reader/writer for the subject-bundle directory format shared with the
atlas pipeline: meta.json plus raw little-endian arrays (see that project's
README for the full schema). Only the pieces this package needs."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BUNDLE_VERSION = 1
CHANNELS = ("magnitude", "mean_dense", "peak_dense")


class BundleError(RuntimeError):
    pass


@dataclass(frozen=True)
class Subject:
    id: str
    channels: np.ndarray          # (3, H, W) float32: magnitude, mean, peak
    mask: np.ndarray | None       # (H, W) uint8 in {0, 1, 2}, or None
    normalized: bool


def read_subject(path) -> Subject:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise BundleError(f"{path}: bad or missing meta.json ({exc})") from exc
    if meta.get("version") != BUNDLE_VERSION:
        raise BundleError(f"{path}: unsupported bundle version {meta.get('version')!r}")
    w, h = int(meta["width"]), int(meta["height"])
    present = meta.get("channels", [])
    planes = []
    for name in CHANNELS:
        if name not in present:
            raise BundleError(f"{path}: channel {name!r} missing (need all 3 image channels)")
        raw = (path / f"{name}.f32").read_bytes()
        if len(raw) != 4 * w * h:
            raise BundleError(f"{path}/{name}.f32: wrong payload size")
        planes.append(np.frombuffer(raw, dtype="<f4").reshape(h, w))
    mask = None
    if "mask" in present:
        raw = (path / "mask.u8").read_bytes()
        if len(raw) != w * h:
            raise BundleError(f"{path}/mask.u8: wrong payload size")
        mask = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    return Subject(
        id=str(meta["id"]),
        channels=np.stack(planes).astype(np.float32),
        mask=mask,
        normalized=bool(meta.get("normalized", False)),
    )


def read_subject_dirs(root) -> list[Subject]:
    root = Path(root)
    out = []
    for child in sorted(root.iterdir()):
        if child.is_dir() and (child / "meta.json").exists():
            out.append(read_subject(child))
    if not out:
        raise BundleError(f"no subject bundles under {root}")
    return out


def write_mask_bundle(subject_id: str, mask: np.ndarray, out_dir) -> None:
    """Mask-only bundle the atlas pipeline's compare/evaluate commands read."""
    mask = np.asarray(mask, dtype=np.uint8)
    if mask.ndim != 2 or mask.max(initial=0) > 2:
        raise BundleError("mask must be 2-D with labels in {0, 1, 2}")
    h, w = mask.shape
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    data = mask.tobytes()
    (path / "mask.u8").write_bytes(data)
    meta = {
        "id": subject_id,
        "version": BUNDLE_VERSION,
        "width": w,
        "height": h,
        "channels": ["mask"],
        "cardiac_gate_count": 0,
        "normalized": False,
        "displacement_unit": "um",
        "crc32": {"mask": zlib.crc32(data)},
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
