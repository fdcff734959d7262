"""Subject-bundle directory format and atlas-bank index.

One directory per subject:

* ``meta.json`` — UTF-8 header: id, version (=1), width, height, list of
  channels present, cardiac_gate_count, normalized flag, displacement unit,
  and a crc32 per raw array.
* ``magnitude.f32`` / ``mean_dense.f32`` / ``peak_dense.f32`` — little-endian
  IEEE-754 binary32, row-major (a row holds constant v).
* ``mask.u8`` — one byte per pixel in {0, 1, 2}.
* ``gates.f32`` — optional gate stack, cardiac_gate_count planes.
* ``truth_warp.f32`` — optional nodal displacement, two interleaved
  components, row-major over the (width+1) x (height+1) node lattice.

An atlas bank is a directory of subject bundles plus ``bank.json``.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumError,
    ConfigurationError,
    InputError,
    MalformedHeaderError,
    TruncatedPayloadError,
    VersionError,
)
from .imaging import GateStack, ImageGrid, LabelMask, ScalarImage, SubjectBundle
from .transforms import DisplacementField

__all__ = [
    "AtlasBank",
    "read_bundle",
    "write_bundle",
    "read_bank",
    "write_bank",
    "write_truth_warp",
    "read_truth_warp",
]

BUNDLE_VERSION = 1
_IMAGE_CHANNELS = ("magnitude", "mean_dense", "peak_dense")


@dataclass(frozen=True)
class AtlasBank:
    """Labeled subject bundles sharing one resolution, unique ids."""

    subjects: tuple[SubjectBundle, ...]

    def __post_init__(self):
        subs = tuple(self.subjects)
        if not subs:
            raise InputError("atlas bank must not be empty")
        ids = [s.id for s in subs]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("atlas bank ids must be unique")
        grid = subs[0].grid
        for s in subs:
            if s.grid != grid:
                raise ConfigurationError("atlas bank subjects must share one resolution")
            if s.mask is None:
                raise ConfigurationError(f"atlas subject {s.id!r} has no mask")
        object.__setattr__(self, "subjects", subs)

    @property
    def grid(self) -> ImageGrid:
        return self.subjects[0].grid

    def __len__(self) -> int:
        return len(self.subjects)

    def by_id(self, subject_id: str) -> SubjectBundle:
        for s in self.subjects:
            if s.id == subject_id:
                return s
        raise InputError(f"no subject {subject_id!r} in bank")


def _write_raw(path: Path, data: bytes) -> int:
    path.write_bytes(data)
    return zlib.crc32(data)


def write_bundle(bundle: SubjectBundle, path) -> None:
    """Write ``bundle`` as a subject directory (lossless, float32 arrays)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    h, w = bundle.grid.shape
    channels = []
    crcs = {}
    for name in _IMAGE_CHANNELS:
        img = getattr(bundle, name)
        if img is None:
            continue
        data = img.values.astype("<f4").tobytes()
        crcs[name] = _write_raw(path / f"{name}.f32", data)
        channels.append(name)
    if bundle.mask is not None:
        data = bundle.mask.labels.astype(np.uint8).tobytes()
        crcs["mask"] = _write_raw(path / "mask.u8", data)
        channels.append("mask")
    if bundle.gates is not None:
        arr = np.stack([g.values for g in bundle.gates.gates]).astype("<f4")
        crcs["gates"] = _write_raw(path / "gates.f32", arr.tobytes())
        channels.append("gates")
    meta = {
        "id": bundle.id,
        "version": BUNDLE_VERSION,
        "width": w,
        "height": h,
        "channels": channels,
        "cardiac_gate_count": int(bundle.cardiac_gate_count),
        "normalized": bool(bundle.normalized),
        "displacement_unit": bundle.displacement_unit,
        "crc32": crcs,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_raw(path: Path, name: str, expected_bytes: int, crc: int | None) -> bytes:
    fp = path / name
    if not fp.exists():
        raise TruncatedPayloadError(f"{fp} is missing")
    data = fp.read_bytes()
    if len(data) != expected_bytes:
        raise TruncatedPayloadError(f"{fp}: expected {expected_bytes} bytes, found {len(data)}")
    if crc is not None and zlib.crc32(data) != crc:
        raise ChecksumError(f"{fp}: crc32 mismatch")
    return data


def read_bundle(path) -> SubjectBundle:
    """Read a subject directory; raises distinct errors for a malformed
    header, truncated payload, checksum mismatch, or unknown version."""
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise MalformedHeaderError(f"{meta_path} is missing")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{meta_path}: {exc}") from exc
    for key in ("id", "version", "width", "height", "channels"):
        if key not in meta:
            raise MalformedHeaderError(f"{meta_path}: missing field {key!r}")
    if meta["version"] != BUNDLE_VERSION:
        raise VersionError(f"{meta_path}: unknown bundle version {meta['version']!r}")
    w, h = int(meta["width"]), int(meta["height"])
    grid = ImageGrid(w, h)
    crcs = meta.get("crc32", {})
    channels = meta["channels"]

    images: dict[str, ScalarImage | None] = {name: None for name in _IMAGE_CHANNELS}
    for name in _IMAGE_CHANNELS:
        if name in channels:
            data = _read_raw(path, f"{name}.f32", 4 * w * h, crcs.get(name))
            arr = np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(h, w)
            images[name] = ScalarImage(grid, arr)
    mask = None
    if "mask" in channels:
        data = _read_raw(path, "mask.u8", w * h, crcs.get("mask"))
        labels = np.frombuffer(data, dtype=np.uint8).reshape(h, w)
        mask = LabelMask(grid, labels)
    gates = None
    count = int(meta.get("cardiac_gate_count", 0))
    if "gates" in channels:
        if count < 1:
            raise MalformedHeaderError(f"{meta_path}: gates present but cardiac_gate_count={count}")
        data = _read_raw(path, "gates.f32", 4 * w * h * count, crcs.get("gates"))
        arr = np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(count, h, w)
        gates = GateStack(grid, tuple(ScalarImage(grid, plane) for plane in arr))

    return SubjectBundle(
        id=str(meta["id"]),
        magnitude=images["magnitude"],
        mean_dense=images["mean_dense"],
        peak_dense=images["peak_dense"],
        mask=mask,
        gates=gates,
        cardiac_gate_count=count,
        normalized=bool(meta.get("normalized", False)),
        displacement_unit=str(meta.get("displacement_unit", "um")),
    )


def write_truth_warp(field: DisplacementField, bundle_dir) -> None:
    """Store a ground-truth nodal displacement next to a subject's arrays."""
    path = Path(bundle_dir)
    path.mkdir(parents=True, exist_ok=True)
    (path / "truth_warp.f32").write_bytes(field.u.astype("<f4").tobytes())


def read_truth_warp(bundle_dir, grid: ImageGrid) -> DisplacementField:
    path = Path(bundle_dir) / "truth_warp.f32"
    n = (grid.width + 1) * (grid.height + 1) * 2
    data = path.read_bytes()
    if len(data) != 4 * n:
        raise TruncatedPayloadError(f"{path}: expected {4 * n} bytes, found {len(data)}")
    u = np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(grid.height + 1, grid.width + 1, 2)
    return DisplacementField(grid, u)


def write_bank(bank: AtlasBank, path) -> None:
    """Write every subject bundle plus the ``bank.json`` index."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for s in bank.subjects:
        write_bundle(s, path / s.id)
    index = {
        "version": BUNDLE_VERSION,
        "resolution": [bank.grid.width, bank.grid.height],
        "subjects": [s.id for s in bank.subjects],
    }
    (path / "bank.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_bank(path) -> AtlasBank:
    path = Path(path)
    index_path = path / "bank.json"
    if not index_path.exists():
        raise MalformedHeaderError(f"{index_path} is missing")
    try:
        index = json.loads(index_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{index_path}: {exc}") from exc
    if index.get("version") != BUNDLE_VERSION:
        raise VersionError(f"{index_path}: unknown bank version {index.get('version')!r}")
    subjects = [read_bundle(path / name) for name in index.get("subjects", [])]
    return AtlasBank(tuple(subjects))
