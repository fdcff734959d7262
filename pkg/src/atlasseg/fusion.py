"""Multi-template segmentation: SSD ranking, per-template registration,
mask warping, and uniform averaging with a threshold (label fusion)."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundleio import AtlasBank
from .errors import ConfigurationError, InputError, SegmentationFailureError, ShapeError
from .imaging import BRAINSTEM, CEREBELLUM, ImageGrid, LabelMask, SubjectBundle, warp_mask
from .registration import RegistrationConfig, RegistrationResult, multilevel_register

logger = logging.getLogger(__name__)

__all__ = [
    "FusionConfig",
    "SoftMask",
    "TemplateOutcome",
    "SegmentationResult",
    "rank_templates",
    "fuse",
    "segment",
    "write_segmentation",
]


@dataclass(frozen=True)
class FusionConfig:
    """How many templates to average and where to cut the soft mask."""

    n: int = 10
    threshold: float = 0.5
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("n must be >= 1")
        if not (0.0 < self.threshold < 1.0):
            raise ConfigurationError("threshold must be in (0, 1)")


@dataclass(frozen=True)
class SoftMask:
    """Per-class vote fractions; p_c + p_b <= 1 pointwise."""

    grid: ImageGrid
    p_cerebellum: np.ndarray
    p_brainstem: np.ndarray

    def __post_init__(self):
        for name in ("p_cerebellum", "p_brainstem"):
            arr = np.array(getattr(self, name), dtype=np.float64, copy=True)
            if arr.shape != self.grid.shape:
                raise ShapeError(f"{name} shape {arr.shape} != grid shape {self.grid.shape}")
            if arr.min() < -1e-12 or arr.max() > 1.0 + 1e-12:
                raise InputError(f"{name} outside [0, 1]")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if (self.p_cerebellum + self.p_brainstem).max() > 1.0 + 1e-9:
            raise InputError("class probabilities must sum to at most 1")


@dataclass(frozen=True)
class TemplateOutcome:
    template_id: str
    ssd: float
    result: RegistrationResult | None
    warped_mask: LabelMask | None
    skipped: bool
    note: str = ""


@dataclass(frozen=True)
class SegmentationResult:
    hard: LabelMask
    soft: SoftMask
    per_template: tuple[TemplateOutcome, ...]


def _identity_ssd(a: SubjectBundle, b: SubjectBundle) -> float:
    if a.grid != b.grid:
        raise ShapeError("bundles must share one resolution")
    diff = a.magnitude.values - b.magnitude.values
    return 0.5 * a.grid.cell_area * float((diff * diff).sum())


def rank_templates(reference: SubjectBundle, bank: AtlasBank) -> list[tuple[str, float]]:
    """All bank subjects ordered by SSD to the reference magnitude under the
    identity transform, most similar first; ties break on subject id."""
    if reference.magnitude is None or not reference.normalized:
        raise InputError("reference must carry a normalized magnitude channel")
    scored = [(s.id, _identity_ssd(s, reference)) for s in bank.subjects]
    scored.sort(key=lambda pair: (pair[1], pair[0]))
    return scored


def fuse(warped_masks, threshold: float) -> tuple[SoftMask, LabelMask]:
    """Average per-class indicators over the warped template masks, then
    threshold: a class wins where its vote fraction strictly exceeds
    ``threshold`` (larger fraction wins when both do; an exact tie falls
    back to background)."""
    masks = list(warped_masks)
    if not masks:
        raise InputError("fuse needs at least one mask")
    grid = masks[0].grid
    for m in masks:
        if m.grid != grid:
            raise ShapeError("warped masks must share one grid")
    n = len(masks)
    stack = np.stack([m.labels for m in masks])
    p_c = (stack == CEREBELLUM).sum(axis=0) / n
    p_b = (stack == BRAINSTEM).sum(axis=0) / n
    labels = np.zeros(grid.shape, dtype=np.uint8)
    c_ok = p_c > threshold
    b_ok = p_b > threshold
    labels[c_ok & ~b_ok] = CEREBELLUM
    labels[b_ok & ~c_ok] = BRAINSTEM
    both = c_ok & b_ok
    labels[both & (p_c > p_b)] = CEREBELLUM
    labels[both & (p_b > p_c)] = BRAINSTEM
    return SoftMask(grid, p_c, p_b), LabelMask(grid, labels)


def _register_one(args):
    template, reference, config = args
    return multilevel_register(template, reference, config)


def registration_fanout(reference: SubjectBundle, templates, config: RegistrationConfig, jobs: int = 1):
    """Run the independent template->reference registrations, optionally on
    a bounded worker pool. Results come back in template order regardless of
    completion order, so fusion stays deterministic."""
    tasks = [(t, reference, config) for t in templates]
    if jobs <= 1 or len(tasks) <= 1:
        return [_register_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_register_one, tasks))


def segment(
    reference: SubjectBundle,
    bank: AtlasBank,
    config: FusionConfig,
    exclude_self: bool = True,
    jobs: int = 1,
) -> SegmentationResult:
    """Segment ``reference`` with the n most similar bank templates.

    Templates whose registration does not converge are skipped with a
    warning and fusion runs over the remainder; at least one must survive.
    The reference is excluded from the candidate pool by id (leave-one-out
    safety) unless ``exclude_self`` is False.
    """
    candidates = [s for s in bank.subjects if not (exclude_self and s.id == reference.id)]
    if config.n > len(candidates):
        raise ConfigurationError(f"n={config.n} exceeds the {len(candidates)} available templates")
    pool = AtlasBank(tuple(candidates))
    ranked = rank_templates(reference, pool)
    chosen = [pool.by_id(tid) for tid, _ in ranked[: config.n]]
    ssd_by_id = dict(ranked)

    results = registration_fanout(reference, chosen, config.registration, jobs=jobs)
    outcomes = []
    surviving = []
    for template, result in zip(chosen, results):
        if not result.converged:
            logger.warning("template %s skipped: registration did not converge (%s)", template.id, result.reason)
            outcomes.append(TemplateOutcome(template.id, ssd_by_id[template.id], result, None, True, result.reason))
            continue
        warped = warp_mask(template.mask, result.y, reference.grid)
        outcomes.append(TemplateOutcome(template.id, ssd_by_id[template.id], result, warped, False))
        surviving.append(warped)
    if not surviving:
        raise SegmentationFailureError("every template registration failed")
    soft, hard = fuse(surviving, config.threshold)
    return SegmentationResult(hard, soft, tuple(outcomes))


def write_segmentation(result: SegmentationResult, out_dir) -> None:
    """Emit hard_mask.u8, the two soft-vote rasters, and segmentation.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "hard_mask.u8").write_bytes(result.hard.labels.astype(np.uint8).tobytes())
    (out / "soft_cerebellum.f32").write_bytes(result.soft.p_cerebellum.astype("<f4").tobytes())
    (out / "soft_brainstem.f32").write_bytes(result.soft.p_brainstem.astype("<f4").tobytes())
    doc = {
        "grid": {"width": result.hard.grid.width, "height": result.hard.grid.height},
        "templates": [
            {
                "id": t.template_id,
                "ssd": t.ssd,
                "skipped": t.skipped,
                "converged": bool(t.result.converged) if t.result is not None else False,
                "reason": t.result.reason if t.result is not None else t.note,
            }
            for t in result.per_template
        ],
    }
    (out / "segmentation.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
