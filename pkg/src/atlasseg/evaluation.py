"""Dice overlap, displacement biomarkers, the (n, threshold) grid search,
and the side-by-side method comparison report."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bundleio import AtlasBank
from .errors import ConfigurationError, EmptyRegionError, InputError, ShapeError
from .fusion import FusionConfig, fuse, rank_templates, registration_fanout
from .imaging import BRAINSTEM, CEREBELLUM, LabelMask, ScalarImage, SubjectBundle, warp_mask

logger = logging.getLogger(__name__)

__all__ = [
    "dice",
    "biomarker",
    "relative_error",
    "EvaluationRecord",
    "evaluate_subject",
    "GridSearchResult",
    "grid_search",
    "compare_report",
    "write_report",
    "read_report",
]

REGION_NAMES = {CEREBELLUM: "cerebellum", BRAINSTEM: "brainstem"}
FULL = (CEREBELLUM, BRAINSTEM)


def _as_class_set(classes) -> tuple[int, ...]:
    if np.isscalar(classes):
        classes = (int(classes),)
    out = tuple(sorted(int(c) for c in classes))
    if not out or any(c not in (CEREBELLUM, BRAINSTEM) for c in out):
        raise InputError(f"class set must be a subset of {{1, 2}}, got {classes}")
    return out


def dice(a: LabelMask, b: LabelMask, classes=FULL) -> float:
    """Dice overlap 2|A n B| / (|A| + |B|) of the pixels whose label lies in
    ``classes``. Two empty regions agree perfectly and score 1."""
    if a.grid != b.grid:
        raise ShapeError("masks must share one grid")
    cs = _as_class_set(classes)
    ra = a.region(cs)
    rb = b.region(cs)
    denom = int(ra.sum()) + int(rb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((ra & rb).sum()) / denom


def biomarker(peak_dense: ScalarImage, mask: LabelMask, region: int, csf_cutoff: float | None = None) -> float:
    """Spatial mean of the peak-displacement image over one labeled region.

    ``csf_cutoff`` drops pixels whose value exceeds the cutoff before
    averaging (a guard against high-motion fluid leaking into the region).
    An empty region (or one fully removed by the cutoff) is an error, not 0.
    """
    if peak_dense.grid != mask.grid:
        raise ShapeError("image and mask must share one grid")
    if region not in REGION_NAMES:
        raise InputError(f"region must be 1 or 2, got {region}")
    sel = mask.labels == region
    values = peak_dense.values[sel]
    if csf_cutoff is not None:
        values = values[values <= csf_cutoff]
    if values.size == 0:
        raise EmptyRegionError(f"no pixels with label {region}" + (" below the cutoff" if csf_cutoff is not None else ""))
    # fsum: correctly rounded and independent of summation order
    return math.fsum(values) / values.size


def relative_error(pred: float, truth: float) -> float:
    """|pred - truth| / truth, defined for positive truth only."""
    if not np.isfinite(truth) or truth <= 0:
        raise InputError(f"relative error needs truth > 0, got {truth}")
    return abs(pred - truth) / truth


@dataclass(frozen=True)
class EvaluationRecord:
    subject_id: str
    dice_brainstem: float
    dice_cerebellum: float
    dice_full: float
    biomarker_true: dict
    biomarker_pred: dict
    relative_errors: dict
    unit: str = "um"

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "dice_brainstem": self.dice_brainstem,
            "dice_cerebellum": self.dice_cerebellum,
            "dice_full": self.dice_full,
            "biomarker_true": self.biomarker_true,
            "biomarker_pred": self.biomarker_pred,
            "relative_errors": self.relative_errors,
            "unit": self.unit,
        }


def evaluate_subject(truth: SubjectBundle, predicted: LabelMask, csf_cutoff: float | None = None) -> EvaluationRecord:
    """Dice per region and biomarker fidelity of one predicted mask against
    the subject's own mask and peak-displacement channel. A region that is
    empty in the prediction yields null biomarker/error fields."""
    if truth.mask is None or truth.peak_dense is None:
        raise InputError(f"subject {truth.id!r} needs a mask and a peak channel")
    bm_true = {}
    bm_pred = {}
    rel = {}
    for region, name in REGION_NAMES.items():
        bm_true[name] = biomarker(truth.peak_dense, truth.mask, region, csf_cutoff)
        try:
            bm_pred[name] = biomarker(truth.peak_dense, predicted, region, csf_cutoff)
            rel[name] = relative_error(bm_pred[name], bm_true[name])
        except EmptyRegionError:
            logger.warning("subject %s: predicted %s region is empty", truth.id, name)
            bm_pred[name] = None
            rel[name] = None
    return EvaluationRecord(
        subject_id=truth.id,
        dice_brainstem=dice(truth.mask, predicted, BRAINSTEM),
        dice_cerebellum=dice(truth.mask, predicted, CEREBELLUM),
        dice_full=dice(truth.mask, predicted, FULL),
        biomarker_true=bm_true,
        biomarker_pred=bm_pred,
        relative_errors=rel,
        unit=truth.displacement_unit,
    )


# ---------------------------------------------------------------------------
# grid search over (n, threshold)

@dataclass(frozen=True)
class GridSearchResult:
    cells: tuple[dict, ...]           # one dict per (n, threshold), row-major in (n, threshold)
    best_n: int
    best_threshold: float
    subject_ids: tuple[str, ...]

    def cell(self, n: int, threshold: float) -> dict:
        for c in self.cells:
            if c["n"] == n and c["threshold"] == threshold:
                return c
        raise KeyError((n, threshold))

    def to_dict(self) -> dict:
        return {
            "subject_ids": list(self.subject_ids),
            "cells": list(self.cells),
            "best": {"n": self.best_n, "threshold": self.best_threshold},
        }


def grid_search(bank: AtlasBank, subject_ids, n_values, thresholds, config: FusionConfig, jobs: int = 1) -> GridSearchResult:
    """Leave-one-out sweep: for every subject the max(n) best templates are
    registered once, then every (n, threshold) cell reuses the cached warps
    (fusion is cheap, registration is not). The winning cell maximizes the
    mean full-mask Dice; ties prefer smaller n, then the threshold nearest
    0.5, then the smaller threshold."""
    n_values = sorted(set(int(n) for n in n_values))
    thresholds = sorted(set(float(t) for t in thresholds))
    if not n_values or not thresholds:
        raise ConfigurationError("n_values and thresholds must be nonempty")
    subject_ids = list(subject_ids)
    n_max = max(n_values)
    if n_max > len(bank) - 1:
        raise ConfigurationError(f"max n={n_max} exceeds bank size minus one ({len(bank) - 1})")

    cached: dict[str, list[LabelMask]] = {}
    for sid in subject_ids:
        ref = bank.by_id(sid)
        if ref.mask is None:
            raise ConfigurationError(f"grid-search subject {sid!r} has no mask")
        pool = AtlasBank(tuple(s for s in bank.subjects if s.id != sid))
        ranked = rank_templates(ref, pool)
        chosen = [pool.by_id(tid) for tid, _ in ranked[:n_max]]
        results = registration_fanout(ref, chosen, config.registration, jobs=jobs)
        warps = []
        for template, res in zip(chosen, results):
            if not res.converged:
                logger.warning("gridsearch %s: template %s skipped (%s)", sid, template.id, res.reason)
                warps.append(None)
                continue
            warps.append(warp_mask(template.mask, res.y, ref.grid))
        cached[sid] = warps

    cells = []
    for n in n_values:
        for thr in thresholds:
            dices = []
            abs_errors = []
            skipped_biomarkers = 0
            for sid in subject_ids:
                ref = bank.by_id(sid)
                warps = [w for w in cached[sid][:n] if w is not None]
                if not warps:
                    continue
                _, hard = fuse(warps, thr)
                dices.append(dice(ref.mask, hard, FULL))
                for region in (CEREBELLUM, BRAINSTEM):
                    true_bm = biomarker(ref.peak_dense, ref.mask, region)
                    try:
                        pred_bm = biomarker(ref.peak_dense, hard, region)
                    except EmptyRegionError:
                        skipped_biomarkers += 1
                        continue
                    abs_errors.append(abs(pred_bm - true_bm))
            cells.append({
                "n": n,
                "threshold": thr,
                "mean_dice_full": float(np.mean(dices)) if dices else 0.0,
                "mean_abs_biomarker_error": float(np.mean(abs_errors)) if abs_errors else None,
                "subjects": len(dices),
                "empty_biomarker_regions": skipped_biomarkers,
            })

    def sort_key(c):
        return (-c["mean_dice_full"], c["n"], abs(c["threshold"] - 0.5), c["threshold"])

    best = min(cells, key=sort_key)
    return GridSearchResult(tuple(cells), best["n"], best["threshold"], tuple(subject_ids))


# ---------------------------------------------------------------------------
# comparison report (atlas-based vs neural-network masks)

_METHODS = ("ab", "nn")


def _best_flag(ab, nn, key):
    """'ab' / 'nn' / 'tie', or None when a side is missing."""
    if ab is None or nn is None:
        return None
    a, b = key(ab), key(nn)
    if a is None or b is None:
        return None
    if a == b:
        return "tie"
    return "ab" if a < b else "nn"


def compare_report(true_bundles, ab_masks, nn_masks, csf_cutoff: float | None = None) -> dict:
    """Per-subject Dice and biomarkers for both methods against the manual
    truth, with best-method flags (exact ties flagged as ties), plus summary
    means and plot-ready series. Subjects missing from an arm are reported
    as absent rows rather than failing the report."""
    rows = []
    for bundle in sorted(true_bundles, key=lambda b: b.id):
        row = {"subject_id": bundle.id, "absent": []}
        for method, masks in (("ab", ab_masks), ("nn", nn_masks)):
            pred = masks.get(bundle.id) if masks else None
            if pred is None:
                row[method] = None
                row["absent"].append(method)
                continue
            rec = evaluate_subject(bundle, pred, csf_cutoff)
            row[method] = rec.to_dict()
        # best-method flags: higher Dice wins; biomarker closest to truth wins
        row["best"] = {}
        ab, nn = row["ab"], row["nn"]
        for region in ("brainstem", "cerebellum"):
            row["best"][f"dice_{region}"] = _best_flag(ab, nn, lambda r, reg=region: -r[f"dice_{reg}"])
            row["best"][f"biomarker_{region}"] = _best_flag(
                ab, nn,
                lambda r, reg=region: None if r["relative_errors"][reg] is None else r["relative_errors"][reg],
            )
        rows.append(row)

    def _mean(values):
        vals = [v for v in values if v is not None]
        return float(np.mean(vals)) if vals else None

    summary = {}
    for method in _METHODS:
        recs = [r[method] for r in rows if r[method] is not None]
        summary[method] = {
            "mean_dice_brainstem": _mean([r["dice_brainstem"] for r in recs]),
            "mean_dice_cerebellum": _mean([r["dice_cerebellum"] for r in recs]),
            "mean_dice_full": _mean([r["dice_full"] for r in recs]),
            "mean_dice_error_brainstem": _mean([1.0 - r["dice_brainstem"] for r in recs]),
            "mean_dice_error_cerebellum": _mean([1.0 - r["dice_cerebellum"] for r in recs]),
            "mean_rel_biomarker_error_brainstem": _mean([r["relative_errors"]["brainstem"] for r in recs]),
            "mean_rel_biomarker_error_cerebellum": _mean([r["relative_errors"]["cerebellum"] for r in recs]),
            "subjects": len(recs),
        }
    return {"rows": rows, "summary": summary}


def _quartiles(values):
    if not values:
        return None
    q = np.percentile(np.asarray(values, dtype=np.float64), [0, 25, 50, 75, 100])
    return {"min": float(q[0]), "q1": float(q[1]), "median": float(q[2]), "q3": float(q[3]), "max": float(q[4])}


def write_report(report: dict, out_dir) -> None:
    """Persist report.json, the Table-style report.csv, and CSV plot series
    (per-subject bars, Dice-vs-error scatter, box-plot quartiles)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def fmt(v):
        return "" if v is None else f"{v:.6g}"

    header = [
        "subject", "ab_dice_brainstem", "nn_dice_brainstem", "ab_dice_cerebellum", "nn_dice_cerebellum",
        "true_biomarker_brainstem", "ab_biomarker_brainstem", "nn_biomarker_brainstem",
        "true_biomarker_cerebellum", "ab_biomarker_cerebellum", "nn_biomarker_cerebellum",
    ]
    lines = [",".join(header)]
    scatter = ["method,region,subject,dice,rel_biomarker_error"]
    bars_dice = ["subject,region,ab,nn"]
    bars_err = ["subject,region,ab,nn"]
    box_data = {}
    for row in report["rows"]:
        ab, nn = row.get("ab"), row.get("nn")

        def get(rec, *keys):
            cur = rec
            for k in keys:
                if cur is None:
                    return None
                cur = cur[k]
            return cur

        truth_src = ab if ab is not None else nn
        lines.append(",".join([
            row["subject_id"],
            fmt(get(ab, "dice_brainstem")), fmt(get(nn, "dice_brainstem")),
            fmt(get(ab, "dice_cerebellum")), fmt(get(nn, "dice_cerebellum")),
            fmt(get(truth_src, "biomarker_true", "brainstem")),
            fmt(get(ab, "biomarker_pred", "brainstem")), fmt(get(nn, "biomarker_pred", "brainstem")),
            fmt(get(truth_src, "biomarker_true", "cerebellum")),
            fmt(get(ab, "biomarker_pred", "cerebellum")), fmt(get(nn, "biomarker_pred", "cerebellum")),
        ]))
        for region in ("brainstem", "cerebellum"):
            bars_dice.append(",".join([
                row["subject_id"], region,
                fmt(get(ab, f"dice_{region}")), fmt(get(nn, f"dice_{region}")),
            ]))
            bars_err.append(",".join([
                row["subject_id"], region,
                fmt(get(ab, "relative_errors", region)), fmt(get(nn, "relative_errors", region)),
            ]))
            for method, rec in (("ab", ab), ("nn", nn)):
                if rec is None:
                    continue
                d = rec[f"dice_{region}"]
                e = rec["relative_errors"][region]
                if e is not None:
                    scatter.append(f"{method},{region},{row['subject_id']},{d:.6g},{e:.6g}")
                box_data.setdefault(("dice_error", region, method), []).append(1.0 - d)
                if e is not None:
                    box_data.setdefault(("rel_biomarker_error", region, method), []).append(e)

    (out / "report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "plot_dice_bar.csv").write_text("\n".join(bars_dice) + "\n", encoding="utf-8")
    (out / "plot_relerr_bar.csv").write_text("\n".join(bars_err) + "\n", encoding="utf-8")
    (out / "plot_scatter.csv").write_text("\n".join(scatter) + "\n", encoding="utf-8")
    box_lines = ["metric,region,method,min,q1,median,q3,max"]
    for (metric, region, method) in sorted(box_data):
        q = _quartiles(box_data[(metric, region, method)])
        box_lines.append(f"{metric},{region},{method},{q['min']:.6g},{q['q1']:.6g},{q['median']:.6g},{q['q3']:.6g},{q['max']:.6g}")
    (out / "plot_box.csv").write_text("\n".join(box_lines) + "\n", encoding="utf-8")


def read_report(path) -> dict:
    """Round-trip reader for report.json."""
    return json.loads((Path(path) / "report.json").read_text(encoding="utf-8"))
