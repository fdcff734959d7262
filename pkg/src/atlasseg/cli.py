"""Command-line pipeline: phantom, preprocess, segment, evaluate,
gridsearch, compare.

Exit codes: 0 ok, 1 method failure, 2 input error, 3 configuration error.
Every command writes run.json (fully resolved config + tool version) into
its output directory; outputs are deterministic and re-runnable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bundleio import read_bank, read_bundle, write_bundle
from .errors import AtlasSegError, BundleFormatError, ConfigurationError, InputError, SegmentationFailureError, ShapeError
from .evaluation import compare_report, evaluate_subject, grid_search, read_report, write_report
from .fusion import FusionConfig, segment, write_segmentation
from .imaging import ImageGrid, LabelMask, normalize_bundle
from .phantom import PhantomSpec, write_phantom_dataset
from .registration import RegistrationConfig

logger = logging.getLogger("atlasseg")

EXIT_OK = 0
EXIT_METHOD = 1
EXIT_INPUT = 2
EXIT_CONFIG = 3

_DEFAULTS = {
    "bins": 64,
    "n": 10,
    "threshold": 0.5,
    "jobs": None,
    "alpha": 500.0,
    "regularizer": "hyperelastic",
    "levels": "32,64,128,256",
    "max_iter": 30,
    "tol_grad": 1e-3,
    "tol_step": 1e-4,
    "tol_obj": 1e-6,
    "seed": 7,
    "resolution": 256,
    "bank_size": 51,
    "test_size": 12,
    "deform_mag": 8.0,
    "csf_cutoff": None,
    "n_values": "5,10,20,40",
    "thresholds": "0.1,0.3,0.5,0.7,0.9",
    "subject_ids": None,
    "keep_going": False,
    "save_fields": False,
    "log_level": "INFO",
}


def _resolve(args: argparse.Namespace) -> dict:
    """Merge precedence: flags > --config file > defaults. Optional flags
    use SUPPRESS defaults, so only values the user typed reach the merge."""
    resolved = dict(_DEFAULTS)
    cfg_path = getattr(args, "config", None)
    file_cfg = {}
    if cfg_path:
        try:
            file_cfg = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config file {cfg_path}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigurationError(f"config file {cfg_path} must hold a JSON object")
        resolved.update(file_cfg)
    for k, v in vars(args).items():
        if k in ("func", "config"):
            continue
        if v is None and k in file_cfg:
            continue  # an unset default must not clobber the config file
        resolved[k] = v
    if resolved.get("jobs") is None:
        env = os.environ.get("ATLASSEG_JOBS")
        resolved["jobs"] = int(env) if env else 1
    return resolved


def _write_run_meta(out_dir, command: str, resolved: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"tool": "atlasseg", "version": __version__, "command": command}
    doc["config"] = {k: v for k, v in sorted(resolved.items()) if k not in ("out",)}
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _registration_config(cfg: dict, native: int) -> RegistrationConfig:
    levels = tuple(int(v) for v in str(cfg["levels"]).split(",") if v.strip())
    levels = tuple(m for m in levels if m <= native)
    if not levels or levels[-1] != native:
        levels = tuple(m for m in levels if m < native) + (native,)
    return RegistrationConfig(
        alpha=float(cfg["alpha"]),
        regularizer=str(cfg["regularizer"]),
        level_schedule=levels,
        max_gn_iterations=int(cfg["max_iter"]),
        gradient_tolerance=float(cfg["tol_grad"]),
        step_tolerance=float(cfg["tol_step"]),
        objective_tolerance=float(cfg["tol_obj"]),
    )


def _iter_bundle_dirs(path: Path):
    for child in sorted(path.iterdir()):
        if child.is_dir() and (child / "meta.json").exists():
            yield child


def _read_mask_file(path: Path, grid: ImageGrid) -> LabelMask:
    data = path.read_bytes()
    want = grid.width * grid.height
    if len(data) != want:
        raise ShapeError(f"{path}: expected {want} bytes, found {len(data)}")
    return LabelMask(grid, np.frombuffer(data, dtype=np.uint8).reshape(grid.shape))


def _load_predicted_mask(subject_dir: Path, grid: ImageGrid) -> LabelMask | None:
    """Segmentation outputs carry hard_mask.u8; bundle-format exports carry
    mask.u8 (possibly with their own meta.json)."""
    for name in ("hard_mask.u8", "mask.u8"):
        p = subject_dir / name
        if p.exists():
            return _read_mask_file(p, grid)
    return None


def _collect_masks(pred_dir: Path, grid: ImageGrid) -> dict[str, LabelMask]:
    masks = {}
    if not pred_dir.exists():
        return masks
    for child in sorted(pred_dir.iterdir()):
        if not child.is_dir():
            continue
        mask = _load_predicted_mask(child, grid)
        if mask is not None:
            masks[child.name] = mask
    return masks


# ---------------------------------------------------------------------------
# commands

def cmd_phantom(args) -> int:
    cfg = _resolve(args)
    spec = PhantomSpec(
        seed=int(cfg["seed"]),
        resolution=int(cfg["resolution"]),
        bank_size=int(cfg["bank_size"]),
        test_size=int(cfg["test_size"]),
        deformation_px=float(cfg["deform_mag"]),
    )
    out = Path(cfg["out"])
    write_phantom_dataset(spec, out)
    _write_run_meta(out, "phantom", cfg)
    logger.info("phantom dataset written to %s", out)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _resolve(args)
    src = Path(cfg["input"])
    out = Path(cfg["out"])
    if not src.exists():
        raise InputError(f"input directory {src} does not exist")
    out.mkdir(parents=True, exist_ok=True)
    failures = []
    count = 0
    for child in _iter_bundle_dirs(src):
        try:
            bundle = read_bundle(child)
            write_bundle(normalize_bundle(bundle, bins=int(cfg["bins"])), out / child.name)
            count += 1
        except AtlasSegError as exc:
            failures.append((child.name, str(exc)))
            logger.error("preprocess %s failed: %s", child.name, exc)
            if not cfg["keep_going"]:
                raise
    if (src / "bank.json").exists():
        index = json.loads((src / "bank.json").read_text(encoding="utf-8"))
        index["subjects"] = [s for s in index.get("subjects", []) if (out / s / "meta.json").exists()]
        (out / "bank.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_run_meta(out, "preprocess", cfg)
    logger.info("preprocessed %d bundle(s), %d failure(s)", count, len(failures))
    return EXIT_INPUT if failures else EXIT_OK


def _segment_one(reference, bank, fusion_cfg, jobs, out_dir, save_fields):
    result = segment(reference, bank, fusion_cfg, jobs=jobs)
    write_segmentation(result, out_dir)
    if save_fields:
        from .registration import write_registration_result

        for outcome in result.per_template:
            if outcome.result is not None:
                write_registration_result(outcome.result, Path(out_dir) / "registrations" / outcome.template_id)
    return result


def cmd_segment(args) -> int:
    cfg = _resolve(args)
    bank = read_bank(Path(cfg["bank"]))
    reg = _registration_config(cfg, bank.grid.width)
    fusion_cfg = FusionConfig(n=int(cfg["n"]), threshold=float(cfg["threshold"]), registration=reg)
    out = Path(cfg["out"])

    if cfg.get("subject"):
        targets = [Path(cfg["subject"])]
    else:
        targets = list(_iter_bundle_dirs(Path(cfg["subjects"])))
        if not targets:
            raise InputError(f"no subject bundles under {cfg['subjects']}")
    for target in targets:
        reference = read_bundle(target)
        _segment_one(reference, bank, fusion_cfg, int(cfg["jobs"]), out / reference.id, bool(cfg["save_fields"]))
        logger.info("segmented %s", reference.id)
    _write_run_meta(out, "segment", cfg)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    truth_dir = Path(cfg["truth"])
    pred_dir = Path(cfg["pred"])
    out = Path(cfg["out"])
    cutoff = cfg["csf_cutoff"]
    cutoff = float(cutoff) if cutoff is not None else None
    rows = []
    absent = []
    for child in _iter_bundle_dirs(truth_dir):
        bundle = read_bundle(child)
        mask = _load_predicted_mask(pred_dir / bundle.id, bundle.grid)
        if mask is None:
            absent.append(bundle.id)
            continue
        rows.append(evaluate_subject(bundle, mask, cutoff).to_dict())
    if not rows:
        raise InputError(f"no predicted masks under {pred_dir} match subjects in {truth_dir}")

    def _mean(key_fn):
        vals = [key_fn(r) for r in rows if key_fn(r) is not None]
        return float(np.mean(vals)) if vals else None

    report = {
        "rows": rows,
        "absent": absent,
        "summary": {
            "mean_dice_brainstem": _mean(lambda r: r["dice_brainstem"]),
            "mean_dice_cerebellum": _mean(lambda r: r["dice_cerebellum"]),
            "mean_dice_full": _mean(lambda r: r["dice_full"]),
            "mean_rel_biomarker_error_brainstem": _mean(lambda r: r["relative_errors"]["brainstem"]),
            "mean_rel_biomarker_error_cerebellum": _mean(lambda r: r["relative_errors"]["cerebellum"]),
            "subjects": len(rows),
        },
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_run_meta(out, "evaluate", cfg)
    logger.info("evaluated %d subject(s); %d absent", len(rows), len(absent))
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    cfg = _resolve(args)
    bank = read_bank(Path(cfg["bank"]))
    reg = _registration_config(cfg, bank.grid.width)
    fusion_cfg = FusionConfig(registration=reg)
    n_values = [int(v) for v in str(cfg["n_values"]).split(",") if v.strip()]
    thresholds = [float(v) for v in str(cfg["thresholds"]).split(",") if v.strip()]
    if cfg.get("subject_ids"):
        subject_ids = [s.strip() for s in str(cfg["subject_ids"]).split(",") if s.strip()]
    else:
        subject_ids = [s.id for s in bank.subjects]
    result = grid_search(bank, subject_ids, n_values, thresholds, fusion_cfg, jobs=int(cfg["jobs"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_run_meta(out, "gridsearch", cfg)
    logger.info("grid search done: best n=%d threshold=%.2f", result.best_n, result.best_threshold)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _resolve(args)
    truth_dir = Path(cfg["truth"])
    out = Path(cfg["out"])
    cutoff = cfg["csf_cutoff"]
    cutoff = float(cutoff) if cutoff is not None else None
    bundles = [read_bundle(child) for child in _iter_bundle_dirs(truth_dir)]
    if not bundles:
        raise InputError(f"no truth bundles under {truth_dir}")
    grid = bundles[0].grid
    ab = _collect_masks(Path(cfg["ab"]), grid) if cfg.get("ab") else {}
    nn = _collect_masks(Path(cfg["nn"]), grid) if cfg.get("nn") else {}
    report = compare_report(bundles, ab, nn, cutoff)
    write_report(report, out)
    _write_run_meta(out, "compare", cfg)
    logger.info("compared %d subject(s)", len(bundles))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="JSON config file; flags override it")
    p.add_argument("--log-level", dest="log_level", default=argparse.SUPPRESS, help="logging level (default INFO)")


def _add_registration_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=argparse.SUPPRESS, help="regularization weight (default 500)")
    p.add_argument("--regularizer", choices=["elastic", "hyperelastic"], default=argparse.SUPPRESS,
                   help="deformation energy (default hyperelastic)")
    p.add_argument("--levels", default=argparse.SUPPRESS, help="comma-separated level schedule (default 32,64,128,256)")
    p.add_argument("--max-iter", dest="max_iter", type=int, default=argparse.SUPPRESS, help="Gauss-Newton iterations per level (default 30)")
    p.add_argument("--tol-grad", dest="tol_grad", type=float, default=argparse.SUPPRESS, help="relative gradient tolerance (default 1e-3)")
    p.add_argument("--tol-step", dest="tol_step", type=float, default=argparse.SUPPRESS, help="step max-norm tolerance in px (default 1e-4)")
    p.add_argument("--tol-obj", dest="tol_obj", type=float, default=argparse.SUPPRESS, help="relative objective tolerance (default 1e-6)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atlasseg", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"atlasseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic dataset with ground truth")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="RNG seed (default 7)")
    p.add_argument("--resolution", type=int, default=argparse.SUPPRESS, help="native resolution (default 256)")
    p.add_argument("--bank-size", dest="bank_size", type=int, default=argparse.SUPPRESS, help="atlas bank size (default 51)")
    p.add_argument("--test-size", dest="test_size", type=int, default=argparse.SUPPRESS, help="held-out subjects (default 12)")
    p.add_argument("--deform-mag", dest="deform_mag", type=float, default=argparse.SUPPRESS, help="warp magnitude in px (default 8)")
    _add_common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="normalize magnitudes, reduce gate stacks")
    p.add_argument("--in", dest="input", required=True, help="directory of subject bundles")
    p.add_argument("--bins", type=int, default=argparse.SUPPRESS, help="equalization bins (default 64)")
    p.add_argument("--keep-going", dest="keep_going", action="store_true", default=argparse.SUPPRESS,
                   help="continue past malformed bundles")
    _add_common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("segment", help="atlas-based segmentation of one or more subjects")
    p.add_argument("--bank", required=True, help="atlas bank directory")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--subject", help="one subject bundle directory")
    group.add_argument("--subjects", help="directory holding several subject bundles")
    p.add_argument("--n", type=int, default=argparse.SUPPRESS, help="templates to fuse (default 10)")
    p.add_argument("--threshold", type=float, default=argparse.SUPPRESS, help="vote threshold (default 0.5)")
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="parallel registrations (default $ATLASSEG_JOBS or 1)")
    p.add_argument("--save-fields", dest="save_fields", action="store_true", default=argparse.SUPPRESS,
                   help="write per-template result.json + displacement.f32")
    _add_registration_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score predicted masks against truth bundles")
    p.add_argument("--truth", required=True, help="directory of truth bundles (mask + peak channel)")
    p.add_argument("--pred", required=True, help="directory of predicted masks (hard_mask.u8 or mask.u8 per subject)")
    p.add_argument("--csf-cutoff", dest="csf_cutoff", type=float, default=argparse.SUPPRESS,
                   help="drop displacement values above this cutoff (default off)")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gridsearch", help="sweep (n, threshold) by leave-one-out over the bank")
    p.add_argument("--bank", required=True, help="atlas bank directory")
    p.add_argument("--n-values", dest="n_values", default=argparse.SUPPRESS, help="comma list (default 5,10,20,40)")
    p.add_argument("--thresholds", default=argparse.SUPPRESS, help="comma list (default 0.1,0.3,0.5,0.7,0.9)")
    p.add_argument("--subject-ids", dest="subject_ids", default=argparse.SUPPRESS, help="restrict to these bank subjects")
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="parallel registrations")
    _add_registration_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("compare", help="atlas-based vs neural-network masks against truth")
    p.add_argument("--truth", required=True, help="directory of truth bundles")
    p.add_argument("--ab", default=None, help="atlas-based mask directory")
    p.add_argument("--nn", default=None, help="neural-network mask directory")
    p.add_argument("--csf-cutoff", dest="csf_cutoff", type=float, default=argparse.SUPPRESS)
    _add_common(p)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = getattr(args, "log_level", None) or _DEFAULTS["log_level"]
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigurationError,) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except (BundleFormatError, InputError, ShapeError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    except (SegmentationFailureError, AtlasSegError) as exc:
        logger.error("%s", exc)
        return EXIT_METHOD


if __name__ == "__main__":
    sys.exit(main())
