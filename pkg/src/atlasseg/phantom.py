"""Deterministic synthetic "head" generator with known masks, DENSE
channels, and ground-truth warps.

Every subject is the canonical base deformed by an analytic warp (small
affine jitter plus a sum of Gaussian bumps), so the true correspondence and
its Jacobian are available in closed form. Warps are kept fold-free by
construction and verified on the nodal lattice; offending bump sets are
regenerated, never emitted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .bundleio import AtlasBank, write_bank, write_bundle, write_truth_warp
from .errors import ConfigurationError, InputError
from .imaging import BRAINSTEM, CEREBELLUM, ImageGrid, LabelMask, ScalarImage, SubjectBundle, interpolate, warp_mask
from .registration import _det_grad_y
from .transforms import DisplacementField

__all__ = ["PhantomSpec", "PhantomSubject", "generate_base", "base_region_masks", "generate_bank", "BankResult", "write_phantom_dataset"]


@dataclass(frozen=True)
class PhantomSpec:
    """Everything the generator needs; the seed fully determines output."""

    seed: int = 7
    resolution: int = 256
    bank_size: int = 51
    test_size: int = 12
    deformation_px: float = 8.0
    noise_sigma: float = 0.02        # magnitude texture noise
    dense_noise_sigma: float = 0.05  # displacement-channel noise, same unit as the means
    brainstem_mu: float = 1.2
    cerebellum_mu: float = 0.8
    csf_mu: float = 20.0

    def __post_init__(self):
        if self.resolution < 16:
            raise ConfigurationError("phantom resolution must be >= 16")
        if self.bank_size < 1 or self.test_size < 0:
            raise ConfigurationError("bank_size must be >= 1 and test_size >= 0")
        if self.csf_mu <= max(self.brainstem_mu, self.cerebellum_mu):
            raise ConfigurationError("csf_mu must dominate the region means")


@dataclass(frozen=True)
class PhantomSubject:
    bundle: SubjectBundle
    truth_warp: DisplacementField | None


@dataclass(frozen=True)
class BankResult:
    bank: AtlasBank
    test_subjects: tuple[SubjectBundle, ...]
    truth_warps: dict[str, DisplacementField]


def _ellipse_rho(X, Y, cx, cy, a, b, angle=0.0, wobble=0.0, lobes=0, phase=0.0):
    """Normalized elliptic radius; <= 1 is inside. ``wobble`` modulates the
    boundary radius with ``lobes`` sinusoidal lobes for an organic look."""
    dx = X - cx
    dy = Y - cy
    ca, sa = np.cos(angle), np.sin(angle)
    xr = (ca * dx + sa * dy) / a
    yr = (-sa * dx + ca * dy) / b
    rho = np.sqrt(xr * xr + yr * yr)
    if wobble:
        theta = np.arctan2(yr, xr)
        rho = rho / (1.0 + wobble * np.sin(lobes * theta + phase))
    return rho


def base_region_masks(spec: PhantomSpec) -> dict[str, np.ndarray]:
    """Boolean geometry of the canonical head: head, skull ring, ventricle,
    cerebellum, brain stem, and the noisy CSF band sitting a couple of
    pixels outside the labeled regions."""
    n = spec.resolution
    grid = ImageGrid(n, n)
    X, Y = grid.cell_centers()
    head_rho = _ellipse_rho(X, Y, 0.50 * n, 0.53 * n, 0.36 * n, 0.44 * n)
    head = head_rho <= 1.0
    skull = (head_rho > 0.92) & head
    ventricle = _ellipse_rho(X, Y, 0.50 * n, 0.35 * n, 0.07 * n, 0.05 * n) <= 1.0

    cb_rho = _ellipse_rho(X, Y, 0.61 * n, 0.59 * n, 0.14 * n, 0.10 * n, angle=-0.35, wobble=0.08, lobes=3, phase=1.1)
    bs_rho = _ellipse_rho(X, Y, 0.38 * n, 0.65 * n, 0.052 * n, 0.14 * n, angle=0.14, wobble=0.05, lobes=2, phase=0.4)
    cerebellum = cb_rho <= 1.0
    brainstem = (bs_rho <= 1.0) & ~cerebellum
    union = cerebellum | brainstem

    # high-motion CSF band at an isotropic standoff from the labeled tissue;
    # the gap survives warp compression so segmentation-boundary jitter does
    # not immediately sample fluid-scale values
    dist = ndimage.distance_transform_edt(~union)
    standoff = 0.045 * n
    csf = (dist > standoff) & (dist <= standoff + 0.05 * n)
    csf = csf & head & ~skull & ~ventricle
    return {
        "head": head,
        "skull": skull,
        "ventricle": ventricle,
        "cerebellum": cerebellum,
        "brainstem": brainstem,
        "union": union,
        "csf": csf,
    }


def _smooth_texture(X, Y, n):
    # fixed low-frequency pattern: gives the SSD something to grab onto
    u = X / n
    v = Y / n
    t = (
        0.5 * np.sin(2 * np.pi * (2.0 * u + 1.0 * v) + 0.7)
        + 0.3 * np.sin(2 * np.pi * (1.0 * u - 2.5 * v) + 2.1)
        + 0.2 * np.sin(2 * np.pi * (3.5 * u + 2.0 * v) + 4.0)
    )
    return t / 1.0


def generate_base(spec: PhantomSpec) -> PhantomSubject:
    """Canonical head bundle with mask and DENSE channels (unnormalized)."""
    n = spec.resolution
    grid = ImageGrid(n, n)
    X, Y = grid.cell_centers()
    regions = base_region_masks(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xB5]))

    texture = _smooth_texture(X, Y, n)
    magnitude = np.zeros((n, n))
    magnitude[regions["head"]] = 0.40 + 0.12 * texture[regions["head"]]
    magnitude[regions["skull"]] = 0.95
    magnitude[regions["ventricle"] & regions["head"]] = 0.12
    magnitude[regions["cerebellum"]] = 0.58 + 0.10 * np.sin(2 * np.pi * 6.0 * Y[regions["cerebellum"]] / n)
    magnitude[regions["brainstem"]] = 0.70 + 0.06 * texture[regions["brainstem"]]
    magnitude[regions["csf"]] = 0.08
    magnitude += rng.normal(0.0, spec.noise_sigma, magnitude.shape)
    magnitude = np.clip(magnitude, 0.0, 1.0)

    # DENSE: region-dependent base level + smooth field (zero-meaned per
    # labeled region so the spatial average stays at the configured mean)
    tissue_mu = 0.5 * min(spec.brainstem_mu, spec.cerebellum_mu)
    smooth = 0.06 * spec.cerebellum_mu * _smooth_texture(Y, X, n)
    peak = np.full((n, n), 0.02 * tissue_mu)
    peak[regions["head"]] = tissue_mu
    for name, mu in (("cerebellum", spec.cerebellum_mu), ("brainstem", spec.brainstem_mu)):
        m = regions[name]
        peak[m] = mu + smooth[m] - smooth[m].mean()
    peak[regions["csf"]] = spec.csf_mu * (0.8 + 0.4 * rng.random(int(regions["csf"].sum())))
    peak += rng.normal(0.0, spec.dense_noise_sigma, peak.shape)
    peak = np.maximum(peak, 0.0)

    mean_factor = 0.45 + 0.10 * np.clip(_smooth_texture(X + 17.0, Y - 9.0, n), -1.0, 1.0) * 0.5
    mean = peak * np.clip(mean_factor, 0.05, 0.95)

    labels = np.zeros((n, n), dtype=np.uint8)
    labels[regions["cerebellum"]] = CEREBELLUM
    labels[regions["brainstem"]] = BRAINSTEM

    bundle = SubjectBundle(
        id="base",
        magnitude=ScalarImage(grid, magnitude),
        mean_dense=ScalarImage(grid, mean),
        peak_dense=ScalarImage(grid, peak),
        mask=LabelMask(grid, labels),
        cardiac_gate_count=0,
        normalized=False,
    )
    return PhantomSubject(bundle, None)


class _AnalyticWarp:
    """y(x) = c + A (x - c) + t + sum of Gaussian bumps, evaluable anywhere."""

    def __init__(self, center, A, t, bump_centers, bump_sigmas, bump_amps):
        self.center = np.asarray(center, dtype=np.float64)
        self.A = np.asarray(A, dtype=np.float64)
        self.t = np.asarray(t, dtype=np.float64)
        self.bc = np.asarray(bump_centers, dtype=np.float64)
        self.bs = np.asarray(bump_sigmas, dtype=np.float64)
        self.ba = np.asarray(bump_amps, dtype=np.float64)

    def bump_displacement(self, pts):
        out = np.zeros_like(pts)
        for c, s, a in zip(self.bc, self.bs, self.ba):
            d2 = ((pts - c) ** 2).sum(axis=-1)
            out += np.exp(-0.5 * d2 / (s * s))[..., None] * a
        return out

    def scale_bumps(self, factor):
        self.ba = self.ba * factor

    def map_points(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        affine = (pts - self.center) @ self.A.T + self.center + self.t
        return affine + self.bump_displacement(pts)


def _random_warp(rng: np.random.Generator, n: int, magnitude: float) -> _AnalyticWarp:
    f = magnitude / 8.0
    theta = rng.uniform(-0.07, 0.07) * f
    sx, sy = 1.0 + rng.uniform(-0.04, 0.04, 2) * f
    shear = rng.uniform(-0.03, 0.03) * f
    ca, sa = np.cos(theta), np.sin(theta)
    A = np.array([[ca, -sa], [sa, ca]]) @ np.array([[sx, shear], [0.0, sy]])
    t = rng.uniform(-0.03, 0.03, 2) * n * f

    k = 6
    centers = np.stack([
        rng.uniform(0.2 * n, 0.8 * n, k),
        rng.uniform(0.2 * n, 0.85 * n, k),
    ], axis=1)
    sigmas = rng.uniform(0.14 * n, 0.26 * n, k)
    dirs = rng.normal(size=(k, 2))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = dirs * rng.uniform(0.3, 1.0, k)[:, None]
    warp = _AnalyticWarp((0.5 * n, 0.53 * n), A, t, centers, sigmas, amps)

    if magnitude > 0:
        probe = np.stack(ImageGrid(n, n).node_coords(), axis=-1)
        peak = np.linalg.norm(warp.bump_displacement(probe), axis=-1).max()
        if peak > 0:
            warp.scale_bumps(magnitude * rng.uniform(0.75, 1.0) / peak)
    else:
        warp.scale_bumps(0.0)
    return warp


def _warp_field(warp: _AnalyticWarp, grid: ImageGrid) -> DisplacementField:
    pts = np.stack(grid.node_coords(), axis=-1)
    return DisplacementField(grid, warp.map_points(pts) - pts)


def _deform_subject(base: SubjectBundle, subject_id: str, rng: np.random.Generator, spec: PhantomSpec):
    n = spec.resolution
    grid = base.grid
    for _ in range(25):
        warp = _random_warp(rng, n, spec.deformation_px)
        field = _warp_field(warp, grid)
        if _det_grad_y(field.u, *grid.spacing).min() > 0.4:
            break
    else:
        raise InputError("could not draw a fold-free warp; lower deformation_px")

    X, Y = grid.cell_centers()
    mapped = warp.map_points(np.stack([X, Y], axis=-1))

    def pull(img: ScalarImage, sigma: float) -> np.ndarray:
        vals = interpolate(img, mapped)
        if sigma > 0:
            vals = vals + rng.normal(0.0, sigma, vals.shape)
        return vals

    magnitude = np.clip(pull(base.magnitude, spec.noise_sigma), 0.0, 1.0)
    peak = np.maximum(pull(base.peak_dense, spec.dense_noise_sigma), 0.0)
    mean = np.clip(pull(base.mean_dense, spec.dense_noise_sigma), 0.0, None)
    mean = np.minimum(mean, peak)
    mask = warp_mask(base.mask, field, grid)

    bundle = SubjectBundle(
        id=subject_id,
        magnitude=ScalarImage(grid, magnitude),
        mean_dense=ScalarImage(grid, mean),
        peak_dense=ScalarImage(grid, peak),
        mask=mask,
        cardiac_gate_count=0,
        normalized=False,
    )
    return bundle, field


def generate_bank(spec: PhantomSpec) -> BankResult:
    """Bank + held-out test subjects, every one a deformed copy of the base
    with its ground-truth warp retained."""
    base = generate_base(spec).bundle
    subjects = []
    warps: dict[str, DisplacementField] = {}
    for k in range(spec.bank_size):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, k]))
        bundle, field = _deform_subject(base, f"s{k:03d}", rng, spec)
        subjects.append(bundle)
        warps[bundle.id] = field
    tests = []
    for k in range(spec.test_size):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2, k]))
        bundle, field = _deform_subject(base, f"t{k:03d}", rng, spec)
        tests.append(bundle)
        warps[bundle.id] = field
    return BankResult(AtlasBank(tuple(subjects)), tuple(tests), warps)


def write_phantom_dataset(spec: PhantomSpec, out_dir) -> BankResult:
    """Emit bank/ (bundles + bank.json), test/ bundles, truth warps, and a
    phantom.json echoing the generator parameters."""
    out = Path(out_dir)
    result = generate_bank(spec)
    write_bank(result.bank, out / "bank")
    for s in result.bank.subjects:
        write_truth_warp(result.truth_warps[s.id], out / "bank" / s.id)
    test_dir = out / "test"
    for s in result.test_subjects:
        write_bundle(s, test_dir / s.id)
        write_truth_warp(result.truth_warps[s.id], test_dir / s.id)
    base = generate_base(spec).bundle
    write_bundle(base, out / "base")
    doc = {
        "seed": spec.seed,
        "resolution": spec.resolution,
        "bank_size": spec.bank_size,
        "test_size": spec.test_size,
        "deformation_px": spec.deformation_px,
        "noise_sigma": spec.noise_sigma,
        "dense_noise_sigma": spec.dense_noise_sigma,
        "brainstem_mu": spec.brainstem_mu,
        "cerebellum_mu": spec.cerebellum_mu,
        "csf_mu": spec.csf_mu,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "phantom.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return result
