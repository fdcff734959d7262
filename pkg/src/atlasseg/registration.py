"""Variational registration: SSD distance, elastic and hyperelastic
regularization, affine pre-registration, and multilevel Gauss-Newton.

Discretization: nodal displacement fields on cell corners, midpoint
quadrature for all integrals. Derivatives of the bilinear element at a
cell midpoint are the averages of the two edge differences, so every
energy reduces to per-cell algebra plus a scatter back to the nodes.

The template is always the moving image: the objective compares
T(y(x)) against R(x) over the cell centers x.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InputError, ShapeError
from .imaging import ImageGrid, ScalarImage, SubjectBundle, build_pyramid, sample_with_gradient
from .transforms import AffineTransform, DisplacementField, affine_to_displacement, prolong

logger = logging.getLogger(__name__)

__all__ = [
    "RegistrationConfig",
    "HistoryEntry",
    "LevelHistory",
    "RegistrationResult",
    "ssd_distance",
    "elastic_regularizer",
    "hyperelastic_regularizer",
    "objective",
    "ObjectiveEval",
    "affine_preregister",
    "gauss_newton_solve",
    "multilevel_register",
    "register_images",
    "derivative_check",
    "write_registration_result",
    "read_displacement",
]

ELASTIC = "elastic"
HYPERELASTIC = "hyperelastic"


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class RegistrationConfig:
    """Solver knobs. ``alpha`` weighs the regularizer against the distance;
    the level schedule must be strictly increasing powers of two ending at
    the native resolution."""

    alpha: float = 500.0
    regularizer: str = HYPERELASTIC
    level_schedule: tuple[int, ...] = (32, 64, 128, 256)
    max_gn_iterations: int = 30
    gradient_tolerance: float = 1e-3   # relative to the level's initial gradient
    step_tolerance: float = 1e-4       # max-norm of the accepted update, px
    objective_tolerance: float = 1e-6  # relative objective decrease
    armijo_c: float = 1e-4
    armijo_factor: float = 0.5
    armijo_max_trials: int = 20
    cg_tolerance: float = 1e-2
    cg_max_iterations: int = 50
    mu: float = 1.0                    # elastic shear modulus
    lam: float = 0.0                   # elastic divergence weight
    alpha_length: float = 1.0          # hyperelastic |grad u|^2 weight
    alpha_volume: float = 1.0          # hyperelastic volume-penalty weight
    affine_min_det: float = 0.05
    affine_max_iterations: int = 50

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        if self.regularizer not in (ELASTIC, HYPERELASTIC):
            raise ConfigurationError(f"unknown regularizer {self.regularizer!r}")
        sched = tuple(int(m) for m in self.level_schedule)
        if not sched or any(not _is_pow2(m) for m in sched) or list(sched) != sorted(set(sched)):
            raise ConfigurationError(f"level schedule must be strictly increasing powers of two, got {sched}")
        object.__setattr__(self, "level_schedule", sched)

    @classmethod
    def for_resolution(cls, native: int, coarsest: int = 32, **kwargs) -> "RegistrationConfig":
        """Schedule coarsest..native by doubling (capped below at ``native``)."""
        if not _is_pow2(native):
            raise ConfigurationError(f"native resolution {native} is not a power of two")
        levels = []
        m = min(coarsest, native)
        while m < native:
            levels.append(m)
            m *= 2
        levels.append(native)
        return cls(level_schedule=tuple(levels), **kwargs)


@dataclass(frozen=True)
class HistoryEntry:
    iteration: int
    objective: float
    distance: float
    regularizer: float  # alpha-weighted, so objective = distance + regularizer
    grad_norm: float
    step: float
    min_det: float


@dataclass(frozen=True)
class LevelHistory:
    level: int
    entries: tuple[HistoryEntry, ...]
    converged: bool
    reason: str


@dataclass(frozen=True)
class RegistrationResult:
    y: DisplacementField
    pre_affine: AffineTransform
    levels: tuple[LevelHistory, ...]
    converged: bool
    reason: str
    config: RegistrationConfig | None = None

    @property
    def history(self) -> tuple[LevelHistory, ...]:
        return self.levels


# ---------------------------------------------------------------------------
# cell-wise difference operators (bilinear element, midpoint values)

def _cell_avg(nodal: np.ndarray) -> np.ndarray:
    return 0.25 * (nodal[:-1, :-1] + nodal[:-1, 1:] + nodal[1:, :-1] + nodal[1:, 1:])


def _cell_avg_adjoint(cells: np.ndarray, out: np.ndarray) -> None:
    c = 0.25 * cells
    out[:-1, :-1] += c
    out[:-1, 1:] += c
    out[1:, :-1] += c
    out[1:, 1:] += c


def _cell_dx(nodal: np.ndarray, hx: float) -> np.ndarray:
    return (nodal[:-1, 1:] - nodal[:-1, :-1] + nodal[1:, 1:] - nodal[1:, :-1]) / (2.0 * hx)


def _cell_dx_adjoint(cells: np.ndarray, hx: float, out: np.ndarray) -> None:
    c = cells / (2.0 * hx)
    out[:-1, 1:] += c
    out[:-1, :-1] -= c
    out[1:, 1:] += c
    out[1:, :-1] -= c


def _cell_dy(nodal: np.ndarray, hy: float) -> np.ndarray:
    return (nodal[1:, :-1] - nodal[:-1, :-1] + nodal[1:, 1:] - nodal[:-1, 1:]) / (2.0 * hy)


def _cell_dy_adjoint(cells: np.ndarray, hy: float, out: np.ndarray) -> None:
    c = cells / (2.0 * hy)
    out[1:, :-1] += c
    out[:-1, :-1] -= c
    out[1:, 1:] += c
    out[:-1, 1:] -= c


def _grad_cells(u: np.ndarray, hx: float, hy: float):
    """Per-cell (u1_x, u1_y, u2_x, u2_y) from nodal u."""
    return (
        _cell_dx(u[..., 0], hx),
        _cell_dy(u[..., 0], hy),
        _cell_dx(u[..., 1], hx),
        _cell_dy(u[..., 1], hy),
    )


def _det_grad_y(u: np.ndarray, hx: float, hy: float) -> np.ndarray:
    a, b, c, d = _grad_cells(u, hx, hy)
    return (1.0 + a) * (1.0 + d) - b * c


# ---------------------------------------------------------------------------
# distance

def ssd_distance(template: ScalarImage, reference: ScalarImage, y):
    """Sum-of-squares distance 1/2 * sum (T(y(x)) - R(x))^2 * cell_area and
    its analytic gradient over the transformation parameters.

    For an :class:`AffineTransform` the gradient is the 6-vector in
    parameter order (a11, a12, t1, a21, a22, t2); for a
    :class:`DisplacementField` it is shaped like the nodal field.
    """
    if template.grid != reference.grid:
        raise ShapeError("template and reference must share one grid")
    grid = reference.grid
    hA = grid.cell_area
    X, Y = grid.cell_centers()
    pts = np.stack([X, Y], axis=-1)

    if isinstance(y, AffineTransform):
        mapped = y.map_points(pts)
        tv, gx, gy = sample_with_gradient(template, mapped)
        diff = tv - reference.values
        value = 0.5 * hA * float((diff * diff).sum())
        w = hA * diff
        grad = np.array([
            float((w * gx * X).sum()),
            float((w * gx * Y).sum()),
            float((w * gx).sum()),
            float((w * gy * X).sum()),
            float((w * gy * Y).sum()),
            float((w * gy).sum()),
        ])
        return value, grad

    if isinstance(y, DisplacementField):
        if y.grid != grid:
            raise ShapeError("displacement field must live on the image grid")
        value, grad, _, _ = _ssd_parts(template, reference.values, pts, hA, y.u, grid.spacing, need_gn=False)
        return value, grad

    raise InputError(f"unsupported transformation {type(y).__name__}")


def _ssd_parts(template, ref_values, centers, hA, u, spacing, need_gn=True):
    """Value, nodal gradient, and a Gauss-Newton J^T J action for the SSD
    term at nodal displacement ``u``."""
    uc = np.stack([_cell_avg(u[..., 0]), _cell_avg(u[..., 1])], axis=-1)
    tv, gx, gy = sample_with_gradient(template, centers + uc)
    diff = tv - ref_values
    value = 0.5 * hA * float((diff * diff).sum())
    grad = np.zeros_like(u)
    _cell_avg_adjoint(hA * diff * gx, grad[..., 0])
    _cell_avg_adjoint(hA * diff * gy, grad[..., 1])
    if not need_gn:
        return value, grad, None, None

    def gn_action(v: np.ndarray) -> np.ndarray:
        # J v per cell, then J^T back to the nodes; J row = sqrt(hA) grad T . avg4
        jc = gx * _cell_avg(v[..., 0]) + gy * _cell_avg(v[..., 1])
        out = np.zeros_like(v)
        _cell_avg_adjoint(hA * jc * gx, out[..., 0])
        _cell_avg_adjoint(hA * jc * gy, out[..., 1])
        return out

    return value, grad, gn_action, diff


def _ssd_value_only(template, ref_values, centers, hA, u):
    uc = np.stack([_cell_avg(u[..., 0]), _cell_avg(u[..., 1])], axis=-1)
    tv, _, _ = sample_with_gradient(template, centers + uc)
    diff = tv - ref_values
    return 0.5 * hA * float((diff * diff).sum())


# ---------------------------------------------------------------------------
# regularizers

def elastic_regularizer(u_field: DisplacementField, mu: float = 1.0, lam: float = 0.0):
    """Linear-elastic energy: mu/4 * sum_ij (d_i u_j + d_j u_i)^2 plus
    lam/2 * (div u)^2, integrated by midpoint quadrature. Quadratic in u,
    zero exactly when the strain vanishes (constant u included)."""
    grid = u_field.grid
    hx, hy = grid.spacing
    value, grad, _ = _elastic_parts(u_field.u, hx, hy, grid.cell_area, mu, lam)
    return value, grad


def _elastic_parts(u, hx, hy, hA, mu, lam):
    e1 = _cell_dx(u[..., 0], hx)
    e2 = _cell_dy(u[..., 1], hy)
    e3 = _cell_dy(u[..., 0], hy) + _cell_dx(u[..., 1], hx)
    div = e1 + e2
    value = hA * float((mu * (e1 * e1 + e2 * e2) + 0.5 * mu * e3 * e3 + 0.5 * lam * div * div).sum())

    def apply_hessian(v: np.ndarray) -> np.ndarray:
        f1 = _cell_dx(v[..., 0], hx)
        f2 = _cell_dy(v[..., 1], hy)
        f3 = _cell_dy(v[..., 0], hy) + _cell_dx(v[..., 1], hx)
        dv = f1 + f2
        g1 = hA * (2.0 * mu * f1 + lam * dv)
        g2 = hA * (2.0 * mu * f2 + lam * dv)
        g3 = hA * mu * f3
        out = np.zeros_like(v)
        _cell_dx_adjoint(g1, hx, out[..., 0])
        _cell_dy_adjoint(g3, hy, out[..., 0])
        _cell_dy_adjoint(g2, hy, out[..., 1])
        _cell_dx_adjoint(g3, hx, out[..., 1])
        return out

    return value, apply_hessian(u), apply_hessian


def _psi(v):
    r = v - 1.0
    return (r * r * r * r) / (v * v)


def _psi_prime(v):
    r = v - 1.0
    return 2.0 * r * r * r * (v + 1.0) / (v * v * v)


def _psi_second(v):
    r = v - 1.0
    return 2.0 * r * r * (v * v + 2.0 * v + 3.0) / (v ** 4)


def hyperelastic_regularizer(u_field: DisplacementField, alpha_length: float = 1.0, alpha_volume: float = 1.0):
    """Length + volume deformation energy with a fold barrier.

    S(u) = a_L * int |grad u|^2 + a_V * int psi(det grad y), where
    psi(v) = ((v-1)^2 / v)^2 for v > 0 and +inf otherwise. A field with any
    non-positive cell determinant returns (inf, None): the caller treats it
    as a rejectable step, never an exception.
    """
    grid = u_field.grid
    hx, hy = grid.spacing
    value, grad, _, _ = _hyperelastic_parts(u_field.u, hx, hy, grid.cell_area, alpha_length, alpha_volume)
    return value, grad


def _hyperelastic_parts(u, hx, hy, hA, aL, aV):
    a = _cell_dx(u[..., 0], hx)
    b = _cell_dy(u[..., 0], hy)
    c = _cell_dx(u[..., 1], hx)
    d = _cell_dy(u[..., 1], hy)
    det = (1.0 + a) * (1.0 + d) - b * c
    min_det = float(det.min())
    if min_det <= 0.0:
        return math.inf, None, None, min_det
    length = float((a * a + b * b + c * c + d * d).sum())
    value = hA * (aL * length + aV * float(_psi(det).sum()))

    psi_p = _psi_prime(det)
    grad = np.zeros_like(u)
    # d det / d (a, b, c, d) = (1+d, -c, -b, 1+a)
    _cell_dx_adjoint(hA * (2.0 * aL * a + aV * psi_p * (1.0 + d)), hx, grad[..., 0])
    _cell_dy_adjoint(hA * (2.0 * aL * b + aV * psi_p * (-c)), hy, grad[..., 0])
    _cell_dx_adjoint(hA * (2.0 * aL * c + aV * psi_p * (-b)), hx, grad[..., 1])
    _cell_dy_adjoint(hA * (2.0 * aL * d + aV * psi_p * (1.0 + a)), hy, grad[..., 1])

    psi_pp = _psi_second(det)

    def gn_action(v: np.ndarray) -> np.ndarray:
        # exact Hessian of the quadratic length term; psi via its
        # Gauss-Newton surrogate psi'' (ddet)(ddet)^T, which is PSD.
        fa = _cell_dx(v[..., 0], hx)
        fb = _cell_dy(v[..., 0], hy)
        fc = _cell_dx(v[..., 1], hx)
        fd = _cell_dy(v[..., 1], hy)
        ddet = (1.0 + d) * fa - c * fb - b * fc + (1.0 + a) * fd
        wdet = psi_pp * ddet
        out = np.zeros_like(v)
        _cell_dx_adjoint(hA * (2.0 * aL * fa + aV * wdet * (1.0 + d)), hx, out[..., 0])
        _cell_dy_adjoint(hA * (2.0 * aL * fb + aV * wdet * (-c)), hy, out[..., 0])
        _cell_dx_adjoint(hA * (2.0 * aL * fc + aV * wdet * (-b)), hx, out[..., 1])
        _cell_dy_adjoint(hA * (2.0 * aL * fd + aV * wdet * (1.0 + a)), hy, out[..., 1])
        return out

    return value, grad, gn_action, min_det


def _hyperelastic_value_only(u, hx, hy, hA, aL, aV):
    a = _cell_dx(u[..., 0], hx)
    b = _cell_dy(u[..., 0], hy)
    c = _cell_dx(u[..., 1], hx)
    d = _cell_dy(u[..., 1], hy)
    det = (1.0 + a) * (1.0 + d) - b * c
    if det.min() <= 0.0:
        return math.inf
    length = float((a * a + b * b + c * c + d * d).sum())
    return hA * (aL * length + aV * float(_psi(det).sum()))


# ---------------------------------------------------------------------------
# joint objective

@dataclass
class ObjectiveEval:
    value: float
    distance: float
    regularizer: float  # alpha-weighted
    gradient: np.ndarray | None
    gn_action: object | None
    min_det: float


def _regularizer_parts(u, hx, hy, hA, config: RegistrationConfig):
    if config.regularizer == ELASTIC:
        value, grad, hess = _elastic_parts(u, hx, hy, hA, config.mu, config.lam)
        min_det = float(_det_grad_y(u, hx, hy).min())
        return value, grad, hess, min_det
    return _hyperelastic_parts(u, hx, hy, hA, config.alpha_length, config.alpha_volume)


def _regularizer_value(u, hx, hy, hA, config: RegistrationConfig):
    if config.regularizer == ELASTIC:
        e1 = _cell_dx(u[..., 0], hx)
        e2 = _cell_dy(u[..., 1], hy)
        e3 = _cell_dy(u[..., 0], hy) + _cell_dx(u[..., 1], hx)
        div = e1 + e2
        return hA * float((config.mu * (e1 * e1 + e2 * e2) + 0.5 * config.mu * e3 * e3 + 0.5 * config.lam * div * div).sum())
    return _hyperelastic_value_only(u, hx, hy, hA, config.alpha_length, config.alpha_volume)


class _LevelData:
    """Static per-level data so repeated objective evaluations stay cheap."""

    def __init__(self, template: ScalarImage, reference: ScalarImage, config: RegistrationConfig):
        if template.grid != reference.grid:
            raise ShapeError("template and reference must share one grid")
        self.template = template
        self.ref_values = reference.values
        self.grid = reference.grid
        X, Y = self.grid.cell_centers()
        self.centers = np.stack([X, Y], axis=-1)
        self.hA = self.grid.cell_area
        self.hx, self.hy = self.grid.spacing
        self.config = config

    def evaluate(self, u: np.ndarray) -> ObjectiveEval:
        cfg = self.config
        reg_value, reg_grad, reg_hess, min_det = _regularizer_parts(u, self.hx, self.hy, self.hA, cfg)
        if not math.isfinite(reg_value):
            return ObjectiveEval(math.inf, math.nan, math.inf, None, None, min_det)
        dist, dist_grad, dist_gn, _ = _ssd_parts(self.template, self.ref_values, self.centers, self.hA, u, (self.hx, self.hy))
        value = dist + cfg.alpha * reg_value
        gradient = dist_grad + cfg.alpha * reg_grad

        def gn_action(v: np.ndarray) -> np.ndarray:
            return dist_gn(v) + cfg.alpha * reg_hess(v)

        return ObjectiveEval(value, dist, cfg.alpha * reg_value, gradient, gn_action, min_det)

    def value(self, u: np.ndarray) -> float:
        reg = _regularizer_value(u, self.hx, self.hy, self.hA, self.config)
        if not math.isfinite(reg):
            return math.inf
        return _ssd_value_only(self.template, self.ref_values, self.centers, self.hA, u) + self.config.alpha * reg


def objective(template: ScalarImage, reference: ScalarImage, y, config: RegistrationConfig) -> ObjectiveEval:
    """Joint objective D_SSD + alpha * S with analytic gradient and a
    matrix-free Gauss-Newton action over the nodal displacement.

    An affine ``y`` is first sampled onto the nodal lattice.
    """
    if isinstance(y, AffineTransform):
        y = affine_to_displacement(y, reference.grid)
    if y.grid != reference.grid:
        raise ShapeError("transformation grid must match the image grid")
    return _LevelData(template, reference, config).evaluate(y.u)


# ---------------------------------------------------------------------------
# solvers

def _conjugate_gradient(action, b: np.ndarray, rel_tol: float, max_iter: int) -> np.ndarray:
    """Matrix-free CG for the (symmetric positive semi-definite) GN system.
    Stops on relative residual, iteration cap, or curvature breakdown."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float((r * r).sum())
    b_norm = math.sqrt(rs)
    if b_norm == 0.0:
        return x
    for _ in range(max_iter):
        ap = action(p)
        pap = float((p * ap).sum())
        if pap <= 1e-14 * float((p * p).sum()):
            break
        step = rs / pap
        x += step * p
        r -= step * ap
        rs_new = float((r * r).sum())
        if math.sqrt(rs_new) <= rel_tol * b_norm:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def affine_preregister(template: ScalarImage, reference: ScalarImage, config: RegistrationConfig) -> AffineTransform:
    """Gauss-Newton SSD minimization over the 6 affine parameters at the
    coarsest scheduled level, started from the identity. Degenerate results
    (det(A) <= affine_min_det) fall back to the identity."""
    coarsest = min(config.level_schedule[0], template.grid.width)
    t_pyr = build_pyramid(template, [coarsest])
    r_pyr = build_pyramid(reference, [coarsest])
    return _affine_gn(t_pyr[coarsest], r_pyr[coarsest], config)


def _affine_ssd(template, ref_values, X, Y, hA, params):
    y = AffineTransform.from_params(params)
    pts = np.stack([y.a11 * X + y.a12 * Y + y.t1, y.a21 * X + y.a22 * Y + y.t2], axis=-1)
    tv, gx, gy = sample_with_gradient(template, pts)
    diff = tv - ref_values
    value = 0.5 * hA * float((diff * diff).sum())
    return value, diff, gx, gy


def _affine_gn(template: ScalarImage, reference: ScalarImage, config: RegistrationConfig) -> AffineTransform:
    grid = reference.grid
    hA = grid.cell_area
    X, Y = grid.cell_centers()
    params = AffineTransform.identity().params
    value, diff, gx, gy = _affine_ssd(template, reference.values, X, Y, hA, params)
    ones = np.ones_like(X)
    for _ in range(config.affine_max_iterations):
        # J columns follow the parameter order (a11, a12, t1, a21, a22, t2)
        cols = [gx * X, gx * Y, gx * ones, gy * X, gy * Y, gy * ones]
        J = np.stack([c.ravel() for c in cols], axis=1)
        g = hA * (J.T @ diff.ravel())
        if np.linalg.norm(g) <= 1e-10 * (1.0 + abs(value)):
            break
        H = hA * (J.T @ J)
        H += 1e-12 * np.trace(H) / 6.0 * np.eye(6)
        try:
            d = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            break
        if float(g @ d) >= 0.0:
            d = -g
        step = 1.0
        accepted = False
        for _ in range(config.armijo_max_trials):
            trial = params + step * d
            t_value, t_diff, t_gx, t_gy = _affine_ssd(template, reference.values, X, Y, hA, trial)
            if t_value <= value + config.armijo_c * step * float(g @ d):
                params, value, diff, gx, gy = trial, t_value, t_diff, t_gx, t_gy
                accepted = True
                break
            step *= config.armijo_factor
        if not accepted:
            break
        if float(np.abs(step * d).max()) <= config.step_tolerance:
            break
    result = AffineTransform.from_params(params)
    if result.det <= config.affine_min_det:
        logger.warning("affine pre-registration degenerated (det=%.4f); using identity", result.det)
        return AffineTransform.identity()
    return result


def gauss_newton_solve(
    template: ScalarImage,
    reference: ScalarImage,
    y0: DisplacementField,
    config: RegistrationConfig,
    level: int | None = None,
) -> tuple[DisplacementField, LevelHistory]:
    """Gauss-Newton iteration with a matrix-free CG inner solve and Armijo
    backtracking. Accepted steps never increase the objective; infeasible
    hyperelastic trials (det grad y <= 0) are rejected by the line search.
    """
    data = _LevelData(template, reference, config)
    level = level if level is not None else reference.grid.width
    u = np.array(y0.u, dtype=np.float64, copy=True)
    ev = data.evaluate(u)
    if not math.isfinite(ev.value):
        raise InputError("initial displacement is infeasible for the hyperelastic regularizer")
    g0 = float(np.linalg.norm(ev.gradient))
    entries = [HistoryEntry(0, ev.value, ev.distance, ev.regularizer, g0, 0.0, ev.min_det)]
    converged = True
    reason = "max_iter"
    for it in range(1, config.max_gn_iterations + 1):
        gnorm = float(np.linalg.norm(ev.gradient))
        if gnorm <= config.gradient_tolerance * (1.0 + g0):
            reason = "grad_tol"
            break
        flat_g = ev.gradient.ravel()
        act = ev.gn_action

        def flat_action(v):
            return act(v.reshape(u.shape)).ravel()

        d = _conjugate_gradient(flat_action, -flat_g, config.cg_tolerance, config.cg_max_iterations)
        slope = float(flat_g @ d)
        if slope >= 0.0:  # CG breakdown safeguard: fall back to steepest descent
            d = -flat_g
            slope = -float(flat_g @ flat_g)
        d = d.reshape(u.shape)
        step = 1.0
        accepted = False
        for _ in range(config.armijo_max_trials):
            trial = u + step * d
            t_value = data.value(trial)
            if t_value <= ev.value + config.armijo_c * step * slope:
                accepted = True
                break
            step *= config.armijo_factor
        if not accepted:
            converged = False
            reason = "line_search_failure"
            break
        prev_value = ev.value
        u = u + step * d
        ev = data.evaluate(u)
        entries.append(HistoryEntry(it, ev.value, ev.distance, ev.regularizer, float(np.linalg.norm(ev.gradient)), step, ev.min_det))
        if float(np.abs(step * d).max()) <= config.step_tolerance:
            reason = "step_tol"
            break
        if prev_value - ev.value <= config.objective_tolerance * (1.0 + abs(prev_value)):
            reason = "obj_tol"
            break
    hist = LevelHistory(level, tuple(entries), converged, reason)
    return DisplacementField(reference.grid, u), hist


def _shrink_to_feasible(u: np.ndarray, hx: float, hy: float, config: RegistrationConfig) -> np.ndarray:
    """Scale a prolongated guess toward zero until det grad y > 0. Rarely
    triggers (prolongation of a feasible field is almost always feasible);
    u = 0 is always feasible so the loop terminates."""
    if config.regularizer != HYPERELASTIC:
        return u
    for _ in range(60):
        if _det_grad_y(u, hx, hy).min() > 0.0:
            return u
        u = 0.5 * u
    return np.zeros_like(u)


def register_images(template: ScalarImage, reference: ScalarImage, config: RegistrationConfig) -> RegistrationResult:
    """Multilevel registration of two images on one grid: affine
    pre-registration at the coarsest level, then Gauss-Newton per level with
    the prolongated result as the next initial guess."""
    if template.grid != reference.grid:
        raise ShapeError("template and reference must share one grid")
    grid = reference.grid
    if grid.width != grid.height:
        raise ConfigurationError(f"registration needs square images, got {grid.width}x{grid.height}")
    native = grid.width
    if not _is_pow2(native):
        raise ConfigurationError(f"native resolution {native} is not a power of two")
    schedule = config.level_schedule
    if schedule[-1] != native:
        raise ConfigurationError(f"level schedule {schedule} does not end at native resolution {native}")

    t_pyr = build_pyramid(template, schedule)
    r_pyr = build_pyramid(reference, schedule)

    pre_affine = _affine_gn(t_pyr[schedule[0]], r_pyr[schedule[0]], config)
    coarse_grid = t_pyr[schedule[0]].grid
    u = affine_to_displacement(pre_affine, coarse_grid).u
    u = _shrink_to_feasible(u, *coarse_grid.spacing, config)

    histories = []
    y = DisplacementField(coarse_grid, u)
    for idx, m in enumerate(schedule):
        y, hist = gauss_newton_solve(t_pyr[m], r_pyr[m], y, config, level=m)
        histories.append(hist)
        if idx + 1 < len(schedule):
            y = prolong(y)
            if schedule[idx + 1] != 2 * m:
                raise ConfigurationError(f"schedule {schedule} must double between levels")
            u2 = _shrink_to_feasible(np.array(y.u, copy=True), *y.grid.spacing, config)
            y = DisplacementField(y.grid, u2)
    final = histories[-1]
    return RegistrationResult(y, pre_affine, tuple(histories), final.converged, final.reason, config)


def multilevel_register(template: SubjectBundle, reference: SubjectBundle, config: RegistrationConfig) -> RegistrationResult:
    """Register the template bundle's magnitude onto the reference's.

    Both bundles must be normalized (see ``atlasseg preprocess``); the DENSE
    channels are untouched here and only used later for biomarkers.
    """
    if template.magnitude is None or reference.magnitude is None:
        raise InputError("both bundles need a magnitude channel")
    if not (template.normalized and reference.normalized):
        raise InputError("bundles must be normalized before registration (run preprocess)")
    if template.grid != reference.grid:
        raise ShapeError("bundles must share native resolution")
    return register_images(template.magnitude, reference.magnitude, config)


# ---------------------------------------------------------------------------
# derivative checking

@dataclass(frozen=True)
class DirectionReport:
    hs: tuple[float, ...]
    errors: tuple[float, ...]
    order: float
    machine_zero: bool
    passed: bool


@dataclass(frozen=True)
class DerivativeCheckReport:
    directions: tuple[DirectionReport, ...]

    @property
    def passed(self) -> bool:
        return all(d.passed for d in self.directions)

    @property
    def min_order(self) -> float:
        orders = [d.order for d in self.directions if not d.machine_zero]
        return min(orders) if orders else math.inf


def derivative_check(functional, point: np.ndarray, directions, min_order: float = 1.7) -> DerivativeCheckReport:
    """Taylor test: |f(x + h v) - f(x) - h g.v| should shrink like h^2.

    ``functional(x)`` must return (value, gradient). For h = 2^-1..2^-10 the
    remainder is recorded per direction; the observed order is the median of
    consecutive log-log slopes over the numerically stable range. Quadratic
    functionals may hit machine zero instead, which also passes.
    """
    point = np.asarray(point, dtype=np.float64)
    f0, g0 = functional(point)
    g0 = np.asarray(g0, dtype=np.float64)
    hs = [2.0 ** -k for k in range(1, 11)]
    reports = []
    floor = 1e3 * np.finfo(np.float64).eps * max(1.0, abs(f0))
    for v in directions:
        v = np.asarray(v, dtype=np.float64)
        gv = float((g0 * v).sum())
        errors = []
        for h in hs:
            fh, _ = functional(point + h * v)
            errors.append(abs(fh - f0 - h * gv))
        stable = [(h, e) for h, e in zip(hs, errors) if e > floor]
        if len(stable) < 3:
            reports.append(DirectionReport(tuple(hs), tuple(errors), math.inf, True, True))
            continue
        slopes = []
        for (h1, e1), (h2, e2) in zip(stable, stable[1:]):
            slopes.append(math.log(e1 / e2) / math.log(h1 / h2))
        order = float(np.median(slopes))
        reports.append(DirectionReport(tuple(hs), tuple(errors), order, False, order >= min_order))
    return DerivativeCheckReport(tuple(reports))


# ---------------------------------------------------------------------------
# result serialization

def write_registration_result(result: RegistrationResult, out_dir) -> None:
    """Write ``result.json`` (history + convergence) and ``displacement.f32``
    (nodal u, two interleaved little-endian float32 components, row-major)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_echo = None
    if result.config is not None:
        cfg = result.config
        config_echo = {
            "alpha": cfg.alpha,
            "regularizer": cfg.regularizer,
            "level_schedule": list(cfg.level_schedule),
            "max_gn_iterations": cfg.max_gn_iterations,
            "gradient_tolerance": cfg.gradient_tolerance,
            "step_tolerance": cfg.step_tolerance,
            "objective_tolerance": cfg.objective_tolerance,
        }
    doc = {
        "converged": result.converged,
        "reason": result.reason,
        "config": config_echo,
        "pre_affine": list(result.pre_affine.params),
        "grid": {"width": result.y.grid.width, "height": result.y.grid.height},
        "levels": [
            {
                "level": lh.level,
                "converged": lh.converged,
                "reason": lh.reason,
                "entries": [
                    {
                        "iteration": e.iteration,
                        "objective": e.objective,
                        "distance": e.distance,
                        "regularizer": e.regularizer,
                        "grad_norm": e.grad_norm,
                        "step": e.step,
                        "min_det": e.min_det,
                    }
                    for e in lh.entries
                ],
            }
            for lh in result.levels
        ],
    }
    (out / "result.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "displacement.f32").write_bytes(result.y.u.astype("<f4").tobytes())


def read_displacement(path, grid: ImageGrid) -> DisplacementField:
    data = Path(path).read_bytes()
    n = (grid.width + 1) * (grid.height + 1) * 2
    if len(data) != 4 * n:
        raise ShapeError(f"{path}: expected {4 * n} bytes, found {len(data)}")
    u = np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(grid.height + 1, grid.width + 1, 2)
    return DisplacementField(grid, u)
