"""Grids, scalar images, label masks, and the shared preprocessing operations.

Conventions used throughout the package:

* Grids are cell-centered. A grid of ``width x height`` pixels covers the
  fixed domain ``[0, W] x [0, H]`` (pixel units at native resolution) with
  cell centers at ``((i + 0.5) * hx, (j + 0.5) * hy)``. Coarser levels keep
  the same domain and scale the spacing, so coordinates mean the same thing
  at every level.
* Arrays are row-major with a row holding constant ``v`` (vertical)
  coordinate, i.e. ``values[j, i]`` is column ``i`` (u-axis), row ``j``
  (v-axis).
* Images are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ResolutionError, ShapeError

__all__ = [
    "ImageGrid",
    "ScalarImage",
    "LabelMask",
    "GateStack",
    "SubjectBundle",
    "DegenerateHistogramWarning",
    "interpolate",
    "sample_with_gradient",
    "restrict",
    "histogram_equalize",
    "temporal_reduce",
    "warp_mask",
    "normalize_bundle",
]

BACKGROUND, CEREBELLUM, BRAINSTEM = 0, 1, 2
FOREGROUND_CLASSES = (CEREBELLUM, BRAINSTEM)


class DegenerateHistogramWarning(UserWarning):
    """Raised when a constant image is equalized (degenerate CDF)."""


def _frozen_array(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, order="C", copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ImageGrid:
    """Cell-centered 2-D grid over a fixed rectangular domain.

    ``extent`` is the physical size (W, H) of the domain; it defaults to
    (width, height), i.e. unit pixel spacing. Coarsened grids keep the
    parent's extent so the domain never changes across levels.
    """

    width: int
    height: int
    extent: tuple[float, float] = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InputError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if self.extent is None:
            object.__setattr__(self, "extent", (float(self.width), float(self.height)))
        else:
            object.__setattr__(self, "extent", (float(self.extent[0]), float(self.extent[1])))
        if not all(np.isfinite(self.extent)) or min(self.extent) <= 0:
            raise InputError(f"bad grid extent {self.extent}")

    @property
    def spacing(self) -> tuple[float, float]:
        return self.extent[0] / self.width, self.extent[1] / self.height

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape (rows, cols) = (height, width)."""
        return self.height, self.width

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Center coordinates as two (height, width) arrays (X, Y)."""
        hx, hy = self.spacing
        x = (np.arange(self.width) + 0.5) * hx
        y = (np.arange(self.height) + 0.5) * hy
        return np.meshgrid(x, y)

    def node_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-corner coordinates as two (height+1, width+1) arrays."""
        hx, hy = self.spacing
        x = np.arange(self.width + 1) * hx
        y = np.arange(self.height + 1) * hy
        return np.meshgrid(x, y)

    @property
    def cell_area(self) -> float:
        hx, hy = self.spacing
        return hx * hy


@dataclass(frozen=True)
class ScalarImage:
    """Real-valued image sampled at cell centers of ``grid``."""

    grid: ImageGrid
    values: np.ndarray

    def __post_init__(self):
        v = _frozen_array(self.values, np.float64)
        if v.shape != self.grid.shape:
            raise ShapeError(f"values shape {v.shape} != grid shape {self.grid.shape}")
        if not np.isfinite(v).all():
            raise InputError("image contains non-finite values")
        object.__setattr__(self, "values", v)

    def with_values(self, values) -> "ScalarImage":
        return ScalarImage(self.grid, values)


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel class mask: 0 background, 1 cerebellum, 2 brain stem.

    The integer code at a pixel equals chi_cerebellum + 2 * chi_brainstem.
    """

    grid: ImageGrid
    labels: np.ndarray

    def __post_init__(self):
        lab = _frozen_array(self.labels, np.uint8)
        if lab.shape != self.grid.shape:
            raise ShapeError(f"labels shape {lab.shape} != grid shape {self.grid.shape}")
        if lab.max(initial=0) > 2:
            raise InputError("labels must be in {0, 1, 2}")
        object.__setattr__(self, "labels", lab)

    def region(self, classes) -> np.ndarray:
        """Boolean indicator of pixels whose label is in ``classes``."""
        if np.isscalar(classes):
            classes = (classes,)
        out = np.zeros(self.grid.shape, dtype=bool)
        for c in classes:
            out |= self.labels == c
        return out


@dataclass(frozen=True)
class GateStack:
    """Ordered per-cardiac-gate displacement-magnitude images on one grid."""

    grid: ImageGrid
    gates: tuple[ScalarImage, ...]

    def __post_init__(self):
        gates = tuple(self.gates)
        if not gates:
            raise InputError("gate stack must contain at least one gate")
        for g in gates:
            if g.grid != self.grid:
                raise ShapeError("all gates must share the stack grid")
        object.__setattr__(self, "gates", gates)

    def __len__(self) -> int:
        return len(self.gates)


@dataclass(frozen=True)
class SubjectBundle:
    """One subject's channels. Channels may be absent (None) in partial
    bundles such as mask-only exports; present images must share one grid."""

    id: str
    magnitude: ScalarImage | None = None
    mean_dense: ScalarImage | None = None
    peak_dense: ScalarImage | None = None
    mask: LabelMask | None = None
    gates: GateStack | None = None
    cardiac_gate_count: int = 0
    normalized: bool = False
    displacement_unit: str = "um"

    def __post_init__(self):
        grids = [img.grid for img in (self.magnitude, self.mean_dense, self.peak_dense, self.mask, self.gates) if img is not None]
        if not grids:
            raise InputError(f"bundle {self.id!r} has no channels")
        for g in grids[1:]:
            if g != grids[0]:
                raise ShapeError(f"bundle {self.id!r}: channels do not share one grid")

    @property
    def grid(self) -> ImageGrid:
        for img in (self.magnitude, self.mean_dense, self.peak_dense, self.mask, self.gates):
            if img is not None:
                return img.grid
        raise InputError("empty bundle")  # unreachable after validation


# ---------------------------------------------------------------------------
# interpolation

def _hat_stencil(p: np.ndarray, n: int):
    """1-D interpolation stencil in cell-center coordinates.

    Nodes sit at 0..n-1 with a zero-valued ghost ring half a pixel outside
    the hull (at -0.5 and n-0.5), so values decay linearly to zero across
    the half-pixel rim and vanish beyond it.

    Returns (i0, i1, w0, w1, d0, d1): value = w0*v[i0] + w1*v[i1], and
    d0, d1 are the weight derivatives with respect to p.
    """
    p = np.asarray(p, dtype=np.float64)
    i0 = np.zeros(p.shape, dtype=np.intp)
    i1 = np.zeros(p.shape, dtype=np.intp)
    w0 = np.zeros(p.shape)
    w1 = np.zeros(p.shape)
    d0 = np.zeros(p.shape)
    d1 = np.zeros(p.shape)

    if n >= 2:
        inside = (p >= 0.0) & (p <= n - 1.0)
        pi = np.clip(np.floor(p[inside]), 0, n - 2).astype(np.intp)
        t = p[inside] - pi
        i0[inside] = pi
        i1[inside] = pi + 1
        w0[inside] = 1.0 - t
        w1[inside] = t
        d0[inside] = -1.0
        d1[inside] = 1.0
    else:
        center = p == 0.0
        w0[center] = 1.0

    left = (p >= -0.5) & (p < 0.0)
    w0[left] = 2.0 * p[left] + 1.0
    w1[left] = 0.0
    d0[left] = 2.0
    d1[left] = 0.0
    i0[left] = 0
    i1[left] = 0

    right = (p > n - 1.0) & (p <= n - 0.5)
    w0[right] = 2.0 * ((n - 0.5) - p[right])
    w1[right] = 0.0
    d0[right] = -2.0
    d1[right] = 0.0
    i0[right] = n - 1
    i1[right] = n - 1

    return i0, i1, w0, w1, d0, d1


def sample_with_gradient(image: ScalarImage, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Interpolated values and spatial gradient (d/dx, d/dy) at ``points``.

    ``points`` is array-like (..., 2) in domain coordinates. The gradient is
    the analytic derivative of the interpolant (piecewise constant per cell
    in each direction), consistent with :func:`interpolate`.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 2:
        raise InputError("points must have shape (..., 2)")
    if not np.isfinite(pts).all():
        raise InputError("non-finite point coordinates")
    hx, hy = image.grid.spacing
    px = pts[..., 0] / hx - 0.5
    py = pts[..., 1] / hy - 0.5
    ix0, ix1, wx0, wx1, dx0, dx1 = _hat_stencil(px, image.grid.width)
    iy0, iy1, wy0, wy1, dy0, dy1 = _hat_stencil(py, image.grid.height)
    v = image.values
    v00 = v[iy0, ix0]
    v01 = v[iy0, ix1]
    v10 = v[iy1, ix0]
    v11 = v[iy1, ix1]
    row0 = wx0 * v00 + wx1 * v01
    row1 = wx0 * v10 + wx1 * v11
    val = wy0 * row0 + wy1 * row1
    gx = (wy0 * (dx0 * v00 + dx1 * v01) + wy1 * (dx0 * v10 + dx1 * v11)) / hx
    gy = (dy0 * row0 + dy1 * row1) / hy
    return val, gx, gy


def interpolate(image: ScalarImage, points) -> np.ndarray:
    """Bilinear interpolation of ``image`` at domain coordinates ``points``.

    Exact at cell centers; zero-padded past the half-pixel rim outside the
    hull of cell centers (matches the dark background of magnitude images
    and keeps the distance term finite for large displacements).
    """
    val, _, _ = sample_with_gradient(image, points)
    return val


# ---------------------------------------------------------------------------
# multilevel helpers

def restrict(image: ScalarImage) -> ScalarImage:
    """Half-resolution image; each coarse cell averages its 2x2 children.

    The domain is unchanged, so the coarse grid doubles its spacing.
    """
    h, w = image.grid.shape
    if w % 2 or h % 2:
        raise ResolutionError(f"restrict needs even dimensions, got {w}x{h}")
    coarse = image.values.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    grid = ImageGrid(w // 2, h // 2, image.grid.extent)
    return ScalarImage(grid, coarse)


def build_pyramid(image: ScalarImage, levels) -> dict[int, ScalarImage]:
    """Restrict ``image`` down to every resolution named in ``levels``.

    ``levels`` are cell counts per axis (square grids); the native
    resolution must be present or reachable by repeated halving.
    """
    out = {}
    cur = image
    want = sorted(set(int(m) for m in levels), reverse=True)
    for m in want:
        while cur.grid.width > m:
            cur = restrict(cur)
        if cur.grid.width != m:
            raise ResolutionError(f"cannot reach level {m} from {image.grid.width}")
        out[m] = cur
    return out


# ---------------------------------------------------------------------------
# preprocessing

def histogram_equalize(image: ScalarImage, bins: int = 64) -> ScalarImage:
    """Monotone remap so the output's empirical CDF is ~linear on [0, 1].

    Ties map together; output range is a subset of (0, 1]. A constant image
    has a degenerate CDF and comes back as all 0.5 with a warning.
    """
    if bins < 2:
        raise InputError(f"bins must be >= 2, got {bins}")
    v = image.values
    vmin = float(v.min())
    vmax = float(v.max())
    if vmax == vmin:
        warnings.warn("histogram_equalize: constant image, returning 0.5", DegenerateHistogramWarning)
        return image.with_values(np.full(v.shape, 0.5))
    idx = np.minimum(((v - vmin) / (vmax - vmin) * bins).astype(np.intp), bins - 1)
    counts = np.bincount(idx.ravel(), minlength=bins)
    cdf = counts.cumsum() / v.size
    return image.with_values(cdf[idx])


def temporal_reduce(stack: GateStack) -> tuple[ScalarImage, ScalarImage]:
    """Per-pixel arithmetic mean and maximum over the cardiac gates."""
    arr = np.stack([g.values for g in stack.gates])
    mean = ScalarImage(stack.grid, arr.mean(axis=0))
    peak = ScalarImage(stack.grid, arr.max(axis=0))
    return mean, peak


def normalize_bundle(bundle: SubjectBundle, bins: int = 64) -> SubjectBundle:
    """Histogram-equalize the magnitude channel and reduce any gate stack.

    Already-normalized bundles are returned unchanged. The raw gate stack is
    dropped from the output (the pipeline only consumes the reductions);
    ``cardiac_gate_count`` keeps the provenance.
    """
    if bundle.normalized:
        return bundle
    mean, peak = bundle.mean_dense, bundle.peak_dense
    count = bundle.cardiac_gate_count
    if bundle.gates is not None:
        mean, peak = temporal_reduce(bundle.gates)
        count = len(bundle.gates)
    magnitude = bundle.magnitude
    if magnitude is not None:
        magnitude = histogram_equalize(magnitude, bins=bins)
    return SubjectBundle(
        id=bundle.id,
        magnitude=magnitude,
        mean_dense=mean,
        peak_dense=peak,
        mask=bundle.mask,
        gates=None,
        cardiac_gate_count=count,
        normalized=True,
        displacement_unit=bundle.displacement_unit,
    )


# ---------------------------------------------------------------------------
# mask warping

def warp_mask(mask: LabelMask, transform, target_grid: ImageGrid) -> LabelMask:
    """Pull-back warp: at each target cell center x, look up the mask label
    at the cell containing y(x); points mapped outside the domain become
    background.

    Nearest-cell lookup keeps labels crisp (interpolating class ids is
    meaningless). With y(x) = x + u, a blob at p appears at p - u in the
    output, i.e. it moves opposite to the displacement.
    """
    X, Y = target_grid.cell_centers()
    pts = np.stack([X, Y], axis=-1)
    mapped = transform.map_points(pts)
    mx = mapped[..., 0]
    my = mapped[..., 1]
    W, H = mask.grid.extent
    hx, hy = mask.grid.spacing
    outside = (mx < 0) | (mx > W) | (my < 0) | (my > H)
    i = np.clip(np.floor(mx / hx).astype(np.intp), 0, mask.grid.width - 1)
    j = np.clip(np.floor(my / hy).astype(np.intp), 0, mask.grid.height - 1)
    labels = mask.labels[j, i].copy()
    labels[outside] = BACKGROUND
    return LabelMask(target_grid, labels)
