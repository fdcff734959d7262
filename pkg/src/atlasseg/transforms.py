"""Spatial transformations y: domain -> R^2.

Two representations: a 6-parameter affine map and a nodal displacement
field on the cell corners of an :class:`~atlasseg.imaging.ImageGrid`.
Displacements are in domain units (native pixels).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError
from .imaging import ImageGrid

__all__ = ["AffineTransform", "DisplacementField", "affine_to_displacement", "prolong"]


@dataclass(frozen=True)
class AffineTransform:
    """y(x) = A x + t with A = [[a11, a12], [a21, a22]], t = (t1, t2)."""

    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    t1: float = 0.0
    t2: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.params).all():
            raise InputError("affine parameters must be finite")

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    @classmethod
    def from_params(cls, p) -> "AffineTransform":
        a11, a12, t1, a21, a22, t2 = (float(v) for v in p)
        return cls(a11, a12, a21, a22, t1, t2)

    @property
    def params(self) -> np.ndarray:
        """Parameter vector (a11, a12, t1, a21, a22, t2)."""
        return np.array([self.a11, self.a12, self.t1, self.a21, self.a22, self.t2])

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.t1, self.t2])

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    def map_points(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        x = pts[..., 0]
        y = pts[..., 1]
        out = np.empty_like(pts)
        out[..., 0] = self.a11 * x + self.a12 * y + self.t1
        out[..., 1] = self.a21 * x + self.a22 * y + self.t2
        return out


@dataclass(frozen=True)
class DisplacementField:
    """Nodal displacement u on the (width+1) x (height+1) cell corners of
    ``grid``; y(x) = x + u(x) with u bilinearly interpolated between nodes.

    ``u`` has shape (height+1, width+1, 2) and is immutable.
    """

    grid: ImageGrid
    u: np.ndarray

    def __post_init__(self):
        arr = np.array(self.u, dtype=np.float64, order="C", copy=True)
        want = (self.grid.height + 1, self.grid.width + 1, 2)
        if arr.shape != want:
            raise ShapeError(f"u shape {arr.shape} != nodal shape {want}")
        if not np.isfinite(arr).all():
            raise InputError("displacement field contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "u", arr)

    @classmethod
    def identity(cls, grid: ImageGrid) -> "DisplacementField":
        return cls(grid, np.zeros((grid.height + 1, grid.width + 1, 2)))

    @property
    def max_abs(self) -> float:
        """Max-norm of the displacement over the nodes, in pixels."""
        return float(np.abs(self.u).max())

    def displacement_at(self, points) -> np.ndarray:
        """Bilinear interpolation of u between nodes; queries are clamped
        to the domain (the field is only defined on the closed domain)."""
        pts = np.asarray(points, dtype=np.float64)
        hx, hy = self.grid.spacing
        px = np.clip(pts[..., 0] / hx, 0.0, self.grid.width)
        py = np.clip(pts[..., 1] / hy, 0.0, self.grid.height)
        i = np.clip(np.floor(px).astype(np.intp), 0, self.grid.width - 1)
        j = np.clip(np.floor(py).astype(np.intp), 0, self.grid.height - 1)
        tx = (px - i)[..., None]
        ty = (py - j)[..., None]
        u = self.u
        row0 = (1 - tx) * u[j, i] + tx * u[j, i + 1]
        row1 = (1 - tx) * u[j + 1, i] + tx * u[j + 1, i + 1]
        return (1 - ty) * row0 + ty * row1

    def map_points(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts + self.displacement_at(pts)

    def with_u(self, u) -> "DisplacementField":
        return DisplacementField(self.grid, u)


def affine_to_displacement(affine: AffineTransform, grid: ImageGrid) -> DisplacementField:
    """Sample u(x) = A x + t - x on the nodal lattice of ``grid``."""
    X, Y = grid.node_coords()
    pts = np.stack([X, Y], axis=-1)
    return DisplacementField(grid, affine.map_points(pts) - pts)


def _refine_axis(u: np.ndarray, axis: int) -> np.ndarray:
    n = u.shape[axis]
    shape = list(u.shape)
    shape[axis] = 2 * n - 1
    out = np.empty(shape, dtype=u.dtype)
    even = [slice(None)] * u.ndim
    even[axis] = slice(0, None, 2)
    out[tuple(even)] = u
    odd = [slice(None)] * u.ndim
    odd[axis] = slice(1, None, 2)
    lo = [slice(None)] * u.ndim
    lo[axis] = slice(0, n - 1)
    hi = [slice(None)] * u.ndim
    hi[axis] = slice(1, n)
    out[tuple(odd)] = 0.5 * (u[tuple(lo)] + u[tuple(hi)])
    return out


def prolong(field: DisplacementField) -> DisplacementField:
    """Bilinear upsampling of the nodal field to the 2x finer level.

    Coarse nodes coincide with every other fine node, so even fine nodes
    copy and odd ones take midpoint averages.
    """
    fine_grid = ImageGrid(2 * field.grid.width, 2 * field.grid.height, field.grid.extent)
    u = _refine_axis(_refine_axis(field.u, 0), 1)
    return DisplacementField(fine_grid, u)
