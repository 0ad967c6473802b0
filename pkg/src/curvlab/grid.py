"""Structured coordinate charts: periodic or collared boxes in 2 to 4 dimensions.

A chart fixes, per axis, a coordinate length, a point count and a periodicity
flag.  Periodic axes sample [0, L) with spacing L/n (no duplicated endpoint);
non-periodic ("collared") axes sample [lo, hi] inclusively with spacing
(hi-lo)/(n-1).  Every field attached to a chart carries exactly one value per
grid node and component.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VALID_DIMS = (2, 3, 4)


@dataclass(frozen=True)
class Axis:
    length: float
    points: int
    periodic: bool
    origin: float = 0.0

    @property
    def spacing(self) -> float:
        if self.periodic:
            return self.length / self.points
        return self.length / (self.points - 1)

    def coordinates(self) -> np.ndarray:
        if self.periodic:
            return self.origin + self.spacing * np.arange(self.points)
        return np.linspace(self.origin, self.origin + self.length, self.points)


@dataclass(frozen=True)
class GridChart:
    """A structured chart; all tensor fields in curvlab live on one of these."""

    axes: tuple[Axis, ...]
    collar_width: int = 2

    def __post_init__(self):
        if len(self.axes) not in VALID_DIMS:
            raise ValueError(f"chart dimension must be one of {VALID_DIMS}, got {len(self.axes)}")
        if self.collar_width < 2:
            raise ValueError("collar_width must be >= 2")
        for ax in self.axes:
            if ax.points < 8:
                raise ValueError("each axis needs at least 8 points")
            if ax.length <= 0:
                raise ValueError("axis lengths must be positive")

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(ax.points for ax in self.axes)

    @property
    def npoints(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacings(self) -> tuple[float, ...]:
        return tuple(ax.spacing for ax in self.axes)

    @property
    def max_spacing(self) -> float:
        return max(self.spacings)

    def coordinate_grids(self) -> list[np.ndarray]:
        """Broadcastable coordinate arrays, one per axis."""
        grids = np.meshgrid(*[ax.coordinates() for ax in self.axes], indexing="ij")
        return list(grids)

    def quadrature_weights(self) -> np.ndarray:
        """Tensor-product trapezoid weights (periodic axes: uniform)."""
        w = np.ones(self.shape)
        for a, ax in enumerate(self.axes):
            wa = np.full(ax.points, ax.spacing)
            if not ax.periodic:
                wa[0] *= 0.5
                wa[-1] *= 0.5
            shape = [1] * self.dim
            shape[a] = ax.points
            w = w * wa.reshape(shape)
        return w

    def interior_mask(self, margin: int | None = None) -> np.ndarray:
        """Boolean mask of nodes away from non-periodic boundaries.

        `margin` defaults to the chart collar width.
        """
        m = self.collar_width if margin is None else margin
        mask = np.ones(self.shape, dtype=bool)
        for a, ax in enumerate(self.axes):
            if ax.periodic:
                continue
            idx = [slice(None)] * self.dim
            idx[a] = slice(0, m)
            mask[tuple(idx)] = False
            idx[a] = slice(ax.points - m, ax.points)
            mask[tuple(idx)] = False
        return mask

    def box_mask(self, lo, hi, strict: bool = True) -> np.ndarray:
        """Mask of nodes inside the coordinate box [lo, hi] (per axis).

        With strict=True the open box is taken, which is the right notion for
        Dirichlet/compact supports.
        """
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (self.dim,))
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (self.dim,))
        mask = np.ones(self.shape, dtype=bool)
        for a, (coord, l, h) in enumerate(zip(self.coordinate_grids(), lo, hi)):
            if strict:
                mask &= (coord > l + 1e-12) & (coord < h - 1e-12)
            else:
                mask &= (coord >= l - 1e-12) & (coord <= h + 1e-12)
        return mask

    def subchart(self, lo, hi) -> tuple["GridChart", tuple[slice, ...]]:
        """Extract the non-periodic sub-box [lo, hi] as a new chart.

        Returns the chart and the index slices into the parent grid.  Bounds
        are snapped to grid nodes.
        """
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (self.dim,))
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (self.dim,))
        axes = []
        slices = []
        for ax, l, h in zip(self.axes, lo, hi):
            c = ax.coordinates()
            i0 = int(np.argmin(np.abs(c - l)))
            i1 = int(np.argmin(np.abs(c - h)))
            if i1 - i0 + 1 < 8:
                raise ValueError("sub-box too small: fewer than 8 nodes per axis")
            axes.append(Axis(length=c[i1] - c[i0], points=i1 - i0 + 1,
                             periodic=False, origin=c[i0]))
            slices.append(slice(i0, i1 + 1))
        return GridChart(tuple(axes), self.collar_width), tuple(slices)


def chart_from_spec(lengths, points, periodic, collar_width: int = 2,
                    origins=None) -> GridChart:
    """Convenience constructor from per-axis sequences."""
    lengths = np.atleast_1d(np.asarray(lengths, dtype=float))
    dim = len(lengths)
    points = np.broadcast_to(np.asarray(points, dtype=int), (dim,))
    periodic = np.broadcast_to(np.asarray(periodic, dtype=bool), (dim,))
    if origins is None:
        origins = np.zeros(dim)
    origins = np.broadcast_to(np.asarray(origins, dtype=float), (dim,))
    axes = tuple(Axis(float(L), int(n), bool(p), float(o))
                 for L, n, p, o in zip(lengths, points, periodic, origins))
    return GridChart(axes, collar_width)
