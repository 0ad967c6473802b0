"""Tensor fields on grid charts and the shared first-derivative stencil.

Storage layout: grid shape first, component indices last.  The public ranks
are 'scalar' (no component axis), 'one_form' (d components) and 'sym2'
(d(d+1)/2 packed upper-triangle components).  Covariant machinery also uses
unpacked intermediate arrays of shape grid + (d,)*k.

Every differential operator in curvlab is a composition of the one centered
first-derivative stencil implemented here (one-sided second order rows at
non-periodic edges).  That discipline is what makes identities like ∇g = 0,
tr(δ*ω) = −δω and the flat-torus commutation formulas exact in floating point
rather than merely O(spacing²).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridChart

RANKS = ("scalar", "one_form", "sym2")


def sym2_index_pairs(dim: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(dim) for j in range(i, dim)]


def ncomp(rank: str, dim: int) -> int:
    if rank == "scalar":
        return 1
    if rank == "one_form":
        return dim
    if rank == "sym2":
        return dim * (dim + 1) // 2
    raise ValueError(f"unknown rank {rank!r}")


def pack_sym2(full: np.ndarray) -> np.ndarray:
    """grid + (d, d) symmetric array -> grid + (d(d+1)/2,) packed array."""
    d = full.shape[-1]
    return np.stack([full[..., i, j] for i, j in sym2_index_pairs(d)], axis=-1)


def unpack_sym2(packed: np.ndarray, dim: int) -> np.ndarray:
    """Packed sym2 components -> grid + (d, d) array with h_ij = h_ji exactly."""
    out = np.empty(packed.shape[:-1] + (dim, dim), dtype=packed.dtype)
    for c, (i, j) in enumerate(sym2_index_pairs(dim)):
        out[..., i, j] = packed[..., c]
        out[..., j, i] = packed[..., c]
    return out


def deriv_axis(chart: GridChart, values: np.ndarray, axis: int) -> np.ndarray:
    """Second-order first derivative along a chart axis.

    Centered everywhere on periodic axes; centered in the interior and
    one-sided second order at the two boundary planes otherwise.  `values`
    may carry trailing component axes.
    """
    ax = chart.axes[axis]
    h = ax.spacing
    if ax.periodic:
        return (np.roll(values, -1, axis=axis) - np.roll(values, 1, axis=axis)) / (2.0 * h)
    out = np.empty_like(values)
    n = ax.points

    def sl(i):
        idx = [slice(None)] * values.ndim
        idx[axis] = i
        return tuple(idx)

    out[sl(slice(1, n - 1))] = (values[sl(slice(2, n))] - values[sl(slice(0, n - 2))]) / (2.0 * h)
    out[sl(0)] = (-3.0 * values[sl(0)] + 4.0 * values[sl(1)] - values[sl(2)]) / (2.0 * h)
    out[sl(n - 1)] = (3.0 * values[sl(n - 1)] - 4.0 * values[sl(n - 2)] + values[sl(n - 3)]) / (2.0 * h)
    return out


def partial_all(chart: GridChart, values: np.ndarray) -> np.ndarray:
    """Stack of ∂_a values over all axes; derivative index is appended last."""
    return np.stack([deriv_axis(chart, values, a) for a in range(chart.dim)], axis=-1)


@dataclass
class TensorField:
    """A scalar, one-form or packed symmetric 2-tensor field on a chart."""

    chart: GridChart
    rank: str
    values: np.ndarray

    def __post_init__(self):
        if self.rank not in RANKS:
            raise ValueError(f"rank must be one of {RANKS}")
        self.values = np.asarray(self.values, dtype=float)
        want = self.chart.shape if self.rank == "scalar" else self.chart.shape + (ncomp(self.rank, self.chart.dim),)
        if self.values.shape != want:
            raise ValueError(f"values shape {self.values.shape} != expected {want} for rank {self.rank}")

    @property
    def dim(self) -> int:
        return self.chart.dim

    def copy(self) -> "TensorField":
        return TensorField(self.chart, self.rank, self.values.copy())

    def full(self) -> np.ndarray:
        """Unpacked component array: grid (scalar), grid+(d,), or grid+(d,d)."""
        if self.rank == "sym2":
            return unpack_sym2(self.values, self.dim)
        return self.values

    def __add__(self, other):
        self._check(other)
        return TensorField(self.chart, self.rank, self.values + other.values)

    def __sub__(self, other):
        self._check(other)
        return TensorField(self.chart, self.rank, self.values - other.values)

    def __mul__(self, c):
        return TensorField(self.chart, self.rank, self.values * c)

    __rmul__ = __mul__

    def __neg__(self):
        return TensorField(self.chart, self.rank, -self.values)

    def _check(self, other):
        if not isinstance(other, TensorField) or other.rank != self.rank or other.chart is not self.chart and other.chart != self.chart:
            raise ValueError("field mismatch: same chart and rank required")


def scalar_field(chart: GridChart, values) -> TensorField:
    return TensorField(chart, "scalar", np.broadcast_to(np.asarray(values, dtype=float), chart.shape).copy())


def one_form_field(chart: GridChart, values) -> TensorField:
    return TensorField(chart, "one_form", np.asarray(values, dtype=float))


def sym2_field(chart: GridChart, full_or_packed: np.ndarray) -> TensorField:
    arr = np.asarray(full_or_packed, dtype=float)
    if arr.shape == chart.shape + (chart.dim, chart.dim):
        arr = pack_sym2(0.5 * (arr + np.swapaxes(arr, -1, -2)))
    return TensorField(chart, "sym2", arr)


class MetricField:
    """A pointwise positive-definite sym2 field with cached inverse and √det."""

    def __init__(self, field: TensorField):
        if field.rank != "sym2":
            raise ValueError("metric must be a sym2 field")
        self.field = field
        self.chart = field.chart
        g = field.full()
        try:
            np.linalg.cholesky(g)
        except np.linalg.LinAlgError as exc:
            raise ValueError("metric is not positive definite at some grid point") from exc
        self.g = g
        self.ginv = np.linalg.inv(g)
        err = np.abs(np.einsum("...ij,...jk->...ik", g, self.ginv) - np.eye(field.dim)).max()
        if err > 1e-12:
            raise ValueError(f"metric inverse cache residual {err:.3e} exceeds 1e-12")
        sign, logdet = np.linalg.slogdet(g)
        if np.any(sign <= 0):
            raise ValueError("metric determinant not positive")
        self.sqrt_det = np.exp(0.5 * logdet)

    @property
    def dim(self) -> int:
        return self.chart.dim

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.g).min())


def metric_from_full(chart: GridChart, g_full: np.ndarray) -> MetricField:
    return MetricField(sym2_field(chart, g_full))


def metric_plus(g: MetricField, h: TensorField, t: float = 1.0) -> MetricField:
    """The metric g + t·h (h sym2).  Fails if positivity is lost."""
    return MetricField(TensorField(g.chart, "sym2", g.field.values + t * h.values))


# ---------------------------------------------------------------------------
# deterministic synthetic fields used throughout the tests and the CLI
# ---------------------------------------------------------------------------

def _trig_basis(chart: GridChart, rng: np.random.Generator, kmax: int,
                mode: str = "product") -> np.ndarray:
    """A random real trigonometric polynomial with per-axis wavenumber <= kmax.

    mode='product' multiplies per-axis factors (generic 3D content);
    mode='axis' lets each term vary along a single random axis, which keeps
    the total wavenumber low (useful for convergence studies).  On
    non-periodic axes, sin modes vanishing at both ends are used so windowed
    fields stay smooth up to the boundary.
    """
    out = np.zeros(chart.shape)
    coords = chart.coordinate_grids()
    nterms = 3 + kmax * chart.dim
    for _ in range(nterms):
        term = np.ones(chart.shape)
        active = range(chart.dim) if mode == "product" \
            else [int(rng.integers(0, chart.dim))]
        for a in active:
            ax = chart.axes[a]
            k = rng.integers(0, kmax + 1)
            phase = rng.uniform(0, 2 * np.pi)
            x = (coords[a] - ax.origin) / ax.length
            if ax.periodic:
                term = term * np.cos(2 * np.pi * k * x + phase)
            else:
                term = term * (np.sin(np.pi * max(k, 1) * x) if k > 0 else 1.0)
        out += rng.normal() * term
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def bump_window(chart: GridChart, lo, hi) -> np.ndarray:
    """Smooth compactly supported window, exactly zero outside the box [lo, hi].

    Product of per-axis exp(1 − 1/(1 − s²)) profiles; C^∞ and flat to all
    orders at the box boundary.
    """
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (chart.dim,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (chart.dim,))
    w = np.ones(chart.shape)
    for a, coord in enumerate(chart.coordinate_grids()):
        c = 0.5 * (lo[a] + hi[a])
        r = 0.5 * (hi[a] - lo[a])
        s = (coord - c) / r
        prof = np.zeros_like(s)
        inside = np.abs(s) < 1.0
        prof[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
        w = w * prof
    return w


def random_scalar(chart: GridChart, seed=0, kmax: int = 1, window=None,
                  mode: str = "product") -> TensorField:
    rng = np.random.default_rng(seed)
    vals = _trig_basis(chart, rng, kmax, mode)
    if window is not None:
        vals = vals * window
    return scalar_field(chart, vals)


def random_one_form(chart: GridChart, seed=0, kmax: int = 1, window=None,
                    mode: str = "product") -> TensorField:
    rng = np.random.default_rng(seed)
    comps = np.stack([_trig_basis(chart, rng, kmax, mode) for _ in range(chart.dim)], axis=-1)
    if window is not None:
        comps = comps * window[..., None]
    return one_form_field(chart, comps)


def random_sym2(chart: GridChart, seed=0, kmax: int = 1, window=None,
                amp: float = 1.0, mode: str = "product") -> TensorField:
    rng = np.random.default_rng(seed)
    d = chart.dim
    comps = np.stack([_trig_basis(chart, rng, kmax, mode) for _ in range(d * (d + 1) // 2)], axis=-1)
    if window is not None:
        comps = comps * window[..., None]
    return TensorField(chart, "sym2", amp * comps)


def random_metric(chart: GridChart, seed=0, amp: float = 0.1, kmax: int = 1,
                  mode: str = "product") -> MetricField:
    """Identity plus a small smooth random sym2 perturbation."""
    pert = random_sym2(chart, seed=seed, kmax=kmax, amp=amp, mode=mode)
    d = chart.dim
    eye = np.broadcast_to(np.eye(d), chart.shape + (d, d)).copy()
    return metric_from_full(chart, eye + unpack_sym2(pert.values, d))
