"""Grid-chart metric catalog: flat tori, truncated flat products, round caps."""

from __future__ import annotations

import numpy as np

from .grid import GridChart, chart_from_spec
from .fields import MetricField, metric_from_full, random_sym2, unpack_sym2

from .grid import VALID_DIMS


def _identity_metric(chart: GridChart) -> MetricField:
    d = chart.dim
    eye = np.broadcast_to(np.eye(d), chart.shape + (d, d)).copy()
    return metric_from_full(chart, eye)


def make_flat_torus(dim: int, lengths, points=16, collar_width: int = 2) -> MetricField:
    """Flat metric on the torus with the given side lengths; all axes periodic."""
    if dim not in VALID_DIMS:
        raise ValueError(f"dim must be one of {VALID_DIMS}")
    lengths = np.broadcast_to(np.asarray(lengths, dtype=float), (dim,))
    if np.any(lengths <= 0):
        raise ValueError("torus lengths must be positive")
    chart = chart_from_spec(lengths, points, periodic=True, collar_width=collar_width)
    return _identity_metric(chart)


def make_flat_product(circle_length: float, box_radius: float, points=12,
                      collar_width: int = 2) -> MetricField:
    """Flat product metric on a truncated R^3 x S^1.

    The circle axis (first) is periodic with length `circle_length`; the three
    spatial axes are collared boxes [-R, R].
    """
    if circle_length <= 0 or box_radius <= 0:
        raise ValueError("circle length and box radius must be positive")
    chart = chart_from_spec(
        lengths=[circle_length, 2 * box_radius, 2 * box_radius, 2 * box_radius],
        points=points,
        periodic=[True, False, False, False],
        collar_width=collar_width,
        origins=[0.0, -box_radius, -box_radius, -box_radius],
    )
    return _identity_metric(chart)


def make_round_cap(radius: float, cap_angle: float = 1.2, points=48,
                   inner_fraction: float = 0.25, collar_width: int = 2) -> MetricField:
    """Geodesic polar annulus on the round 2-sphere of radius a.

    g = dρ² + a² sin²(ρ/a) dφ² on ρ in [inner, a·cap_angle], φ periodic.
    The pole is excluded by construction: charts are collared annuli, so the
    coordinate degeneracy at ρ = 0 never enters.
    """
    a = float(radius)
    if a <= 0:
        raise ValueError("radius must be positive")
    if not (0 < cap_angle < np.pi):
        raise ValueError("cap_angle must lie in (0, pi)")
    rho_max = a * cap_angle
    rho_min = inner_fraction * rho_max
    if rho_min <= 0:
        raise ValueError("chart includes pole: inner radius must be positive")
    points = np.broadcast_to(np.asarray(points, dtype=int), (2,))
    chart = chart_from_spec(
        lengths=[rho_max - rho_min, 2 * np.pi],
        points=points,
        periodic=[False, True],
        collar_width=collar_width,
        origins=[rho_min, 0.0],
    )
    rho = chart.coordinate_grids()[0]
    g = np.zeros(chart.shape + (2, 2))
    g[..., 0, 0] = 1.0
    g[..., 1, 1] = (a * np.sin(rho / a)) ** 2
    return metric_from_full(chart, g)


def make_perturbed_torus(dim: int, lengths, points=16, eps: float = 1e-3,
                         seed: int = 7) -> MetricField:
    """Flat torus plus eps times a smooth sine perturbation (test background)."""
    flat = make_flat_torus(dim, lengths, points)
    pert = random_sym2(flat.chart, seed=seed, kmax=1, amp=eps)
    return metric_from_full(flat.chart, flat.g + unpack_sym2(pert.values, dim))
