"""Christoffel symbols, covariant derivatives, curvature tensors, volume.

Sign conventions (fixed throughout the package):
    R_ijkl = g(∇_i ∇_j ∂_k − ∇_j ∇_i ∂_k, ∂_l)
    Ric_jk = R^i_{ijk}           (unit round 2-sphere: Ric = g, scal = 2)
    Δ = ∇*∇ = −g^{ij}∇²_ij       (nonnegative on the flat torus)

Covariant derivatives compose the one shared first-derivative stencil, and
Christoffel symbols are built from the same discrete partials, so the
discrete compatibility identity ∇g = 0 holds to roundoff, not just O(h²).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridChart
from .fields import (MetricField, TensorField, deriv_axis, partial_all,
                     pack_sym2, scalar_field, one_form_field, sym2_field)


def christoffel(g: MetricField) -> np.ndarray:
    """Γ^k_ij as an array of shape grid + (k, i, j)."""
    chart = g.chart
    dg = partial_all(chart, g.g)           # grid + (i, j, a): ∂_a g_ij
    dg = np.moveaxis(dg, -1, -3)           # grid + (a, i, j): ∂_a g_ij
    # sym_{ijl} = ∂_i g_jl + ∂_j g_il − ∂_l g_ij
    sym = dg + np.swapaxes(dg, -3, -2) - np.moveaxis(dg, -3, -1)
    return 0.5 * np.einsum("...kl,...ijl->...kij", g.ginv, sym)


def covd(chart: GridChart, gamma: np.ndarray, arr: np.ndarray, nidx: int) -> np.ndarray:
    """Covariant derivative of an all-lower-index tensor array.

    arr has shape grid + (d,)*nidx; the result has shape grid + (d,)*(nidx+1)
    with the new derivative index FIRST among the component indices:
    out[..., a, i1..ik] = ∇_a arr_{i1..ik}.
    """
    d = chart.dim
    ngrid = arr.ndim - nidx
    out = np.stack([deriv_axis(chart, arr, a) for a in range(d)], axis=ngrid)
    for slot in range(nidx):
        moved = np.moveaxis(arr, ngrid + slot, -1)            # grid + rest + (l,)
        gam = gamma.reshape(gamma.shape[:ngrid] + (1,) * (nidx - 1) + (d, d, d))
        corr = np.einsum("...lai,...l->...ai", gam, moved)    # grid + rest + (a, i)
        corr = np.moveaxis(corr, -2, ngrid)                   # grid + (a,) + rest + (i,)
        corr = np.moveaxis(corr, -1, ngrid + 1 + slot)        # grid + (a, i1..ik)
        out = out - corr
    return out


@dataclass
class CurvatureBundle:
    """Curvature data of one metric (Riemann optional for scal-only passes)."""

    metric: MetricField
    gamma: np.ndarray
    ricci: np.ndarray              # grid + (d, d)
    scal: np.ndarray               # grid
    riemann: np.ndarray | None     # grid + (d, d, d, d): R_ijkl
    sigma: float                   # Einstein constant estimate scal/n (volume mean)
    einstein_residual: float       # max |Ric − σ g|

    @property
    def chart(self) -> GridChart:
        return self.metric.chart

    def ricci_field(self) -> TensorField:
        return sym2_field(self.chart, self.ricci)

    def scal_field(self) -> TensorField:
        return scalar_field(self.chart, self.scal)


def curvature(g: MetricField, need_riemann: bool = True) -> CurvatureBundle:
    """Populate a CurvatureBundle by composed centered finite differences."""
    chart = g.chart
    d = g.dim
    gamma = christoffel(g)
    # dgamma[..., a, k, i, j] = ∂_a Γ^k_ij
    dgamma = np.stack([deriv_axis(chart, gamma, a) for a in range(d)], axis=-4)

    if need_riemann:
        # R^m_{ijk} = ∂_i Γ^m_jk − ∂_j Γ^m_ik + Γ^m_il Γ^l_jk − Γ^m_jl Γ^l_ik
        r_up = (np.einsum("...imjk->...mijk", dgamma)
                - np.einsum("...jmik->...mijk", dgamma)
                + np.einsum("...mil,...ljk->...mijk", gamma, gamma)
                - np.einsum("...mjl,...lik->...mijk", gamma, gamma))
        riemann = np.einsum("...lm,...mijk->...ijkl", g.g, r_up)
        ricci = np.einsum("...iijk->...jk", r_up)
    else:
        riemann = None
        ricci = (np.einsum("...iijk->...jk", dgamma)
                 - np.einsum("...jiik->...jk", dgamma)
                 + np.einsum("...iil,...ljk->...jk", gamma, gamma)
                 - np.einsum("...ijl,...lik->...jk", gamma, gamma))
    ricci = 0.5 * (ricci + np.swapaxes(ricci, -1, -2))
    scal = np.einsum("...jk,...jk->...", g.ginv, ricci)

    # Einstein-constant estimate and residual on the interior: the collar
    # planes of non-periodic axes carry one-sided stencils and are ghost
    # territory for compactly supported fields.
    interior = chart.interior_mask()
    w = chart.quadrature_weights() * g.sqrt_det
    wi = w * interior
    sigma = float(np.sum(wi * scal) / np.sum(wi)) / d
    eres = float(np.abs((ricci - sigma * g.g) * interior[..., None, None]).max())
    return CurvatureBundle(g, gamma, ricci, scal, riemann, sigma, eres)


def covariant_derivative(g: MetricField, T: TensorField,
                         gamma: np.ndarray | None = None) -> np.ndarray:
    """∇T for a scalar, one-form, or sym2 field.

    Returns the unpacked array grid + (d,)*(rank+1) with the derivative index
    first; reduces to plain partial derivatives on flat metrics.
    """
    if gamma is None:
        gamma = christoffel(g)
    if T.rank == "scalar":
        return covd(T.chart, gamma, T.values, 0)
    if T.rank == "one_form":
        return covd(T.chart, gamma, T.values, 1)
    if T.rank == "sym2":
        return covd(T.chart, gamma, T.full(), 2)
    raise ValueError(f"unsupported rank {T.rank}")


def volume_form(g: MetricField) -> TensorField:
    """The density √det g as a scalar field."""
    return scalar_field(g.chart, g.sqrt_det)


def total_volume(g: MetricField) -> float:
    """∫ √det g over the chart (trapezoid weights, exact on periodic axes)."""
    return float(np.sum(g.chart.quadrature_weights() * g.sqrt_det))


def integrate(g: MetricField, values: np.ndarray) -> float:
    """∫ values dV^g."""
    return float(np.sum(g.chart.quadrature_weights() * g.sqrt_det * values))
