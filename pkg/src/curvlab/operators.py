"""Second-order geometric operators on fields.

All pointwise operators here (δ, δ*, Laplacians, Hessian, R̊, Δ_E, Δ_L) are
compositions of the shared first-derivative stencil through the covariant
machinery in curvature.py.  Matrices for eigensolves are assembled separately
from the energy (Dirichlet-form) discretization, which is symmetric by
construction and has no checkerboard null space.

Conventions:
    δh_j = −g^{ik}∇_i h_{kj},   δω = −g^{ij}∇_i ω_j
    (δ*ω)_ij = ½(∇_i ω_j + ∇_j ω_i)
    Δ = ∇*∇ = −g^{ij}∇²_ij   (all ranks)
    (R̊h)_ij = h^{kl} R_{iklj}
    Δ_E = ∇*∇ − 2R̊
    Δ_H ω = ∇*∇ω + Ric(ω, ·)          (Weitzenböck)
    Δ_L h = ∇*∇h − 2R̊h + Ric∘h + h∘Ric   (= Δ_E + 2σ on Einstein backgrounds)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import GridChart
from .fields import (MetricField, TensorField, pack_sym2, unpack_sym2,
                     scalar_field, one_form_field, sym2_field)
from .curvature import CurvatureBundle, curvature, covd

BC_TAGS = ("periodic", "dirichlet", "neumann")


class OperatorContext:
    """A metric, its curvature, quadrature weights and lazily built matrices."""

    def __init__(self, g: MetricField, bundle: CurvatureBundle | None = None,
                 bc: str = "periodic"):
        if bc not in BC_TAGS:
            raise ValueError(f"bc must be one of {BC_TAGS}")
        self.g = g
        self.chart = g.chart
        self.curv = bundle if bundle is not None else curvature(g)
        self.bc = bc
        self.weights = self.chart.quadrature_weights() * g.sqrt_det
        self._matrices: dict = {}
        self._lock = threading.Lock()

    @property
    def dim(self) -> int:
        return self.g.dim

    @property
    def sigma(self) -> float:
        return self.curv.sigma

    @property
    def gamma(self) -> np.ndarray:
        return self.curv.gamma

    def is_einstein(self, tol: float = 1e-6) -> bool:
        scale = max(1.0, float(np.abs(self.curv.ricci).max()))
        return self.curv.einstein_residual <= tol * scale

    # -- pointwise algebra --------------------------------------------------

    def ip(self, A: TensorField, B: TensorField) -> np.ndarray:
        """Pointwise metric inner product ⟨A, B⟩ (a scalar array)."""
        if A.rank != B.rank:
            raise ValueError("rank mismatch in inner product")
        gi = self.g.ginv
        if A.rank == "scalar":
            return A.values * B.values
        if A.rank == "one_form":
            return np.einsum("...ij,...i,...j->...", gi, A.values, B.values)
        a, b = A.full(), B.full()
        return np.einsum("...ik,...jl,...ij,...kl->...", gi, gi, a, b)

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(self.weights * values))

    def inner_l2(self, A: TensorField, B: TensorField) -> float:
        return self.integrate(self.ip(A, B))

    def norm_l2(self, A: TensorField) -> float:
        return float(np.sqrt(max(self.inner_l2(A, A), 0.0)))

    def trace(self, h: TensorField) -> TensorField:
        return scalar_field(self.chart, np.einsum("...ij,...ij->...", self.g.ginv, h.full()))

    def tracefree(self, h: TensorField) -> TensorField:
        tr = np.einsum("...ij,...ij->...", self.g.ginv, h.full())
        return sym2_field(self.chart, h.full() - tr[..., None, None] / self.dim * self.g.g)

    def compose(self, h: TensorField, k: TensorField) -> TensorField:
        """h∘k: composition as endomorphisms via index raising, symmetrized."""
        hk = np.einsum("...ia,...ab,...bj->...ij", h.full(), self.g.ginv, k.full())
        return sym2_field(self.chart, hk)

    def volume(self) -> float:
        return float(np.sum(self.weights))


def make_context(g: MetricField, bc: str = "periodic") -> OperatorContext:
    return OperatorContext(g, bc=bc)


# ---------------------------------------------------------------------------
# first-order operators
# ---------------------------------------------------------------------------

def gradient(ctx: OperatorContext, f: TensorField) -> TensorField:
    if f.rank != "scalar":
        raise ValueError("gradient acts on scalars")
    return one_form_field(ctx.chart, covd(ctx.chart, ctx.gamma, f.values, 0))


def divergence(ctx: OperatorContext, T: TensorField) -> TensorField:
    """δ: sym2 → one-form, one-form → scalar (paper sign convention)."""
    if T.rank == "sym2":
        nab = covd(ctx.chart, ctx.gamma, T.full(), 2)       # (a, i, j)
        vals = -np.einsum("...ai,...aij->...j", ctx.g.ginv, nab)
        return one_form_field(ctx.chart, vals)
    if T.rank == "one_form":
        nab = covd(ctx.chart, ctx.gamma, T.values, 1)       # (a, i)
        return scalar_field(ctx.chart, -np.einsum("...ai,...ai->...", ctx.g.ginv, nab))
    raise ValueError("divergence defined for sym2 and one-form fields")


def delta_star(ctx: OperatorContext, omega: TensorField) -> TensorField:
    """(δ*ω)_ij = ½(∇_i ω_j + ∇_j ω_i)."""
    if omega.rank != "one_form":
        raise ValueError("delta_star acts on one-forms")
    nab = covd(ctx.chart, ctx.gamma, omega.values, 1)       # (a, i) = ∇_a ω_i
    return sym2_field(ctx.chart, 0.5 * (nab + np.swapaxes(nab, -1, -2)))


def conformal_killing(ctx: OperatorContext, omega: TensorField) -> TensorField:
    """𝒟ω = δ*ω − (tr δ*ω / n) g, the trace-free symmetrized derivative."""
    ds = delta_star(ctx, omega)
    return ctx.tracefree(ds)


def lie_derivative_metric(ctx: OperatorContext, omega: TensorField) -> TensorField:
    """L_X g for X = ω♯, i.e. 2 δ*ω."""
    return 2.0 * delta_star(ctx, omega)


# ---------------------------------------------------------------------------
# second-order operators
# ---------------------------------------------------------------------------

def second_covariant(ctx: OperatorContext, T: TensorField) -> np.ndarray:
    """∇²T as an array grid + (a, b, components...)."""
    nidx = {"scalar": 0, "one_form": 1, "sym2": 2}[T.rank]
    arr = T.values if T.rank != "sym2" else T.full()
    first = covd(ctx.chart, ctx.gamma, arr, nidx)
    return covd(ctx.chart, ctx.gamma, first, nidx + 1)


def laplacian(ctx: OperatorContext, T: TensorField) -> TensorField:
    """Rough (connection) Laplacian ∇*∇ = −g^{ab}∇²_ab, any supported rank."""
    nab2 = second_covariant(ctx, T)
    if T.rank == "scalar":
        vals = -np.einsum("...ab,...ab->...", ctx.g.ginv, nab2)
        return scalar_field(ctx.chart, vals)
    if T.rank == "one_form":
        vals = -np.einsum("...ab,...abi->...i", ctx.g.ginv, nab2)
        return one_form_field(ctx.chart, vals)
    vals = -np.einsum("...ab,...abij->...ij", ctx.g.ginv, nab2)
    return sym2_field(ctx.chart, vals)


def hessian(ctx: OperatorContext, f: TensorField) -> TensorField:
    """∇²f as a sym2 field (exactly symmetric by construction)."""
    if f.rank != "scalar":
        raise ValueError("hessian acts on scalars")
    nab2 = second_covariant(ctx, f)
    return sym2_field(ctx.chart, nab2)


def hodge_laplacian(ctx: OperatorContext, omega: TensorField) -> TensorField:
    """Δ_H on one-forms via the Weitzenböck identity Δ_H = ∇*∇ + Ric."""
    rough = laplacian(ctx, omega)
    ric_om = np.einsum("...ij,...jk,...k->...i", ctx.curv.ricci, ctx.g.ginv, omega.values)
    return one_form_field(ctx.chart, rough.values + ric_om)


def ring_R(ctx: OperatorContext, h: TensorField) -> TensorField:
    """(R̊h)_ij = h^{kl} R_{iklj}; output symmetrized to sym2 storage."""
    if ctx.curv.riemann is None:
        raise ValueError("context curvature lacks the Riemann tensor")
    h_up = np.einsum("...ka,...lb,...ab->...kl", ctx.g.ginv, ctx.g.ginv, h.full())
    vals = np.einsum("...kl,...ikLj->...ij".replace("L", "l"), h_up, ctx.curv.riemann)
    return sym2_field(ctx.chart, vals)


def einstein_op(ctx: OperatorContext, h: TensorField) -> TensorField:
    """Δ_E h = ∇*∇h − 2 R̊h."""
    return laplacian(ctx, h) - 2.0 * ring_R(ctx, h)


def lichnerowicz(ctx: OperatorContext, h: TensorField) -> TensorField:
    """Δ_L h = ∇*∇h − 2R̊h + Ric∘h + h∘Ric (general backgrounds)."""
    ric = sym2_field(ctx.chart, ctx.curv.ricci)
    cross = ctx.compose(ric, h).full() + ctx.compose(h, ric).full()
    return sym2_field(ctx.chart, einstein_op(ctx, h).full() + cross)


# ---------------------------------------------------------------------------
# discrete TT projection
# ---------------------------------------------------------------------------

@dataclass
class TTReport:
    converged: bool
    iterations: int
    rel_residual: float
    div_residual: float
    trace_residual: float


class TTProjector:
    """L²-orthogonal projector onto discrete TT tensors with optional support mask.

    Solves the conformal-Killing-Laplacian system δ(M 𝒟 ω) = δ(h − (tr h/n) g)
    by conjugate directions (diagonal/none preconditioning), then returns
    h_tt = M(h − (tr h/n)g) − M 𝒟ω, which is exactly trace-free and has
    divergence equal to the solver residual.
    """

    def __init__(self, ctx: OperatorContext, mask: np.ndarray | None = None,
                 tol: float = 1e-10, max_iter: int = 4000):
        self.ctx = ctx
        if mask is None:
            mask = ctx.chart.interior_mask() if ctx.bc == "dirichlet" \
                else np.ones(ctx.chart.shape, dtype=bool)
        self.mask = mask
        self.tol = tol
        self.max_iter = max_iter
        self._warm: np.ndarray | None = None

    def _apply(self, om_vals: np.ndarray) -> np.ndarray:
        ctx = self.ctx
        om = one_form_field(ctx.chart, om_vals)
        dk = conformal_killing(ctx, om)
        dk_m = TensorField(ctx.chart, "sym2", dk.values * self.mask[..., None])
        return divergence(ctx, dk_m).values

    def _dot(self, a: np.ndarray, b: np.ndarray) -> float:
        w = self.ctx.weights
        gi = self.ctx.g.ginv
        return float(np.sum(w * np.einsum("...ij,...i,...j->...", gi, a, b)))

    def solve_gauge(self, rhs: np.ndarray, warm_start: bool = True,
                    atol: float = 0.0):
        """CG for δ(M𝒟ω) = rhs; returns (ω values, iterations, rel residual).

        Stops at residual ≤ max(tol·‖rhs‖, atol); tracks the best iterate so a
        stalled run on a nearly consistent system still returns its optimum.
        """
        x = np.zeros_like(rhs)
        if warm_start and self._warm is not None and self._warm.shape == rhs.shape:
            x = self._warm.copy()
        r = rhs - self._apply(x)
        p = r.copy()
        rr = self._dot(r, r)
        nrm = np.sqrt(self._dot(rhs, rhs))
        target = max(self.tol * nrm, atol)
        if nrm == 0.0 or nrm <= atol:
            return x * 0.0, 0, 0.0
        best_x, best_rr = x.copy(), rr
        it = 0
        while it < self.max_iter and np.sqrt(rr) > target:
            ap = self._apply(p)
            pap = self._dot(p, ap)
            if pap <= 0:
                break
            alpha = rr / pap
            x += alpha * p
            r -= alpha * ap
            rr_new = self._dot(r, r)
            if rr_new < best_rr:
                best_rr, best_x = rr_new, x.copy()
            if rr_new > 1e8 * max(best_rr, 1e-300):
                break
            p = r + (rr_new / rr) * p
            rr = rr_new
            it += 1
        self._warm = best_x.copy()
        return best_x, it, float(np.sqrt(best_rr) / nrm)

    def project(self, h: TensorField, warm_start: bool = True):
        """h → (h_tt, ω, u, TTReport) with h = u g + δ*ω + h_tt on the mask."""
        ctx = self.ctx
        tr = ctx.trace(h).values
        h_ring = sym2_field(ctx.chart, (h.full() - tr[..., None, None] / ctx.dim * ctx.g.g)
                            * self.mask[..., None, None])
        rhs = divergence(ctx, h_ring).values
        scale_h = ctx.norm_l2(h)
        om_vals, it, rel = self.solve_gauge(rhs, warm_start=warm_start,
                                            atol=self.tol * scale_h)
        om = one_form_field(ctx.chart, om_vals)
        dk = conformal_killing(ctx, om)
        h_tt = sym2_field(ctx.chart, (h_ring.full() - dk.full()) * self.mask[..., None, None])
        delta_om = divergence(ctx, om).values
        u = scalar_field(ctx.chart, (tr + delta_om) / ctx.dim * self.mask)
        div_res = ctx.norm_l2(divergence(ctx, h_tt))
        tr_res = float(np.abs(ctx.trace(h_tt).values).max())
        scale = max(scale_h, 1e-300)
        rep = TTReport(converged=div_res <= 100 * self.tol * scale, iterations=it,
                       rel_residual=rel, div_residual=div_res / scale,
                       trace_residual=tr_res)
        return h_tt, om, u, rep


def tt_project(ctx: OperatorContext, h: TensorField, mask: np.ndarray | None = None,
               tol: float = 1e-10):
    """One-shot TT decomposition h = u·g + δ*ω + h_tt.

    Raises RuntimeError on solver non-convergence, reporting the residual.
    """
    proj = TTProjector(ctx, mask=mask, tol=tol)
    h_tt, om, u, rep = proj.project(h, warm_start=False)
    if not rep.converged:
        raise RuntimeError(f"TT projection solver did not converge: "
                           f"relative residual {rep.rel_residual:.3e} after {rep.iterations} iterations")
    return h_tt, om, u, rep


# ---------------------------------------------------------------------------
# commutation identities (§ standard formulas on Einstein backgrounds)
# ---------------------------------------------------------------------------

def commutation_check(ctx: OperatorContext, nsamples: int = 3, seed: int = 11,
                      einstein_tol: float = 1e-4) -> dict:
    """Max residuals of tr∘Δ_E, δ∘Δ_E and Δ_E(fg) identities on random fields.

    Rejects non-Einstein backgrounds (Ricci residual above threshold).
    """
    from .fields import random_sym2, random_scalar

    scale = max(1.0, float(np.abs(ctx.curv.ricci).max()))
    if ctx.curv.einstein_residual > einstein_tol * max(scale, 1.0):
        raise ValueError(
            f"commutation_check requires an Einstein background; "
            f"Ricci residual {ctx.curv.einstein_residual:.3e}")
    sig = ctx.sigma
    res = {"trace": 0.0, "divergence": 0.0, "conformal": 0.0}
    # The identities are pointwise, so smooth non-compact samples are fine;
    # residuals are measured on a fixed interior window (15% off each
    # non-periodic end) where composed stencils are uniformly second order.
    sel = interior_window(ctx.chart, fraction=0.15)
    for s in range(nsamples):
        h = random_sym2(ctx.chart, seed=seed + s, kmax=1)
        f = random_scalar(ctx.chart, seed=seed + 50 + s, kmax=1)
        eh = einstein_op(ctx, h)
        # tr ∘ Δ_E = (Δ − 2σ) ∘ tr
        lhs = ctx.trace(eh).values
        rhs = laplacian(ctx, ctx.trace(h)).values - 2 * sig * ctx.trace(h).values
        res["trace"] = max(res["trace"], _relmax((lhs - rhs) * sel, rhs))
        # δ ∘ Δ_E = (Δ_H − 2σ) ∘ δ
        lhs1 = divergence(ctx, eh).values
        dh = divergence(ctx, h)
        rhs1 = hodge_laplacian(ctx, dh).values - 2 * sig * dh.values
        res["divergence"] = max(res["divergence"], _relmax((lhs1 - rhs1) * sel[..., None], rhs1))
        # Δ_E(f g) = (Δf − 2σf) g
        fg = sym2_field(ctx.chart, f.values[..., None, None] * ctx.g.g)
        lhs2 = einstein_op(ctx, fg).full()
        rhs2 = (laplacian(ctx, f).values - 2 * sig * f.values)[..., None, None] * ctx.g.g
        res["conformal"] = max(res["conformal"],
                               _relmax((lhs2 - rhs2) * sel[..., None, None], rhs2))
    return res


def _relmax(diff: np.ndarray, ref: np.ndarray) -> float:
    den = max(float(np.abs(ref).max()), 1e-12)
    return float(np.abs(diff).max()) / den


def interior_window(chart: GridChart, fraction: float = 0.15) -> np.ndarray:
    """Mask excluding a fixed coordinate fraction at each non-periodic end.

    Unlike a fixed cell-count margin this window is resolution independent,
    so residuals measured on it exhibit the scheme's clean interior order.
    """
    mask = np.ones(chart.shape, dtype=bool)
    coords = chart.coordinate_grids()
    for a, ax in enumerate(chart.axes):
        if ax.periodic:
            continue
        lo = ax.origin + fraction * ax.length
        hi = ax.origin + (1.0 - fraction) * ax.length
        mask &= (coords[a] >= lo) & (coords[a] <= hi)
    return mask


def interior_bump(chart: GridChart) -> np.ndarray:
    """Smooth bump supported strictly inside all non-periodic collars.

    Equals 1-ish in the middle of the chart; returns an all-ones array when
    every axis is periodic.
    """
    w = np.ones(chart.shape)
    coords = chart.coordinate_grids()
    for a, ax in enumerate(chart.axes):
        if ax.periodic:
            continue
        pad = (chart.collar_width + 1) * ax.spacing
        c = ax.origin + 0.5 * ax.length
        r = 0.5 * ax.length - pad
        s = (coords[a] - c) / r
        prof = np.zeros_like(s)
        inside = np.abs(s) < 1.0
        prof[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
        w = w * prof
    return w


# ---------------------------------------------------------------------------
# energy-form matrix assembly (for eigensolves and Neumann solves)
# ---------------------------------------------------------------------------

def _axis_matrices(chart: GridChart, a: int):
    """Forward-difference (edges) and centered (nodes) 1D derivative matrices."""
    ax = chart.axes[a]
    n, h = ax.points, ax.spacing
    if ax.periodic:
        E = sp.diags([-np.ones(n), np.ones(n - 1), [1.0]], [0, 1, -(n - 1)],
                     shape=(n, n), format="csr") / h
        # averaging nodes -> edges
        A = sp.diags([0.5 * np.ones(n), 0.5 * np.ones(n - 1), [0.5]], [0, 1, -(n - 1)],
                     shape=(n, n), format="csr")
        C = sp.diags([0.5 * np.ones(n - 1), -0.5 * np.ones(n - 1), [-0.5], [0.5]],
                     [1, -1, n - 1, -(n - 1)], shape=(n, n), format="csr") / h
    else:
        E = sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n),
                     format="csr") / h
        A = sp.diags([0.5 * np.ones(n - 1), 0.5 * np.ones(n - 1)], [0, 1],
                     shape=(n - 1, n), format="csr")
        rows = ([0, 0, 0] + [i for i in range(1, n - 1) for _ in (0, 1)]
                + [n - 1, n - 1, n - 1])
        cols = ([0, 1, 2] + [j for i in range(1, n - 1) for j in (i - 1, i + 1)]
                + [n - 3, n - 2, n - 1])
        vals = ([-1.5, 2.0, -0.5] + [v for _ in range(1, n - 1) for v in (-0.5, 0.5)]
                + [0.5, -2.0, 1.5])
        C = sp.csr_matrix((np.array(vals) / h, (rows, cols)), shape=(n, n))
    return E, A, C


def _kron_chain(mats):
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out


def assemble_stiffness(ctx: OperatorContext, bc: str) -> tuple[sp.csr_matrix, sp.csr_matrix, np.ndarray]:
    """Energy-form stiffness K and lumped mass B for Δ on functions.

    K[u,v] ≈ ∫ g^{ab} ∂_a u ∂_b v √g dx, B = diag(quadrature × √g).
    Neumann is natural; Dirichlet restricts to interior nodes (an index array
    of retained dofs is returned; for periodic/neumann it is all nodes).
    """
    key = ("stiffness", bc)
    with ctx._lock:
        if key in ctx._matrices:
            return ctx._matrices[key]
    chart = ctx.chart
    d = chart.dim
    shape = chart.shape
    n_all = chart.npoints
    wq = chart.quadrature_weights()
    coeff = ctx.g.ginv * ctx.g.sqrt_det[..., None, None]

    eyes = [sp.identity(shape[i], format="csr") for i in range(d)]
    cents = []
    for a in range(d):
        _, _, Ca = _axis_matrices(chart, a)
        cents.append(_kron_chain([Ca if i == a else eyes[i] for i in range(d)]))
    K = sp.csr_matrix((n_all, n_all))
    for a in range(d):
        Ea, Aa, _ = _axis_matrices(chart, a)
        D = _kron_chain([Ea if i == a else eyes[i] for i in range(d)])
        Av = _kron_chain([Aa if i == a else eyes[i] for i in range(d)])
        # transverse trapezoid weight at each node (drop this axis' factor)
        ax = chart.axes[a]
        wa = np.full(ax.points, ax.spacing)
        if not ax.periodic:
            wa[0] *= 0.5
            wa[-1] *= 0.5
        sh = [1] * d
        sh[a] = ax.points
        transverse = wq / wa.reshape(sh)
        c_edge = ax.spacing * (Av @ (coeff[..., a, a] * transverse).ravel())
        K = K + D.T @ sp.diags(c_edge) @ D
        for b in range(d):
            if b == a:
                continue
            K = K + cents[a].T @ sp.diags((coeff[..., a, b] * wq).ravel()) @ cents[b]
    B = sp.diags((wq * ctx.g.sqrt_det).ravel()).tocsr()

    if bc == "dirichlet":
        interior = np.flatnonzero(chart.interior_mask(margin=1).ravel())
        K = K[interior][:, interior].tocsr()
        B = B[interior][:, interior].tocsr()
        dofs = interior
    else:
        dofs = np.arange(n_all)
    K = (0.5 * (K + K.T)).tocsr()
    with ctx._lock:
        ctx._matrices[key] = (K, B, dofs)
    return K, B, dofs


def assemble_pointwise(ctx: OperatorContext, op, rank: str, max_dofs: int = 20000):
    """Materialize the sparse matrix of a pointwise operator by probing.

    Only for small charts (verification of the matrix/operator consistency
    invariant); columns are unit fields.
    """
    from .fields import ncomp
    chart = ctx.chart
    nc = 1 if rank == "scalar" else ncomp(rank, chart.dim)
    n = chart.npoints * nc
    if n > max_dofs:
        raise ValueError(f"probing assembly limited to {max_dofs} dofs, got {n}")
    cols = []
    for j in range(n):
        v = np.zeros(n)
        v[j] = 1.0
        if rank == "scalar":
            fld = scalar_field(chart, v.reshape(chart.shape))
        else:
            fld = TensorField(chart, rank, v.reshape(chart.shape + (nc,)))
        cols.append(op(ctx, fld).values.reshape(-1))
    return sp.csr_matrix(np.stack(cols, axis=1))
