"""Prescribed scalar curvature machinery: the minimal-norm double-divergence
solver, the h± null splitting, the second-order solve, and the contraction
iteration that deforms a metric to scal^{g_t} = scal^g + t²f_t/2 while
preserving the volume form.

The iteration state is advanced by the exact-residual form of the update
equations: with Model(h,k) := Dscal(k) + D²scal(h,h) evaluated by the
analytic formulas,

    S^{(i)} := 2[scal(g^{(i)}_t) − scal(g) − Model(h^{(i)}, k^{(i)})]
    V^{(i)} := 2[U^{(i)} − 1] − (tr k^{(i)} − |h^{(i)}|²)
    tr k^{(i+1)} = |h^{(i+1)}|² − V^{(i)}
    δδ k̊^{(i+1)} = t²f_t/2 − S^{(i)}/2 − D²scal(h^{(i+1)}) − Dscal((tr k^{(i+1)}/n) g)

and λ^{(i+1)} solves the integrated update equation, which is an exact
quadratic in λ (fitted from three evaluations, root nearest 0 taken).  At a
fixed point these definitions telescope, so the final scal and volume-form
residuals are limited only by the Q-solver tolerance and the stopping
threshold, not by the spatial discretization.

Fields are exchanged with the solver as plain component arrays; the sector
object (a grid OperatorContext wrapper here, a cohomogeneity-one reduction in
cohomo.py) provides all geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import MetricField, TensorField, scalar_field, sym2_field, unpack_sym2, pack_sym2
from .curvature import curvature, covd
from .operators import (OperatorContext, divergence, delta_star, laplacian,
                        hessian, einstein_op, TTProjector)
from .variations import d_scal, d2_scal


# ---------------------------------------------------------------------------
# weighted norms (§ boundary-weighted Sobolev diagnostics)
# ---------------------------------------------------------------------------

@dataclass
class WeightSpec:
    """Defining function and weights for the boundary-weighted Sobolev norms.

    x is a smoothed distance to the boundary of the box Ω = [lo, hi];
    φ = x², θ = e^{−1/x}, ψ = x^{2(a−n/2)} e^{−s/x}.
    """

    chart: object
    lo: tuple
    hi: tuple
    a: int
    s: float = 1.0

    def __post_init__(self):
        n = self.chart.dim
        if self.a < n:
            raise ValueError("weight parameter a must be >= n")
        if self.s <= 0:
            raise ValueError("weight parameter s must be positive")
        lo = np.broadcast_to(np.asarray(self.lo, dtype=float), (n,))
        hi = np.broadcast_to(np.asarray(self.hi, dtype=float), (n,))
        coords = self.chart.coordinate_grids()
        beta = 8.0 / min(hi - lo)
        acc = np.zeros(self.chart.shape)
        for axis in range(n):
            d1 = coords[axis] - lo[axis]
            d2 = hi[axis] - coords[axis]
            acc += np.exp(-beta * d1) + np.exp(-beta * d2)
        x = -np.log(np.clip(acc, 1e-300, None)) / beta
        self.x = np.clip(x, 0.0, None)
        inside = self.x > 1e-10
        self.phi = self.x ** 2
        self.theta = np.where(inside, np.exp(-1.0 / np.where(inside, self.x, 1.0)), 0.0)
        self.psi = np.where(inside,
                            self.x ** (2 * (self.a - n / 2.0)) *
                            np.exp(-self.s / np.where(inside, self.x, 1.0)), 0.0)


def weighted_norm(ctx: OperatorContext, u: TensorField, k: int, w: WeightSpec) -> float:
    """The weighted Sobolev norm (∫ Σ_{i≤k} φ^{2i}|∇^i u|² ψ² dV)^{1/2}."""
    if k > 4:
        raise ValueError("weighted norms implemented for k <= 4")
    gi = ctx.g.ginv
    arr = u.values if u.rank != "sym2" else u.full()
    nidx = {"scalar": 0, "one_form": 1, "sym2": 2}[u.rank]
    total = np.zeros(ctx.chart.shape)
    for i in range(k + 1):
        sq = arr ** 2 if nidx == 0 else _full_contraction(gi, arr, nidx)
        total += w.phi ** (2 * i) * sq
        arr = covd(ctx.chart, ctx.gamma, arr, nidx)
        nidx += 1
    return float(np.sqrt(max(ctx.integrate(total * w.psi ** 2), 0.0)))


def _full_contraction(gi: np.ndarray, arr: np.ndarray, nidx: int) -> np.ndarray:
    """|T|² for an all-lower tensor array with nidx component axes."""
    raised = arr
    for slot in range(nidx):
        raised = np.moveaxis(raised, raised.ndim - nidx + slot, -1)
        raised = np.einsum("...ij,...j->...i", gi, raised)
        raised = np.moveaxis(raised, -1, raised.ndim - nidx + slot)
    axes = tuple(range(arr.ndim - nidx, arr.ndim))
    return np.einsum(arr, list(range(arr.ndim)), raised, list(range(arr.ndim)),
                     list(range(arr.ndim - nidx)))


# ---------------------------------------------------------------------------
# minimal-norm double-divergence solver (the discrete Q)
# ---------------------------------------------------------------------------

@dataclass
class QSolveInfo:
    iterations: int
    rel_residual: float
    mean_rejected: float


class DoubleDivSolver:
    """Minimal-L²-norm solution of δ(δU) = f with U trace-free (variant
    'tracefree', P* the trace-free Hessian) or unconstrained trace (variant
    'full', P* the full Hessian; Ricci-flat no-volume-constraint setting).

    U = P*w with (P P*)w = f solved by (optionally FFT-preconditioned)
    conjugate gradients; U ⟂ ker(δδ) by construction, which is minimality.
    A kernel check (smallest Rayleigh quotient of PP* on mean-zero functions)
    guards against the warped-product obstruction: on a flat chart with a
    proper sub-box mask the kernel picks up locally affine/concircular
    functions and the solve is refused.
    """

    def __init__(self, ctx: OperatorContext, mask: np.ndarray | None = None,
                 variant: str = "tracefree", tol: float = 1e-10,
                 max_iter: int = 6000, kernel_threshold: float = 1e-6):
        if variant not in ("tracefree", "full"):
            raise ValueError("variant must be 'tracefree' or 'full'")
        self.ctx = ctx
        self.variant = variant
        self.mask = np.ones(ctx.chart.shape, dtype=bool) if mask is None else mask
        self.tol = tol
        self.max_iter = max_iter
        self.kernel_threshold = kernel_threshold
        self._is_flat_periodic = (
            all(ax.periodic for ax in ctx.chart.axes)
            and float(np.abs(ctx.g.g - np.eye(ctx.dim)).max()) < 1e-13)
        self._fft_symbol = self._build_fft_symbol() if self._is_flat_periodic else None

    # -- operators ----------------------------------------------------------

    def p_star(self, w_vals: np.ndarray) -> np.ndarray:
        """Masked (trace-free) Hessian of a function, as a full sym2 array."""
        ctx = self.ctx
        hess = covd(ctx.chart, ctx.gamma, covd(ctx.chart, ctx.gamma, w_vals, 0), 1)
        if self.variant == "tracefree":
            tr = np.einsum("...ij,...ij->...", ctx.g.ginv, hess)
            hess = hess - tr[..., None, None] / ctx.dim * ctx.g.g
        return hess * self.mask[..., None, None]

    def p_apply(self, u_full: np.ndarray) -> np.ndarray:
        ctx = self.ctx
        return divergence(ctx, divergence(ctx, sym2_field(ctx.chart, u_full))).values

    def _a_apply(self, w_vals: np.ndarray) -> np.ndarray:
        return self.p_apply(self.p_star(w_vals))

    def _dot(self, a, b) -> float:
        return float(np.sum(self.ctx.weights * a * b))

    def _build_fft_symbol(self):
        chart = self.ctx.chart
        n = self.ctx.dim
        ks = []
        for a, ax in enumerate(chart.axes):
            k = 2 * np.pi * np.fft.fftfreq(ax.points, d=ax.spacing)
            # composed centered first derivative symbol: i sin(k h)/h
            ks.append(np.sin(k * ax.spacing) / ax.spacing)
        grids = np.meshgrid(*ks, indexing="ij")
        k2 = sum(gr ** 2 for gr in grids)
        factor = (1.0 - 1.0 / n) if self.variant == "tracefree" else 1.0
        sym = factor * k2 ** 2
        sym[sym < 1e-12] = 1.0
        return sym

    def _precond(self, r: np.ndarray) -> np.ndarray:
        if self._fft_symbol is None:
            return r
        return np.real(np.fft.ifftn(np.fft.fftn(r) / self._fft_symbol))

    # -- kernel check ---------------------------------------------------------

    def kernel_check(self, seed: int = 0, iters: int = 60) -> dict:
        """Smallest Rayleigh quotient of PP* over mean-zero functions.

        The scale is the median quotient of random probes; the check fails
        (warped-product obstruction) when the minimum is below
        (kernel_threshold)² relative to that scale.
        """
        ctx = self.ctx
        rng = np.random.default_rng(seed)
        w = ctx.weights
        vol = float(np.sum(w))

        def project(v):
            return v - np.sum(w * v) / vol

        probes = []
        for _ in range(4):
            v = project(rng.standard_normal(ctx.chart.shape))
            probes.append(self._dot(self._a_apply(v), v) / self._dot(v, v))
        scale = float(np.median(probes))
        x = project(rng.standard_normal(ctx.chart.shape))
        x /= np.sqrt(self._dot(x, x))
        p = None
        rho = None
        for _ in range(iters):
            ax_ = self._a_apply(x)
            rho = self._dot(ax_, x)
            r = project(ax_ - rho * x)
            basis = [x, r] if p is None else [x, r, p]
            ortho = []
            for b in basis:
                v = b.copy()
                for o in ortho:
                    v = v - self._dot(v, o) * o
                nv = np.sqrt(self._dot(v, v))
                if nv > 1e-12:
                    ortho.append(v / nv)
            m = len(ortho)
            if m == 1:
                break
            A = np.zeros((m, m))
            applied = [self._a_apply(b) for b in ortho]
            for i in range(m):
                for j in range(m):
                    A[i, j] = self._dot(applied[i], ortho[j])
            A = 0.5 * (A + A.T)
            vals, vecs = np.linalg.eigh(A)
            xn = project(sum(c * b for c, b in zip(vecs[:, 0], ortho)))
            nn = np.sqrt(self._dot(xn, xn))
            if nn < 1e-14:
                break
            xn /= nn
            p = xn - self._dot(xn, x) * x
            npn = np.sqrt(self._dot(p, p))
            p = p / npn if npn > 1e-12 else None
            x = xn
        ok = rho >= (self.kernel_threshold ** 2) * max(scale, 1e-300)
        return {"lambda_min": float(rho), "scale": scale, "passed": bool(ok)}

    # -- solve ----------------------------------------------------------------

    def solve(self, f: np.ndarray, check_kernel: bool = False,
              seed: int = 0) -> tuple[np.ndarray, QSolveInfo]:
        """Return the minimal-norm U (full sym2 array) with δδU = f.

        Raises on mean-nonzero f or (optionally) on a failed kernel check.
        """
        ctx = self.ctx
        w = ctx.weights
        f = np.asarray(f, dtype=float)
        mean = float(np.sum(w * f))
        l1 = float(np.sum(w * np.abs(f)))
        if abs(mean) > 1e-10 * max(l1, 1e-300):
            raise ValueError(f"double-divergence data must have zero mean: "
                             f"∫f dV = {mean:.3e} vs ‖f‖₁ = {l1:.3e}")
        if check_kernel:
            kc = self.kernel_check(seed=seed)
            if not kc["passed"]:
                raise ValueError(
                    "kernel check failed (warped-product obstruction): "
                    f"lambda_min = {kc['lambda_min']:.3e}, scale = {kc['scale']:.3e}")
        vol = float(np.sum(w))
        rhs = f - mean / vol
        n0 = np.sqrt(self._dot(rhs, rhs))
        if n0 == 0.0:
            return np.zeros(ctx.chart.shape + (ctx.dim, ctx.dim)), QSolveInfo(0, 0.0, mean)
        x = np.zeros_like(rhs)
        r = rhs.copy()
        z = self._precond(r)
        p = z.copy()
        rz = self._dot(r, z)
        best_x, best_rr = x.copy(), self._dot(r, r)
        it = 0
        while it < self.max_iter and np.sqrt(self._dot(r, r)) > self.tol * n0:
            ap = self._a_apply(p)
            pap = self._dot(p, ap)
            if pap <= 0:
                break
            alpha = rz / pap
            x += alpha * p
            r -= alpha * ap
            rr = self._dot(r, r)
            if rr < best_rr:
                best_rr, best_x = rr, x.copy()
            if rr > 1e8 * max(best_rr, 1e-300):
                break
            z = self._precond(r)
            rz_new = self._dot(r, z)
            p = z + (rz_new / rz) * p
            rz = rz_new
            it += 1
        u = self.p_star(best_x)
        res = self.p_apply(u) - rhs
        rel = float(np.sqrt(self._dot(res, res)) / n0)
        return u, QSolveInfo(it, rel, mean)


def min_norm_double_div_solve(ctx: OperatorContext, f: TensorField,
                              mask: np.ndarray | None = None,
                              variant: str = "tracefree",
                              check_kernel: bool = True,
                              tol: float = 1e-10) -> tuple[TensorField, QSolveInfo]:
    """Spec-level wrapper: trace-free U with δδU = f, minimal L² norm."""
    solver = DoubleDivSolver(ctx, mask=mask, variant=variant, tol=tol)
    u, info = solver.solve(f.values, check_kernel=check_kernel)
    if info.rel_residual > 1e-8:
        raise RuntimeError(f"double-divergence solver stagnated: "
                           f"relative residual {info.rel_residual:.3e}")
    return sym2_field(ctx.chart, u), info


# ---------------------------------------------------------------------------
# Q form and the h± null splitting
# ---------------------------------------------------------------------------

def q_form(sector, k1, k2) -> float:
    """Q(k₁,k₂) = ∫⟨Δ_E k₁, k₂⟩ dV (sector-agnostic)."""
    return sector.q_form(k1, k2)


@dataclass
class SplitPair:
    h_plus: np.ndarray
    h_minus: np.ndarray
    q_pp: float
    q_mm: float
    q_pm: float
    reconstruction_error: float


def split_null_mode(sector, h: np.ndarray, probes=None, null_tol: float = 1e-8,
                    probe_tol: float = 1e-8) -> SplitPair:
    """Split a Q-null direction h as h = ½(h₊+h₋) with Q(h±,h±) = ±1, Q(h₊,h₋)=0.

    Follows the constructive proof: find a probe k₀ with α = Q(k₀,h) ≠ 0,
    build the null partner k with Q(k,k)=0, Q(k,h)=½, and set h± = h ± k.
    Raises if h is not Q-null or no probe couples to h (degenerate Q).
    """
    qhh = sector.q_form(h, h)
    hnorm2 = sector.l2norm2(h)
    if abs(qhh) > null_tol * max(hnorm2, 1e-300):
        raise ValueError(f"h is not a null direction: Q(h,h) = {qhh:.3e} "
                         f"(relative to ‖h‖² = {hnorm2:.3e})")
    if probes is None:
        probes = sector.probe_basis()
    k0, alpha = None, 0.0
    for cand in probes:
        a = sector.q_form(cand, h)
        if abs(a) > abs(alpha):
            k0, alpha = cand, a
    if k0 is None or abs(alpha) <= probe_tol * max(hnorm2, 1e-300):
        raise ValueError("no probe couples to h through Q: "
                         "the form is degenerate on the sampled subspace")
    beta = sector.q_form(k0, k0)
    if abs(beta) <= probe_tol * abs(alpha):
        k = (0.5 / alpha) * k0
    else:
        k1 = -(2.0 * alpha / beta) * k0 + h
        k = -(beta / (4.0 * alpha ** 2)) * k1
    h_plus = h + k
    h_minus = h - k
    qpp = sector.q_form(h_plus, h_plus)
    qmm = sector.q_form(h_minus, h_minus)
    qpm = sector.q_form(h_plus, h_minus)
    rec = float(np.max(np.abs(0.5 * (h_plus + h_minus) - h)))
    return SplitPair(h_plus, h_minus, qpp, qmm, qpm, rec)


# ---------------------------------------------------------------------------
# the grid sector (duck-typed backend for the iteration engine)
# ---------------------------------------------------------------------------

class GridSector:
    """§-machinery backend on a GridChart.

    Symmetric 2-tensors are full (…, d, d) arrays, scalars are grid arrays.
    All operators act at the base metric; scal/volume of deformed metrics are
    evaluated exactly (pointwise nonlinear maps).
    """

    def __init__(self, ctx: OperatorContext, mask: np.ndarray | None = None,
                 variant: str = "tracefree", qsolver_tol: float = 1e-10):
        self.ctx = ctx
        self.chart = ctx.chart
        self.n = ctx.dim
        self.mask = np.ones(ctx.chart.shape, dtype=bool) if mask is None else mask
        self.variant = variant
        self.qsolver = DoubleDivSolver(ctx, mask=self.mask, variant=variant,
                                       tol=qsolver_tol)
        self.base_scal = ctx.curv.scal
        self.sigma = ctx.sigma
        self._d2_cache: dict = {}

    # field algebra ---------------------------------------------------------
    def zero_sym2(self):
        return np.zeros(self.chart.shape + (self.n, self.n))

    def l2norm2(self, h) -> float:
        return self.ctx.inner_l2(sym2_field(self.chart, h), sym2_field(self.chart, h))

    def l2norm(self, h) -> float:
        return float(np.sqrt(max(self.l2norm2(h), 0.0)))

    def scalar_l2(self, f) -> float:
        return float(np.sqrt(max(self.ctx.integrate(f * f), 0.0)))

    def integrate(self, f) -> float:
        return self.ctx.integrate(f)

    def norm2_pointwise(self, h) -> np.ndarray:
        """|h|²_g pointwise."""
        gi = self.ctx.g.ginv
        return np.einsum("...ik,...jl,...ij,...kl->...", gi, gi, h, h)

    def inner_pointwise(self, h, k) -> np.ndarray:
        gi = self.ctx.g.ginv
        return np.einsum("...ik,...jl,...ij,...kl->...", gi, gi, h, k)

    def trace_part(self, u) -> np.ndarray:
        """(u/n)·g as a sym2 array."""
        return u[..., None, None] / self.n * self.ctx.g.g

    def trace_of(self, h) -> np.ndarray:
        return np.einsum("...ij,...ij->...", self.ctx.g.ginv, h)

    # geometry of deformed metrics -------------------------------------------
    def metric_at(self, h, k) -> MetricField:
        vals = self.ctx.g.g + h + 0.5 * k
        return MetricField(sym2_field(self.chart, vals))

    def scal_at(self, h, k) -> np.ndarray:
        return curvature(self.metric_at(h, k), need_riemann=False).scal

    def vol_factor(self, h, k) -> np.ndarray:
        return self.metric_at(h, k).sqrt_det / self.ctx.g.sqrt_det

    def einstein_deviation(self, h, k) -> float:
        """‖Ric − (scal/n) g‖_{L²} of the deformed metric."""
        gm = self.metric_at(h, k)
        cb = curvature(gm, need_riemann=False)
        dev = cb.ricci - (cb.scal / self.n)[..., None, None] * gm.g
        return float(np.sqrt(max(
            np.sum(gm.chart.quadrature_weights() * gm.sqrt_det *
                   np.einsum("...ik,...jl,...ij,...kl->...", gm.ginv, gm.ginv, dev, dev)), 0.0)))

    # analytic formulas at the base metric ------------------------------------
    def dscal_formula(self, k) -> np.ndarray:
        return d_scal(self.ctx, sym2_field(self.chart, k)).values

    def d2scal_formula(self, h) -> np.ndarray:
        return d2_scal(self.ctx, sym2_field(self.chart, h)).values

    def delta_e(self, h) -> np.ndarray:
        return einstein_op(self.ctx, sym2_field(self.chart, h)).full()

    def q_form(self, h1, h2) -> float:
        return self.ctx.inner_l2(einstein_op(self.ctx, sym2_field(self.chart, h1)),
                                 sym2_field(self.chart, h2))

    def qsolve(self, f) -> tuple[np.ndarray, QSolveInfo]:
        return self.qsolver.solve(f)

    def kernel_check(self, seed: int = 0) -> dict:
        return self.qsolver.kernel_check(seed=seed)

    # TT utilities ------------------------------------------------------------
    def tt_projector(self) -> TTProjector:
        return TTProjector(self.ctx, mask=self.mask)

    def probe_basis(self, count: int = 8, seed: int = 23):
        """Windowed discrete-TT probe fields for the h± construction."""
        from .fields import random_sym2
        proj = self.tt_projector()
        out = []
        for s in range(count):
            seed_field = random_sym2(self.chart, seed=seed + s, kmax=1)
            masked = TensorField(self.chart, "sym2",
                                 seed_field.values * self.mask[..., None])
            h_tt, _, _, rep = proj.project(masked)
            if rep.div_residual < 1e-7:
                nrm = self.l2norm(h_tt.full())
                if nrm > 1e-10:
                    out.append(h_tt.full() / nrm)
        return out

    def weighted_norms(self, h, spec: WeightSpec, k: int = 2) -> float:
        return weighted_norm(self.ctx, sym2_field(self.chart, h), k, spec)

    def min_metric_eigenvalue(self) -> float:
        return self.ctx.g.min_eigenvalue()

    def sup_norm(self, h) -> float:
        return float(np.abs(h).max())


# ---------------------------------------------------------------------------
# second-order solve (Step 1) and the contraction iteration (Steps 2-6)
# ---------------------------------------------------------------------------

@dataclass
class IterationOptions:
    tol: float = 1e-9
    max_iter: int = 25
    check_kernel: bool = True
    allow_rescale: bool = False
    compat_tol: float = 1e-6
    contraction_target: float = 1.0      # error threshold on observed ratios
    halvings: int = 6


@dataclass
class DeformationState:
    i: int
    lam: float
    h: np.ndarray
    tr_k: np.ndarray
    k_ring: np.ndarray
    scal_residual: float
    vol_residual: float
    update_norm: float
    contraction_ratio: float
    qsolve_info: QSolveInfo | None = None


@dataclass
class DeformationTrace:
    t: float
    f0_branch: str                      # 'F0_nonzero' | 'F0_zero'
    states: list
    converged: bool
    sector: object
    h_base: object
    f_t: np.ndarray
    halvings_used: int = 0

    @property
    def final(self) -> DeformationState:
        return self.states[-1]

    def csv_rows(self):
        rows = [("i", "lambda", "scal_residual", "vol_residual",
                 "update_norm", "contraction_ratio")]
        for s in self.states:
            rows.append((s.i, s.lam, s.scal_residual, s.vol_residual,
                         s.update_norm, s.contraction_ratio))
        return rows


def compatibility_integral(sector, h, f0) -> tuple[float, float]:
    """(∫⟨Δ_E h, h⟩ dV, −2∫f₀ dV): equal for admissible (h, f₀)."""
    return sector.q_form(h, h), -2.0 * sector.integrate(f0)


def second_order_solve(sector, h, f0, opts: IterationOptions | None = None):
    """Step 1: k with Dscal(k) + D²scal(h,h) = f₀ and the volume equation.

    Returns (tr_k, k̊, info).  The compatibility integral
    ∫⟨Δ_E h,h⟩ = −2∫f₀ must hold to opts.compat_tol (relative); with
    allow_rescale the tensor h is scaled to enforce it and the scaled h is
    returned too: (tr_k, k̊, info, h).
    """
    opts = opts or IterationOptions()
    qhh, target = compatibility_integral(sector, h, f0)
    scale = max(abs(qhh), abs(target), 1e-300)
    if abs(qhh - target) > opts.compat_tol * scale:
        if not opts.allow_rescale:
            raise ValueError(
                f"compatibility violated: ∫<Delta_E h,h> = {qhh:.6e}, "
                f"-2∫f0 = {target:.6e}")
        if qhh * target <= 0:
            raise ValueError("compatibility cannot be restored by rescaling: "
                             "∫<Delta_E h,h> and -2∫f0 have opposite signs")
        h = np.sqrt(target / qhh) * h
        qhh = target
    if opts.check_kernel:
        kc = sector.kernel_check()
        if not kc["passed"]:
            raise ValueError("kernel check failed (warped-product obstruction): "
                             f"lambda_min = {kc['lambda_min']:.3e}")
    tr_k = sector.norm2_pointwise(h)
    rhs = f0 - sector.d2scal_formula(h) - sector.dscal_formula(sector.trace_part(tr_k))
    k_ring, info = sector.qsolve(rhs)
    return tr_k, k_ring, info, h


def _assemble_k(sector, tr_k, k_ring):
    return sector.trace_part(tr_k) + k_ring


def _lambda_coefficients(sector, a, b, tr_base, f_rhs_int):
    """Coefficients of φ(λ) = C2 λ² + C1 λ + C0 for the integrated update eq.

    h(λ) = a + λ b; tr k(λ) = |h(λ)|² − V (V folded into tr_base);
    φ(λ) = ∫[D²scal(h(λ)) + Dscal((tr k(λ)/n) g)] − f_rhs_int.
    """
    d2a = sector.integrate(sector.d2scal_formula(a))
    d2b = sector.integrate(sector.d2scal_formula(b))
    d2ab = sector.integrate(sector.d2scal_formula(a + b))
    cross = d2ab - d2a - d2b
    # trace-part contribution: tr k(λ) = |a|² + 2λ⟨a,b⟩ + λ²|b|² − V
    na = sector.norm2_pointwise(a)
    nb = sector.norm2_pointwise(b)
    nab = sector.inner_pointwise(a, b)
    tp = lambda u: sector.integrate(sector.dscal_formula(sector.trace_part(u)))
    c0 = d2a + tp(na + tr_base) - f_rhs_int
    c1 = cross + 2.0 * tp(nab)
    c2 = d2b + tp(nb)
    return c2, c1, c0


def _solve_lambda(c2, c1, c0) -> float:
    """Root of c2 λ² + c1 λ + c0 = 0 continuous with λ = 0 (smaller |λ|)."""
    if abs(c2) < 1e-14 * max(abs(c1), 1.0):
        if c1 == 0.0:
            raise RuntimeError("lambda update is degenerate (no linear term)")
        return -c0 / c1
    disc = c1 * c1 - 4.0 * c2 * c0
    if disc < 0:
        raise RuntimeError("lambda update has no real root near 0 "
                           f"(discriminant {disc:.3e})")
    r = np.sqrt(disc)
    roots = ((-c1 + r) / (2 * c2), (-c1 - r) / (2 * c2))
    return min(roots, key=abs)


def prescribe_scal_iterate(sector, h, f_t, t: float,
                           opts: IterationOptions | None = None,
                           split: SplitPair | None = None) -> DeformationTrace:
    """Deform g to scal^{g_t} = scal^g + t²f_t/2 with dV^{g_t} = dV^g.

    `h` is a discrete-TT direction; the branch is chosen by F₀ = ∫f₀ dV:
    for F₀ ≠ 0 the one-parameter family h_t = t(1+λ)h is used and the
    compatibility integral must hold; for F₀ = 0 a SplitPair (from
    split_null_mode) supplies the family t(½(h₊+h₋) + λ(h₊−h₋)).

    On contraction failure t is halved (up to opts.halvings) and the run
    restarts; the returned trace records the t actually used.
    """
    opts = opts or IterationOptions()
    f_t = np.asarray(f_t, dtype=float)
    F0 = sector.integrate(f_t)
    f_l1 = sector.integrate(np.abs(f_t))
    branch = "F0_zero" if abs(F0) < 1e-10 * max(f_l1, 1e-300) else "F0_nonzero"

    if opts.check_kernel:
        kc = sector.kernel_check()
        if not kc["passed"]:
            raise ValueError("kernel check failed (warped-product obstruction): "
                             f"lambda_min = {kc['lambda_min']:.3e}")
    if branch == "F0_nonzero":
        qhh, target = compatibility_integral(sector, h, f_t)
        scale = max(abs(qhh), abs(target), 1e-300)
        if abs(qhh - target) > opts.compat_tol * scale:
            if not opts.allow_rescale:
                raise ValueError(
                    f"compatibility violated: ∫<Delta_E h,h> = {qhh:.6e}, "
                    f"-2∫f_0 = {target:.6e}")
            if qhh * target <= 0:
                raise ValueError("compatibility cannot be restored by rescaling")
            h = np.sqrt(target / qhh) * h
    else:
        if split is None:
            split = split_null_mode(sector, h)

    # adaptive t threshold: ‖t h‖_C0 < 0.05 · min eigenvalue of g
    h_dir = h if branch == "F0_nonzero" else 0.5 * (split.h_plus + split.h_minus)
    cap = 0.05 * sector.min_metric_eigenvalue() / max(sector.sup_norm(h_dir), 1e-300)
    t_eff = min(t, cap)
    halved = 0
    last_error = None
    while halved <= opts.halvings:
        try:
            trace = _run_iteration(sector, h, f_t, t_eff, opts, branch, split)
            trace.halvings_used = halved
            return trace
        except _ContractionFailure as exc:
            last_error = exc
            t_eff *= 0.5
            halved += 1
    raise RuntimeError(f"iteration failed to contract after {opts.halvings} "
                       f"halvings of t: {last_error}")


class _ContractionFailure(RuntimeError):
    pass


def _run_iteration(sector, h, f_t, t, opts, branch, split) -> DeformationTrace:
    n = sector.n
    if branch == "F0_nonzero":
        family = lambda lam: t * (1.0 + lam) * h
        fam_a, fam_b = t * h, t * h                     # h(λ) = a + λ b
    else:
        mid = 0.5 * (split.h_plus + split.h_minus)
        dif = split.h_plus - split.h_minus
        family = lambda lam: t * (mid + lam * dif)
        fam_a, fam_b = t * mid, t * dif

    lam = 0.0
    h_i = family(lam)
    v_i = np.zeros_like(f_t)
    tr_k = sector.norm2_pointwise(h_i) - v_i
    rhs0 = (0.5 * t * t * f_t - sector.d2scal_formula(h_i)
            - sector.dscal_formula(sector.trace_part(tr_k)))
    k_ring, qinfo = sector.qsolve(rhs0)

    states = []
    prev_update = None
    base_scale = max(sector.l2norm(h_i) + sector.l2norm(_assemble_k(sector, tr_k, k_ring)),
                     1e-300)
    converged = False
    for i in range(opts.max_iter):
        k_i = _assemble_k(sector, tr_k, k_ring)
        scal_i = sector.scal_at(h_i, k_i)
        u_i = sector.vol_factor(h_i, k_i)
        model = sector.dscal_formula(k_i) + sector.d2scal_formula(h_i)
        s_i = 2.0 * (scal_i - sector.base_scal - model)
        v_i = 2.0 * (u_i - 1.0) - (tr_k - sector.norm2_pointwise(h_i))

        scal_res = sector.scalar_l2(scal_i - sector.base_scal - 0.5 * t * t * f_t)
        vol_res = float(np.abs(u_i - 1.0).max())

        # λ update from the integrated equation (exact quadratic fit)
        f_rhs = 0.5 * t * t * f_t - 0.5 * s_i
        f_rhs_int = sector.integrate(f_rhs)
        c2, c1, c0 = _lambda_coefficients(sector, fam_a, fam_b, -v_i, f_rhs_int)
        lam_new = _solve_lambda(c2, c1, c0)

        h_new = family(lam_new)
        tr_k_new = sector.norm2_pointwise(h_new) - v_i
        rhs = (f_rhs - sector.d2scal_formula(h_new)
               - sector.dscal_formula(sector.trace_part(tr_k_new)))
        k_ring_new, qinfo = sector.qsolve(rhs)
        k_new = _assemble_k(sector, tr_k_new, k_ring_new)

        upd = (sector.l2norm(h_new - h_i) + sector.l2norm(k_new - k_i)) / base_scale
        ratio = upd / prev_update if prev_update not in (None, 0.0) else np.nan
        states.append(DeformationState(i=i, lam=lam_new, h=h_new, tr_k=tr_k_new,
                                       k_ring=k_ring_new, scal_residual=scal_res,
                                       vol_residual=vol_res, update_norm=upd,
                                       contraction_ratio=float(ratio),
                                       qsolve_info=qinfo))
        h_i, tr_k, k_ring = h_new, tr_k_new, k_ring_new
        if prev_update is not None and np.isfinite(ratio) and ratio > 1.0 \
                and upd > 50 * opts.tol:
            raise _ContractionFailure(
                f"contraction ratio {ratio:.3f} > 1 at iteration {i} (t = {t:.3e})")
        prev_update = upd
        if upd <= opts.tol:
            converged = True
            break

    # final residual measurement on the converged state
    k_f = _assemble_k(sector, tr_k, k_ring)
    scal_f = sector.scal_at(h_i, k_f)
    u_f = sector.vol_factor(h_i, k_f)
    states[-1].scal_residual = sector.scalar_l2(scal_f - sector.base_scal - 0.5 * t * t * f_t)
    states[-1].vol_residual = float(np.abs(u_f - 1.0).max())
    trace = DeformationTrace(t=t, f0_branch=branch, states=states,
                             converged=converged, sector=sector, h_base=h, f_t=f_t)
    if not converged:
        raise _ContractionFailure(
            f"no convergence within {opts.max_iter} iterations "
            f"(last update {states[-1].update_norm:.3e}, t = {t:.3e})")
    return trace


def verify_deformation(trace: DeformationTrace, weight_spec: WeightSpec | None = None) -> dict:
    """Post-hoc report: support containment, scal/volume identities, TT-ness.

    Works on completed traces; all quantities are recomputed from the final
    state, not taken from the iteration bookkeeping.
    """
    sector = trace.sector
    s = trace.final
    k_f = _assemble_k(sector, s.tr_k, s.k_ring)
    scal_f = sector.scal_at(s.h, k_f)
    u_f = sector.vol_factor(s.h, k_f)
    t = trace.t
    out = {
        "t": t,
        "branch": trace.f0_branch,
        "converged": trace.converged,
        "iterations": len(trace.states),
        "scal_residual": sector.scalar_l2(scal_f - sector.base_scal - 0.5 * t * t * trace.f_t),
        "vol_residual": float(np.abs(u_f - 1.0).max()),
        "lambda": s.lam,
        "contraction_ratios": [st.contraction_ratio for st in trace.states],
    }
    # support containment: exact zeros outside the mask
    outside = ~sector.mask
    if np.any(outside):
        out["support_violation"] = float(
            max(np.abs(s.h[outside]).max() if s.h[outside].size else 0.0,
                np.abs(k_f[outside]).max() if k_f[outside].size else 0.0))
    else:
        out["support_violation"] = 0.0
    # TT property of the final h
    if hasattr(sector, "tt_residuals"):
        out["h_div_residual"], out["h_trace_residual"] = sector.tt_residuals(s.h)
    else:
        from .operators import divergence as _div
        fld = sym2_field(sector.chart, s.h)
        out["h_div_residual"] = sector.ctx.norm_l2(_div(sector.ctx, fld)) / max(sector.l2norm(s.h), 1e-300)
        out["h_trace_residual"] = float(np.abs(sector.trace_of(s.h)).max())
    # total volume preservation of the update (all computed orders)
    out["trace_integral"] = sector.integrate(sector.trace_of(k_f)) \
        + sector.integrate(sector.trace_of(s.h))
    if weight_spec is not None and hasattr(sector, "weighted_norms"):
        out["weighted_h2_h"] = sector.weighted_norms(s.h, weight_spec, k=2)
        out["weighted_h2_k"] = sector.weighted_norms(k_f, weight_spec, k=2)
    return out
