"""Eigenvalue computations and the generalized λ_α machinery.

λ_α(g) is the smallest Neumann eigenvalue of the Schrödinger operator
4αΔ + scal; it is computed from the assembled energy-form matrices (never by
direct minimization of the f-functional).  The minimizer satisfies the
Euler-Lagrange equation −2αΔf − α|∇f|² + scal = λ_α with ∇_ν f = 0, which is
reported as a residual diagnostic.

Gradient and second variation:
    grad λ_α = −(Ric + ∇²f − (α−1)∇f⊗∇f)
               + ½(1−1/α)(scal−λ_α)g + ½(α−1)|∇f|² g
    D²λ_α(h,h) = −(1/vol)∫⟨½Δ_E h − δ*(δh) − ½δ(δh)g, h⟩
                 −(1/vol)∫ v δ(δh) + (1/vol)∫((α−1)Δv + σv) tr h,
    with 2αΔv = Δ(tr h) + δ(δh) − σ tr h and ∇_ν v = 0,
and for conformal directions ug (constant scal, ∫u = 0)
    D²λ_α(ug,ug) = (1/vol)∫(Lu)u,
    L = ((n−1)Δ − scal)(((n−2)α − (n−1))Δ + scal)Δ⁻¹.

The smallest Dirichlet eigenvalue of Δ_E on TT-tensors is computed by a
single-vector locally-optimal projected iteration: every iterate is mapped
back to the discrete TT subspace of the domain before the Rayleigh-Ritz step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import (MetricField, TensorField, scalar_field, one_form_field,
                     sym2_field, random_sym2)
from .curvature import covd
from .operators import (OperatorContext, make_context, assemble_stiffness,
                        laplacian, divergence, delta_star, hessian,
                        einstein_op, gradient, TTProjector)


@dataclass
class SpectralReport:
    eigenvalue: float
    eigenfield: object           # TensorField (functions) or sym2 TensorField (TT)
    residual: float              # ‖A v − μ B v‖ / ‖B v‖
    iterations: int
    bc: str
    subspace: str                # 'functions' | 'TT'


@dataclass
class LambdaReport:
    alpha: float
    value: float
    omega: TensorField           # positive, ∫ω² dV = 1
    f: TensorField               # −2 log ω
    el_residual: float
    residual: float
    iterations: int


def _eigsh_smallest(A, B, k: int = 2, seed: int = 0, shift: float | None = None):
    """Deterministic smallest eigenpairs of the symmetric pencil (A, B)."""
    n = A.shape[0]
    rng = np.random.default_rng(seed)
    v0 = np.ones(n) + 0.1 * rng.standard_normal(n)
    if shift is None:
        shift = -1.0
    try:
        vals, vecs = spla.eigsh(A, k=min(k, n - 2), M=B, sigma=shift,
                                which="LM", v0=v0)
    except RuntimeError:
        vals, vecs = spla.eigsh(A, k=min(k, n - 2), M=B, which="SA", v0=v0)
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


def _subdomain_context(ctx: OperatorContext, domain) -> OperatorContext:
    """Context restricted to a coordinate sub-box (non-periodic axes)."""
    if domain is None:
        return ctx
    lo, hi = domain
    sub, slices = ctx.chart.subchart(lo, hi)
    gvals = ctx.g.field.values[slices]
    sub_metric = MetricField(TensorField(sub, "sym2", gvals.copy()))
    return make_context(sub_metric, bc="neumann")


def neumann_mu1(ctx: OperatorContext, domain=None, seed: int = 0,
                potential=None) -> SpectralReport:
    """First nonzero Neumann eigenvalue of Δ on functions (constants deflated)."""
    c = _subdomain_context(ctx, domain)
    K, B, dofs = assemble_stiffness(c, "neumann")
    pot_shift = 0.0
    A = K
    if potential is not None:
        A = K + sp.diags((potential * (c.weights)).ravel()[dofs]).tocsr()
        pot_shift = float(np.min(potential))
    vals, vecs = _eigsh_smallest(A, B, k=3, seed=seed, shift=pot_shift - 1.0)
    # drop the constant mode (eigenvalue ~ pot-weighted mean for potentials;
    # for the plain Laplacian it is ~0)
    const = np.ones(B.shape[0])
    const /= np.sqrt(const @ (B @ const))
    idx = 0
    best = None
    for i in range(vals.shape[0]):
        v = vecs[:, i]
        overlap = abs(v @ (B @ const)) / np.sqrt(v @ (B @ v))
        if overlap < 0.5:
            best = i
            break
    if best is None:
        raise RuntimeError("Neumann eigensolver found only constant-like modes")
    mu = float(vals[best])
    v = vecs[:, best]
    v = v / np.sqrt(v @ (B @ v))
    res = float(np.linalg.norm(A @ v - mu * (B @ v)) / np.linalg.norm(B @ v))
    field = scalar_field(c.chart, v.reshape(c.chart.shape))
    return SpectralReport(mu, field, res, 0, "neumann", "functions")


def lambda_alpha(ctx: OperatorContext, alpha: float, domain=None,
                 potential: np.ndarray | None = None, seed: int = 0) -> LambdaReport:
    """λ_α: smallest Neumann eigenvalue of 4αΔ + scal (scal overridable)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    c = _subdomain_context(ctx, domain)
    pot = c.curv.scal if potential is None else np.broadcast_to(potential, c.chart.shape)
    K, B, dofs = assemble_stiffness(c, "neumann")
    A = (4.0 * alpha * K + sp.diags((pot * c.weights).ravel()[dofs])).tocsr()
    shift = float(pot.min()) - 1.0
    vals, vecs = _eigsh_smallest(A, B, k=2, seed=seed, shift=shift)
    lam = float(vals[0])
    om = vecs[:, 0]
    om = om / np.sqrt(om @ (B @ om))
    if om[np.argmax(np.abs(om))] < 0:
        om = -om
    if om.min() <= 0:
        raise RuntimeError("ground state is not sign-definite: discretization failure")
    res = float(np.linalg.norm(A @ om - lam * (B @ om)) / np.linalg.norm(B @ om))
    om_f = scalar_field(c.chart, om.reshape(c.chart.shape))
    f_f = scalar_field(c.chart, -2.0 * np.log(om_f.values))
    # Euler-Lagrange residual −2αΔf − α|∇f|² + scal − λ on the interior
    from .operators import interior_window
    lap_f = laplacian(c, f_f).values
    df = gradient(c, f_f)
    el = -2 * alpha * lap_f - alpha * c.ip(df, df) + pot - lam
    sel = interior_window(c.chart, fraction=0.15)
    el_res = float(np.abs(el * sel).max())
    return LambdaReport(alpha=alpha, value=lam, omega=om_f, f=f_f,
                        el_residual=el_res, residual=res, iterations=0)


def rigidity_bound_check(ctx: OperatorContext, alpha: float, c_bound: float,
                         potential: np.ndarray | None = None,
                         tol: float = 1e-8) -> dict:
    """Check λ_α ≥ c for scal ≥ c, with a strictness margin when scal ≢ c."""
    pot = ctx.curv.scal if potential is None else np.broadcast_to(potential, ctx.chart.shape)
    if pot.min() < c_bound - 1e-12:
        raise ValueError(f"precondition scal >= c violated: min scal = {pot.min():.6g} < {c_bound}")
    rep = lambda_alpha(ctx, alpha, potential=pot)
    nonconstant = float(pot.max() - pot.min()) > 1e-12
    ok = rep.value >= c_bound - 10 * max(tol, rep.residual)
    margin = rep.value - c_bound
    if nonconstant and margin <= 0:
        ok = False
    return {"lambda": rep.value, "bound": c_bound, "margin": margin,
            "strict_expected": nonconstant, "passed": bool(ok)}


# ---------------------------------------------------------------------------
# first variation of λ_α
# ---------------------------------------------------------------------------

def grad_lambda(ctx: OperatorContext, alpha: float,
                report: LambdaReport | None = None) -> tuple[TensorField, LambdaReport]:
    """The weighted L² gradient field of λ_α at ctx.g."""
    if report is None:
        report = lambda_alpha(ctx, alpha)
    f = report.f
    df = gradient(ctx, f)
    hess_f = hessian(ctx, f).full()
    df_up = np.einsum("...ij,...j->...i", ctx.g.ginv, df.values)
    dfdf = np.einsum("...i,...j->...ij", df.values, df.values)
    ndf2 = np.einsum("...i,...i->...", df_up, df.values)
    scal = ctx.curv.scal
    lam = report.value
    vals = (-(ctx.curv.ricci + hess_f - (alpha - 1.0) * dfdf)
            + 0.5 * (1.0 - 1.0 / alpha) * (scal - lam)[..., None, None] * ctx.g.g
            + 0.5 * (alpha - 1.0) * ndf2[..., None, None] * ctx.g.g)
    return sym2_field(ctx.chart, vals), report


def grad_lambda_pairing(ctx: OperatorContext, alpha: float, h: TensorField,
                        report: LambdaReport | None = None) -> float:
    """Dλ_α(h) = ∫⟨grad λ_α, h⟩ e^{−f} dV."""
    grad, report = grad_lambda(ctx, alpha, report)
    weight = np.exp(-report.f.values)
    return ctx.integrate(ctx.ip(grad, h) * weight)


# ---------------------------------------------------------------------------
# Neumann Poisson solves (mean-zero)
# ---------------------------------------------------------------------------

def solve_poisson(ctx: OperatorContext, rhs: np.ndarray, tol: float = 1e-12,
                  max_iter: int = 20000, scale: float | None = None) -> np.ndarray:
    """Solve Δv = rhs with Neumann/periodic closure, mean-zero v.

    On all-periodic charts the composed rough Laplacian is used (CG), keeping
    the solve exactly consistent with the formula-level operators; on collared
    charts the assembled Neumann energy form is used (MINRES).  `scale` sets
    an absolute floor: a right-hand side below tol·scale is treated as zero
    (it is solver noise, not data).
    """
    w = ctx.weights
    vol = float(np.sum(w))
    rhs = rhs - np.sum(w * rhs) / vol
    n0 = np.sqrt(float(np.sum(w * rhs * rhs)))
    if n0 == 0.0 or (scale is not None and n0 <= 1e3 * tol * scale):
        return np.zeros_like(rhs)
    if all(ax.periodic for ax in ctx.chart.axes):
        def apply_lap(v):
            return laplacian(ctx, scalar_field(ctx.chart, v)).values

        x = np.zeros_like(rhs)
        r = rhs.copy()
        p = r.copy()
        rr = float(np.sum(w * r * r))
        best_x, best_rr = x.copy(), rr
        it = 0
        while it < max_iter and np.sqrt(rr) > tol * n0:
            ap = apply_lap(p)
            pap = float(np.sum(w * p * ap))
            if pap <= 0:
                break
            a = rr / pap
            x += a * p
            r -= a * ap
            rr_new = float(np.sum(w * r * r))
            if rr_new < best_rr:
                best_rr, best_x = rr_new, x.copy()
            if rr_new > 1e8 * max(best_rr, 1e-300):
                break
            p = r + (rr_new / rr) * p
            rr = rr_new
            it += 1
        best_x -= np.sum(w * best_x) / vol
        return best_x
    K, B, dofs = assemble_stiffness(ctx, "neumann")
    b = B @ rhs.ravel()
    v, info = spla.minres(K, b, rtol=1e-10)
    v = v.reshape(ctx.chart.shape)
    return v - np.sum(w * v) / vol


def laplacian_consistent(ctx: OperatorContext, v: np.ndarray) -> np.ndarray:
    """Δv with the same operator used by solve_poisson on this chart."""
    if all(ax.periodic for ax in ctx.chart.axes):
        return laplacian(ctx, scalar_field(ctx.chart, v)).values
    K, B, dofs = assemble_stiffness(ctx, "neumann")
    return (spla.spsolve(sp.csc_matrix(B), K @ v.ravel())).reshape(ctx.chart.shape)


# ---------------------------------------------------------------------------
# second variation of λ_α
# ---------------------------------------------------------------------------

def d2_lambda(ctx: OperatorContext, alpha: float, h: TensorField,
              einstein_tol: float = 1e-4) -> float:
    """D²λ_α(h,h) on an Einstein background, volume-preserving h.

    Evaluates the general second-variation formula including the Neumann
    solve for v; for discrete-TT h this reduces to −(1/2vol)∫⟨Δ_E h, h⟩ dV.
    """
    scale = max(1.0, float(np.abs(ctx.curv.ricci).max()))
    if ctx.curv.einstein_residual > einstein_tol * scale:
        raise ValueError("d2_lambda requires an Einstein background")
    trh = ctx.trace(h)
    tr_int = ctx.integrate(trh.values)
    vol = ctx.volume()
    if abs(tr_int) > 1e-6 * max(1.0, ctx.norm_l2(h)) * vol ** 0.5:
        raise ValueError("h must preserve volume to first order: ∫tr h dV = 0")
    sig = ctx.sigma
    dh = divergence(ctx, h)
    ddh = divergence(ctx, dh).values
    lap_tr = laplacian(ctx, trh).values
    rhs_v = lap_tr + ddh - sig * trh.values
    rhs_scale = float(np.abs(lap_tr).max() + np.abs(ddh).max()
                      + abs(sig) * np.abs(trh.values).max()) + 1e-300
    v = solve_poisson(ctx, rhs_v / (2.0 * alpha), scale=rhs_scale / (2.0 * alpha))
    lap_v = laplacian_consistent(ctx, v)

    eh = einstein_op(ctx, h)
    ds_dh = delta_star(ctx, dh)
    inner = (0.5 * eh.full() - ds_dh.full() - 0.5 * ddh[..., None, None] * ctx.g.g)
    t1 = -ctx.integrate(ctx.ip(sym2_field(ctx.chart, inner), h)) / vol
    t2 = -ctx.integrate(v * ddh) / vol
    t3 = ctx.integrate(((alpha - 1.0) * lap_v + sig * v) * trh.values) / vol
    return t1 + t2 + t3


def conformal_L(ctx: OperatorContext, alpha: float, u: TensorField) -> TensorField:
    """L u for mean-zero u on a constant-scal background.

    L = ((n−1)Δ − scal)(((n−2)α − (n−1))Δ + scal)(2αΔ)⁻¹, so that
    D²λ_α(ug, ug) = (1/vol)∫(Lu)u dV.  The (2α)⁻¹ comes from the Neumann
    problem 2αΔv = (n−1)Δu − scal·u defining v; eliminating v from the
    conformal second-variation formula yields exactly this operator.
    """
    w = ctx.weights
    if abs(ctx.integrate(u.values)) > 1e-8 * float(np.sum(w)) ** 0.5 * max(1.0, float(np.abs(u.values).max())):
        raise ValueError("u must have zero mean")
    scal = ctx.curv.scal
    if float(scal.max() - scal.min()) > 1e-6 * max(1.0, float(np.abs(scal).max())):
        raise ValueError("conformal_L needs constant scalar curvature")
    s = ctx.sigma * ctx.dim
    n = ctx.dim
    winv = solve_poisson(ctx, u.values, scale=float(np.abs(u.values).max()))
    inner = (((n - 2) * alpha - (n - 1)) * u.values + s * winv) / (2.0 * alpha)
    lap_inner = laplacian_consistent(ctx, inner)
    return scalar_field(ctx.chart, (n - 1) * lap_inner - s * inner)


def d2_lambda_conformal(ctx: OperatorContext, alpha: float, u: TensorField) -> float:
    """D²λ_α(ug, ug) = (1/vol)∫(Lu)u dV."""
    lu = conformal_L(ctx, alpha, u)
    return ctx.integrate(lu.values * u.values) / ctx.volume()


def alpha_selector(ctx: OperatorContext, domain=None, mu1_nm: float | None = None,
                   scal_value: float | None = None) -> float:
    """Largest-margin admissible α for the spectral inequality.

    Solves [1 − (n−2)α/(n−1)]·μ₁^NM > scal/(n−1) and returns the midpoint of
    the admissible interval (0, α_max); scal ≤ 0 makes any modest α work and
    returns 1.  Raises if the underlying Assumption (μ₁^NM > scal/(n−1)) fails.
    """
    n = ctx.dim
    s = scal_value if scal_value is not None else ctx.sigma * n
    if s <= 0:
        return 1.0
    mu = mu1_nm if mu1_nm is not None else neumann_mu1(ctx, domain).eigenvalue
    if mu <= s / (n - 1):
        raise ValueError(
            f"spectral assumption fails: mu1^NM = {mu:.6g} <= scal/(n-1) = {s / (n - 1):.6g}")
    if n == 2:
        return 1.0
    alpha_max = (n - 1) / (n - 2) * (1.0 - s / ((n - 1) * mu))
    return 0.5 * alpha_max


# ---------------------------------------------------------------------------
# Dirichlet μ₁ of Δ_E on TT tensors (projected iteration)
# ---------------------------------------------------------------------------

def dirichlet_mu1_tt(ctx: OperatorContext, domain=None, seed: int = 0,
                     tol: float = 1e-8, max_iter: int = 10000,
                     einstein_tol: float = 1e-4) -> SpectralReport:
    """Smallest Rayleigh quotient of Δ_E over the discrete TT subspace.

    `domain` is a coordinate box (lo, hi) defining the Dirichlet support mask;
    None means the whole chart (periodic) or its collar interior (dirichlet).
    Locally-optimal single-vector iteration with TT projection each step.
    """
    scale = max(1.0, float(np.abs(ctx.curv.ricci).max()))
    if ctx.curv.einstein_residual > einstein_tol * scale:
        raise ValueError("dirichlet_mu1_tt requires an Einstein background")
    if domain is None:
        mask = None
    else:
        lo, hi = domain
        mask = ctx.chart.box_mask(lo, hi, strict=True)
    proj = TTProjector(ctx, mask=mask, tol=min(tol * 1e-2, 1e-10))

    x, _, _, rep = proj.project(random_sym2(ctx.chart, seed=seed, kmax=1))
    nx = ctx.norm_l2(x)
    if nx < 1e-14:
        raise RuntimeError("TT projection of the seed field vanished; domain too small?")
    x = (1.0 / nx) * x
    p = None
    rho = None
    res = np.inf
    it = 0
    while it < max_iter:
        ax = einstein_op(ctx, x)
        rho = ctx.inner_l2(ax, x) / ctx.inner_l2(x, x)
        grad = sym2_field(ctx.chart, ax.values - rho * x.values)
        r, _, _, _ = proj.project(grad)
        res = ctx.norm_l2(r)
        if res <= tol * max(1.0, abs(rho)):
            break
        basis = [x, r] if p is None else [x, r, p]
        # B-orthonormalize
        ortho = []
        for b in basis:
            v = b.values.copy()
            for o in ortho:
                v = v - ctx.inner_l2(TensorField(ctx.chart, "sym2", v), o) * o.values
            fld = TensorField(ctx.chart, "sym2", v)
            nv = ctx.norm_l2(fld)
            if nv > 1e-10:
                ortho.append((1.0 / nv) * fld)
        m = len(ortho)
        Am = np.zeros((m, m))
        applied = [einstein_op(ctx, b) for b in ortho]
        for i in range(m):
            for j in range(m):
                Am[i, j] = ctx.inner_l2(applied[i], ortho[j])
        Am = 0.5 * (Am + Am.T)
        vals, vecs = np.linalg.eigh(Am)
        coef = vecs[:, 0]
        x_new_vals = sum(c * b.values for c, b in zip(coef, ortho))
        x_new, _, _, _ = proj.project(TensorField(ctx.chart, "sym2", x_new_vals))
        nn = ctx.norm_l2(x_new)
        if nn < 1e-14:
            break
        x_new = (1.0 / nn) * x_new
        p_vals = x_new.values - ctx.inner_l2(x_new, x) * x.values
        p = TensorField(ctx.chart, "sym2", p_vals)
        np_ = ctx.norm_l2(p)
        p = (1.0 / np_) * p if np_ > 1e-12 else None
        x = x_new
        it += 1
    # normalize ∫|v|² dV = 1
    x = (1.0 / ctx.norm_l2(x)) * x
    bc = "dirichlet" if domain is not None or ctx.bc == "dirichlet" else "periodic"
    return SpectralReport(float(rho), x, float(res / max(1.0, abs(rho))), it, bc, "TT")


def stability_verdict(ctx: OperatorContext, domain=None, seed: int = 0,
                      tol: float = 1e-8) -> tuple[str, SpectralReport]:
    """'stable' / 'unstable' by the sign of μ₁(Δ_E|TT) with a margin.

    The verdict is withheld ('inconclusive') when |μ₁| is within three times
    the eigenvalue residual.
    """
    rep = dirichlet_mu1_tt(ctx, domain=domain, seed=seed, tol=tol)
    margin = 3.0 * max(rep.residual * max(1.0, abs(rep.eigenvalue)), tol)
    if abs(rep.eigenvalue) < margin:
        return "inconclusive", rep
    return ("stable" if rep.eigenvalue >= 0 else "unstable"), rep
