"""Analytic variation formulas of scal, Ric and dV, with FD cross-checks.

Formulas implemented (all verified against centered finite differences in t):

    D_g scal(h)   = Δ tr h + δ(δh) − ⟨Ric, h⟩
    D²_g scal(h,h) = ⟨h, ∇²tr h⟩ − ⟨δh + ½∇tr h, ∇tr h⟩ − Δ|h|²
                     + ⟨h, ∇δh⟩ − |δh|² − ½⟨∇tr h, δh⟩ + δ(δ'h)
                     − ⟨½Δ_L h − δ*(δh) − ½∇²tr h, h⟩ + 2⟨Ric, h∘h⟩
    Ric'          = ½Δ_L h − δ*(δh) − ½∇²tr h
    Δ'f           = ⟨h, ∇²f⟩ − ⟨δh + ½∇tr h, ∇f⟩
    δ'ω           = ⟨h, ∇ω⟩ − ⟨δh, ω⟩ − ½⟨∇tr h, ω⟩
    D dV(h)       = ½ tr h · dV
    D² dV(h,h;k)  = (½ tr k + ¼ (tr h)² − ½|h|²) dV

δ'h (variation of the divergence operator applied to the fixed tensor h) is
never expanded in closed form: it is computed as a centered finite difference
in t of t ↦ δ^{g+th} h, which is unambiguous.

The volume variations are pointwise algebraic identities of the determinant
and hold to roundoff; the curvature ones hold up to O(Δt²) + O(spacing²).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import MetricField, TensorField, metric_plus, scalar_field, one_form_field, sym2_field
from .curvature import curvature, covd, integrate
from .operators import (OperatorContext, make_context, divergence, delta_star,
                        laplacian, hessian, lichnerowicz, gradient, einstein_op)


def _as_ctx(g) -> OperatorContext:
    if isinstance(g, OperatorContext):
        return g
    return make_context(g)


def _grad_scalar(ctx: OperatorContext, values: np.ndarray) -> np.ndarray:
    return covd(ctx.chart, ctx.gamma, values, 0)


def d_scal(g, h: TensorField) -> TensorField:
    """First variation of the scalar curvature in the direction h."""
    ctx = _as_ctx(g)
    tr = ctx.trace(h)
    term1 = laplacian(ctx, tr).values
    term2 = divergence(ctx, divergence(ctx, h)).values
    term3 = np.einsum("...ik,...jl,...ij,...kl->...", ctx.g.ginv, ctx.g.ginv,
                      ctx.curv.ricci, h.full())
    return scalar_field(ctx.chart, term1 + term2 - term3)


def delta_prime(g, h: TensorField, T: TensorField, dt: float = 1e-5) -> TensorField:
    """δ'T = d/dt δ^{g+th} T at t=0, by a centered difference in t."""
    ctx = _as_ctx(g)
    gp = make_context(metric_plus(ctx.g, h, dt))
    gm = make_context(metric_plus(ctx.g, h, -dt))
    vp = divergence(gp, T).values
    vm = divergence(gm, T).values
    rank = "one_form" if T.rank == "sym2" else "scalar"
    return TensorField(ctx.chart, rank, (vp - vm) / (2.0 * dt))


def d2_scal(g, h: TensorField, dt_inner: float = 1e-5) -> TensorField:
    """Second variation of the scalar curvature (general formula)."""
    ctx = _as_ctx(g)
    gi = ctx.g.ginv
    hf = h.full()
    h_up = np.einsum("...ia,...jb,...ab->...ij", gi, gi, hf)

    tr = ctx.trace(h)
    dtr = _grad_scalar(ctx, tr.values)                      # (a,)
    hess_tr = hessian(ctx, tr).full()
    dh = divergence(ctx, h)                                 # one-form
    grad_dh = covd(ctx.chart, ctx.gamma, dh.values, 1)      # (a, i)
    h2 = np.einsum("...ij,...ij->...", h_up, hf)            # |h|²
    lap_h2 = laplacian(ctx, scalar_field(ctx.chart, h2)).values

    t_a = np.einsum("...ij,...ij->...", h_up, hess_tr)                       # ⟨h, ∇²tr h⟩
    t_b = np.einsum("...ij,...i,...j->...", gi, dh.values, dtr) \
        + 0.5 * np.einsum("...ij,...i,...j->...", gi, dtr, dtr)              # ⟨δh + ½∇tr, ∇tr⟩
    t_c = np.einsum("...ai,...ai->...", h_up, grad_dh)                       # ⟨h, ∇δh⟩
    t_d = np.einsum("...ij,...i,...j->...", gi, dh.values, dh.values)        # |δh|²
    t_e = 0.5 * np.einsum("...ij,...i,...j->...", gi, dtr, dh.values)        # ½⟨∇tr, δh⟩

    dp = delta_prime(ctx, h, h, dt=dt_inner)                # one-form δ'h
    t_f = divergence(ctx, dp).values                        # δ(δ'h)

    lich = lichnerowicz(ctx, h).full()
    ds_dh = delta_star(ctx, dh).full()
    inner = 0.5 * lich - ds_dh - 0.5 * hess_tr
    t_g = np.einsum("...ij,...ij->...", h_up, inner)        # ⟨½Δ_L h − δ*δh − ½∇²tr h, h⟩

    hh = ctx.compose(h, h).full()
    t_i = np.einsum("...ik,...jl,...ij,...kl->...", gi, gi, ctx.curv.ricci, hh)

    vals = t_a - t_b - lap_h2 + t_c - t_d - t_e + t_f - t_g + 2.0 * t_i
    return scalar_field(ctx.chart, vals)


def d_ric(g, h: TensorField) -> TensorField:
    """First variation of the Ricci tensor: ½Δ_L h − δ*(δh) − ½∇²tr h."""
    ctx = _as_ctx(g)
    lich = lichnerowicz(ctx, h)
    ds = delta_star(ctx, divergence(ctx, h))
    hs = hessian(ctx, ctx.trace(h))
    return sym2_field(ctx.chart, 0.5 * lich.full() - ds.full() - 0.5 * hs.full())


def d_laplace(g, h: TensorField, f: TensorField) -> TensorField:
    """Δ'f = ⟨h, ∇²f⟩ − ⟨δh + ½∇tr h, ∇f⟩."""
    ctx = _as_ctx(g)
    gi = ctx.g.ginv
    h_up = np.einsum("...ia,...jb,...ab->...ij", gi, gi, h.full())
    hess = hessian(ctx, f).full()
    df = _grad_scalar(ctx, f.values)
    dh = divergence(ctx, h).values
    dtr = _grad_scalar(ctx, ctx.trace(h).values)
    vals = (np.einsum("...ij,...ij->...", h_up, hess)
            - np.einsum("...ij,...i,...j->...", gi, dh + 0.5 * dtr, df))
    return scalar_field(ctx.chart, vals)


def d_div(g, h: TensorField, omega: TensorField) -> TensorField:
    """δ'ω = ⟨h, ∇ω⟩ − ⟨δh, ω⟩ − ½⟨∇tr h, ω⟩ (variation of δ on one-forms)."""
    ctx = _as_ctx(g)
    gi = ctx.g.ginv
    h_up = np.einsum("...ia,...jb,...ab->...ij", gi, gi, h.full())
    grad_om = covd(ctx.chart, ctx.gamma, omega.values, 1)   # (a, i)
    dh = divergence(ctx, h).values
    dtr = _grad_scalar(ctx, ctx.trace(h).values)
    vals = (np.einsum("...ai,...ai->...", h_up, grad_om)
            - np.einsum("...ij,...i,...j->...", gi, dh, omega.values)
            - 0.5 * np.einsum("...ij,...i,...j->...", gi, dtr, omega.values))
    return scalar_field(ctx.chart, vals)


def d_vol(g, h: TensorField) -> TensorField:
    """D dV(h) relative to dV^g, i.e. ½ tr_g h."""
    ctx = _as_ctx(g)
    return scalar_field(ctx.chart, 0.5 * ctx.trace(h).values)


def d2_vol(g, h: TensorField, k: TensorField) -> TensorField:
    """Second variation density ½tr k + ¼(tr h)² − ½|h|² (relative to dV^g)."""
    ctx = _as_ctx(g)
    trh = ctx.trace(h).values
    trk = ctx.trace(k).values
    h2 = ctx.ip(h, h)
    return scalar_field(ctx.chart, 0.5 * trk + 0.25 * trh ** 2 - 0.5 * h2)


# ---------------------------------------------------------------------------
# finite-difference cross-check harness
# ---------------------------------------------------------------------------

@dataclass
class VariationReport:
    """Analytic-vs-FD comparison for one variation formula."""

    tag: str
    analytic: np.ndarray
    fd: np.ndarray
    abs_residual: float
    rel_residual: float
    order: float
    steps: tuple
    monotone: bool

    def summary(self) -> dict:
        return {"tag": self.tag, "abs_residual": self.abs_residual,
                "rel_residual": self.rel_residual, "order": self.order,
                "steps": list(self.steps), "monotone": self.monotone}


def _scal_of(g: MetricField, h: TensorField, t: float) -> np.ndarray:
    return curvature(metric_plus(g, h, t), need_riemann=False).scal


def _ric_of(g: MetricField, h: TensorField, t: float) -> np.ndarray:
    return curvature(metric_plus(g, h, t), need_riemann=False).ricci


def _vol_density_of(g: MetricField, h: TensorField, t: float) -> np.ndarray:
    return metric_plus(g, h, t).sqrt_det / g.sqrt_det


def fd_derivative_ladder(fun, steps, order: int = 1):
    """Centered first or second t-derivatives of fun(t) at 0 for each step."""
    out = []
    if order == 1:
        for s in steps:
            out.append((fun(s) - fun(-s)) / (2.0 * s))
    elif order == 2:
        f0 = fun(0.0)
        for s in steps:
            out.append((fun(s) - 2.0 * f0 + fun(-s)) / (s * s))
    else:
        raise ValueError("order must be 1 or 2")
    return out


def richardson(ladder, steps):
    """One Richardson stage on a centered-difference ladder (O(s²) → O(s⁴))."""
    vals = []
    for i in range(len(ladder) - 1):
        r = (steps[i] / steps[i + 1]) ** 2
        vals.append((r * ladder[i + 1] - ladder[i]) / (r - 1.0))
    return vals[-1]


def ladder_order(ladder, steps) -> tuple[float, bool]:
    """Convergence order from successive ladder differences; flags non-monotone."""
    diffs = [float(np.max(np.abs(ladder[i + 1] - ladder[i])))
             for i in range(len(ladder) - 1)]
    if len(diffs) < 2 or min(diffs) == 0.0:
        return float("nan"), True
    orders = []
    for i in range(len(diffs) - 1):
        orders.append(np.log(diffs[i] / diffs[i + 1]) / np.log(steps[i] / steps[i + 1]))
    monotone = all(diffs[i + 1] < diffs[i] for i in range(len(diffs) - 1))
    return float(np.mean(orders)), monotone


DEFAULT_STEPS = (1e-2, 5e-3, 2.5e-3)


def fd_crosscheck(tag: str, g, h: TensorField, steps=DEFAULT_STEPS,
                  derivative: int = 1, **kw) -> VariationReport:
    """Richardson-extrapolated FD derivative vs the analytic formula.

    Tags: 'scal' (derivative 1 or 2), 'ric', 'vol' (1 or 2), 'lambda'.
    Extra data via kw: k (for vol second variation), alpha (lambda).
    """
    ctx = _as_ctx(g)
    gm = ctx.g
    if tag == "scal":
        fun = lambda t: _scal_of(gm, h, t)
        analytic = (d_scal(ctx, h) if derivative == 1 else d2_scal(ctx, h)).values
    elif tag == "ric":
        fun = lambda t: _ric_of(gm, h, t)
        if derivative != 1:
            raise ValueError("ric cross-check implements the first variation")
        analytic = d_ric(ctx, h).full()
    elif tag == "vol":
        k = kw.get("k")
        if derivative == 1:
            fun = lambda t: _vol_density_of(gm, h, t)
            analytic = d_vol(ctx, h).values
        else:
            if k is None:
                raise ValueError("vol second variation needs k")
            fun = lambda t: metric_plus_quadratic_density(gm, h, k, t)
            analytic = d2_vol(ctx, h, k).values
    elif tag == "lambda":
        from .spectral import lambda_alpha
        alpha = kw.get("alpha", 1.0)
        def fun(t):
            c = make_context(metric_plus(gm, h, t), bc=ctx.bc)
            return np.array(lambda_alpha(c, alpha).value)
        from .spectral import grad_lambda_pairing
        analytic = np.array(grad_lambda_pairing(ctx, kw.get("alpha", 1.0), h))
    else:
        raise ValueError(f"unknown tag {tag!r}")

    ladder = fd_derivative_ladder(fun, steps, order=derivative)
    fd = richardson(ladder, steps)
    order, monotone = ladder_order(ladder, steps)
    w = ctx.weights
    if analytic.shape == ctx.chart.shape:
        num = float(np.sqrt(np.sum(w * (analytic - fd) ** 2)))
        den = float(np.sqrt(np.sum(w * analytic ** 2)))
    else:
        num = float(np.sqrt(np.sum(w[..., None, None] * (analytic - fd) ** 2)))
        den = float(np.sqrt(np.sum(w[..., None, None] * analytic ** 2)))
    rel = num / max(den, 1e-300)
    return VariationReport(tag=tag, analytic=analytic, fd=fd, abs_residual=num,
                           rel_residual=rel, order=order, steps=tuple(steps),
                           monotone=monotone)


def metric_plus_quadratic_density(g: MetricField, h: TensorField, k: TensorField,
                                  t: float) -> np.ndarray:
    """√det(g + t h + t²k/2)/√det g, the density along the quadratic path."""
    vals = g.field.values + t * h.values + 0.5 * t * t * k.values
    return MetricField(TensorField(g.chart, "sym2", vals)).sqrt_det / g.sqrt_det
