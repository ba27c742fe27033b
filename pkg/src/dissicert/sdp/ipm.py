"""Primal-dual interior-point solver on the homogeneous self-dual embedding.

The algorithm is a Mehrotra predictor-corrector with Nesterov-Todd scaling on
the simplified homogeneous model: a solution with tau > 0 yields an optimal
(or feasible) point, a ray with kappa > 0 yields a Farkas certificate of
infeasibility, and anything else is reported as a numerical failure. Per
iteration there is one Cholesky factorization of the Schur complement
H = A W A^T and three back-solves (predictor, corrector, and the shared
tau column). Free variables ride along through a small saddle-point
complement, so equality-only decision variables never enter the cone.

Status contract: when the returned status is Optimal or Feasible, the decision
vector has been re-checked against the *original* problem data (equality
residual and minimum block eigenvalue within tolerance); candidates that fail
that check are never reported as solved.
"""

from __future__ import annotations

import time

import numpy as np
import scipy.linalg as sla

from .kernels import adjoint_matrix, apply_rows, max_step_psd, nt_scaling, schur_block_update
from .presolve import ConicProgram, build_conic
from .problem import (
    FEASIBLE,
    INFEASIBLE,
    NUMERICAL_FAILURE,
    OPTIMAL,
    SdpProblem,
    SdpSolution,
)

try:
    from scipy.linalg.blas import dsymv as _dsymv
except ImportError:  # pragma: no cover - blas wrappers ship with scipy
    _dsymv = None


def _symv_upper(h: np.ndarray, x: np.ndarray) -> np.ndarray:
    """h @ x using only the valid upper triangle of the C-ordered buffer."""
    if h.shape[0] == 0:
        return np.zeros(0)
    if _dsymv is not None:
        # h.T is a Fortran-ordered view; its lower triangle is our upper one.
        return _dsymv(1.0, h.T, x, lower=1)
    hs = np.triu(h)
    return hs @ x + hs.T @ x - np.diag(h) * x


def _factor_upper(h: np.ndarray):
    """Cholesky of the symmetric matrix stored in the upper triangle of h.

    Regularizes the diagonal in place on failure, growing the shift until the
    factorization succeeds or gives up. Returns (factor, shift) with factor
    None on failure.
    """
    m = h.shape[0]
    if m == 0:
        return (np.zeros((0, 0)), True), 0.0
    dmean = float(np.mean(np.abs(np.diag(h))))
    if not np.isfinite(dmean):
        return None, 0.0
    dmean = max(dmean, 1e-300)
    total = 0.0
    shift = 0.0
    idx = np.arange(m)
    for _ in range(10):
        if shift:
            h[idx, idx] += shift
            total += shift
        try:
            fac = sla.cho_factor(h.T, lower=True, check_finite=False)
            return fac, total
        except sla.LinAlgError:
            shift = 1e-12 * dmean if shift == 0.0 else shift * 100.0
            if shift > 1e-2 * dmean:
                break
    return None, total


def solve(
    problem: SdpProblem,
    *,
    tol: float = 1e-7,
    tol_gap: float | None = None,
    max_iter: int = 200,
    verbose: bool = False,
    feasibility_stop: bool | None = None,
) -> SdpSolution:
    """Solve the block-LMI problem; see the module docstring for the contract."""
    t0 = time.perf_counter()
    conic = build_conic(problem)
    sol = _run(problem, conic, tol, tol_gap, max_iter, verbose, feasibility_stop)
    sol.solve_seconds = time.perf_counter() - t0
    return sol


def _run(problem, conic, tol, tol_gap, max_iter, verbose, feasibility_stop):
    if conic.infeasible_rows:
        y = np.zeros(problem.n_vars)
        rows = conic.infeasible_rows[:5]
        return SdpSolution(
            y=y,
            status=INFEASIBLE,
            objective=float("nan"),
            eq_residual=problem.eq_residual(y),
            min_block_eig=problem.min_block_eig(y),
            iterations=0,
            message=f"equality row(s) {rows} have no variables but nonzero right-hand side",
        )
    if not conic.blocks:
        raise ValueError("problem has no matrix blocks; nothing for the conic solver to do")
    if tol_gap is None:
        tol_gap = tol

    blocks = conic.blocks
    sizes = [bl.size for bl in blocks]
    nu = sum(sizes)
    m = conic.n_rows
    nf = conic.a_free.shape[1]
    b = conic.b
    af = conic.a_free
    cf = conic.c_free
    cmats = [bl.cmat for bl in blocks]
    c_is_zero = all(not bl.cmat.any() for bl in blocks) and not cf.any()
    if feasibility_stop is None:
        feasibility_stop = c_is_zero

    bnorm = 1.0 + (float(np.max(np.abs(b))) if m else 0.0)
    cnorm = 1.0 + max([float(np.max(np.abs(c))) for c in cmats] + ([float(np.max(np.abs(cf)))] if nf else []))
    hinf = 1.0 + (float(np.max(np.abs(problem.eq_h))) if problem.eq_h.size else 0.0)

    xs = [np.eye(s) for s in sizes]
    zs = [np.eye(s) for s in sizes]
    xf = np.zeros(nf)
    yv = np.zeros(m)
    tau = 1.0
    kappa = 1.0
    mu0 = None
    best_y = None
    best_score = np.inf
    accept_scale = 1.0
    stall = 0
    prev_mu = None
    tiny_steps = 0
    message = "maximum iterations reached"

    def cone_apply(mats):
        out = np.zeros(m)
        for bl, t in zip(blocks, mats):
            if bl.rows.size:
                out += apply_rows(bl.rows, bl.ci, bl.cj, bl.cv, t, m)
        return out

    def cone_adjoint(vec):
        return [adjoint_matrix(bl.rows, bl.ci, bl.cj, bl.cv, vec, bl.size) for bl in blocks]

    def extract_y(tau_val):
        y = np.empty(problem.n_vars)
        for k, tag in enumerate(conic.var_map):
            if tag[0] == "gram":
                _, bi, i, j = tag
                y[k] = xs[bi][i, j] / tau_val
            else:
                y[k] = xf[tag[1]] / tau_val
        return y

    def finish(status, y, it, msg, gap=float("nan")):
        obj = float(problem.objective @ y) if np.all(np.isfinite(y)) else float("nan")
        return SdpSolution(
            y=y,
            status=status,
            objective=obj,
            eq_residual=problem.eq_residual(y),
            min_block_eig=problem.min_block_eig(y),
            iterations=it,
            message=msg,
            gap=gap,
        )

    def try_accept(status, it, gap):
        y = extract_y(tau)
        eq_res = problem.eq_residual(y)
        min_eig = problem.min_block_eig(y)
        if eq_res <= tol and min_eig >= -tol:
            return SdpSolution(
                y=y,
                status=status,
                objective=float(problem.objective @ y),
                eq_residual=eq_res,
                min_block_eig=min_eig,
                iterations=it,
                gap=gap,
            )
        return None

    def certify_infeasible():
        by_ = float(b @ yv)
        if by_ <= 0:
            return None
        yh = yv / by_
        ref = tol * (1.0 + float(np.max(np.abs(yh))))
        worst = -np.inf
        for bl in blocks:
            mt = adjoint_matrix(bl.rows, bl.ci, bl.cj, bl.cv, yh, bl.size)
            if bl.size:
                worst = max(worst, float(np.linalg.eigvalsh(mt)[-1]))
        free_res = float(np.max(np.abs(af.T @ yh))) if nf else 0.0
        if worst <= ref and free_res <= ref:
            return worst, free_res
        return None

    if m == 0:
        # No equalities and no affine blocks survive presolve: the zero point
        # is feasible, and the infimum is 0 exactly when the objective blocks
        # are all PSD (there is nothing to push against otherwise).
        y = np.zeros(problem.n_vars)
        if c_is_zero:
            return finish(FEASIBLE, y, 0, "no constraints; zero point is feasible")
        if not cf.any() and all(float(np.linalg.eigvalsh(c)[0]) >= -1e-12 for c in cmats):
            return finish(OPTIMAL, y, 0, "no constraints; objective minimized at zero", gap=0.0)
        return finish(NUMERICAL_FAILURE, y, 0, "objective unbounded below (no constraints)")

    for it in range(max_iter):
        ax_cone = cone_apply(xs)
        ax = ax_cone + (af @ xf if nf else 0.0)
        r_p = ax - b * tau
        aty = cone_adjoint(yv)
        r_d = [c * tau - z - a for c, z, a in zip(cmats, zs, aty)]
        r_df = cf * tau - af.T @ yv if nf else np.zeros(0)
        cx = sum(float(np.sum(c * x)) for c, x in zip(cmats, xs))
        if nf:
            cx += float(cf @ xf)
        by = float(b @ yv)
        r_g = by - cx - kappa
        comp = sum(float(np.sum(x * z)) for x, z in zip(xs, zs)) + tau * kappa
        mu = comp / (nu + 1)
        if mu0 is None:
            mu0 = mu

        pres = (float(np.max(np.abs(r_p))) if m else 0.0) / (tau * bnorm)
        dres = max(float(np.max(np.abs(r))) for r in r_d)
        if nf and r_df.size:
            dres = max(dres, float(np.max(np.abs(r_df))))
        dres /= tau * cnorm
        pobj = cx / tau
        dobj = by / tau
        relgap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))

        if verbose:
            print(
                f"  it {it:3d}  mu {mu:9.2e}  pres {pres:9.2e}  dres {dres:9.2e}"
                f"  gap {relgap:9.2e}  tau {tau:8.2e}  kappa {kappa:8.2e}"
            )

        score = max(pres, dres, 0.0 if c_is_zero else relgap)
        if score < best_score:
            best_score = score
            best_y = extract_y(tau)

        if pres <= tol and dres <= tol and (c_is_zero or relgap <= tol_gap):
            sol = try_accept(FEASIBLE if c_is_zero else OPTIMAL, it, relgap)
            if sol is not None:
                return sol
            accept_scale *= 0.2
            if pres <= 1e-3 * tol and dres <= 1e-3 * tol:
                message = "converged internally but the recovered point failed the final check"
                break
        elif feasibility_stop and pres <= tol * accept_scale:
            sol = try_accept(FEASIBLE, it, relgap)
            if sol is not None:
                return sol
            accept_scale *= 0.2

        heading_out = kappa > 1e3 * tau and mu <= 1e-3 * mu0
        if heading_out or tau < 1e-9:
            cert = certify_infeasible()
            if cert is not None:
                y = best_y if best_y is not None else np.zeros(problem.n_vars)
                return finish(
                    INFEASIBLE,
                    y,
                    it,
                    f"Farkas certificate: max dual-slack eigenvalue {cert[0]:.2e}, "
                    f"free-variable residual {cert[1]:.2e}",
                )
            xnorm = max(float(np.max(np.abs(x))) for x in xs)
            if cx < -tol * xnorm and float(np.max(np.abs(ax))) <= tol * max(1.0, xnorm):
                y = best_y if best_y is not None else np.zeros(problem.n_vars)
                return finish(
                    NUMERICAL_FAILURE,
                    y,
                    it,
                    "objective appears unbounded below (improving ray found)",
                )
            if tau < 1e-12:
                message = "homogeneous model collapsed without a verifiable certificate"
                break

        if prev_mu is not None and mu > 0.995 * prev_mu and score > tol:
            stall += 1
            if stall >= 12:
                message = "no progress over 12 iterations"
                break
        else:
            stall = 0
        prev_mu = mu

        try:
            scal = [nt_scaling(x, z) for x, z in zip(xs, zs)]
        except (np.linalg.LinAlgError, sla.LinAlgError):
            message = "scaling breakdown: iterate left the cone numerically"
            break

        h = np.zeros((m, m))
        for bl, (g, w, lam) in zip(blocks, scal):
            if bl.rows.size:
                schur_block_update(h, bl.rows, bl.ci, bl.cj, bl.cv, w)
        fac, shift = _factor_upper(h)
        if fac is None:
            message = "Schur complement factorization failed"
            break

        if nf:
            u_free = sla.cho_solve(fac, af, check_finite=False)
            s_free = af.T @ u_free
            try:
                s_fac = sla.cho_factor(s_free + 1e-14 * np.eye(nf), check_finite=False)
            except sla.LinAlgError:
                message = "free-variable block is numerically rank deficient"
                break

        def k_solve(r_vec, s_vec):
            y0 = sla.cho_solve(fac, r_vec, check_finite=False)
            if nf:
                w0 = sla.cho_solve(s_fac, af.T @ y0 - s_vec, check_finite=False)
                dy = y0 - u_free @ w0
                dxf = w0
            else:
                dy = y0
                dxf = np.zeros(0)
            ry = r_vec - _symv_upper(h, dy) - (af @ dxf if nf else 0.0)
            if float(np.max(np.abs(ry), initial=0.0)) > 1e-13 * (1.0 + float(np.max(np.abs(r_vec), initial=0.0))):
                y1 = sla.cho_solve(fac, ry, check_finite=False)
                if nf:
                    rs = s_vec - af.T @ dy
                    w1 = sla.cho_solve(s_fac, af.T @ y1 - rs, check_finite=False)
                    dy = dy + y1 - u_free @ w1
                    dxf = dxf + w1
                else:
                    dy = dy + y1
            return dy, dxf

        if c_is_zero:
            wcw = None
            u_c = np.zeros(m)
            c_wc = 0.0
        else:
            wcw = [w @ c @ w for (g, w, lam), c in zip(scal, cmats)]
            u_c = cone_apply(wcw)
            c_wc = sum(float(np.sum(c * t)) for c, t in zip(cmats, wcw))
        s2y, s2f = k_solve(b + u_c, cf)
        coef_a = float(b @ s2y) - float(u_c @ s2y) + c_wc + kappa / tau
        if nf:
            coef_a -= float(cf @ s2f)

        wrdw = [w @ r @ w for (g, w, lam), r in zip(scal, r_d)]
        a_wrdw = cone_apply(wrdw)
        c_wrd = 0.0 if c_is_zero else sum(float(np.sum(c * t)) for c, t in zip(cmats, wrdw))

        def direction(eta, gdg, a_gdg, c_gdg, d_tk):
            rhs_y = -eta * r_p - a_gdg + eta * a_wrdw
            s1y, s1f = k_solve(rhs_y, eta * r_df if nf else np.zeros(0))
            coef_b = float(b @ s1y) - c_gdg - float(u_c @ s1y) + eta * c_wrd - d_tk / tau + eta * r_g
            if nf:
                coef_b -= float(cf @ s1f)
            dtau = -coef_b / coef_a if abs(coef_a) > 1e-300 else 0.0
            dy = s1y + dtau * s2y
            dxf = (s1f + dtau * s2f) if nf else np.zeros(0)
            atdy = cone_adjoint(dy)
            dz = [-a + c * dtau + eta * r for a, c, r in zip(atdy, cmats, r_d)]
            dx = [gd - w @ d @ w for gd, (g, w, lam), d in zip(gdg, scal, dz)]
            dkappa = (d_tk - kappa * dtau) / tau
            return dy, dxf, dtau, dkappa, dx, dz

        def max_step(dx, dz, dtau, dkappa):
            alpha = 1.0
            for x, z, dxb, dzb in zip(xs, zs, dx, dz):
                alpha = min(alpha, max_step_psd(x, dxb), max_step_psd(z, dzb))
            if dtau < 0:
                alpha = min(alpha, -tau / dtau)
            if dkappa < 0:
                alpha = min(alpha, -kappa / dkappa)
            return alpha

        # Predictor: sigma = 0, full residual target. In the scaled space the
        # right-hand side is -Lambda^2, so G D G^T collapses to -X exactly.
        gdg_aff = [-x for x in xs]
        d_aff = direction(1.0, gdg_aff, -ax_cone, -(cx - (float(cf @ xf) if nf else 0.0)), -tau * kappa)
        dy_a, dxf_a, dtau_a, dkappa_a, dx_a, dz_a = d_aff
        alpha_aff = max_step(dx_a, dz_a, dtau_a, dkappa_a)

        comp_aff = (
            sum(
                float(np.sum((x + alpha_aff * dxb) * (z + alpha_aff * dzb)))
                for x, z, dxb, dzb in zip(xs, zs, dx_a, dz_a)
            )
            + (tau + alpha_aff * dtau_a) * (kappa + alpha_aff * dkappa_a)
        )
        mu_aff = max(comp_aff / (nu + 1), 0.0)
        sigma = min(max((mu_aff / mu) ** 3, 1e-8), 0.99)

        # Corrector with Mehrotra second-order term in the scaled space.
        gdg = []
        c_gdg = 0.0
        for (g, w, lam), dxb, dzb, cmat in zip(scal, dx_a, dz_a, cmats):
            ginv = np.linalg.inv(g)
            xhat = ginv @ dxb @ ginv.T
            zhat = g.T @ dzb @ g
            corr = xhat @ zhat
            corr = 0.5 * (corr + corr.T)
            rhs = -corr
            rhs[np.diag_indices_from(rhs)] += sigma * mu - lam * lam
            dmat = 2.0 * rhs / (lam[:, None] + lam[None, :])
            gd = g @ dmat @ g.T
            gd = 0.5 * (gd + gd.T)
            gdg.append(gd)
            if not c_is_zero:
                c_gdg += float(np.sum(cmat * gd))
        eta = 1.0 - sigma
        d_tk = sigma * mu - tau * kappa - dtau_a * dkappa_a
        dy, dxf, dtau, dkappa, dx, dz = direction(eta, gdg, cone_apply(gdg), c_gdg, d_tk)

        alpha = min(0.99 * max_step(dx, dz, dtau, dkappa), 1.0)
        if alpha < 1e-7:
            tiny_steps += 1
            if tiny_steps >= 3:
                message = "step length collapsed"
                break
        else:
            tiny_steps = 0

        for x, dxb in zip(xs, dx):
            x += alpha * dxb
            x += x.T
            x *= 0.5
        for z, dzb in zip(zs, dz):
            z += alpha * dzb
            z += z.T
            z *= 0.5
        yv += alpha * dy
        if nf:
            xf += alpha * dxf
        tau += alpha * dtau
        kappa += alpha * dkappa

    y = best_y if best_y is not None else extract_y(tau)
    return finish(NUMERICAL_FAILURE, y, max_iter, message)
