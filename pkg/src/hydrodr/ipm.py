"""Mehrotra predictor-corrector interior-point method for sparse LPs.

The solver converts the general form (equalities, >= inequalities, box
bounds) into equality standard form with surplus variables and runs a
primal-dual path-following iteration for bounded variables.  Search
directions come from the regularized augmented system

    [ -(Theta + rho I)   A^T      ] [dx]   [ r_dual_hat ]
    [  A                 delta I  ] [dy] = [ r_primal   ],

a quasi-definite matrix factorized with SuperLU; iterative refinement
against the unregularized operator keeps equality duals accurate at the
requested tolerance.  Dual sign convention: d(objective)/d(b_eq) = y_eq.

Infeasible and unbounded instances are classified (not raised) by a
deterministic two-phase diagnosis that runs only when the main iteration
fails to converge.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .lp import LinearProgram, SolveResult, check_kkt

log = logging.getLogger(__name__)

_STEP_SCALE = 0.9995        # fraction-to-boundary damping
_MIN_MU = 1e-16
_DIVERGE = 1e40


@dataclass
class _Std:
    """Equality standard form min c.x s.t. Ax=b, lb<=x<=ub plus bookkeeping
    to undo surplus columns, fixed-variable elimination and empty-row drops."""

    c: np.ndarray
    a: sp.csr_matrix
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    n_orig: int
    m_eq: int
    m_in: int
    fixed_cols: np.ndarray      # bool over standard-form columns
    fixed_vals: np.ndarray
    kept_rows: np.ndarray       # bool over standard-form rows


def _standardize(lp: LinearProgram) -> _Std:
    n, m_eq, m_in = lp.n_vars, lp.n_eq, lp.n_in
    if m_in:
        a = sp.bmat([[lp.a_eq, None],
                     [lp.a_in, -sp.identity(m_in, format="csr")]], format="csr")
    else:
        a = lp.a_eq.tocsr(copy=True)
    c = np.concatenate([lp.c, np.zeros(m_in)])
    b = np.concatenate([lp.b_eq, lp.b_in])
    lb = np.concatenate([lp.lb, np.zeros(m_in)])
    ub = np.concatenate([lp.ub, np.full(m_in, np.inf)])
    return _Std(c, a, b, lb, ub, n, m_eq, m_in,
                fixed_cols=np.zeros(c.size, dtype=bool),
                fixed_vals=np.zeros(c.size),
                kept_rows=np.ones(b.size, dtype=bool))


def _presolve(std: _Std) -> str | None:
    """Eliminate fixed columns and empty rows in place.

    Returns "infeasible" when an empty row has a nonzero right-hand side,
    else None.  Deliberately minimal so tagged-row duals stay recoverable.
    """
    fixed = np.isfinite(std.lb) & (std.lb == std.ub)
    if np.any(fixed):
        vals = np.where(fixed, std.lb, 0.0)
        std.b = std.b - std.a @ vals
        keep = ~fixed
        std.a = std.a[:, keep].tocsr()
        std.c = std.c[keep]
        std.lb = std.lb[keep]
        std.ub = std.ub[keep]
        std.fixed_cols = fixed
        std.fixed_vals = vals
    nnz_row = np.diff(std.a.indptr)
    empty = nnz_row == 0
    if np.any(empty):
        tol_b = 1e-9 * (1.0 + float(np.max(np.abs(std.b), initial=0.0)))
        if np.any(np.abs(std.b[empty]) > tol_b):
            return "infeasible"
        keep = ~empty
        std.a = std.a[keep].tocsr()
        std.b = std.b[keep]
        std.kept_rows = keep
    return None


def _seg_max(data: np.ndarray, indptr: np.ndarray, count: int) -> np.ndarray:
    """Max |value| per compressed segment, 1.0 for empty or all-zero ones."""
    if data.size == 0:
        return np.ones(count)
    starts = np.minimum(indptr[:-1], data.size - 1)
    out = np.maximum.reduceat(np.abs(data), starts)
    out = np.where(np.diff(indptr) > 0, out, 1.0)
    return np.where(out > 0.0, out, 1.0)


def _ruiz_scale(a: sp.csr_matrix, passes: int = 4):
    """Symmetric max-norm equilibration; returns (row_scale, col_scale)."""
    m, n = a.shape
    dr = np.ones(m)
    dc = np.ones(n)
    work = a.copy()
    for _ in range(passes):
        rs = 1.0 / np.sqrt(_seg_max(work.data, work.indptr, m))
        work = sp.diags(rs) @ work
        dr *= rs
        csc = work.tocsc()
        cs = 1.0 / np.sqrt(_seg_max(csc.data, csc.indptr, n))
        work = (csc @ sp.diags(cs)).tocsr()
        dc *= cs
    return dr, dc


def _bounds_only_solve(c, lb, ub):
    """Closed form for LPs with no constraint rows left after presolve."""
    x = np.where(c > 0, lb, np.where(c < 0, ub, np.clip(0.0, lb, ub)))
    if np.any(~np.isfinite(x)):
        return None, None, None, "unbounded"
    zl = np.maximum(c, 0.0)
    zu = np.maximum(-c, 0.0)
    return x, zl, zu, "optimal"


class _Core:
    """One interior-point run on a (reduced, scaled) standard-form LP."""

    def __init__(self, c, a, b, lb, ub, tol, max_iter):
        self.tol = tol
        self.max_iter = max_iter
        self.c0, self.a0, self.b0 = c, a.tocsr(), b
        self.lb0, self.ub0 = lb, ub
        self.dr, self.dc = _ruiz_scale(self.a0)
        self.a = (sp.diags(self.dr) @ self.a0 @ sp.diags(self.dc)).tocsr()
        self.at = self.a.T.tocsr()
        self.b = self.dr * b
        self.c = self.dc * c
        with np.errstate(invalid="ignore"):
            self.lb = lb / self.dc
            self.ub = ub / self.dc
        self.m, self.n = self.a.shape
        self.jl = np.isfinite(self.lb)
        self.ju = np.isfinite(self.ub)
        self.nb = int(self.jl.sum() + self.ju.sum())
        self.mu_trace: list[float] = []
        # Augmented-system pattern is fixed; per-iteration factorizations
        # only rewrite the diagonal, so build it once and cache positions.
        nm = self.n + self.m
        self.kkt = sp.bmat([[sp.diags(np.ones(self.n)), self.a.T],
                            [self.a, sp.diags(np.ones(self.m))]],
                           format="csc")
        self.kkt.sort_indices()
        diag_pos = np.empty(nm, dtype=np.int64)
        for j in range(nm):
            lo, hi = self.kkt.indptr[j], self.kkt.indptr[j + 1]
            k = np.searchsorted(self.kkt.indices[lo:hi], j)
            diag_pos[j] = lo + k
        self.diag_pos = diag_pos
        self.base_data = self.kkt.data.copy()
        self.base_data[diag_pos] = 0.0

    # -- residuals in the original (unscaled) data ------------------------
    def _true_residuals(self, x, y, zl, zu):
        xo = self.dc * x
        yo = self.dr * y
        zlo = np.where(self.jl, zl / self.dc, 0.0)
        zuo = np.where(self.ju, zu / self.dc, 0.0)
        rp = self.b0 - self.a0 @ xo
        rd = self.c0 - self.a0.T @ yo - zlo + zuo
        rp_rel = float(np.max(np.abs(rp), initial=0.0)) / \
            (1.0 + float(np.max(np.abs(self.b0), initial=0.0)))
        rd_rel = float(np.max(np.abs(rd), initial=0.0)) / \
            (1.0 + float(np.max(np.abs(self.c0), initial=0.0)))
        pobj = float(self.c0 @ xo)
        dobj = float(self.b0 @ yo)
        dobj += float(np.sum(self.lb0[self.jl] * zlo[self.jl]))
        dobj -= float(np.sum(self.ub0[self.ju] * zuo[self.ju]))
        gap_rel = abs(pobj - dobj) / (1.0 + abs(pobj))
        return rp_rel, rd_rel, gap_rel

    def _factor(self, d_diag):
        reg = 1e-10 * max(1.0, float(np.max(np.abs(self.a.data), initial=1.0)))
        for _ in range(4):
            data = self.base_data.copy()
            data[self.diag_pos[:self.n]] = -(d_diag + reg)
            data[self.diag_pos[self.n:]] = reg
            k = sp.csc_matrix((data, self.kkt.indices, self.kkt.indptr),
                              shape=self.kkt.shape)
            try:
                return splu(k), reg
            except RuntimeError:
                reg *= 100.0
        raise RuntimeError("augmented KKT matrix could not be factorized")

    def _solve_kkt(self, lu, d_diag, r1, r2):
        rhs = np.concatenate([r1, r2])
        sol = lu.solve(rhs)
        dx, dy = sol[:self.n], sol[self.n:]
        # refinement vs the unregularized operator
        for _ in range(2):
            res1 = r1 - (-(d_diag * dx) + self.at @ dy)
            res2 = r2 - self.a @ dx
            err = max(np.max(np.abs(res1), initial=0.0),
                      np.max(np.abs(res2), initial=0.0))
            if err <= 1e-12 * (1.0 + np.max(np.abs(rhs))):
                break
            corr = lu.solve(np.concatenate([res1, res2]))
            dx = dx + corr[:self.n]
            dy = dy + corr[self.n:]
        return dx, dy

    def _start(self):
        n, m = self.n, self.m
        if m:
            ones = np.ones(n)
            lu, _ = self._factor(ones)
            sol = self._solve_kkt(lu, ones, np.zeros(n), self.b)
            x = sol[0]
            sol2 = self._solve_kkt(lu, ones, self.c, np.zeros(m))
            y = sol2[1]
            z = self.c - self.at @ y
        else:
            x = np.zeros(n)
            y = np.zeros(0)
            z = self.c.copy()
        span = self.ub - self.lb
        pad = np.where(self.jl & self.ju, np.minimum(0.4 * span, 1.0), 1.0)
        lo = np.where(self.jl, self.lb + pad, -np.inf)
        hi = np.where(self.ju, self.ub - pad, np.inf)
        x = np.clip(x, lo, hi)
        gl = np.where(self.jl, x - self.lb, 1.0)
        gu = np.where(self.ju, self.ub - x, 1.0)
        zl = np.where(self.jl, np.maximum(z, 0.0) + 1.0, 0.0)
        zu = np.where(self.ju, np.maximum(-z, 0.0) + 1.0, 0.0)
        return x, y, zl, zu, gl, gu

    @staticmethod
    def _max_step(v, dv):
        neg = dv < 0
        if not np.any(neg):
            return 1.0
        return min(1.0, float(np.min(-v[neg] / dv[neg])))

    def run(self):
        x, y, zl, zu, gl, gu = self._start()
        status = "iteration_limit"
        it = 0
        stall = 0
        best_err = np.inf
        for it in range(1, self.max_iter + 1):
            rp_rel, rd_rel, gap_rel = self._true_residuals(x, y, zl, zu)
            mu = 0.0
            if self.nb:
                mu = (float(gl[self.jl] @ zl[self.jl]) +
                      float(gu[self.ju] @ zu[self.ju])) / self.nb
            self.mu_trace.append(mu)
            err = max(rp_rel, rd_rel, gap_rel)
            if err <= self.tol:
                status = "optimal"
                break
            if not np.isfinite(err) or np.max(np.abs(x)) > _DIVERGE or mu > _DIVERGE:
                status = "diverged"
                break
            if err < best_err * 0.999:
                best_err = err
                stall = 0
            else:
                stall += 1
                if stall > 30 or (mu < _MIN_MU and err > 1e3 * self.tol):
                    status = "diverged" if err > 1e-4 else "iteration_limit"
                    break

            rp = self.b - self.a @ x
            rd = self.c - self.at @ y - zl + zu
            d_diag = np.zeros(self.n)
            d_diag[self.jl] += zl[self.jl] / gl[self.jl]
            d_diag[self.ju] += zu[self.ju] / gu[self.ju]
            try:
                lu, _ = self._factor(d_diag)
            except RuntimeError:
                status = "diverged"
                break

            # predictor (affine scaling)
            rcl = np.where(self.jl, -gl * zl, 0.0)
            rcu = np.where(self.ju, -gu * zu, 0.0)
            r1 = rd - np.where(self.jl, rcl / gl, 0.0) + np.where(self.ju, rcu / gu, 0.0)
            dx_a, dy_a = self._solve_kkt(lu, d_diag, r1, rp)
            dzl_a = np.where(self.jl, (rcl - zl * dx_a) / gl, 0.0)
            dzu_a = np.where(self.ju, (rcu + zu * dx_a) / gu, 0.0)
            ap = min(self._max_step(gl[self.jl], dx_a[self.jl]),
                     self._max_step(gu[self.ju], -dx_a[self.ju]))
            ad = min(self._max_step(zl[self.jl], dzl_a[self.jl]),
                     self._max_step(zu[self.ju], dzu_a[self.ju]))
            if self.nb:
                mu_aff = (float((gl + ap * dx_a)[self.jl] @ (zl + ad * dzl_a)[self.jl]) +
                          float((gu - ap * dx_a)[self.ju] @ (zu + ad * dzu_a)[self.ju])) / self.nb
                sigma = float(np.clip((max(mu_aff, 0.0) / max(mu, 1e-300)) ** 3, 1e-8, 1.0 - 1e-8))
            else:
                sigma = 0.0

            # corrector + centering
            rcl = np.where(self.jl, sigma * mu - gl * zl - dx_a * dzl_a, 0.0)
            rcu = np.where(self.ju, sigma * mu - gu * zu + dx_a * dzu_a, 0.0)
            r1 = rd - np.where(self.jl, rcl / gl, 0.0) + np.where(self.ju, rcu / gu, 0.0)
            dx, dy = self._solve_kkt(lu, d_diag, r1, rp)
            dzl = np.where(self.jl, (rcl - zl * dx) / gl, 0.0)
            dzu = np.where(self.ju, (rcu + zu * dx) / gu, 0.0)

            ap = _STEP_SCALE * min(self._max_step(gl[self.jl], dx[self.jl]),
                                   self._max_step(gu[self.ju], -dx[self.ju]))
            ad = _STEP_SCALE * min(self._max_step(zl[self.jl], dzl[self.jl]),
                                   self._max_step(zu[self.ju], dzu[self.ju]))
            ap, ad = min(ap, 1.0), min(ad, 1.0)
            x = x + ap * dx
            gl = np.where(self.jl, gl + ap * dx, 1.0)
            gu = np.where(self.ju, gu - ap * dx, 1.0)
            y = y + ad * dy
            zl = np.where(self.jl, zl + ad * dzl, 0.0)
            zu = np.where(self.ju, zu + ad * dzu, 0.0)

        xo = self.dc * x
        yo = self.dr * y if self.m else np.zeros(0)
        zlo = np.where(self.jl, zl / self.dc, 0.0)
        zuo = np.where(self.ju, zu / self.dc, 0.0)
        return status, xo, yo, zlo, zuo, it, self.mu_trace


def _run_core(c, a, b, lb, ub, tol, max_iter):
    if a.shape[0] == 0:
        x, zl, zu, status = _bounds_only_solve(c, lb, ub)
        if status != "optimal":
            return status, None, None, None, None, 0, []
        return status, x, np.zeros(0), zl, zu, 0, [0.0]
    core = _Core(c, a, b, lb, ub, tol, max_iter)
    return core.run()


def _diagnose(std: _Std, tol: float, max_iter: int) -> str:
    """Classify a non-converged instance as infeasible/unbounded via two
    auxiliary always-solvable LPs (primal and dual elasticized feasibility)."""
    m, n = std.a.shape
    b_scale = 1.0 + float(np.max(np.abs(std.b), initial=0.0))
    # phase 1: min 1.(p+q) s.t. Ax + p - q = b
    a1 = sp.hstack([std.a, sp.identity(m), -sp.identity(m)], format="csr")
    c1 = np.concatenate([np.zeros(n), np.ones(2 * m)])
    lb1 = np.concatenate([std.lb, np.zeros(2 * m)])
    ub1 = np.concatenate([std.ub, np.full(2 * m, np.inf)])
    status, x1, *_ = _run_core(c1, a1, std.b, lb1, ub1, max(tol, 1e-9), max_iter)
    if status == "optimal":
        if float(c1 @ x1) > max(1e-7, 100 * tol) * b_scale:
            return "infeasible"
    else:
        return "iteration_limit"
    # dual feasibility: A^T y + zl - zu + p - q = c with zl, zu >= 0
    jl = np.isfinite(std.lb)
    ju = np.isfinite(std.ub)
    sl = sp.identity(n, format="csc")[:, jl]
    su = sp.identity(n, format="csc")[:, ju]
    a2 = sp.hstack([std.a.T, sl, -su, sp.identity(n), -sp.identity(n)], format="csr")
    nl, nu = int(jl.sum()), int(ju.sum())
    c2 = np.concatenate([np.zeros(m + nl + nu), np.ones(2 * n)])
    lb2 = np.concatenate([np.full(m, -np.inf), np.zeros(nl + nu + 2 * n)])
    ub2 = np.full(m + nl + nu + 2 * n, np.inf)
    c_scale = 1.0 + float(np.max(np.abs(std.c), initial=0.0))
    status, x2, *_ = _run_core(c2, a2, std.c, lb2, ub2, max(tol, 1e-9), max_iter)
    if status == "optimal" and float(c2 @ x2) > max(1e-7, 100 * tol) * c_scale:
        return "unbounded"
    return "iteration_limit"


def solve(lp: LinearProgram, tol: float = 1e-8, max_iter: int = 200) -> SolveResult:
    """Solve ``lp`` to ``tol``; never raises for well-posed infeasible input.

    On ``optimal`` the recomputed KKT residuals satisfy
    ``max(primal, dual, gap) <= tol`` and ``y_eq`` follows the convention
    ``d(objective)/d(b_eq) = y_eq``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    lp.validate()
    std = _standardize(lp)
    early = _presolve(std)
    if early is not None:
        return SolveResult(status=early, row_tags=dict(lp.row_tags))

    status, x_red, y_red, zl_red, zu_red, iters, mu_trace = _run_core(
        std.c, std.a, std.b, std.lb, std.ub, tol, max_iter)

    if status in ("diverged", "iteration_limit"):
        status = _diagnose(std, tol, max_iter)
        log.info("ipm did not converge; diagnosis=%s", status)
    if status != "optimal":
        return SolveResult(status=status, iterations=iters,
                           mu_trace=mu_trace, row_tags=dict(lp.row_tags))

    # undo presolve
    ns = std.fixed_cols.size
    x_std = np.array(std.fixed_vals)
    x_std[~std.fixed_cols] = x_red
    y_std = np.zeros(std.kept_rows.size)
    y_std[std.kept_rows] = y_red
    z_std = np.zeros(ns)
    z_std[~std.fixed_cols] = zl_red - zu_red
    if np.any(std.fixed_cols):
        c_full = np.concatenate([lp.c, np.zeros(std.m_in)])
        if std.m_in:
            a_full = sp.bmat([[lp.a_eq, None],
                              [lp.a_in, -sp.identity(std.m_in, format="csr")]],
                             format="csc")
        else:
            a_full = lp.a_eq.tocsc()
        fixed_idx = np.flatnonzero(std.fixed_cols)
        z_std[fixed_idx] = c_full[fixed_idx] - a_full[:, fixed_idx].T @ y_std

    n = std.n_orig
    x = x_std[:n]
    y_eq = y_std[:std.m_eq]
    y_in = y_std[std.m_eq:]
    z = z_std[:n]

    result = SolveResult(status="optimal", x=x, y_eq=y_eq, y_in=y_in, z=z,
                         objective=float(lp.c @ x), iterations=iters,
                         mu_trace=mu_trace, row_tags=dict(lp.row_tags))
    result.kkt = check_kkt(lp, result)
    if max(result.kkt) > tol * 10:
        # belt-and-braces: never report optimal with residuals far off spec
        log.warning("kkt residuals %s exceed tol=%g after convergence", result.kkt, tol)
        result.status = "iteration_limit"
    return result
