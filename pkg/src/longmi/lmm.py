"""Random-intercept linear mixed models with 1 or 2 nested groupings.

Variance components are estimated by EM (via Henderson's mixed-model
equations) followed by a Newton polish of the exact ML or REML
deviance. All linear algebra runs per outer group through the Woodbury
identity, so V is never materialized: a group contributes only its
(random-effect count) x (random-effect count) capacitance matrix.

Components that collapse onto the boundary are pinned at zero and
flagged; non-convergence returns the best point found with
``converged=False`` rather than raising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import RankDeficient
from .formula import ModelFormula, build_design, grouping_codes, parse_formula
from .table import Dataset

_LOG2PI = math.log(2.0 * math.pi)
_MAX_EM = 500
_MAX_NEWTON = 50


@dataclass
class LmmFit:
    """Fixed effects with SEs, variance components and fit diagnostics."""

    names: list[str]
    beta: np.ndarray
    se: np.ndarray
    var_components: dict[str, float]
    loglik: float
    criterion: str
    grouping: tuple[str, ...]
    converged: bool
    boundary: tuple[str, ...]
    n_obs: int
    n_iter: int

    def params(self) -> list[tuple[str, float, float]]:
        return [
            (n, float(b), float(s))
            for n, b, s in zip(self.names, self.beta, self.se)
        ]


class _Blocks:
    """Per-outer-group design pieces for nested random intercepts.

    Single-level models get a vectorized representation (one scalar
    capacitance per group); nested models keep small per-group dense
    blocks.
    """

    def __init__(
        self, X: np.ndarray, y: np.ndarray, codes: list[np.ndarray],
        force_generic: bool = False,
    ):
        self.n, self.p = X.shape
        self.levels = len(codes)
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        self.var_y = float(np.var(y))
        self.scalar = self.levels == 1 and not force_generic
        outer = codes[0]
        if self.scalar:
            _, code = np.unique(outer, return_inverse=True)
            q = code.max() + 1
            self.q_level = np.array([q])
            self.ng = np.bincount(code).astype(float)
            self.GX = np.zeros((q, self.p))
            np.add.at(self.GX, code, X)
            self.Gy = np.bincount(code, weights=y)
            self.code = code
            self.Xmat, self.yvec = X, y
            self.q_total = int(q)
            return
        self.groups = []
        self.q_level = np.zeros(self.levels, dtype=int)
        for g in np.unique(outer):
            rows = np.where(outer == g)[0]
            zcols = []
            col_level = []
            for k, ck in enumerate(codes):
                local = ck[rows]
                for u in np.unique(local):
                    zcols.append((local == u).astype(float))
                    col_level.append(k)
                self.q_level[k] += len(np.unique(local))
            Z = np.column_stack(zcols)
            Xg, yg = X[rows], y[rows]
            self.groups.append(
                dict(
                    rows=rows,
                    Z=Z,
                    N=Z.T @ Z,
                    ZtX=Z.T @ Xg,
                    Zty=Z.T @ yg,
                    X=Xg,
                    y=yg,
                    col_level=np.asarray(col_level),
                )
            )
        self.q_total = int(self.q_level.sum())


def _assemble(blocks: _Blocks, sig: np.ndarray, sig_e: float):
    """Solve every group's capacitance system once for the current theta.

    Returns the profiled pieces (S, c, logdet terms) plus per-group
    solves reused by the deviance, gradient and EM updates.
    """
    lam = sig_e / sig
    S = blocks.XtX.copy()
    c = blocks.Xty.copy()
    yty_adj = blocks.yty
    logdetM = 0.0
    per_group = []
    for g in blocks.groups:
        D = lam[g["col_level"]]
        M = g["N"] + np.diag(D)
        cf = cho_factor(M, lower=True)
        logdetM += 2.0 * np.sum(np.log(np.diag(cf[0])))
        A = cho_solve(cf, g["ZtX"])
        a = cho_solve(cf, g["Zty"])
        S -= g["ZtX"].T @ A
        c -= g["ZtX"].T @ a
        yty_adj -= float(g["Zty"] @ a)
        per_group.append((cf, A, a))
    return S, c, yty_adj, logdetM, per_group


def _assemble_scalar(blocks: _Blocks, sig1: float, sig_e: float):
    lam = sig_e / sig1
    m = blocks.ng + lam
    S = blocks.XtX - blocks.GX.T @ (blocks.GX / m[:, None])
    c = blocks.Xty - blocks.GX.T @ (blocks.Gy / m)
    yty_adj = blocks.yty - float(blocks.Gy @ (blocks.Gy / m))
    logdetM = float(np.sum(np.log(m)))
    return S, c, yty_adj, logdetM, m


def _deviance_core(blocks: _Blocks, sig: np.ndarray, sig_e: float, criterion: str):
    n, p = blocks.n, blocks.p
    if blocks.scalar:
        S, c, yty_adj, logdetM, m = _assemble_scalar(blocks, sig[0], sig_e)
        per_group = m
    else:
        S, c, yty_adj, logdetM, per_group = _assemble(blocks, sig, sig_e)
    S_cf = cho_factor(S, lower=True)
    beta = cho_solve(S_cf, c)
    rvr = (yty_adj - float(beta @ c)) / sig_e
    logdetV = (
        (n - blocks.q_total) * math.log(sig_e)
        + float(np.sum(blocks.q_level * np.log(sig)))
        + logdetM
    )
    if criterion == "REML":
        logdetS = 2.0 * np.sum(np.log(np.diag(S_cf[0])))
        dev = (n - p) * _LOG2PI + logdetV + logdetS - p * math.log(sig_e) + rvr
    else:
        dev = n * _LOG2PI + logdetV + rvr
    return dev, beta, S_cf, per_group


def _deviance(blocks, theta, criterion):
    return _deviance_core(blocks, theta[:-1], theta[-1], criterion)[0]


def _gradient_scalar(blocks: _Blocks, theta: np.ndarray, criterion: str) -> np.ndarray:
    sig1, sig_e = theta[0], theta[1]
    dev, beta, S_cf, m = _deviance_core(blocks, theta[:1], sig_e, criterion)
    reml = criterion == "REML"
    ng, GX, Gy = blocks.ng, blocks.GX, blocks.Gy
    zr = Gy - GX @ beta
    shrink = 1.0 - ng / m
    w = zr * shrink / sig_e
    quad1 = float(w @ w)
    trV1 = float(np.sum((ng - ng**2 / m)) / sig_e)
    trV_e = (blocks.n - float(np.sum(ng / m))) / sig_e
    rtr = (
        blocks.yty - 2.0 * float(beta @ blocks.Xty)
        + float(beta @ (blocks.XtX @ beta))
    )
    quad_e = (
        rtr - float(np.sum(zr**2 * (2.0 / m - ng / m**2)))
    ) / sig_e**2
    corr1 = corr_e = 0.0
    if reml:
        B = GX * (shrink / sig_e)[:, None]
        SinvB = cho_solve(S_cf, B.T).T * sig_e
        corr1 = float(np.einsum("qp,qp->", B, SinvB))
        E_acc = blocks.XtX - GX.T @ (GX * (2.0 / m - ng / m**2)[:, None])
        corr_e = float(np.trace(cho_solve(S_cf, E_acc))) / sig_e
    return np.array([trV1 - corr1 - quad1, trV_e - corr_e - quad_e])


def _gradient(blocks: _Blocks, theta: np.ndarray, criterion: str) -> np.ndarray:
    """d(deviance)/d(sigma^2) for each component, residual last."""
    if blocks.scalar:
        return _gradient_scalar(blocks, theta, criterion)
    sig, sig_e = theta[:-1], theta[-1]
    dev, beta, S_cf, per_group = _deviance_core(blocks, sig, sig_e, criterion)
    L = blocks.levels
    reml = criterion == "REML"
    trV = np.zeros(L)
    quad = np.zeros(L)
    corr = np.zeros(L)
    trV_e = 0.0
    quad_e = 0.0
    E_acc = np.zeros((blocks.p, blocks.p))
    for g, (cf, A, a) in zip(blocks.groups, per_group):
        lvl = g["col_level"]
        C = cho_solve(cf, g["N"])
        diag_T = (np.diag(g["N"]) - np.einsum("ij,ji->i", g["N"], C)) / sig_e
        zr = g["Zty"] - g["ZtX"] @ beta
        w = (zr - g["N"] @ cho_solve(cf, zr)) / sig_e
        for k in range(L):
            sel = lvl == k
            trV[k] += diag_T[sel].sum()
            quad[k] += float(w[sel] @ w[sel])
        trV_e += (len(g["rows"]) - np.trace(C)) / sig_e
        rg = g["y"] - g["X"] @ beta
        vr = (rg - g["Z"] @ cho_solve(cf, zr)) / sig_e
        quad_e += float(vr @ vr)
        if reml:
            B = (g["ZtX"].T - g["ZtX"].T @ C) / sig_e
            SinvB = cho_solve(S_cf, B) * sig_e
            col_q = np.einsum("pj,pj->j", B, SinvB)
            for k in range(L):
                corr[k] += col_q[lvl == k].sum()
            Eg = g["X"] - g["Z"] @ A
            E_acc += Eg.T @ Eg
    grad = np.empty(L + 1)
    for k in range(L):
        grad[k] = trV[k] - (corr[k] if reml else 0.0) - quad[k]
    corr_e = float(np.trace(cho_solve(S_cf, E_acc))) / sig_e if reml else 0.0
    grad[L] = trV_e - corr_e - quad_e
    return grad


def _em_step_scalar(blocks: _Blocks, theta: np.ndarray) -> np.ndarray:
    sig1, sig_e = theta[0], theta[1]
    S, c, yty_adj, _, m = _assemble_scalar(blocks, sig1, sig_e)
    S_cf = cho_factor(S, lower=True)
    beta = cho_solve(S_cf, c)
    zr = blocks.Gy - blocks.GX @ beta
    u = zr / m
    W = blocks.GX / m[:, None]
    mid = cho_solve(S_cf, W.T)
    diag_c = 1.0 / m + np.einsum("qp,pq->q", W, mid)
    new_sig1 = (float(u @ u) + sig_e * float(diag_c.sum())) / len(m)
    new_sig_e = (
        blocks.yty - float(beta @ blocks.Xty) - float(blocks.Gy @ u)
    ) / (blocks.n - blocks.p)
    return np.array([new_sig1, max(new_sig_e, 1e-300)])


def _em_step(blocks: _Blocks, theta: np.ndarray) -> np.ndarray:
    """One REML EM update through the mixed-model equations."""
    if blocks.scalar:
        return _em_step_scalar(blocks, theta)
    sig, sig_e = theta[:-1], theta[-1]
    S, c, yty_adj, _, per_group = _assemble(blocks, sig, sig_e)
    S_cf = cho_factor(S, lower=True)
    beta = cho_solve(S_cf, c)
    L = blocks.levels
    ussq = np.zeros(L)
    trace = np.zeros(L)
    ztyu = 0.0
    for g, (cf, A, a) in zip(blocks.groups, per_group):
        lvl = g["col_level"]
        zr = g["Zty"] - g["ZtX"] @ beta
        u = cho_solve(cf, zr)
        ztyu += float(g["Zty"] @ u)
        Minv = cho_solve(cf, np.eye(len(zr)))
        W = cho_solve(cf, g["ZtX"])
        mid = cho_solve(S_cf, W.T)
        diag_c = np.diag(Minv) + np.einsum("qp,pq->q", W, mid)
        for k in range(L):
            sel = lvl == k
            ussq[k] += float(u[sel] @ u[sel])
            trace[k] += diag_c[sel].sum()
    new_sig = (ussq + sig_e * trace) / blocks.q_level
    new_sig_e = (blocks.yty - float(beta @ blocks.Xty) - ztyu) / (
        blocks.n - blocks.p
    )
    return np.concatenate([new_sig, [max(new_sig_e, 1e-300)]])


def _fit_components(
    blocks: _Blocks, criterion: str, active: np.ndarray | None = None
):
    """EM warm start then Newton on log-variances; returns
    (theta, deviance, converged, n_iter, boundary_mask)."""
    var_y = max(blocks.var_y, 1e-12)
    L = blocks.levels
    if active is None:
        active = np.ones(L, dtype=bool)
    floor = 1e-7 * var_y

    def drop_and_refit(keep: np.ndarray):
        if not keep.any():
            # every component on the boundary: residual-only OLS model
            S_cf = cho_factor(blocks.XtX, lower=True)
            beta = cho_solve(S_cf, blocks.Xty)
            rss = max(blocks.yty - float(beta @ blocks.Xty), 1e-300)
            n, p = blocks.n, blocks.p
            if criterion == "REML":
                s2 = rss / (n - p)
                logdetS = 2.0 * float(np.sum(np.log(np.diag(S_cf[0]))))
                dv = (
                    (n - p) * _LOG2PI + (n - p) * math.log(s2)
                    + logdetS + rss / s2
                )
            else:
                s2 = rss / n
                dv = n * _LOG2PI + n * math.log(s2) + rss / s2
            theta_full = np.zeros(L + 1)
            theta_full[-1] = s2
            return theta_full, dv, True, 0, np.ones(L, dtype=bool)
        keep_idx = np.where(keep)[0]
        sub = _restrict_blocks(blocks, keep)
        th, dv, cv, it, bd = _fit_components(sub, criterion)
        theta_full = np.zeros(L + 1)
        theta_full[-1] = th[-1]
        theta_full[:L][keep] = th[:-1]
        boundary = ~keep
        boundary[keep_idx[bd]] = True
        theta_full[:L][boundary] = 0.0
        return theta_full, dv, cv, it, boundary

    theta = np.concatenate([np.full(L, 0.5 * var_y / max(L, 1)), [0.5 * var_y]])
    it = 0

    def em_phase(theta, budget):
        nonlocal it
        for _ in range(budget):
            it += 1
            new = _em_step(blocks, theta)
            rel = np.max(np.abs(new - theta) / np.maximum(np.abs(theta), 1e-12))
            theta = new
            if (theta[:-1] < floor).any() or rel < 1e-8:
                break
        return theta

    def newton_phase(theta):
        nonlocal it
        dev = _deviance(blocks, theta, criterion)
        converged = False
        h = 1e-5
        for _ in range(_MAX_NEWTON):
            it += 1
            grad = _gradient(blocks, theta, criterion) * theta
            if np.max(np.abs(grad)) < 1e-9 * max(1.0, abs(dev)):
                converged = True
                break
            logt = np.log(theta)
            H = np.empty((L + 1, L + 1))
            for j in range(L + 1):
                e = np.zeros(L + 1)
                e[j] = h
                tp, tm = np.exp(logt + e), np.exp(logt - e)
                H[:, j] = (
                    _gradient(blocks, tp, criterion) * tp
                    - _gradient(blocks, tm, criterion) * tm
                ) / (2 * h)
            H = (H + H.T) / 2.0
            try:
                step = np.linalg.solve(H + 1e-12 * np.eye(L + 1), -grad)
            except np.linalg.LinAlgError:
                step = -grad / max(np.max(np.abs(grad)), 1.0)
            step = np.clip(step, -4.0, 4.0)
            new_theta = np.exp(logt + step)
            new_dev = _deviance(blocks, new_theta, criterion)
            halvings = 0
            while not np.isfinite(new_dev) or new_dev > dev + 1e-12:
                step /= 2.0
                new_theta = np.exp(logt + step)
                new_dev = _deviance(blocks, new_theta, criterion)
                halvings += 1
                if halvings > 25:
                    break
            moved = np.max(np.abs(np.log(new_theta) - logt))
            theta, dev = new_theta, new_dev
            if (theta[:-1] < floor).any():
                break
            if moved < 1e-11:
                grad = _gradient(blocks, theta, criterion) * theta
                converged = bool(np.max(np.abs(grad)) < 1e-6 * max(1.0, abs(dev)))
                break
        return theta, dev, converged

    theta = em_phase(theta, 100)
    if (theta[:-1] < floor).any():
        return drop_and_refit(theta[:-1] >= floor)
    theta, dev, converged = newton_phase(theta)
    if not converged and not (theta[:-1] < floor).any():
        theta = em_phase(theta, _MAX_EM - 100)
        if not (theta[:-1] < floor).any():
            theta, dev, converged = newton_phase(theta)
    if (theta[:-1] < floor).any():
        # a component converged onto the boundary; pin it at zero
        return drop_and_refit(theta[:-1] >= floor)
    boundary = np.zeros(L, dtype=bool)
    return theta, dev, converged, it, boundary


def _restrict_blocks(blocks: _Blocks, keep: np.ndarray) -> "_Blocks":
    """Blocks with the dropped levels' columns removed."""
    sub = _Blocks.__new__(_Blocks)
    sub.n, sub.p = blocks.n, blocks.p
    sub.scalar = False
    sub.var_y = blocks.var_y
    keep_idx = np.where(keep)[0]
    remap = {old: new for new, old in enumerate(keep_idx)}
    sub.levels = len(keep_idx)
    sub.q_level = blocks.q_level[keep_idx]
    sub.groups = []
    for g in blocks.groups:
        sel = np.isin(g["col_level"], keep_idx)
        Z = g["Z"][:, sel]
        sub.groups.append(
            dict(
                rows=g["rows"],
                Z=Z,
                N=g["N"][np.ix_(sel, sel)],
                ZtX=g["ZtX"][sel],
                Zty=g["Zty"][sel],
                X=g["X"],
                y=g["y"],
                col_level=np.array([remap[k] for k in g["col_level"][sel]]),
            )
        )
    sub.XtX, sub.Xty, sub.yty = blocks.XtX, blocks.Xty, blocks.yty
    sub.q_total = int(sub.q_level.sum())
    return sub


def _ols_fit(y, X, names, criterion, n_obs) -> LmmFit:
    n, p = X.shape
    q, r = np.linalg.qr(X)
    diag = np.abs(np.diag(r))
    if diag.min() <= n * np.finfo(float).eps * max(diag.max(), 1.0):
        raise RankDeficient("design matrix is rank deficient")
    beta = np.linalg.solve(r, q.T @ y)
    resid = y - X @ beta
    dfree = n - p if criterion == "REML" else n
    s2 = float(resid @ resid) / max(dfree, 1)
    r_inv = np.linalg.solve(r, np.eye(p))
    se = np.sqrt(s2 * np.sum(r_inv**2, axis=1))
    ll = -0.5 * (dfree * _LOG2PI + dfree * math.log(s2) + float(resid @ resid) / s2)
    if criterion == "REML":
        ll -= 0.5 * 2.0 * np.sum(np.log(diag)) - 0.5 * p * math.log(s2)
    return LmmFit(
        names, beta, se, {"residual": s2}, ll, criterion, (), True, (), n, 0
    )


def fit_lmm(
    formula: ModelFormula | str, d: Dataset, criterion: str = "REML"
) -> LmmFit:
    """Fit a random-intercept LMM to fully observed model variables."""
    if isinstance(formula, str):
        formula = parse_formula(formula)
    if criterion not in ("REML", "ML"):
        raise ValueError("criterion must be 'REML' or 'ML'")
    y, X, names = build_design(d, formula)
    if not formula.random:
        return _ols_fit(y, X, names, criterion, d.n_rows)
    codes = grouping_codes(d, formula)
    fit = fit_lmm_arrays(y, X, codes, criterion, names=names)
    comps = {
        g: fit.var_components[f"level{k}"]
        for k, g in enumerate(formula.random)
    }
    comps["residual"] = fit.var_components["residual"]
    boundary = tuple(
        formula.random[int(b.removeprefix("level"))] for b in fit.boundary
    )
    return LmmFit(
        fit.names,
        fit.beta,
        fit.se,
        comps,
        fit.loglik,
        criterion,
        tuple(formula.random),
        fit.converged,
        boundary,
        fit.n_obs,
        fit.n_iter,
    )


def fit_lmm_arrays(
    y: np.ndarray,
    X: np.ndarray,
    codes: list[np.ndarray],
    criterion: str = "REML",
    names: list[str] | None = None,
) -> LmmFit:
    """Array-level fit; ``codes`` lists integer groupings, outermost first."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if n <= p:
        raise RankDeficient(f"need n > p, got n={n}, p={p}")
    qx, rx = np.linalg.qr(X)
    diag = np.abs(np.diag(rx))
    if diag.min() <= n * np.finfo(float).eps * max(diag.max(), 1.0):
        raise RankDeficient("design matrix is rank deficient")
    blocks = _Blocks(X, y, [np.asarray(c, dtype=int) for c in codes])
    theta, dev, converged, n_iter, boundary = _fit_components(blocks, criterion)
    # final GLS at the optimum (boundary components pinned at zero)
    live = theta[:-1] > 0
    if not live.any():
        beta = np.linalg.solve(blocks.XtX, blocks.Xty)
        cov = np.linalg.inv(blocks.XtX) * theta[-1]
    else:
        sub = blocks if live.all() else _restrict_blocks(blocks, live)
        if sub.scalar:
            S, c, *_ = _assemble_scalar(sub, theta[:-1][live][0], theta[-1])
        else:
            S, c, *_ = _assemble(sub, theta[:-1][live], theta[-1])
        S_cf = cho_factor(S, lower=True)
        beta = cho_solve(S_cf, c)
        cov = cho_solve(S_cf, np.eye(p)) * theta[-1]
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    comps = {f"level{k}": float(theta[k]) for k in range(len(codes))}
    comps["residual"] = float(theta[-1])
    names = names or [f"x{j}" for j in range(p)]
    return LmmFit(
        list(names),
        beta,
        se,
        comps,
        -0.5 * dev,
        criterion,
        tuple(f"level{k}" for k in range(len(codes))),
        converged,
        tuple(f"level{k}" for k in np.where(boundary)[0]),
        n,
        n_iter,
    )


def deviance(
    y: np.ndarray, X: np.ndarray, codes: list[np.ndarray],
    theta: np.ndarray, criterion: str = "REML",
) -> float:
    """Exact -2 log (restricted) likelihood at the given components."""
    blocks = _Blocks(
        np.asarray(X, dtype=float),
        np.asarray(y, dtype=float),
        [np.asarray(c, dtype=int) for c in codes],
    )
    return _deviance(blocks, np.asarray(theta, dtype=float), criterion)
