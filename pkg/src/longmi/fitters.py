"""Regression machinery shared by the chained-equation imputers.

Linear fits come with posterior parameter draws (for proper
imputation); logistic and proportional-odds fits return the MLE with
its asymptotic covariance, from which imputers draw approximate
posterior parameters.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import EmptyCategory, PerfectSeparation, RankDeficient
from .rng import RngStream

_SIGMA2_FLOOR = 1e-10


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _qr_check_rank(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q, r = np.linalg.qr(X)
    diag = np.abs(np.diag(r))
    if diag.min() <= X.shape[0] * np.finfo(float).eps * max(diag.max(), 1.0):
        raise RankDeficient("design matrix is rank deficient")
    return q, r


@dataclass
class LinearDraw:
    """OLS estimate plus one proper-imputation parameter draw."""

    beta_hat: np.ndarray
    beta_draw: np.ndarray
    sigma2_hat: float
    sigma2_draw: float
    xtx_inv: np.ndarray


def fit_linear_and_draw(rng: RngStream, X: np.ndarray, y: np.ndarray) -> LinearDraw:
    """OLS fit with sigma2 drawn from its scaled inverse-chi-square
    posterior and beta from N(beta_hat, sigma2_draw (X'X)^-1)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n <= p:
        raise RankDeficient(f"need n > p, got n={n}, p={p}")
    q, r = _qr_check_rank(X)
    beta_hat = solve_triangular(r, q.T @ y)
    resid = y - X @ beta_hat
    s2 = float(resid @ resid) / (n - p)
    if s2 < _SIGMA2_FLOOR:
        warnings.warn("residual variance ~ 0; flooring for the draw", stacklevel=2)
        s2 = _SIGMA2_FLOOR
    sigma2_draw = (n - p) * s2 / rng.chisquare(n - p)
    r_inv = solve_triangular(r, np.eye(p))
    xtx_inv = r_inv @ r_inv.T
    beta_draw = beta_hat + np.sqrt(sigma2_draw) * (r_inv @ rng.normal(size=p))
    return LinearDraw(beta_hat, beta_draw, s2, float(sigma2_draw), xtx_inv)


@dataclass
class GlmFit:
    """MLE, asymptotic covariance and convergence record."""

    beta_hat: np.ndarray
    cov_hat: np.ndarray
    converged: bool
    iterations: int
    loglik: float
    names: list[str] | None = None
    n_cutpoints: int = 0


def _logistic_loglik(X, y, beta):
    eta = X @ beta
    # log expit / log(1-expit) computed stably
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_logistic(X: np.ndarray, y: np.ndarray, max_iter: int = 100) -> GlmFit:
    """Logistic MLE by iteratively reweighted least squares.

    Convergence: max |score| < 1e-8 or relative log-likelihood change
    < 1e-10. Step-halving keeps the likelihood monotone. Divergence of
    the coefficients (|beta| > 30 while the score still points outward)
    is reported as separation.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("logistic response must be 0/1")
    _qr_check_rank(X)
    n, p = X.shape
    beta = np.zeros(p)
    ll = _logistic_loglik(X, y, beta)
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        mu = _expit(X @ beta)
        w = mu * (1 - mu)
        score = X.T @ (y - mu)
        if np.max(np.abs(score)) < 1e-8:
            converged = True
            break
        info = (X * w[:, None]).T @ X
        try:
            step = np.linalg.solve(info + 1e-12 * np.eye(p), score)
        except np.linalg.LinAlgError:
            raise PerfectSeparation("information matrix singular") from None
        new_ll = _logistic_loglik(X, y, beta + step)
        halvings = 0
        while new_ll < ll and halvings < 30:
            step /= 2.0
            new_ll = _logistic_loglik(X, y, beta + step)
            halvings += 1
        beta = beta + step
        assert new_ll >= ll - 1e-9, "IRLS log-likelihood decreased"
        if np.max(np.abs(beta)) > 30 and np.max(np.abs(score)) > 1e-4:
            raise PerfectSeparation("coefficients diverging; data separated")
        if abs(new_ll - ll) < 1e-10 * (abs(ll) + 1e-10):
            ll = new_ll
            converged = True
            break
        ll = new_ll
    ll_final = _logistic_loglik(X, y, beta)
    if ll_final > -1e-8 * n:
        # only separated or degenerate data push the likelihood to 0
        raise PerfectSeparation("response is perfectly predicted; MLE diverges")
    mu = _expit(X @ beta)
    w = np.maximum(mu * (1 - mu), 1e-12)
    info = (X * w[:, None]).T @ X
    try:
        cov = cho_solve(cho_factor(info), np.eye(p))
    except np.linalg.LinAlgError:
        raise PerfectSeparation("information matrix singular at optimum") from None
    return GlmFit(beta, (cov + cov.T) / 2.0, converged, it, ll_final)


def _polr_loglik_score(X, yk, K, cut, beta):
    """Log-likelihood and analytic score in natural (cut, beta) coords."""
    eta = X @ beta
    k1 = K - 1
    up_idx = np.minimum(yk, k1 - 1)
    lo_idx = np.maximum(yk - 1, 0)
    gu = np.where(yk < k1, _expit(cut[up_idx] - eta), 1.0)
    gl = np.where(yk > 0, _expit(cut[lo_idx] - eta), 0.0)
    pi = np.maximum(gu - gl, 1e-300)
    ll = float(np.sum(np.log(pi)))
    fu = np.where(yk < k1, gu * (1 - gu), 0.0)
    fl = np.where(yk > 0, gl * (1 - gl), 0.0)
    g_cut = np.zeros(k1)
    np.add.at(g_cut, up_idx, np.where(yk < k1, fu / pi, 0.0))
    np.add.at(g_cut, lo_idx, np.where(yk > 0, -fl / pi, 0.0))
    g_beta = X.T @ ((fl - fu) / pi)
    return ll, np.concatenate([g_cut, g_beta])


def _polr_theta_to_nat(theta, k1):
    # (c1, log gaps, beta) -> (cutpoints, beta); keeps cuts increasing
    cut = np.concatenate([[theta[0]], theta[0] + np.cumsum(np.exp(theta[1:k1]))])
    return cut, theta[k1:]


def _polr_score_theta(X, yk, K, theta):
    k1 = K - 1
    cut, beta = _polr_theta_to_nat(theta, k1)
    ll, g_nat = _polr_loglik_score(X, yk, K, cut, beta)
    g = np.empty_like(theta)
    g_cut = g_nat[:k1]
    g[0] = g_cut.sum()
    for j in range(1, k1):
        g[j] = np.exp(theta[j]) * g_cut[j:].sum()
    g[k1:] = g_nat[k1:]
    return ll, g


def fit_polr(X: np.ndarray, y: np.ndarray, max_iter: int = 100) -> GlmFit:
    """Proportional-odds MLE: P(y <= k) = expit(cut_k - x beta).

    ``y`` holds 0-based ordinal codes; every level must be observed.
    Newton in (first cutpoint, log gaps, beta) coordinates with the
    analytic score, a finite-difference Hessian of that score, and
    step-halving; the log-gap transform keeps cutpoints increasing.
    """
    X = np.asarray(X, dtype=float)
    yk = np.asarray(y).astype(int)
    K = int(yk.max()) + 1
    counts = np.bincount(yk, minlength=K)
    if K < 2 or (counts == 0).any():
        raise EmptyCategory(f"every ordinal level needs observations, counts={counts}")
    # drop constant columns: cutpoints play the intercept role
    keep = ~np.all(X == X[0], axis=0)
    Xr = X[:, keep]
    _qr_check_rank(np.column_stack([np.ones(len(yk)), Xr]))
    p = Xr.shape[1]
    k1 = K - 1
    cum = np.cumsum(counts)[:-1] / len(yk)
    cut0 = np.log(cum / (1 - cum))
    theta = np.concatenate([[cut0[0]], np.log(np.diff(cut0))]) if k1 > 1 else cut0.copy()
    theta = np.concatenate([theta, np.zeros(p)])

    def fg(th):
        ll, g = _polr_score_theta(Xr, yk, K, th)
        return -ll, -g

    f, g = fg(theta)
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < 1e-8:
            converged = True
            break
        m = theta.size
        H = np.empty((m, m))
        h = 1e-6
        for j in range(m):
            e = np.zeros(m)
            e[j] = h
            H[:, j] = (fg(theta + e)[1] - fg(theta - e)[1]) / (2 * h)
        H = (H + H.T) / 2.0
        try:
            step = np.linalg.solve(H + 1e-10 * np.eye(m), -g)
        except np.linalg.LinAlgError:
            step = -g
        new_f, new_g = fg(theta + step)
        halvings = 0
        while not np.isfinite(new_f) or new_f > f:
            step /= 2.0
            new_f, new_g = fg(theta + step)
            halvings += 1
            if halvings > 40:
                break
        theta = theta + step
        if abs(f - new_f) < 1e-12 * (abs(f) + 1e-12):
            f, g = new_f, new_g
            converged = np.max(np.abs(new_g)) < 1e-6
            break
        f, g = new_f, new_g
        if np.max(np.abs(theta)) > 40:
            raise PerfectSeparation("ordinal fit diverging; data separated")
    cut, beta = _polr_theta_to_nat(theta, k1)
    assert (np.diff(cut) > 0).all(), "cutpoints must be strictly increasing"

    # observed information in natural coordinates via FD of the score
    nat = np.concatenate([cut, beta])
    m = nat.size
    H = np.empty((m, m))
    h = 1e-6
    for j in range(m):
        e = np.zeros(m)
        e[j] = h
        _, gp = _polr_loglik_score(Xr, yk, K, (nat + e)[:k1], (nat + e)[k1:])
        _, gm = _polr_loglik_score(Xr, yk, K, (nat - e)[:k1], (nat - e)[k1:])
        H[:, j] = -(gp - gm) / (2 * h)
    H = (H + H.T) / 2.0
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(H)

    # re-expand beta over the original column set (zeros for dropped columns)
    full_beta = np.zeros(X.shape[1])
    full_beta[keep] = beta
    packed = np.concatenate([cut, full_beta])
    full_cov = np.zeros((packed.size, packed.size))
    live = np.concatenate([np.ones(k1, bool), keep])
    full_cov[np.ix_(live, live)] = (cov + cov.T) / 2.0
    ll_final, _ = _polr_loglik_score(Xr, yk, K, cut, beta)
    return GlmFit(packed, full_cov, converged, it, ll_final, n_cutpoints=k1)


def polr_category_probs(fit_or_params, X: np.ndarray, k1: int) -> np.ndarray:
    """Category probabilities from packed (cutpoints, beta) parameters."""
    params = fit_or_params.beta_hat if isinstance(fit_or_params, GlmFit) else fit_or_params
    cut, beta = params[:k1], params[k1:]
    eta = np.asarray(X, dtype=float) @ beta
    cdf = _expit(cut[None, :] - eta[:, None])
    cdf = np.concatenate([np.zeros((len(eta), 1)), cdf, np.ones((len(eta), 1))], axis=1)
    probs = np.diff(cdf, axis=1)
    return np.maximum(probs, 0.0)
