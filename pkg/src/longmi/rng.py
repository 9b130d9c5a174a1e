"""Seeded random streams and the distribution samplers the imputers need.

One user seed fans out into independent streams (one per imputation
chain) through a counter-based generator, so runs reproduce bit-exactly
regardless of how chains are scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import EmptyInterval, InvalidDof, NotPositiveDefinite, SingularObservedBlock


class RngStream:
    """A deterministic stream identified by (seed, stream path).

    Identical identifiers yield identical draw sequences; distinct
    stream ids are statistically independent. ``substream`` extends the
    path for nested parallel work (chain 0, chain 1, ...).
    """

    def __init__(self, seed: int, stream_id: int | tuple[int, ...] = 0):
        path = (stream_id,) if isinstance(stream_id, int) else tuple(stream_id)
        self.seed = int(seed)
        self.stream_id = path
        self.gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(entropy=self.seed, spawn_key=path))
        )

    def substream(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + (index,))

    # thin pass-throughs so call sites read naturally
    def normal(self, *a, **k):
        return self.gen.normal(*a, **k)

    def uniform(self, *a, **k):
        return self.gen.uniform(*a, **k)

    def random(self, *a, **k):
        return self.gen.random(*a, **k)

    def integers(self, *a, **k):
        return self.gen.integers(*a, **k)

    def chisquare(self, *a, **k):
        return self.gen.chisquare(*a, **k)

    def choice(self, *a, **k):
        return self.gen.choice(*a, **k)

    def shuffle(self, *a, **k):
        return self.gen.shuffle(*a, **k)


def _chol(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(
            f"{cov.shape[0]}x{cov.shape[0]} covariance is not positive definite"
        ) from None


@dataclass(frozen=True)
class MvnParams:
    """Mean vector and SPD covariance of a multivariate normal."""

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("cov must be p x p matching mean")
        if np.abs(cov - cov.T).max(initial=0.0) > 1e-10:
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", (cov + cov.T) / 2.0)
        object.__setattr__(self, "chol", _chol(self.cov))

    @property
    def dim(self) -> int:
        return self.mean.size


def mvn_draw(rng: RngStream, params: MvnParams, size: int | None = None) -> np.ndarray:
    """Draw mean + L z with L the lower Cholesky factor of cov."""
    if size is None:
        z = rng.normal(size=params.dim)
        return params.mean + params.chol @ z
    z = rng.normal(size=(size, params.dim))
    return params.mean + z @ params.chol.T


def conditional_mvn(
    params: MvnParams, observed_idx, observed_vals
) -> MvnParams:
    """Conditional law of the unobserved coordinates given the observed.

    Returns N(mu_m + S_mo S_oo^-1 (x_o - mu_o), S_mm - S_mo S_oo^-1 S_om)
    over the complement of ``observed_idx``.
    """
    obs = np.asarray(observed_idx, dtype=int)
    vals = np.asarray(observed_vals, dtype=float)
    p = params.dim
    if obs.size == 0 or obs.size >= p:
        raise ValueError("observed_idx must be a proper nonempty subset")
    mis = np.setdiff1d(np.arange(p), obs)
    s_oo = params.cov[np.ix_(obs, obs)]
    s_mo = params.cov[np.ix_(mis, obs)]
    s_mm = params.cov[np.ix_(mis, mis)]
    try:
        gain = np.linalg.solve(s_oo, s_mo.T).T
    except np.linalg.LinAlgError:
        raise SingularObservedBlock("observed block of covariance is singular") from None
    mean = params.mean[mis] + gain @ (vals - params.mean[obs])
    cov = s_mm - gain @ s_mo.T
    return MvnParams(mean, (cov + cov.T) / 2.0)


def wishart_draw(
    rng: RngStream, scale: np.ndarray, dof: float, size: int | None = None
) -> np.ndarray:
    """Bartlett-decomposition Wishart draw(s) with scale matrix ``scale``."""
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    p = scale.shape[0]
    if dof <= p - 1:
        raise InvalidDof(f"dof must exceed p - 1 = {p - 1}")
    L = _chol(scale)
    n = 1 if size is None else size
    T = np.zeros((n, p, p))
    for i in range(p):
        T[:, i, i] = np.sqrt(rng.chisquare(dof - i, size=n))
        if i:
            T[:, i, :i] = rng.normal(size=(n, i))
    A = L @ T
    W = A @ np.swapaxes(A, -1, -2)
    return W[0] if size is None else W


def inv_wishart_draw(
    rng: RngStream, scale: np.ndarray, dof: float, size: int | None = None
) -> np.ndarray:
    """Inverse-Wishart draw(s); E[draw] = scale / (dof - p - 1)."""
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    p = scale.shape[0]
    if dof <= p - 1:
        raise InvalidDof(f"dof must exceed p - 1 = {p - 1}")
    inv_scale = np.linalg.inv(scale)
    W = wishart_draw(rng, (inv_scale + inv_scale.T) / 2.0, dof, size=size)
    out = np.linalg.inv(W)
    return (out + np.swapaxes(out, -1, -2)) / 2.0


_FAR_TAIL = 4.0


def trunc_normal_draw(
    rng: RngStream,
    mean: float,
    sd: float,
    lower: float = -np.inf,
    upper: float = np.inf,
    size: int | None = None,
) -> float | np.ndarray:
    """Normal(mean, sd) restricted to the open interval (lower, upper)."""
    if not lower < upper:
        raise EmptyInterval(f"({lower}, {upper}) has no interior")
    if sd <= 0:
        raise ValueError("sd must be positive")
    n = 1 if size is None else size
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    z = _trunc_std(rng, np.full(n, a), np.full(n, b))
    out = mean + sd * z
    return float(out[0]) if size is None else out


def trunc_normal_array(
    rng: RngStream, mean: np.ndarray, sd: float, lower: np.ndarray, upper: np.ndarray
) -> np.ndarray:
    """Vectorized truncated normal with per-element means and bounds."""
    mean = np.asarray(mean, dtype=float)
    a = (np.asarray(lower, dtype=float) - mean) / sd
    b = (np.asarray(upper, dtype=float) - mean) / sd
    if (a >= b).any():
        raise EmptyInterval("some truncation interval has no interior")
    return mean + sd * _trunc_std(rng, a, b)


def _trunc_std(rng: RngStream, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard-normal draws on (a, b): inverse-CDF in the bulk, Robert's
    shifted-exponential rejection once the interval lies beyond 4 sd."""
    out = np.empty(a.shape)
    # mirror left-tail intervals onto the right tail
    flip = b <= -_FAR_TAIL
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    far = lo >= _FAR_TAIL
    if (~far).any():
        al, bl = lo[~far], hi[~far]
        u = rng.uniform(ndtr(al), ndtr(bl))
        # clip away exact 0/1 so ndtri stays finite
        u = np.clip(u, 1e-300, 1 - 1e-16)
        z = ndtri(u)
        out[~far] = np.clip(z, al, bl)
    if far.any():
        out[far] = _robert_tail(rng, lo[far], hi[far])
    out[flip] = -out[flip]
    return out


def _robert_tail(rng: RngStream, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Rejection sampler for N(0,1) on (lo, hi) with lo >= 4."""
    out = np.empty(lo.shape)
    todo = np.arange(lo.size)
    lam = (lo + np.sqrt(lo**2 + 4.0)) / 2.0
    while todo.size:
        l, h, lm = lo[todo], hi[todo], lam[todo]
        z = l + rng.gen.exponential(size=todo.size) / lm
        accept = (z < h) & (
            np.log(rng.random(todo.size)) <= -0.5 * (z - lm) ** 2
        )
        out[todo[accept]] = z[accept]
        todo = todo[~accept]
    return out
