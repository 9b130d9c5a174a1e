"""Joint-model imputation: multivariate-normal Gibbs samplers.

Two samplers share one chassis. The single-level sampler treats the
incomplete variables as one MVN response block given complete
covariates. The two-level sampler adds cluster random effects (with a
common or cluster-specific residual covariance) and an optional block
of incomplete cluster-constant variables whose residuals are drawn
jointly with the random effects.

Discrete variables ride along as thresholded latent normals: a K-level
variable contributes K-1 latent columns; a cell's level is the index
of the largest positive latent, or the last level when none is
positive. Latents of observed cells are refreshed by a random-walk
Metropolis step confined to the cell's level region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateSeries,
    NotPositiveDefinite,
    TooFewClusters,
    UnknownLevel,
    UnknownParam,
)
from .rng import MvnParams, RngStream, conditional_mvn, mvn_draw
from .stack import ImputedStack
from .table import Dataset

_MH_STEP = 1.0


# ---------------------------------------------------------------------------
# latent encoding
# ---------------------------------------------------------------------------


def decode_latent(latents: np.ndarray) -> np.ndarray:
    """Level codes from latent columns: argmax if positive, else the
    reference (last) level."""
    latents = np.atleast_2d(latents)
    top = np.argmax(latents, axis=1)
    top_val = latents[np.arange(len(latents)), top]
    return np.where(top_val > 0.0, top, latents.shape[1]).astype(float)


def encode_latent(
    rng: RngStream, codes: np.ndarray, n_levels: int
) -> np.ndarray:
    """Latent columns consistent with observed level codes.

    Missing cells (NaN codes) start at zero; the samplers overwrite
    them on the first sweep. Decoding an encoded observed cell returns
    the original level.
    """
    codes = np.asarray(codes, dtype=float)
    n, k = len(codes), n_levels - 1
    z = np.zeros((n, k))
    obs = ~np.isnan(codes)
    if (codes[obs] < 0).any() or (codes[obs] > n_levels - 1).any():
        raise UnknownLevel("level code outside 0..K-1")
    draw = np.abs(rng.normal(size=(n, k))) + 0.01
    z[obs] = -draw[obs]
    lead = obs & (codes <= k - 1)
    rows = np.where(lead)[0]
    z[rows, codes[lead].astype(int)] = draw[rows, codes[lead].astype(int)]
    return z


def _in_region(z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Rowwise check that latents lie in the observed level's region."""
    k = z.shape[1]
    ref = codes >= k
    top = np.argmax(z, axis=1)
    top_val = z[np.arange(len(z)), top]
    ok_lead = (top == codes.astype(int) % k) & (top_val > 0.0)
    ok_ref = top_val <= 0.0
    return np.where(ref, ok_ref, ok_lead)


# ---------------------------------------------------------------------------
# response layout
# ---------------------------------------------------------------------------


@dataclass
class _VarSlot:
    name: str
    kind: str
    n_levels: int
    cols: slice  # latent/continuous columns in the response matrix
    missing: np.ndarray  # per-row missing flags for the variable


class _Layout:
    """Maps dataset variables onto response-matrix columns."""

    def __init__(self, d: Dataset, names: list[str], rows: np.ndarray | None = None):
        rows = np.arange(d.n_rows) if rows is None else rows
        self.slots: list[_VarSlot] = []
        self.col_names: list[str] = []
        start = 0
        for nm in names:
            sp = d.spec(nm)
            width = (sp.n_levels - 1) if sp.levels is not None else 1
            self.slots.append(
                _VarSlot(
                    nm,
                    sp.kind,
                    sp.n_levels,
                    slice(start, start + width),
                    d.column_mask(nm)[rows].copy(),
                )
            )
            if sp.levels is None:
                self.col_names.append(nm)
            else:
                self.col_names.extend(f"{nm}#{j + 1}" for j in range(width))
            start += width
        self.width = start
        self.rows = rows

    def build_matrix(self, rng: RngStream, d: Dataset) -> np.ndarray:
        """Initial response matrix: observed values, mean-filled missing
        continuous cells, region-consistent latents."""
        Y = np.zeros((len(self.rows), self.width))
        for s in self.slots:
            x = d.column(s.name)[self.rows]
            if s.n_levels == 0:
                col = x.copy()
                obs_mean = np.nanmean(col) if (~s.missing).any() else 0.0
                sd = np.nanstd(col) if (~s.missing).any() else 1.0
                fill = obs_mean + 0.1 * max(sd, 1e-6) * rng.normal(
                    size=int(s.missing.sum())
                )
                col[s.missing] = fill
                Y[:, s.cols] = col[:, None]
            else:
                Y[:, s.cols] = encode_latent(rng, x, s.n_levels)
        return Y

    def known_mask(self) -> np.ndarray:
        """Response cells that stay fixed during conditional draws:
        observed continuous cells. Latents are never 'known' (observed
        ones are refreshed by the Metropolis step instead)."""
        known = np.zeros((len(self.rows), self.width), dtype=bool)
        for s in self.slots:
            if s.n_levels == 0:
                known[:, s.cols] = (~s.missing)[:, None]
        return known

    def unknown_mask(self) -> np.ndarray:
        """Cells redrawn from row conditionals: missing continuous cells
        and latent cells of missing discrete cells."""
        unknown = np.zeros((len(self.rows), self.width), dtype=bool)
        for s in self.slots:
            unknown[:, s.cols] = s.missing[:, None]
        return unknown

    def snapshot_into(self, values: np.ndarray, mask: np.ndarray, Y: np.ndarray,
                      d: Dataset, col_of: dict[str, int]):
        """Write imputed cells back into a values matrix (original rows)."""
        for s in self.slots:
            j = col_of[s.name]
            rows = self.rows[s.missing]
            if s.n_levels == 0:
                values[rows, j] = Y[s.missing, s.cols][:, 0]
            else:
                values[rows, j] = decode_latent(Y[s.missing, s.cols])
            mask[rows, j] = False


# ---------------------------------------------------------------------------
# chain trace
# ---------------------------------------------------------------------------


class ChainTrace:
    """Per-sweep record of every imputation-model parameter."""

    def __init__(self, names: list[str]):
        self.names = list(names)
        self._rows: list[np.ndarray] = []

    def record(self, row: np.ndarray):
        self._rows.append(np.asarray(row, dtype=float))

    @property
    def n_iter(self) -> int:
        return len(self._rows)

    def matrix(self) -> np.ndarray:
        return np.vstack(self._rows) if self._rows else np.empty((0, len(self.names)))

    def series(self, param: str) -> np.ndarray:
        try:
            j = self.names.index(param)
        except ValueError:
            raise UnknownParam(f"parameter {param!r} was not recorded") from None
        return self.matrix()[:, j]


def trace_stats(trace: ChainTrace, param: str) -> np.ndarray:
    return trace.series(param)


def autocorr(series: np.ndarray, lag: int) -> float:
    """Lag-k sample autocorrelation in [-1, 1]."""
    x = np.asarray(series, dtype=float)
    if lag <= 0 or lag >= len(x):
        raise ValueError("lag must be in 1..len(series)-1")
    x = x - x.mean()
    denom = float(x @ x)
    if denom <= 0.0:
        raise DegenerateSeries("constant series has undefined autocorrelation")
    return float((x[:-lag] @ x[lag:]) / denom)


# ---------------------------------------------------------------------------
# shared sampler pieces
# ---------------------------------------------------------------------------


def _chol(a: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(
            "covariance lost positive definiteness (collinear responses?)"
        ) from None


def _sym(a: np.ndarray) -> np.ndarray:
    return (a + np.swapaxes(a, -1, -2)) / 2.0


def _inv_wishart(rng: RngStream, scale: np.ndarray, dof: float) -> np.ndarray:
    """Single inverse-Wishart draw via Bartlett on the inverted scale."""
    p = scale.shape[0]
    L = _chol(np.linalg.inv(_sym(scale)))
    T = np.zeros((p, p))
    for i in range(p):
        T[i, i] = math.sqrt(rng.chisquare(dof - i))
        if i:
            T[i, :i] = rng.normal(size=i)
    A = L @ T
    W = A @ A.T
    out = np.linalg.inv(W)
    return _sym(out)


def _batched_inv_wishart(
    rng: RngStream, scales: np.ndarray, dofs: np.ndarray
) -> np.ndarray:
    """Stacked inverse-Wishart draws, one per leading index."""
    C, p, _ = scales.shape
    L = _chol(np.linalg.inv(_sym(scales)))
    T = np.zeros((C, p, p))
    for i in range(p):
        T[:, i, i] = np.sqrt(rng.chisquare(dofs - i))
        if i:
            T[:, i, :i] = rng.normal(size=(C, i))
    A = L @ T
    W = A @ np.swapaxes(A, -1, -2)
    return _sym(np.linalg.inv(W))


def _matrix_normal_draw(rng, b_hat, sqrt_row, omega):
    """Draw from MN(b_hat, sqrt_row sqrt_row', omega)."""
    E = rng.normal(size=b_hat.shape)
    return b_hat + sqrt_row @ E @ _chol(omega).T


class _PatternGroups:
    """Rows grouped by their unknown-cell pattern (static across sweeps)."""

    def __init__(self, unknown: np.ndarray):
        self.groups: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        seen: dict[bytes, list[int]] = {}
        for i, row in enumerate(unknown):
            if row.any():
                seen.setdefault(row.tobytes(), []).append(i)
        r = unknown.shape[1]
        for key, rows in seen.items():
            pat = np.frombuffer(key, dtype=bool)
            mis = np.where(pat)[0]
            obs = np.where(~pat)[0]
            self.groups.append((np.asarray(rows), mis, obs))


def _draw_missing_common(rng, Y, mu, omega, patterns: _PatternGroups):
    """Redraw unknown cells from row conditionals under one covariance."""
    for rows, mis, obs in patterns.groups:
        if len(obs) == 0:
            L = _chol(omega)
            Y[rows[:, None], mis[None, :]] = (
                mu[rows] + rng.normal(size=(len(rows), len(mis))) @ L.T
            )
            continue
        s_oo = omega[np.ix_(obs, obs)]
        s_mo = omega[np.ix_(mis, obs)]
        gain = np.linalg.solve(s_oo, s_mo.T).T
        cond_cov = _sym(omega[np.ix_(mis, mis)] - gain @ s_mo.T)
        L = _chol(cond_cov)
        resid = Y[rows[:, None], obs[None, :]] - mu[rows[:, None], obs[None, :]]
        cond_mean = mu[rows[:, None], mis[None, :]] + resid @ gain.T
        Y[rows[:, None], mis[None, :]] = (
            cond_mean + rng.normal(size=(len(rows), len(mis))) @ L.T
        )


def _draw_missing_batched(rng, Y, mu, omegas, clus, patterns: _PatternGroups):
    """As above but with a per-cluster covariance stack."""
    for rows, mis, obs in patterns.groups:
        om = omegas[clus[rows]]
        if len(obs) == 0:
            L = _chol(om)
            z = rng.normal(size=(len(rows), len(mis)))
            Y[rows[:, None], mis[None, :]] = mu[rows[:, None], mis[None, :]] + (
                np.einsum("nij,nj->ni", L, z)
            )
            continue
        s_oo = om[:, obs[:, None], obs[None, :]]
        s_mo = om[:, mis[:, None], obs[None, :]]
        s_mm = om[:, mis[:, None], mis[None, :]]
        gain = np.swapaxes(
            np.linalg.solve(s_oo, np.swapaxes(s_mo, 1, 2)), 1, 2
        )
        cond_cov = _sym(s_mm - gain @ np.swapaxes(s_mo, 1, 2))
        L = _chol(cond_cov)
        resid = Y[rows[:, None], obs[None, :]] - mu[rows[:, None], obs[None, :]]
        cond_mean = mu[rows[:, None], mis[None, :]] + np.einsum(
            "nij,nj->ni", gain, resid
        )
        z = rng.normal(size=(len(rows), len(mis)))
        Y[rows[:, None], mis[None, :]] = cond_mean + np.einsum("nij,nj->ni", L, z)


def _mh_refresh_common(rng, Y, mu, omega, layout: _Layout, d: Dataset):
    """Metropolis refresh of latent cells for observed discrete values."""
    r = omega.shape[0]
    for s in layout.slots:
        if s.n_levels == 0 or (~s.missing).sum() == 0:
            continue
        blk = np.arange(s.cols.start, s.cols.stop)
        rest = np.setdiff1d(np.arange(r), blk)
        rows = np.where(~s.missing)[0]
        codes = d.column(s.name)[layout.rows[rows]]
        if len(rest):
            gain = np.linalg.solve(
                omega[np.ix_(rest, rest)], omega[np.ix_(rest, blk)]
            ).T
            cond_cov = _sym(
                omega[np.ix_(blk, blk)] - gain @ omega[np.ix_(rest, blk)]
            )
            resid = Y[rows[:, None], rest[None, :]] - mu[rows[:, None], rest[None, :]]
            m = mu[rows[:, None], blk[None, :]] + resid @ gain.T
        else:
            cond_cov = omega[np.ix_(blk, blk)]
            m = mu[rows[:, None], blk[None, :]]
        prec = np.linalg.inv(cond_cov)
        z = Y[rows[:, None], blk[None, :]]
        zp = z + _MH_STEP * rng.normal(size=z.shape)
        ok = _in_region(zp, codes)
        dz, dzp = z - m, zp - m
        log_alpha = -0.5 * (
            np.einsum("ni,ij,nj->n", dzp, prec, dzp)
            - np.einsum("ni,ij,nj->n", dz, prec, dz)
        )
        accept = ok & (np.log(rng.random(len(rows))) < log_alpha)
        picked = rows[accept]
        Y[picked[:, None], blk[None, :]] = zp[accept]


def _mh_refresh_batched(rng, Y, mu, omegas, clus, layout: _Layout, d: Dataset):
    r = omegas.shape[1]
    for s in layout.slots:
        if s.n_levels == 0 or (~s.missing).sum() == 0:
            continue
        blk = np.arange(s.cols.start, s.cols.stop)
        rest = np.setdiff1d(np.arange(r), blk)
        rows = np.where(~s.missing)[0]
        codes = d.column(s.name)[layout.rows[rows]]
        om = omegas[clus[rows]]
        if len(rest):
            s_rr = om[:, rest[:, None], rest[None, :]]
            s_rb = om[:, rest[:, None], blk[None, :]]
            gain = np.swapaxes(np.linalg.solve(s_rr, s_rb), 1, 2)
            cond_cov = _sym(
                om[:, blk[:, None], blk[None, :]]
                - gain @ s_rb
            )
            resid = Y[rows[:, None], rest[None, :]] - mu[rows[:, None], rest[None, :]]
            m = mu[rows[:, None], blk[None, :]] + np.einsum(
                "nij,nj->ni", gain, resid
            )
        else:
            cond_cov = om[:, blk[:, None], blk[None, :]]
            m = mu[rows[:, None], blk[None, :]]
        prec = np.linalg.inv(cond_cov)
        z = Y[rows[:, None], blk[None, :]]
        zp = z + _MH_STEP * rng.normal(size=z.shape)
        ok = _in_region(zp, codes)
        dz, dzp = z - m, zp - m
        log_alpha = -0.5 * (
            np.einsum("ni,nij,nj->n", dzp, prec, dzp)
            - np.einsum("ni,nij,nj->n", dz, prec, dz)
        )
        accept = ok & (np.log(rng.random(len(rows))) < log_alpha)
        picked = rows[accept]
        Y[picked[:, None], blk[None, :]] = zp[accept]


# ---------------------------------------------------------------------------
# model spec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JmSpec:
    """What to impute and how to condition.

    ``y_cols`` are the incomplete row-level variables; ``x_cols`` the
    complete fixed-effect predictors (an intercept is prepended
    automatically); ``z_cols`` complete random-effect covariates beyond
    the automatic random intercept. ``y2_cols``/``x2_cols`` describe
    incomplete and complete cluster-constant variables. ``cov_mode``
    chooses one residual covariance for all clusters or one per
    cluster.
    """

    y_cols: tuple[str, ...]
    x_cols: tuple[str, ...] = ()
    z_cols: tuple[str, ...] = ()
    y2_cols: tuple[str, ...] = ()
    x2_cols: tuple[str, ...] = ()
    clus: str | None = None
    cov_mode: str = "common"
    nburn: int = 100
    nbetween: int = 100
    nimp: int = 5

    def __post_init__(self):
        object.__setattr__(self, "y_cols", tuple(self.y_cols))
        object.__setattr__(self, "x_cols", tuple(self.x_cols))
        object.__setattr__(self, "z_cols", tuple(self.z_cols))
        object.__setattr__(self, "y2_cols", tuple(self.y2_cols))
        object.__setattr__(self, "x2_cols", tuple(self.x2_cols))
        if self.nimp < 1 or self.nburn < 1 or self.nbetween < 1:
            raise ValueError("nimp, nburn and nbetween must be >= 1")
        if self.cov_mode not in ("common", "cluster-specific"):
            raise ValueError("cov_mode must be 'common' or 'cluster-specific'")
        if self.clus is None and (self.y2_cols or self.z_cols):
            raise ValueError("cluster-level blocks require a clus column")


def _design_block(d: Dataset, cols, rows=None) -> tuple[np.ndarray, list[str]]:
    """Intercept plus the named complete columns as a matrix."""
    rows = np.arange(d.n_rows) if rows is None else rows
    mats = [np.ones(len(rows))]
    names = ["_intercept"]
    for nm in cols:
        if d.column_mask(nm).any():
            raise ValueError(f"predictor column {nm!r} has missing cells")
        mats.append(d.column(nm)[rows])
        names.append(nm)
    return np.column_stack(mats), names


# ---------------------------------------------------------------------------
# single-level sampler
# ---------------------------------------------------------------------------


class _MvnSampler:
    def __init__(self, rng: RngStream, spec: JmSpec, d: Dataset):
        self.d = d
        self.layout = _Layout(d, list(spec.y_cols))
        self.X, self.x_names = _design_block(d, spec.x_cols)
        self.Y = self.layout.build_matrix(rng, d)
        self.n, self.r = self.Y.shape
        self.f = self.X.shape[1]
        self.B = np.zeros((self.f, self.r))
        self.Omega = np.eye(self.r)
        XtX = self.X.T @ self.X
        Cx = _chol(XtX)
        self._xtx_chol = Cx
        self._sqrt_xtx_inv = np.linalg.solve(Cx.T, np.eye(self.f))
        self.patterns = _PatternGroups(self.layout.unknown_mask())
        self._prior_dof = self.r + 1
        self._prior_scale = np.eye(self.r)
        self.trace_names = [
            f"beta.{y}.{x}" for x in self.x_names for y in self.layout.col_names
        ] + [
            f"omega.{self.layout.col_names[i]}.{self.layout.col_names[j]}"
            for i in range(self.r)
            for j in range(i, self.r)
        ]

    def _trace_row(self):
        iu = np.triu_indices(self.r)
        return np.concatenate([self.B.ravel(), self.Omega[iu]])

    def sweep(self, rng: RngStream):
        # B | Y, Omega (flat prior, matrix normal)
        b_hat = np.linalg.solve(
            self._xtx_chol.T, np.linalg.solve(self._xtx_chol, self.X.T @ self.Y)
        )
        self.B = _matrix_normal_draw(rng, b_hat, self._sqrt_xtx_inv, self.Omega)
        # Omega | Y, B
        resid = self.Y - self.X @ self.B
        self.Omega = _inv_wishart(
            rng, self._prior_scale + resid.T @ resid, self._prior_dof + self.n
        )
        mu = self.X @ self.B
        _draw_missing_common(rng, self.Y, mu, self.Omega, self.patterns)
        _mh_refresh_common(rng, self.Y, mu, self.Omega, self.layout, self.d)

    def snapshot(self) -> Dataset:
        values = self.d.values.copy()
        mask = self.d.mask.copy()
        col_of = {c.name: j for j, c in enumerate(self.d.columns)}
        self.layout.snapshot_into(values, mask, self.Y, self.d, col_of)
        if mask.any():
            raise RuntimeError("snapshot left masked cells")
        return self.d.completed(values)


# ---------------------------------------------------------------------------
# two-level sampler
# ---------------------------------------------------------------------------


class _MlmmSampler:
    def __init__(self, rng: RngStream, spec: JmSpec, d: Dataset):
        self.d = d
        self.spec = spec
        raw = d.column(spec.clus)
        uniq, clus = np.unique(raw, return_inverse=True)
        self.clus = clus.astype(int)
        self.C = len(uniq)
        if spec.cov_mode == "cluster-specific" and self.C < 3:
            raise TooFewClusters(
                "cluster-specific residual covariances need >= 3 clusters"
            )
        self.layout = _Layout(d, list(spec.y_cols))
        self.X, self.x_names = _design_block(d, spec.x_cols)
        self.Z, self.z_names = _design_block(d, spec.z_cols)
        self.Y = self.layout.build_matrix(rng, d)
        self.n, self.r = self.Y.shape
        self.f = self.X.shape[1]
        self.q = self.Z.shape[1]

        # cluster-constant block
        self.first_row = np.array(
            [np.where(self.clus == c)[0][0] for c in range(self.C)]
        )
        if spec.y2_cols:
            for nm in spec.y2_cols:
                vals = d.column(nm)
                msk = d.column_mask(nm)
                for c in range(self.C):
                    rows = np.where(self.clus == c)[0]
                    v, mk = vals[rows], msk[rows]
                    if mk.any() != mk.all() or (
                        not mk.all() and len(np.unique(v[~np.isnan(v)])) > 1
                    ):
                        raise ValueError(f"{nm!r} is not constant within cluster")
            self.layout2 = _Layout(d, list(spec.y2_cols), rows=self.first_row)
            self.X2, self.x2_names = _design_block(d, spec.x2_cols, self.first_row)
            self.Y2 = self.layout2.build_matrix(rng, d)
            self.r2 = self.Y2.shape[1]
            self.f2 = self.X2.shape[1]
            self.B2 = np.zeros((self.f2, self.r2))
            X2tX2 = self.X2.T @ self.X2
            C2 = _chol(X2tX2)
            self._x2_chol = C2
            self._sqrt_x2_inv = np.linalg.solve(C2.T, np.eye(self.f2))
            self.patterns2 = _PatternGroups(self.layout2.unknown_mask())
        else:
            self.layout2 = None
            self.Y2 = np.zeros((self.C, 0))
            self.r2 = 0
            self.B2 = np.zeros((0, 0))

        self.qr = self.q * self.r
        self.dim_psi = self.qr + self.r2
        self.U = np.zeros((self.C, self.q, self.r))
        self.Psi = np.eye(self.dim_psi)
        self.B = np.zeros((self.f, self.r))
        self.common = spec.cov_mode == "common"
        self.Omega = (
            np.eye(self.r) if self.common else np.tile(np.eye(self.r), (self.C, 1, 1))
        )
        self.psi_fixed_zero = False  # test hook: collapses to single level

        XtX = self.X.T @ self.X
        Cx = _chol(XtX)
        self._xtx_chol = Cx
        self._sqrt_xtx_inv = np.linalg.solve(Cx.T, np.eye(self.f))
        self.patterns = _PatternGroups(self.layout.unknown_mask())
        # per-cluster accumulators reused every sweep
        self.ZtZ = np.zeros((self.C, self.q, self.q))
        np.add.at(self.ZtZ, self.clus, self.Z[:, :, None] * self.Z[:, None, :])
        self.XtX_c = np.zeros((self.C, self.f, self.f))
        np.add.at(self.XtX_c, self.clus, self.X[:, :, None] * self.X[:, None, :])
        self.n_c = np.bincount(self.clus, minlength=self.C).astype(float)
        self._prior_dof = self.r + 1
        self._prior_scale = np.eye(self.r)

        psi_names = [f"u.{z}.{y}" for y in self.layout.col_names for z in self.z_names]
        if self.layout2:
            psi_names += [f"v.{y}" for y in self.layout2.col_names]
        self.psi_names = psi_names

        # translation-interweaving bookkeeping: the mean of each random
        # effect trades off against a fixed effect of the same covariate,
        # and cluster-level residual means against the level-2 intercept;
        # shifting that split every sweep keeps the chain mixing when
        # clusters are information-rich
        self._shiftable = np.zeros(self.dim_psi, dtype=bool)
        self._shift_b_row = np.full(self.q, -1, dtype=int)
        for j, nm in enumerate(self.z_names):
            if nm in self.x_names:
                self._shift_b_row[j] = self.x_names.index(nm)
                for c in range(self.r):
                    self._shiftable[c * self.q + j] = True
        if self.r2:
            self._shiftable[self.qr:] = True
        self.trace_names = (
            [f"beta.{y}.{x}" for x in self.x_names for y in self.layout.col_names]
            + [
                f"omega.{self.layout.col_names[i]}.{self.layout.col_names[j]}"
                for i in range(self.r)
                for j in range(i, self.r)
            ]
            + [
                f"psi.{psi_names[i]}.{psi_names[j]}"
                for i in range(self.dim_psi)
                for j in range(i, self.dim_psi)
            ]
            + (
                [f"beta2.{y}.{x}" for x in self.x2_names for y in self.layout2.col_names]
                if self.layout2
                else []
            )
        )

    def _trace_row(self):
        iu_r = np.triu_indices(self.r)
        iu_p = np.triu_indices(self.dim_psi)
        omega = self.Omega if self.common else self.Omega.mean(axis=0)
        parts = [self.B.ravel(), omega[iu_r], self.Psi[iu_p]]
        if self.layout2:
            parts.append(self.B2.ravel())
        return np.concatenate(parts)

    # -- conditional pieces -------------------------------------------------

    def _psi_blocks(self):
        qr = self.qr
        P_uu = self.Psi[:qr, :qr]
        if self.r2 == 0:
            return P_uu, None, None, None
        P_uv = self.Psi[:qr, qr:]
        P_vv = self.Psi[qr:, qr:]
        gain_uv = np.linalg.solve(P_vv, P_uv.T).T  # qr x r2
        P_u_given_v = _sym(P_uu - gain_uv @ P_uv.T)
        gain_vu = np.linalg.solve(P_uu, P_uv)  # qr x r2, for V | U
        S_v_given_u = _sym(P_vv - P_uv.T @ gain_vu)
        return P_u_given_v, gain_uv, gain_vu, S_v_given_u

    def _v_resid(self):
        return self.Y2 - self.X2 @ self.B2 if self.r2 else np.zeros((self.C, 0))

    def _recenter(self, rng: RngStream):
        """Draw the location split between fixed and random effects.

        The shift has a flat likelihood direction whenever a random
        covariate also appears among the fixed effects, so its
        conditional is N(mean of the effects, Psi / C); moving the drawn
        shift into B (and B2 for the level-2 block) is an exact Gibbs
        step on an otherwise nearly frozen direction.
        """
        C, q, r, qr = self.C, self.q, self.r, self.qr
        w = self.U.transpose(0, 2, 1).reshape(C, qr)
        if self.r2:
            w = np.concatenate([w, self._v_resid()], axis=1)
        wbar = w.mean(axis=0)
        params = MvnParams(wbar, _sym(self.Psi / C))
        if self._shiftable.all():
            shift = mvn_draw(rng, params)
        else:
            fixed = np.where(~self._shiftable)[0]
            cond = conditional_mvn(params, fixed, np.zeros(fixed.size))
            shift = np.zeros(self.dim_psi)
            shift[self._shiftable] = mvn_draw(rng, cond)
        u_shift = shift[:qr].reshape(r, q).T  # (q, r)
        self.U = self.U - u_shift[None, :, :]
        for j in range(q):
            row = self._shift_b_row[j]
            if row >= 0:
                self.B[row] += u_shift[j]
        if self.r2:
            self.B2[0] += shift[qr:]

    def sweep(self, rng: RngStream):
        qr, r, q, C = self.qr, self.r, self.q, self.C
        P_u_given_v, gain_uv, gain_vu, S_v_given_u = self._psi_blocks()
        omegas = self.Omega if not self.common else None

        # --- random effects U | rest ---
        R = self.Y - self.X @ self.B
        ZtR = np.zeros((C, q, r))
        np.add.at(ZtR, self.clus, self.Z[:, :, None] * R[:, None, :])
        if self.common:
            o_inv = np.linalg.inv(self.Omega)
            K = np.einsum("cd,gab->gcadb", o_inv, self.ZtZ).reshape(C, qr, qr)
            lin = np.einsum("gab,bc->gca", ZtR, o_inv).reshape(C, qr)
        else:
            o_inv = np.linalg.inv(self.Omega)
            K = np.einsum("gcd,gab->gcadb", o_inv, self.ZtZ).reshape(C, qr, qr)
            lin = np.einsum("gab,gbc->gca", ZtR, o_inv).reshape(C, qr)
        if self.psi_fixed_zero:
            self.U = np.zeros((C, q, r))
        else:
            prior_prec = np.linalg.inv(P_u_given_v)
            V = self._v_resid()
            prior_mean = V @ gain_uv.T if self.r2 else np.zeros((C, qr))
            lam = prior_prec[None] + K
            cov = _sym(np.linalg.inv(lam))
            mean = np.einsum(
                "gij,gj->gi", cov, lin + prior_mean @ prior_prec
            )
            L = _chol(cov)
            u_flat = mean + np.einsum(
                "gij,gj->gi", L, rng.normal(size=(C, qr))
            )
            # response-major flat vector -> (q, r) coefficient matrix
            self.U = u_flat.reshape(C, r, q).transpose(0, 2, 1)

        # --- translation interweave: move the random-effect means into the
        # matching fixed effects (likelihood-invariant split) ---
        if not self.psi_fixed_zero and self._shiftable.any():
            self._recenter(rng)

        # --- Psi | U, V ---
        if not self.psi_fixed_zero:
            W = self.U.transpose(0, 2, 1).reshape(C, qr)
            if self.r2:
                W = np.concatenate([W, self._v_resid()], axis=1)
            self.Psi = _inv_wishart(
                rng,
                np.eye(self.dim_psi) + W.T @ W,
                self.dim_psi + 1 + C,
            )
            P_u_given_v, gain_uv, gain_vu, S_v_given_u = self._psi_blocks()

        # --- Omega | residuals ---
        offset = np.einsum("nq,nqr->nr", self.Z, self.U[self.clus])
        E = self.Y - self.X @ self.B - offset
        if self.common:
            self.Omega = _inv_wishart(
                rng, self._prior_scale + E.T @ E, self._prior_dof + self.n
            )
        else:
            EtE = np.zeros((C, r, r))
            np.add.at(EtE, self.clus, E[:, :, None] * E[:, None, :])
            scales = self._prior_scale[None] + EtE
            self.Omega = _batched_inv_wishart(
                rng, scales, self._prior_dof + self.n_c
            )

        # --- B | rest ---
        T = self.Y - offset
        if self.common:
            b_hat = np.linalg.solve(
                self._xtx_chol.T, np.linalg.solve(self._xtx_chol, self.X.T @ T)
            )
            self.B = _matrix_normal_draw(rng, b_hat, self._sqrt_xtx_inv, self.Omega)
        else:
            o_inv = np.linalg.inv(self.Omega)
            fr = self.f * r
            lam = np.einsum("gcd,gab->cadb", o_inv, self.XtX_c).reshape(fr, fr)
            XtT = np.zeros((C, self.f, r))
            np.add.at(XtT, self.clus, self.X[:, :, None] * T[:, None, :])
            lin = np.einsum("gab,gbc->ca", XtT, o_inv).reshape(fr)
            cov = _sym(np.linalg.inv(lam))
            mean = cov @ lin
            draw = mean + _chol(cov) @ rng.normal(size=fr)
            self.B = draw.reshape(r, self.f).T

        # --- level-2 block: B2 and missing Y2 ---
        if self.r2:
            u_flat = self.U.transpose(0, 2, 1).reshape(C, qr)
            m_v = u_flat @ gain_vu  # E[V | U] per cluster
            T2 = self.Y2 - m_v
            b2_hat = np.linalg.solve(
                self._x2_chol.T, np.linalg.solve(self._x2_chol, self.X2.T @ T2)
            )
            self.B2 = _matrix_normal_draw(
                rng, b2_hat, self._sqrt_x2_inv, S_v_given_u
            )
            mu2 = self.X2 @ self.B2 + m_v
            _draw_missing_common(rng, self.Y2, mu2, S_v_given_u, self.patterns2)
            _mh_refresh_common(
                rng, self.Y2, mu2, S_v_given_u, self.layout2, self.d
            )

        # --- missing level-1 cells and latent refresh ---
        offset = np.einsum("nq,nqr->nr", self.Z, self.U[self.clus])
        mu = self.X @ self.B + offset
        if self.common:
            _draw_missing_common(rng, self.Y, mu, self.Omega, self.patterns)
            _mh_refresh_common(rng, self.Y, mu, self.Omega, self.layout, self.d)
        else:
            _draw_missing_batched(
                rng, self.Y, mu, self.Omega, self.clus, self.patterns
            )
            _mh_refresh_batched(
                rng, self.Y, mu, self.Omega, self.clus, self.layout, self.d
            )

    def snapshot(self) -> Dataset:
        values = self.d.values.copy()
        mask = self.d.mask.copy()
        col_of = {c.name: j for j, c in enumerate(self.d.columns)}
        self.layout.snapshot_into(values, mask, self.Y, self.d, col_of)
        if self.layout2:
            # broadcast cluster-level imputations to every member row
            for s in self.layout2.slots:
                j = col_of[s.name]
                z = self.Y2[:, s.cols]
                vals_c = (
                    decode_latent(z) if s.n_levels else z[:, 0]
                )
                rows_missing = np.where(self.d.mask[:, j])[0]
                values[rows_missing, j] = vals_c[self.clus[rows_missing]]
                mask[rows_missing, j] = False
        if mask.any():
            raise RuntimeError("snapshot left masked cells")
        return self.d.completed(values)


def gibbs_sweep_mvn(rng: RngStream, state: _MvnSampler) -> _MvnSampler:
    """Advance the single-level sampler by one full sweep."""
    state.sweep(rng)
    return state


def gibbs_sweep_mlmm(rng: RngStream, state: _MlmmSampler) -> _MlmmSampler:
    """Advance the two-level sampler by one full sweep."""
    state.sweep(rng)
    return state


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def run_jm(
    rng: RngStream, spec: JmSpec, data: Dataset
) -> tuple[ImputedStack, ChainTrace]:
    """Burn in, then emit one completed dataset every ``nbetween`` sweeps.

    Total sweeps = nburn + (nimp - 1) * nbetween; the trace covers all
    of them.
    """
    covered = set(spec.y_cols) | set(spec.y2_cols)
    uncovered = [
        c.name
        for c in data.columns
        if data.column_mask(c.name).any() and c.name not in covered
    ]
    if uncovered:
        raise ValueError(
            f"incomplete columns {uncovered} are not listed in y_cols/y2_cols"
        )
    sampler = (
        _MvnSampler(rng, spec, data)
        if spec.clus is None
        else _MlmmSampler(rng, spec, data)
    )
    trace = ChainTrace(sampler.trace_names)
    imputations = []
    total = spec.nburn + (spec.nimp - 1) * spec.nbetween
    snap_at = {spec.nburn + i * spec.nbetween for i in range(spec.nimp)}
    for it in range(1, total + 1):
        sampler.sweep(rng)
        trace.record(sampler._trace_row())
        if it in snap_at:
            imputations.append(sampler.snapshot())
    return ImputedStack(data, imputations), trace
