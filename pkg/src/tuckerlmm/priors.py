"""Constrained Gaussian sampling, CSC-PING column draws, shrinkage chains.

The one identity everything leans on: if x ~ N(mu, Sigma) is conditioned on
the affine subspace Ax = c, then

    x | Ax=c ~ N(mu_c, Sigma_c),
    mu_c    = mu + Sigma A' (A Sigma A')^{-1} (c - A mu),
    Sigma_c = Sigma - Sigma A' (A Sigma A')^{-1} A Sigma.

Draws are produced by "conditioning by kriging": sample x from the
unconstrained Gaussian, then project x_c = x - Sigma A' (A Sigma A')^{-1}
(Ax - c).  When the precision matrix is banded, the unconstrained draw and
the solves use banded Cholesky factors instead of dense ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import (cho_factor, cho_solve, cholesky_banded, qr,
                          solve_banded, solveh_banded)

from .errors import ConstraintError, FactorizationError, NumericalError

CONSTRAINT_PRUNE_TOL = 1e-12  # relative pivot threshold when pruning rows of A
CONSTRAINT_SAT_TOL = 1e-10    # post-hoc |Ax - c| acceptance


def prune_constraint_rows(A: np.ndarray, c: np.ndarray):
    """Drop linearly dependent rows of A (and matching c entries).

    Uses pivoted QR of A'; rows whose pivot falls below
    CONSTRAINT_PRUNE_TOL times the leading pivot are discarded.  Raises if a
    discarded row is inconsistent with the kept ones.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    if A.shape[0] != c.shape[0]:
        raise ConstraintError("constraint rhs length does not match row count")
    if A.shape[0] == 0:
        return A, c
    r, piv = qr(A.T, mode="r", pivoting=True)
    diag = np.abs(np.diag(r))
    lead = diag[0] if diag.size else 0.0
    if lead == 0.0:
        if np.any(np.abs(c) > 0.0):
            raise ConstraintError("zero constraint rows with nonzero rhs")
        return A[:0], c[:0]
    keep = np.sort(piv[: int(np.sum(diag > CONSTRAINT_PRUNE_TOL * lead))])
    kept_A, kept_c = A[keep], c[keep]
    dropped = np.setdiff1d(np.arange(A.shape[0]), keep)
    if dropped.size:
        # consistency: dropped rows must be implied by kept ones
        sol, *_ = np.linalg.lstsq(kept_A.T, A[dropped].T, rcond=None)
        pred_c = sol.T @ kept_c
        if np.any(np.abs(pred_c - c[dropped]) > 1e-8 * (1.0 + np.abs(c[dropped]))):
            raise ConstraintError("inconsistent redundant constraint rows")
    return kept_A, kept_c


def condition_gaussian(mean, cov, A, c):
    """Moments of N(mean, cov) conditioned on A x = c (after row pruning)."""
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    A, c = prune_constraint_rows(A, c)
    if A.shape[0] == 0:
        return mean.copy(), cov.copy()
    if A.shape[0] >= mean.size:
        raise ConstraintError("constraints leave no degrees of freedom")
    SA = cov @ A.T
    M = A @ SA
    mean_c = mean + SA @ np.linalg.solve(M, np.atleast_1d(c - A @ mean))
    cov_c = cov - SA @ np.linalg.solve(M, SA.T)
    return mean_c, 0.5 * (cov_c + cov_c.T)


def _sample_unconstrained(mean, cov, precision, precision_banded, rng, size):
    n = mean.shape[0]
    z = rng.standard_normal((n, size))
    if precision_banded is not None:
        u = cholesky_banded(precision_banded)            # Q = U'U, U upper banded
        nb = u.shape[0] - 1
        x = solve_banded((0, nb), u, z)                  # x = U^{-1} z
        return mean[:, None] + x
    if precision is not None:
        cf = cho_factor(precision, lower=False)
        # precision = U'U with U = cf upper: draw = U^{-1} z
        x = np.linalg.solve(np.triu(cf[0]), z)
        return mean[:, None] + x
    L = np.linalg.cholesky(cov)
    return mean[:, None] + L @ z


def _cov_times(mat, cov, precision, precision_banded):
    """Sigma @ mat for whichever parameterization was supplied."""
    if precision_banded is not None:
        nb = precision_banded.shape[0] - 1
        return solveh_banded(precision_banded, mat)
    if precision is not None:
        return cho_solve(cho_factor(precision), mat)
    return cov @ mat


def sample_constrained_mvn(mean, *, cov=None, precision=None,
                           precision_banded=None, A=None, c=None,
                           rng: np.random.Generator, size: int | None = None,
                           jitter: float = 0.0) -> np.ndarray:
    """Draw from N(mean, Sigma) conditioned on A x = c.

    Exactly one of cov / precision / precision_banded must be given
    (precision_banded in scipy upper `ab` storage).  With size=None a single
    vector is returned, otherwise an (size, n) array.  Constraints are
    satisfied deterministically, not just in law.
    """
    mean = np.asarray(mean, dtype=np.float64)
    n = mean.shape[0]
    supplied = [p is not None for p in (cov, precision, precision_banded)]
    if sum(supplied) != 1:
        raise ValueError("supply exactly one of cov, precision, precision_banded")
    if jitter:
        if cov is not None:
            cov = cov + jitter * np.eye(n)
        elif precision is not None:
            precision = precision + jitter * np.eye(n)
        else:
            precision_banded = precision_banded.copy()
            precision_banded[-1] += jitter
    one = size is None
    m = 1 if one else int(size)
    try:
        x = _sample_unconstrained(mean, cov, precision, precision_banded, rng, m)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"covariance/precision not SPD: {exc}") from exc

    if A is not None and np.size(A):
        A0 = np.atleast_2d(np.asarray(A, dtype=np.float64))
        c0 = np.zeros(A0.shape[0]) if c is None else np.atleast_1d(np.asarray(c, dtype=np.float64))
        Ak, ck = prune_constraint_rows(A0, c0)
        if Ak.shape[0]:
            if Ak.shape[0] >= n:
                raise ConstraintError("constraints leave no degrees of freedom")
            SA = _cov_times(Ak.T, cov, precision, precision_banded)
            M = Ak @ SA
            try:
                sol = np.linalg.solve(M, Ak @ x - ck[:, None])
            except np.linalg.LinAlgError as exc:
                raise ConstraintError(f"degenerate constraint system: {exc}") from exc
            x = x - SA @ sol
            resid = np.abs(A0 @ x - c0[:, None]).max()
            if resid > CONSTRAINT_SAT_TOL * (1.0 + np.abs(c0).max(initial=0.0)):
                raise NumericalError(f"constraint residual {resid:.3e} too large")
    return x[:, 0] if one else x.T


# ---------------------------------------------------------------------------
# CSC-PING columns.
# ---------------------------------------------------------------------------

SCALE_MODE = "scale"          # column scale sigma_z multiplies the field
PRECISION_MODE = "precision"  # sigma_z acts as a precision multiplier


def component_scale_cov(Q: np.ndarray, sigma_z: float, k: int, mode: str) -> np.ndarray:
    """Prior covariance of PING component k (1-based); sigma sits on k=1."""
    if k > 1:
        return Q
    if mode == SCALE_MODE:
        return (sigma_z**2) * Q
    if mode == PRECISION_MODE:
        return Q / sigma_z
    raise ValueError(f"unknown shrinkage mode {mode!r}")


def ping_column_draw(kernel, q_s: int, z: int, previous_columns, sigma_z: float,
                     rng: np.random.Generator, mode: str = SCALE_MODE):
    """Draw a new mode-matrix column orthogonal to all previous ones.

    Components k=2..q_s are drawn as unconstrained N(0, Q) coefficient fields;
    the first component (which carries the scale sigma_z) is then drawn
    conditioned so that the assembled pointwise-product column is orthogonal
    to every previous column.  Returns (column, gamma) with gamma of shape
    (q_s, kernel.m).
    """
    G, Q = kernel.G, kernel.Q
    d = G.shape[1]
    if z > d:
        raise FactorizationError(f"rank position {z} exceeds grid size {d}")
    prev = np.zeros((d, 0)) if previous_columns is None else np.atleast_2d(
        np.asarray(previous_columns, dtype=np.float64))
    if prev.size and prev.shape[0] != d:
        prev = prev.T
    gamma = np.zeros((q_s, kernel.m))
    rest = np.ones(d)
    for k in range(2, q_s + 1):
        gamma[k - 1] = sample_constrained_mvn(np.zeros(kernel.m), cov=Q, rng=rng)
        rest = rest * (G.T @ gamma[k - 1])
    cov1 = component_scale_cov(Q, sigma_z, 1, mode)
    Gamma = prev.T @ (rest[:, None] * G.T) if prev.shape[1] else None
    gamma[0] = sample_constrained_mvn(np.zeros(kernel.m), cov=cov1,
                                      A=Gamma, c=None, rng=rng)
    column = rest * (G.T @ gamma[0])
    return column, gamma


def assemble_column(kernel, gamma: np.ndarray) -> np.ndarray:
    """Pointwise product of a column's component fields."""
    fields = kernel.G.T @ gamma.T  # d x q
    return np.prod(fields, axis=1)


# ---------------------------------------------------------------------------
# Cumulative shrinkage chains.
# ---------------------------------------------------------------------------


@dataclass
class ShrinkageChain:
    """Gamma-increment chain: sigma_z = prod_{k<=z} varsigma_k."""

    varsigma: np.ndarray
    kappa1: float = 2.1
    kappa2: float = 3.1

    def __post_init__(self):
        self.varsigma = np.asarray(self.varsigma, dtype=np.float64)
        if np.any(self.varsigma <= 0.0):
            raise ValueError("shrinkage increments must be positive")

    @property
    def sigma(self) -> np.ndarray:
        return np.cumprod(self.varsigma)

    @property
    def r(self) -> int:
        return self.varsigma.shape[0]

    def dropped(self, keep_idx) -> "ShrinkageChain":
        return ShrinkageChain(self.varsigma[np.asarray(keep_idx, dtype=int)],
                              self.kappa1, self.kappa2)

    def extended(self, rng: np.random.Generator) -> "ShrinkageChain":
        new = rng.gamma(self.kappa2 if self.r else self.kappa1, 1.0)
        return ShrinkageChain(np.append(self.varsigma, new), self.kappa1, self.kappa2)


def shrinkage_prior_draw(r: int, kappa1: float, kappa2: float,
                         rng: np.random.Generator) -> ShrinkageChain:
    vs = np.empty(r)
    if r:
        vs[0] = rng.gamma(kappa1, 1.0)
        for k in range(1, r):
            vs[k] = rng.gamma(kappa2, 1.0)
    return ShrinkageChain(vs, kappa1, kappa2)


def shrinkage_gibbs_update(chain: ShrinkageChain, column_stats,
                           rng: np.random.Generator,
                           mode: str = SCALE_MODE) -> ShrinkageChain:
    """One Gibbs scan over the chain increments.

    column_stats is a list of (S_z, m_z) pairs per column: S_z is the
    quadratic form gamma' Q^{-1} gamma of the scale-carrying component and
    m_z its effective dimension (coefficient count minus active constraints).

    In precision mode the increments are conjugate-Gamma (the product of
    increments enters the Gaussian precision linearly).  In scale mode the
    exact conditional is non-Gamma; it is sampled by a univariate slice step,
    which is still an acceptance-free auxiliary-variable Gibbs update.
    """
    vs = chain.varsigma.copy()
    r = vs.shape[0]
    stats = list(column_stats)
    if len(stats) != r:
        raise ValueError("need one (S, m) stat per column")
    S = np.array([s for s, _ in stats], dtype=np.float64)
    m_eff = np.array([m for _, m in stats], dtype=np.float64)
    for k in range(r):
        kappa = chain.kappa1 if k == 0 else chain.kappa2
        sigma = np.cumprod(vs)
        w = sigma[k:] / vs[k]  # products excluding vs[k]
        if mode == PRECISION_MODE:
            shape = kappa + 0.5 * np.sum(m_eff[k:])
            rate = 1.0 + 0.5 * np.sum(w * S[k:])
            vs[k] = rng.gamma(shape, 1.0 / rate)
        else:
            a_pow = kappa - 1.0 - np.sum(m_eff[k:])
            b_coef = 0.5 * np.sum(S[k:] / np.square(w))

            def logp(v, _a=a_pow, _b=b_coef):
                return _a * np.log(v) - v - _b / (v * v)

            vs[k] = _slice_sample_positive(logp, vs[k], rng)
    return ShrinkageChain(vs, chain.kappa1, chain.kappa2)


def _slice_sample_positive(logp, x0: float, rng: np.random.Generator,
                           width: float = 1.0, max_steps: int = 64) -> float:
    """One slice-sampling update for a univariate positive variable (in log-x)."""
    u = np.log(x0)

    def g(v):
        return logp(np.exp(v)) + v  # include Jacobian of the log transform

    logy = g(u) - rng.exponential(1.0)
    lo = u - width * rng.random()
    hi = lo + width
    for _ in range(max_steps):
        if g(lo) < logy:
            break
        lo -= width
    for _ in range(max_steps):
        if g(hi) < logy:
            break
        hi += width
    for _ in range(max_steps):
        prop = lo + (hi - lo) * rng.random()
        if g(prop) >= logy:
            return float(np.exp(prop))
        if prop < u:
            lo = prop
        else:
            hi = prop
    raise NumericalError("slice sampler failed to find an acceptable point")


def variance_gibbs(shape_a: float, rate_b: float, n: float, ss: float,
                   rng: np.random.Generator) -> float:
    """Conjugate Gamma draw of a precision given n residual terms with sum of
    squares ss; posterior mean (a + n/2)/(b + ss/2)."""
    return float(rng.gamma(shape_a + 0.5 * n, 1.0 / (rate_b + 0.5 * ss)))
