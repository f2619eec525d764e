"""Temporal B-spline bases, spatial Gaussian bases, and their prior kernels.

The B-spline family lives on [0, 1] with equidistant knots extended ``q``
intervals beyond each endpoint (11 equidistant knots for q=2, k_t=6).  With
that construction exactly two quadratic bases are active at t=0, each equal
to 0.5, which is what makes the boundary constraint row(1)+row(2)=0 kill the
time-varying surface at t=0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cholesky_banded

from .errors import ConfigError, DomainError


@dataclass(frozen=True)
class SplineBasis:
    """Degree-q B-splines on [0,1], n_bases = q + k_t, uniform knot spacing."""

    degree: int = 2
    n_bases: int = 8
    knots: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        q, d = self.degree, self.n_bases
        if q < 1 or d < q + 2:
            raise ConfigError(f"need n_bases >= degree+2, got q={q}, d_t={d}")
        k = d - q  # number of interior sub-intervals
        delta = 1.0 / k
        knots = (np.arange(2 * q + k + 1) - q) * delta
        object.__setattr__(self, "knots", knots)

    @property
    def n_intervals(self) -> int:
        return self.n_bases - self.degree

    def _check_domain(self, t: np.ndarray) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise DomainError("spline evaluation points must lie in [0, 1]")
        return t

    def design(self, t) -> np.ndarray:
        """Cox-de Boor design matrix, one row per evaluation point."""
        t = self._check_domain(t)
        return _cox_de_boor(self.knots, self.degree, t)[:, : self.n_bases]

    def design_deriv(self, t) -> np.ndarray:
        """First-derivative design matrix via the B-spline derivative identity."""
        t = self._check_domain(t)
        q, kn = self.degree, self.knots
        lower = _cox_de_boor(kn, q - 1, t)
        nb = self.n_bases
        out = np.zeros((t.size, nb))
        for h in range(nb):
            left = lower[:, h] / (kn[h + q] - kn[h])
            right = lower[:, h + 1] / (kn[h + q + 1] - kn[h + 1])
            out[:, h] = q * (left - right)
        return out


def _cox_de_boor(knots: np.ndarray, degree: int, t: np.ndarray) -> np.ndarray:
    """All degree-`degree` B-splines on `knots` at points t (rows)."""
    n = len(knots) - degree - 1
    vals = np.zeros((t.size, len(knots) - 1))
    for j in range(len(knots) - 1):
        vals[:, j] = (knots[j] <= t) & (t < knots[j + 1])
    for q in range(1, degree + 1):
        nxt = np.zeros((t.size, len(knots) - q - 1))
        for j in range(len(knots) - q - 1):
            den1 = knots[j + q] - knots[j]
            den2 = knots[j + q + 1] - knots[j + 1]
            term = 0.0
            if den1 > 0:
                term = (t - knots[j]) / den1 * vals[:, j]
            if den2 > 0:
                term = term + (knots[j + q + 1] - t) / den2 * vals[:, j + 1]
            nxt[:, j] = term
        vals = nxt
    return vals[:, :n]


def eval_bsplines(basis: SplineBasis, t: float) -> np.ndarray:
    """Values of all bases at a single time point."""
    return basis.design([t])[0]


def constraint_expander(d_t: int) -> np.ndarray:
    """Matrix M with A = M @ A1 enforcing row1(A) + row2(A) = 0.

    M is d_t x (d_t - 1): M[0,0] = -1, M[i+1,i] = 1, zeros elsewhere, so the
    free parameters A1 occupy rows 2..d_t and row 1 is minus row 2.
    """
    if d_t < 2:
        raise ConfigError("constraint expander needs d_t >= 2")
    m = np.zeros((d_t, d_t - 1))
    m[0, 0] = -1.0
    m[np.arange(1, d_t), np.arange(d_t - 1)] = 1.0
    return m


# ---------------------------------------------------------------------------
# Graph-Laplacian kernel and normalized Gaussian bases for spatial modes.
# ---------------------------------------------------------------------------

LAPLACIAN_COUPLING = 0.99  # fixed eta; not sampled


@dataclass(frozen=True)
class GraphLaplacianKernel:
    """Covariance Q = (D - eta*U)^{-1} of a chain graph; precision tridiagonal."""

    m: int
    eta: float = LAPLACIAN_COUPLING
    precision: np.ndarray = field(init=False, repr=False)
    cov: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError("kernel needs at least one basis")
        u = np.zeros((self.m, self.m))
        idx = np.arange(self.m - 1)
        u[idx, idx + 1] = 1.0
        u[idx + 1, idx] = 1.0
        d = np.diag(u.sum(axis=1)) if self.m > 1 else np.eye(1)
        prec = d - self.eta * u
        # SPD check: Cholesky must succeed (also used by the banded sampler)
        cho_factor(prec, lower=True)
        object.__setattr__(self, "precision", prec)
        object.__setattr__(self, "cov", np.linalg.inv(prec))

    @property
    def precision_banded(self) -> np.ndarray:
        """Upper banded (ab) storage of the tridiagonal precision."""
        ab = np.zeros((2, self.m))
        ab[1] = np.diag(self.precision)
        if self.m > 1:
            ab[0, 1:] = np.diag(self.precision, 1)
        cholesky_banded(ab)  # fails if not SPD
        return ab


def build_laplacian(m: int) -> GraphLaplacianKernel:
    return GraphLaplacianKernel(m)


@dataclass(frozen=True)
class GaussianBasisSet:
    """Truncated Gaussian bumps over grid 1..d, normalized so g(h)'Qg(h)=1."""

    d: int
    m: int
    kernel: GraphLaplacianKernel
    centers: np.ndarray = field(init=False, repr=False)
    spacing: float = field(init=False)
    G: np.ndarray = field(init=False, repr=False)  # m x d evaluation matrix

    def __post_init__(self):
        if self.m > self.d:
            raise ConfigError(f"more bases ({self.m}) than grid points ({self.d})")
        if self.kernel.m != self.m:
            raise ConfigError("kernel size must match basis count")
        v = self.d / self.m
        centers = (np.arange(1, self.m + 1) - 0.5) * v
        h = np.arange(1, self.d + 1, dtype=np.float64)
        diff = h[None, :] - centers[:, None]
        raw = np.exp(-(diff**2) / (2.0 * v * v))
        raw[np.abs(diff) > 3.0 * v] = 0.0
        norms = np.sqrt(np.einsum("md,mk,kd->d", raw, self.kernel.cov, raw))
        if np.any(norms <= 0.0):
            raise ConfigError("a grid point is not covered by any basis")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "spacing", v)
        object.__setattr__(self, "G", raw / norms[None, :])

    def column(self, h: int) -> np.ndarray:
        """Normalized basis vector g(h) for 1-based grid point h."""
        return self.G[:, h - 1]


def build_gaussian_bases(d_s: int, m_s: int, kernel: GraphLaplacianKernel | None = None):
    if kernel is None:
        kernel = build_laplacian(m_s)
    return GaussianBasisSet(d_s, m_s, kernel)


def prior_correlation(bset: GaussianBasisSet, h1: int, h2: int) -> float:
    """Prior correlation g(h1)' Q g(h2) of a basis-expanded field."""
    return float(bset.column(h1) @ bset.kernel.cov @ bset.column(h2))


# ---------------------------------------------------------------------------
# Prior kernels in the unified form used by the sampler:  a column's
# coefficient vector gamma (length m) has prior N(0, Q) and evaluates on the
# grid as G' gamma.  Spatial modes use Gaussian bases over the Laplacian
# kernel; group modes are identity; the temporal mode uses a chain-Laplacian
# kernel directly on the spline-coefficient grid.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PriorKernel:
    kind: str           # "gaussian" | "identity" | "laplacian"
    G: np.ndarray       # m x d evaluation matrix
    Q: np.ndarray       # m x m coefficient covariance
    Q_prec: np.ndarray  # its inverse (banded for laplacian/gaussian kinds)

    @property
    def m(self) -> int:
        return self.G.shape[0]

    @property
    def d(self) -> int:
        return self.G.shape[1]


def gaussian_kernel(d_s: int, m_s: int | None = None) -> PriorKernel:
    if m_s is None:
        m_s = max(1, d_s // 2)
    bset = build_gaussian_bases(d_s, m_s)
    return PriorKernel("gaussian", bset.G, bset.kernel.cov, bset.kernel.precision)


def identity_kernel(d: int) -> PriorKernel:
    eye = np.eye(d)
    return PriorKernel("identity", eye, eye.copy(), eye.copy())


def laplacian_kernel(d: int) -> PriorKernel:
    lap = build_laplacian(d)
    return PriorKernel("laplacian", np.eye(d), lap.cov, lap.precision)
