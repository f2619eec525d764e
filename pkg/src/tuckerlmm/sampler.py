"""Blocked Gibbs sampler for the orthogonal-Tucker longitudinal mixed model.

Sweep order: baseline mode matrices (per mode, column, PING component) ->
baseline cores -> time-varying mode matrices incl. the temporal mode ->
time-varying cores (sequential over the spline-rank slices, parallel within)
-> mean cores -> shrinkage chains -> variances -> adaptive rank step.

Every Gibbs block is a Gaussian (or Gamma / slice) draw from its exact full
conditional given the rest of the state; the conditioned moments of each
Gaussian block are exposed so they can be checked against a brute-force dense
joint-Gaussian conditioning oracle on small instances.

Randomness is organized as counter-based streams keyed by (seed, sweep,
block, cell), so chains are bitwise reproducible for any worker count, and a
resumed chain continues exactly where the interrupted one would have gone.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bases import (SplineBasis, constraint_expander, gaussian_kernel,
                    identity_kernel, laplacian_kernel)
from .config import SamplerConfig
from .errors import ConfigError, FactorizationError, NumericalError
from .model import (ComponentParams, LongitudinalDataset, ModelState,
                    ModeParam, beta_coeff_tensor, eval_alpha)
from .priors import (PRECISION_MODE, SCALE_MODE, ShrinkageChain,
                     component_scale_cov, ping_column_draw,
                     prune_constraint_rows, sample_constrained_mvn,
                     shrinkage_gibbs_update, shrinkage_prior_draw,
                     variance_gibbs)
from .rngstream import block_stream, stream

MODE_IDX = {"g": 0, "x1": 1, "x2": 2, "x3": 3, "t": 4}
SPATIAL_AXIS = {"x1": 0, "x2": 1, "x3": 2}


# ---------------------------------------------------------------------------
# Draws container
# ---------------------------------------------------------------------------


@dataclass
class PosteriorDraws:
    """Thinned retained draws plus per-draw derived summaries."""

    config: SamplerConfig
    dims: tuple
    n_groups: int
    spline: SplineBasis
    sigma_eps2: np.ndarray            # (n_draws,)
    alpha_mean: np.ndarray            # (n_draws, d_g, d1, d2, d3)
    beta_coeff_mean: np.ndarray       # (n_draws, d_g, d1, d2, d3, d_t)
    ranks_alpha: list
    ranks_beta: list
    states: list | None = None
    diagnostics: list = field(default_factory=list)
    final_state: ModelState | None = None
    final_iteration: int = 0

    @property
    def n_draws(self) -> int:
        return len(self.sigma_eps2)

    def beta_mean_at(self, draw: int, h_g: int, t: float) -> np.ndarray:
        w = self.spline.design([t])[0]
        return np.tensordot(self.beta_coeff_mean[draw, h_g - 1], w, axes=([3], [0]))


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _make_kernel(kind: str, name: str, d: int, cfg) -> object:
    if name == "g":
        return identity_kernel(d)
    if name == "t":
        return laplacian_kernel(d)
    if kind == "gaussian":
        m = cfg.gaussian_m if cfg.gaussian_m else max(1, d // 2)
        return gaussian_kernel(d, m)
    return laplacian_kernel(d)


def _fit_gamma(kernel, target: np.ndarray) -> np.ndarray:
    """Least-squares coefficients so that G' gamma approximates target."""
    return np.linalg.lstsq(kernel.G.T, target, rcond=None)[0]


def _init_mode(name: str, kernel, q: int, targets: np.ndarray) -> ModeParam:
    """Mode matrix warm start: component 1 fits the target column, the
    remaining PING components fit the all-ones field."""
    d, r = targets.shape
    ones_gamma = _fit_gamma(kernel, np.ones(d))
    gamma = np.zeros((r, q, kernel.m))
    for z in range(r):
        gamma[z, 0] = _fit_gamma(kernel, targets[:, z])
        for k in range(1, q):
            gamma[z, k] = ones_gamma
    return ModeParam(name=name, kernel=kernel, gamma=gamma,
                     constrained=(name == "t"))


def _svd_columns(mat: np.ndarray, r: int) -> np.ndarray:
    u, s, _ = np.linalg.svd(mat, full_matrices=False)
    if u.shape[1] < r:
        extra = np.zeros((u.shape[0], r - u.shape[1]))
        u = np.hstack([u, extra])
        q, _ = np.linalg.qr(np.hstack([u[:, : u.shape[1]], np.eye(u.shape[0])]))
        return q[:, :r]
    return u[:, :r]


def _temporal_init(d_t: int, r_t: int) -> np.ndarray:
    """Deterministic smooth columns in the column space of the expander."""
    m = constraint_expander(d_t)
    free = np.zeros((d_t - 1, r_t))
    j = np.arange(d_t - 1)
    for c in range(r_t):
        free[:, c] = np.cos(np.pi * c * (j + 0.5) / (d_t - 1)) + (0.2 * j if c == 0 else 0.0)
    q, _ = np.linalg.qr(m @ free)
    return q


def init_state(data: LongitudinalDataset, config: SamplerConfig) -> ModelState:
    """Deterministic warm start from mode-unfolding SVDs and LS projections."""
    dims = data.dims
    d_g = data.n_groups
    ra, rb = config.ranks_alpha, config.ranks_beta
    d_t = config.n_spline
    limits_a = (d_g,) + dims
    limits_b = (d_g,) + dims + (d_t - 1,)
    for r, lim, tag in ((ra, limits_a, "alpha"), (rb, limits_b, "beta")):
        for rj, dj in zip(r, lim):
            if rj > dj:
                raise ConfigError(f"{tag} rank {rj} exceeds its dimension bound {dj}")
    cfg = config.prior
    spline = SplineBasis(config.spline_degree, d_t)

    # group-mean baseline tensor and group-mean slope tensor
    t_alpha = np.zeros((d_g,) + dims)
    counts = np.zeros(d_g)
    t_beta = np.zeros((d_g,) + dims)
    bcounts = np.zeros(d_g)
    for s in data.subjects:
        g = s.group - 1
        t_alpha[g] += s.observations.mean(axis=0)
        counts[g] += 1
        if s.n_visits >= 2:
            dt = s.times[-1] - s.times[0]
            t_beta[g] += (s.observations[-1] - s.observations[0]) / max(dt, 1e-9)
            bcounts[g] += 1
    t_alpha /= np.maximum(counts, 1)[:, None, None, None]
    t_beta /= np.maximum(bcounts, 1)[:, None, None, None]
    if not np.any(t_beta):
        t_beta = t_alpha.copy()

    def spatial_targets(t4, r, axis):
        return _svd_columns(np.moveaxis(t4, axis + 1, 0).reshape(dims[axis], -1), r)

    modes_a = {
        "g": _init_mode("g", _make_kernel("identity", "g", d_g, cfg), 1,
                        _svd_columns(t_alpha.reshape(d_g, -1), ra[0])),
    }
    modes_b = {
        "g": _init_mode("g", _make_kernel("identity", "g", d_g, cfg), 1,
                        _svd_columns(t_beta.reshape(d_g, -1), rb[0])),
    }
    for j, name in enumerate(("x1", "x2", "x3")):
        ka = _make_kernel(cfg.spatial_kernel, name, dims[j], cfg)
        kb = _make_kernel(cfg.spatial_kernel, name, dims[j], cfg)
        modes_a[name] = _init_mode(name, ka, cfg.q_alpha_spatial,
                                   spatial_targets(t_alpha, ra[1 + j], j))
        modes_b[name] = _init_mode(name, kb, cfg.q_beta_spatial,
                                   spatial_targets(t_beta, rb[1 + j], j))
    kt = _make_kernel("laplacian", "t", d_t, cfg)
    modes_b["t"] = _init_mode("t", kt, 1, _temporal_init(d_t, rb[4]))

    n = data.n_subjects
    cores_a = np.zeros((n,) + tuple(ra))
    cores_b = np.zeros((n,) + tuple(rb))
    a_cols = {s: modes_a[s].columns for s in ("g", "x1", "x2", "x3")}
    b_cols = {s: modes_b[s].columns for s in ("g", "x1", "x2", "x3", "t")}
    for i, s in enumerate(data.subjects):
        u = a_cols["g"][s.group - 1]
        ybar = s.observations.mean(axis=0)
        proj = np.einsum("ijk,ia,jb,kc->abc", ybar, a_cols["x1"], a_cols["x2"],
                         a_cols["x3"], optimize=True)
        cores_a[i] = np.multiply.outer(u / max(u @ u, 1e-12), proj)
        ub = b_cols["g"][s.group - 1]
        w = spline.design(s.times) @ b_cols["t"]
        resid = s.observations - np.einsum(
            "abc,ia,jb,kc->ijk", np.einsum("gabc,g->abc", cores_a[i], u),
            a_cols["x1"], a_cols["x2"], a_cols["x3"], optimize=True)[None]
        m_i = np.einsum("nijk,ia,jb,kc->nabc", resid, b_cols["x1"], b_cols["x2"],
                        b_cols["x3"], optimize=True)
        s_i = np.einsum("nabc,nl->abcl", m_i, w)
        wtw = w.T @ w + 1e-6 * np.eye(w.shape[1])
        slices = np.linalg.solve(wtw, s_i.reshape(-1, w.shape[1]).T).T
        cores_b[i] = np.multiply.outer(ub / max(ub @ ub, 1e-12),
                                       slices.reshape(rb[1], rb[2], rb[3], rb[4]))

    def chains_for(ranks, order):
        return {s: ShrinkageChain(
            np.array([cfg.kappa1] + [cfg.kappa2] * (r - 1)),
            cfg.kappa1, cfg.kappa2) for s, r in zip(order, ranks)}

    alpha = ComponentParams(
        mode_order=("g", "x1", "x2", "x3"), modes=modes_a, cores=cores_a,
        C=cores_a.mean(axis=0), cell_var=np.ones(tuple(ra)), tau2=1.0,
        chains=chains_for(ra, ("g", "x1", "x2", "x3")), mean_core_var=1.0)
    beta = ComponentParams(
        mode_order=("g", "x1", "x2", "x3", "t"), modes=modes_b, cores=cores_b,
        C=cores_b.mean(axis=0), cell_var=np.ones(tuple(rb)), tau2=1.0,
        chains=chains_for(rb, ("g", "x1", "x2", "x3", "t")), mean_core_var=1.0)

    state = ModelState(alpha=alpha, beta=beta, spline=spline, sigma_eps2=1.0,
                       dims=dims, n_groups=d_g, shrink_mode=cfg.shrink_mode)
    ss, cnt = 0.0, 0
    for i, s in enumerate(data.subjects):
        pred = _subject_prediction(state, i, s)
        ss += float(np.sum((s.observations - pred) ** 2))
        cnt += s.observations.size
    state.sigma_eps2 = max(ss / max(cnt, 1), 1e-8)
    return state


def _subject_prediction(state: ModelState, i: int, subj) -> np.ndarray:
    al = eval_alpha(state, i, subj.group)
    coeff = beta_coeff_tensor(state, i, subj.group)
    bt = state.spline.design(subj.times)
    return al[None] + np.einsum("ijkm,nm->nijk", coeff, bt)


def state_from_prior(dims, n_groups, config: SamplerConfig,
                     rng: np.random.Generator) -> ModelState:
    """Exact generative draw of a full parameter state from the prior."""
    cfg = config.prior
    d_t = config.n_spline
    spline = SplineBasis(config.spline_degree, d_t)
    mode_specs = {
        "alpha": [("g", n_groups, 1), ("x1", dims[0], cfg.q_alpha_spatial),
                  ("x2", dims[1], cfg.q_alpha_spatial),
                  ("x3", dims[2], cfg.q_alpha_spatial)],
        "beta": [("g", n_groups, 1), ("x1", dims[0], cfg.q_beta_spatial),
                 ("x2", dims[1], cfg.q_beta_spatial),
                 ("x3", dims[2], cfg.q_beta_spatial), ("t", d_t, 1)],
    }
    ranks = {"alpha": config.ranks_alpha, "beta": config.ranks_beta}
    comps = {}
    for tag in ("alpha", "beta"):
        modes, chains = {}, {}
        for (name, d, q), r in zip(mode_specs[tag], ranks[tag]):
            kernel = _make_kernel(cfg.spatial_kernel, name, d, cfg)
            chain = shrinkage_prior_draw(r, cfg.kappa1, cfg.kappa2, rng)
            gamma = np.zeros((r, q, kernel.m))
            cols = []
            sep = np.zeros((1, d))
            if name == "t":
                sep[0, :2] = 1.0
            for z in range(r):
                if name == "t":
                    prev = np.array(cols).T if cols else np.zeros((d, 0))
                    cons = np.vstack([sep, prev.T])
                    cov1 = component_scale_cov(kernel.Q, chain.sigma[z], 1,
                                               cfg.shrink_mode)
                    gamma[z, 0] = sample_constrained_mvn(
                        np.zeros(kernel.m), cov=cov1, A=cons,
                        c=np.zeros(cons.shape[0]), rng=rng)
                    col = kernel.G.T @ gamma[z, 0]
                else:
                    col, gz = ping_column_draw(
                        kernel, q, z + 1, np.array(cols).T if cols else None,
                        chain.sigma[z], rng, mode=cfg.shrink_mode)
                    gamma[z] = gz
                cols.append(col)
            modes[name] = ModeParam(name=name, kernel=kernel, gamma=gamma,
                                    constrained=(name == "t"))
            chains[name] = chain
        shape = tuple(r for r in ranks[tag])
        a_s, b_s = cfg.a_s, cfg.b_s
        cell_var = 1.0 / rng.gamma(a_s, 1.0 / b_s, size=shape)
        tau2 = 1.0 / rng.gamma(cfg.a_tau, 1.0 / cfg.b_tau)
        mcv = 1.0 / rng.gamma(0.1, 1.0 / 0.1)
        C = rng.normal(0.0, np.sqrt(mcv), size=shape)
        comps[tag] = ComponentParams(
            mode_order=tuple(n for n, _, _ in mode_specs[tag]), modes=modes,
            cores=np.zeros((0,) + shape), C=C, cell_var=cell_var, tau2=tau2,
            chains=chains, mean_core_var=mcv)
    sigma_eps2 = 1.0 / rng.gamma(cfg.a_eps, 1.0 / cfg.b_eps)
    return ModelState(alpha=comps["alpha"], beta=comps["beta"], spline=spline,
                      sigma_eps2=sigma_eps2, dims=tuple(dims),
                      n_groups=n_groups, shrink_mode=cfg.shrink_mode)


def draw_subject_cores(state: ModelState, groups, rng: np.random.Generator) -> None:
    """Populate per-subject random cores eta ~ N(C, tau2 * cell_var)."""
    n = len(groups)
    for tag in ("alpha", "beta"):
        comp = getattr(state, tag)
        sd = np.sqrt(comp.tau2 * comp.cell_var)
        comp.cores = comp.C[None] + sd[None] * rng.standard_normal((n,) + comp.C.shape)


# ---------------------------------------------------------------------------
# The sampler
# ---------------------------------------------------------------------------


class GibbsSampler:
    """Owns the mutable working state for one chain."""

    def __init__(self, data: LongitudinalDataset, config: SamplerConfig,
                 state: ModelState | None = None, start_iteration: int = 0):
        self.data = data
        self.config = config
        self.state = state if state is not None else init_state(data, config)
        self.start_iteration = start_iteration
        self.seed = config.seed
        self.spline = self.state.spline
        self.expander = constraint_expander(config.n_spline)
        self.groups0 = data.groups - 1
        self.n_subjects = data.n_subjects
        self.b_designs = [self.spline.design(s.times) for s in data.subjects]
        self.n_visits = np.array([s.n_visits for s in data.subjects])
        self._jitter_streak = 0
        self.jitter_events = 0
        self._missing = None if data.mask is None else ~data.mask
        self.y_work = [s.observations.copy() for s in data.subjects]
        self.diagnostics = []
        # per-phase memos; invalidated whenever the matching params change
        self._memo_alpha = None        # list of subject baseline surfaces
        self._memo_beta_visits = None  # list of (n_i, d1,d2,d3) surfaces

    # -- small helpers ------------------------------------------------------

    def _pmap(self, fn, items):
        workers = self.config.workers
        if workers <= 1 or len(items) <= 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))

    def _draw_gaussian(self, mean_prec_lin, Gamma, rng):
        """Draw from N with given precision/linear term under Gamma x = 0."""
        prec, lin = mean_prec_lin
        jit = 0.0
        for attempt in range(2):
            try:
                mean = np.linalg.solve(prec + jit * np.eye(prec.shape[0]), lin)
                bw = _bandwidth(prec)
                if bw <= self.config.banded_bandwidth_max:
                    ab = _to_banded(prec + jit * np.eye(prec.shape[0]), bw)
                    out = sample_constrained_mvn(
                        mean, precision_banded=ab, A=Gamma, c=None, rng=rng)
                else:
                    out = sample_constrained_mvn(
                        mean, precision=prec + jit * np.eye(prec.shape[0]),
                        A=Gamma, c=None, rng=rng)
                if attempt == 0:
                    self._jitter_streak = 0
                return out
            except (FactorizationError, np.linalg.LinAlgError):
                if attempt == 1:
                    raise
                jit = self.config.jitter
                self.jitter_events += 1
                self._jitter_streak += 1
                if self._jitter_streak > self.config.max_consecutive_jitter:
                    raise NumericalError(
                        "conditional precision required jitter more than "
                        f"{self.config.max_consecutive_jitter} times in a row")

    def subject_alpha(self, i: int) -> np.ndarray:
        if self._memo_alpha is not None and self._memo_alpha[i] is not None:
            return self._memo_alpha[i]
        val = eval_alpha(self.state, i, self.data.subjects[i].group)
        if self._memo_alpha is not None:
            self._memo_alpha[i] = val
        return val

    def subject_beta_at_visits(self, i: int) -> np.ndarray:
        if self._memo_beta_visits is not None and \
                self._memo_beta_visits[i] is not None:
            return self._memo_beta_visits[i]
        coeff = beta_coeff_tensor(self.state, i, self.data.subjects[i].group)
        val = np.moveaxis(np.tensordot(coeff, self.b_designs[i],
                                       axes=([3], [1])), -1, 0)
        if self._memo_beta_visits is not None:
            self._memo_beta_visits[i] = val
        return val

    def _enable_memos(self) -> None:
        self._memo_alpha = [None] * self.n_subjects
        self._memo_beta_visits = [None] * self.n_subjects

    def _invalidate_alpha(self) -> None:
        if self._memo_alpha is not None:
            self._memo_alpha = [None] * self.n_subjects

    def _invalidate_beta(self) -> None:
        if self._memo_beta_visits is not None:
            self._memo_beta_visits = [None] * self.n_subjects

    # -- masked-voxel data augmentation -------------------------------------

    def impute_missing(self, sweep: int) -> None:
        if self._missing is None:
            return
        sd = np.sqrt(self.state.sigma_eps2)
        for i in range(self.n_subjects):
            rng = block_stream(self.seed, sweep, "init", i)
            pred = self.subject_alpha(i)[None] + self.subject_beta_at_visits(i)
            noise = rng.standard_normal(pred.shape) * sd
            self.y_work[i][:, self._missing] = (pred + noise)[:, self._missing]

    # -- baseline mode matrices ---------------------------------------------

    def _alpha_residual(self, i: int) -> np.ndarray:
        """R_alpha: per-voxel sum over visits of (Y - beta)."""
        return (self.y_work[i] - self.subject_beta_at_visits(i)).sum(axis=0)

    def alpha_mode_cache(self, s: str) -> dict:
        """Projections/grams feeding every (l, k) update of baseline mode s."""
        comp = self.state.alpha
        cols = {m: comp.modes[m].columns for m in comp.mode_order}
        r = comp.modes[s].r

        def one(i):
            u = cols["g"][self.groups0[i]]
            ra = self._alpha_residual(i)
            if s == "g":
                t = np.tensordot(comp.cores[i], cols["x1"], axes=([1], [1]))
                t = np.tensordot(t, cols["x2"], axes=([1], [1]))
                t = np.tensordot(t, cols["x3"], axes=([1], [1]))   # (g,i,j,k)
                z = t.reshape(comp.modes["g"].r, -1)
                return z @ ra.ravel(), self.n_visits[i] * (z @ z.T)
            ax = SPATIAL_AXIS[s]
            eta_t = np.tensordot(comp.cores[i], u, axes=([0], [0]))
            if s == "x1":
                z = np.tensordot(eta_t, cols["x2"], axes=([1], [1]))
                z = np.tensordot(z, cols["x3"], axes=([1], [1]))   # (a,j,k)
            elif s == "x2":
                z = np.tensordot(eta_t, cols["x1"], axes=([0], [1]))
                z = np.tensordot(z, cols["x3"], axes=([1], [1]))   # (b,i,k)
            else:
                z = np.tensordot(eta_t, cols["x1"], axes=([0], [1]))
                z = np.tensordot(z, cols["x2"], axes=([0], [1]))   # (c,i,j)
            z = z.reshape(r, -1)
            rmat = np.moveaxis(ra, ax, 0).reshape(self.data.dims[ax], -1)
            return rmat @ z.T, self.n_visits[i] * (z @ z.T)

        per = self._pmap(one, list(range(self.n_subjects)))
        if s == "g":
            d_g = self.data.n_groups
            ptot = np.zeros((d_g, r))
            wg = np.zeros((d_g, r, r))
            for i, (p, w) in enumerate(per):
                ptot[self.groups0[i]] += p
                wg[self.groups0[i]] += w
            return {"P": ptot, "Wg": wg, "group": True}
        ptot = sum(p for p, _ in per)
        wtot = sum(w for _, w in per)
        return {"P": ptot, "W": wtot, "group": False}

    def gamma_system(self, comp_tag: str, s: str, l: int, k: int, cache: dict):
        """(precision, linear term, constraint matrix) for one gamma block."""
        comp = getattr(self.state, comp_tag)
        mode = comp.modes[s]
        kernel = mode.kernel
        fields = mode.column_fields(l)               # (d, q)
        u = np.prod(np.delete(fields, k, axis=1), axis=1) if mode.q > 1 \
            else np.ones(mode.d)
        a_cols = mode.columns
        if cache["group"]:
            wg = cache["Wg"]
            lam = wg[:, l, l]
            corr = np.einsum("gz,gz->g", a_cols, wg[:, :, l]) - a_cols[:, l] * wg[:, l, l]
            r_t = cache["P"][:, l] - corr
        else:
            w = cache["W"]
            lam = np.full(mode.d, w[l, l])
            r_t = cache["P"][:, l] - a_cols @ w[:, l] + a_cols[:, l] * w[l, l]
        g = kernel.G
        sig2 = self.state.sigma_eps2
        lik_prec = (g * (lam * u * u)[None, :]) @ g.T / sig2
        sigma_l = comp.chains[s].sigma[l]
        prior_cov_scale = component_scale_cov(np.eye(1), sigma_l, k + 1,
                                              self.state.shrink_mode)[0, 0]
        prior_prec = kernel.Q_prec / prior_cov_scale
        prec = lik_prec + prior_prec
        lin = g @ (u * r_t) / sig2
        a_minus = np.delete(a_cols, l, axis=1)
        gam = (a_minus * u[:, None]).T @ g.T if a_minus.shape[1] else None
        if mode.constrained:
            sep = np.zeros(mode.d)
            sep[:2] = 1.0
            sep_row = (sep @ g.T)[None, :]
            gam = sep_row if gam is None else np.vstack([gam, sep_row])
        return prec, lin, gam

    def update_gamma_alpha(self, sweep: int) -> None:
        comp = self.state.alpha
        for s in comp.mode_order:
            cache = self.alpha_mode_cache(s)
            mode = comp.modes[s]
            for l in range(mode.r):
                for k in range(mode.q):
                    rng = block_stream(self.seed, sweep, "gamma_alpha",
                                       MODE_IDX[s], l, k)
                    prec, lin, gam = self.gamma_system("alpha", s, l, k, cache)
                    mode.gamma[l, k] = self._draw_gaussian((prec, lin), gam, rng)
        self._invalidate_alpha()

    # -- baseline cores ------------------------------------------------------

    def core_alpha_system(self, i: int):
        """Batched per-cell (r_g x r_g) conditionals for subject i's core."""
        comp = self.state.alpha
        cols = {m: comp.modes[m].columns for m in comp.mode_order}
        deltas = comp.gram_diags()
        u = cols["g"][self.groups0[i]]
        ra = self._alpha_residual(i)
        proj = np.tensordot(ra, cols["x1"], axes=([0], [0]))
        proj = np.tensordot(proj, cols["x2"], axes=([0], [0]))
        proj = np.tensordot(proj, cols["x3"], axes=([0], [0]))    # (a,b,c)
        pdelta = np.einsum("a,b,c->abc", deltas["x1"], deltas["x2"], deltas["x3"])
        sig2 = self.state.sigma_eps2
        lam = (self.n_visits[i] * pdelta / sig2).ravel()          # (cells,)
        dprior = (1.0 / (comp.tau2 * comp.cell_var)).reshape(comp.modes["g"].r, -1).T
        lin = (proj.ravel()[:, None] * u[None, :]) / sig2 \
            + comp.C.reshape(comp.modes["g"].r, -1).T * dprior
        uu = np.outer(u, u)
        prec = lam[:, None, None] * uu[None]
        idx = np.arange(len(u))
        prec[:, idx, idx] += dprior
        return prec, lin

    def update_core_alpha(self, sweep: int) -> None:
        comp = self.state.alpha
        r_g = comp.modes["g"].r
        shape = comp.C.shape

        def one(i):
            prec, lin = self.core_alpha_system(i)
            rng = block_stream(self.seed, sweep, "core_alpha", i)
            z = rng.standard_normal(lin.shape)
            chol = np.linalg.cholesky(prec)
            mean = np.linalg.solve(prec, lin[..., None])[..., 0]
            dev = np.linalg.solve(np.transpose(chol, (0, 2, 1)), z[..., None])[..., 0]
            draw = mean + dev                                      # (cells, r_g)
            return np.moveaxis(draw.reshape(shape[1:] + (r_g,)), -1, 0)

        results = self._pmap(one, list(range(self.n_subjects)))
        for i, core in enumerate(results):
            comp.cores[i] = core
        self._invalidate_alpha()

    # -- time-varying mode matrices -------------------------------------------

    def beta_mode_cache(self, s: str) -> dict:
        comp = self.state.beta
        cols = {m: comp.modes[m].columns for m in comp.mode_order}
        r = comp.modes[s].r

        def one(i):
            u = cols["g"][self.groups0[i]]
            w = self.b_designs[i] @ cols["t"]
            resid = self.y_work[i] - self.subject_alpha(i)[None]   # (n,d1,d2,d3)
            if s == "g":
                t = np.tensordot(comp.cores[i], cols["x1"], axes=([1], [1]))
                t = np.tensordot(t, cols["x2"], axes=([1], [1]))
                t = np.tensordot(t, cols["x3"], axes=([1], [1]))   # (g,u,i,j,k)
                t = np.tensordot(t, w, axes=([1], [1]))            # (g,i,j,k,n)
                z = t.reshape(comp.modes["g"].r, -1)
                rvec = np.moveaxis(resid, 0, -1).ravel()
                return z @ rvec, z @ z.T
            d = np.tensordot(comp.cores[i], u, axes=([0], [0]))    # (a,b,c,u)
            if s == "x1":
                z = np.tensordot(d, cols["x2"], axes=([1], [1]))   # (a,c,u,j)
                z = np.tensordot(z, cols["x3"], axes=([1], [1]))   # (a,u,j,k)
                z = np.tensordot(z, w, axes=([1], [1]))            # (a,j,k,n)
            elif s == "x2":
                z = np.tensordot(d, cols["x1"], axes=([0], [1]))   # (b,c,u,i)
                z = np.tensordot(z, cols["x3"], axes=([1], [1]))   # (b,u,i,k)
                z = np.tensordot(z, w, axes=([1], [1]))            # (b,i,k,n)
            else:
                z = np.tensordot(d, cols["x1"], axes=([0], [1]))   # (b,c,u,i)
                z = np.tensordot(z, cols["x2"], axes=([0], [1]))   # (c,u,i,j)
                z = np.tensordot(z, w, axes=([1], [1]))            # (c,i,j,n)
            z = z.reshape(r, -1)
            ax = SPATIAL_AXIS[s]
            rmat = np.moveaxis(np.moveaxis(resid, 0, -1), ax, 0).reshape(
                self.data.dims[ax], -1)
            return rmat @ z.T, z @ z.T

        per = self._pmap(one, list(range(self.n_subjects)))
        if s == "g":
            d_g = self.data.n_groups
            ptot = np.zeros((d_g, r))
            wg = np.zeros((d_g, r, r))
            for i, (p, w) in enumerate(per):
                ptot[self.groups0[i]] += p
                wg[self.groups0[i]] += w
            return {"P": ptot, "Wg": wg, "group": True}
        return {"P": sum(p for p, _ in per), "W": sum(w for _, w in per),
                "group": False}

    def update_gamma_beta(self, sweep: int) -> None:
        comp = self.state.beta
        for s in ("g", "x1", "x2", "x3"):
            cache = self.beta_mode_cache(s)
            mode = comp.modes[s]
            for l in range(mode.r):
                for k in range(mode.q):
                    rng = block_stream(self.seed, sweep, "gamma_beta",
                                       MODE_IDX[s], l, k)
                    prec, lin, gam = self.gamma_system("beta", s, l, k, cache)
                    mode.gamma[l, k] = self._draw_gaussian((prec, lin), gam, rng)
        self._invalidate_beta()

    def temporal_cache(self) -> dict:
        comp = self.state.beta
        cols = {m: comp.modes[m].columns for m in comp.mode_order}

        def one(i):
            u = cols["g"][self.groups0[i]]
            e = np.tensordot(comp.cores[i], u, axes=([0], [0]))    # (a,b,c,u)
            e = np.tensordot(e, cols["x1"], axes=([0], [1]))       # (b,c,u,i)
            e = np.tensordot(e, cols["x2"], axes=([0], [1]))       # (c,u,i,j)
            e = np.tensordot(e, cols["x3"], axes=([0], [1]))       # (u,i,j,k)
            e = e.reshape(comp.modes["t"].r, -1)
            resid = self.y_work[i] - self.subject_alpha(i)[None]
            rmat = np.moveaxis(resid, 0, -1).reshape(-1, self.n_visits[i])
            return e @ rmat, e @ e.T        # U_i (r_t, n_i), V_i (r_t, r_t)

        per = self._pmap(one, list(range(self.n_subjects)))
        return {"U": [p for p, _ in per], "V": [v for _, v in per]}

    def temporal_system(self, l: int, cache: dict):
        comp = self.state.beta
        mode = comp.modes["t"]
        a_cols = mode.columns
        sig2 = self.state.sigma_eps2
        d_t = mode.d
        prec = mode.kernel.Q_prec / component_scale_cov(
            np.eye(1), comp.chains["t"].sigma[l], 1, self.state.shrink_mode)[0, 0]
        lin = np.zeros(d_t)
        for i in range(self.n_subjects):
            b = self.b_designs[i]
            w = b @ a_cols
            v = cache["V"][i]
            prec = prec + (v[l, l] / sig2) * (b.T @ b)
            r_t = cache["U"][i][l] - w @ v[:, l] + w[:, l] * v[l, l]
            lin = lin + b.T @ r_t / sig2
        a_minus = np.delete(a_cols, l, axis=1)
        sep = np.zeros((1, d_t))
        sep[0, :2] = 1.0
        gam = np.vstack([a_minus.T, sep]) if a_minus.shape[1] else sep
        return prec, lin, gam

    def update_temporal_mode(self, sweep: int) -> None:
        comp = self.state.beta
        mode = comp.modes["t"]
        cache = self.temporal_cache()
        for l in range(mode.r):
            rng = block_stream(self.seed, sweep, "temporal", l)
            prec, lin, gam = self.temporal_system(l, cache)
            col = self._draw_gaussian((prec, lin), gam, rng)
            col[0] = -col[1]   # pin the boundary constraint to exact zero
            mode.gamma[l, 0] = col
        self._invalidate_beta()

    # -- time-varying cores ---------------------------------------------------

    def core_beta_systems(self, i: int):
        """Per-slice ingredients shared by the sequential z_t scan."""
        comp = self.state.beta
        cols = {m: comp.modes[m].columns for m in comp.mode_order}
        deltas = comp.gram_diags()
        u = cols["g"][self.groups0[i]]
        w = self.b_designs[i] @ cols["t"]
        resid = self.y_work[i] - self.subject_alpha(i)[None]
        m_i = np.tensordot(resid, cols["x1"], axes=([1], [0]))     # (n,j,k,a)
        m_i = np.tensordot(m_i, cols["x2"], axes=([1], [0]))       # (n,k,a,b)
        m_i = np.tensordot(m_i, cols["x3"], axes=([1], [0]))       # (n,a,b,c)
        s_i = np.tensordot(m_i, w, axes=([0], [0]))                # (a,b,c,l)
        wtw = w.T @ w
        pdelta = np.einsum("a,b,c->abc", deltas["x1"], deltas["x2"], deltas["x3"])
        return {"u": u, "S": s_i, "WtW": wtw, "pdelta": pdelta}

    def core_beta_slice_system(self, i: int, l: int, sys_i: dict):
        comp = self.state.beta
        u, s_i, wtw, pdelta = sys_i["u"], sys_i["S"], sys_i["WtW"], sys_i["pdelta"]
        sig2 = self.state.sigma_eps2
        proj = np.tensordot(u, comp.cores[i], axes=([0], [0]))    # (a,b,c,l)
        cross = np.tensordot(proj, wtw[:, l], axes=([3], [0])) \
            - proj[..., l] * wtw[l, l]
        q = s_i[..., l] - pdelta * cross                          # (r1,r2,r3)
        lam = (pdelta * wtw[l, l] / sig2).ravel()
        r_g = comp.modes["g"].r
        dprior = (1.0 / (comp.tau2 * comp.cell_var[..., l])).reshape(r_g, -1).T
        lin = (q.ravel()[:, None] * u[None, :]) / sig2 \
            + comp.C[..., l].reshape(r_g, -1).T * dprior
        uu = np.outer(u, u)
        prec = lam[:, None, None] * uu[None]
        idx = np.arange(r_g)
        prec[:, idx, idx] += dprior
        return prec, lin

    def update_core_beta(self, sweep: int) -> None:
        comp = self.state.beta
        r_g = comp.modes["g"].r
        r_t = comp.modes["t"].r
        spatial_shape = comp.C.shape[1:4]
        systems = self._pmap(self.core_beta_systems, list(range(self.n_subjects)))
        for l in range(r_t):                 # sequential over spline-rank slices
            def one(i):
                prec, lin = self.core_beta_slice_system(i, l, systems[i])
                rng = block_stream(self.seed, sweep, "core_beta", i, l)
                z = rng.standard_normal(lin.shape)
                chol = np.linalg.cholesky(prec)
                mean = np.linalg.solve(prec, lin[..., None])[..., 0]
                dev = np.linalg.solve(np.transpose(chol, (0, 2, 1)),
                                      z[..., None])[..., 0]
                draw = mean + dev
                return np.moveaxis(draw.reshape(spatial_shape + (r_g,)), -1, 0)

            results = self._pmap(one, list(range(self.n_subjects)))
            for i, slc in enumerate(results):
                comp.cores[i][..., l] = slc
        self._invalidate_beta()

    # -- mean cores, shrinkage, variances -------------------------------------

    def mean_core_system(self, comp_tag: str):
        comp = getattr(self.state, comp_tag)
        n = self.n_subjects
        dvar = comp.tau2 * comp.cell_var
        prec = n / dvar + 1.0 / comp.mean_core_var
        lin = comp.cores.sum(axis=0) / dvar
        return prec, lin

    def update_mean_cores_and_variances(self, sweep: int) -> None:
        cfg = self.config.prior
        n = self.n_subjects
        for j, tag in enumerate(("alpha", "beta")):
            comp = getattr(self.state, tag)
            rng = block_stream(self.seed, sweep, "mean_cores", j)
            prec, lin = self.mean_core_system(tag)
            comp.C = lin / prec + rng.standard_normal(prec.shape) / np.sqrt(prec)
            rngv = block_stream(self.seed, sweep, "variances", j)
            inv_mcv = rngv.gamma(0.1 + comp.C.size / 2.0,
                                 1.0 / (0.1 + float(np.sum(comp.C**2)) / 2.0))
            comp.mean_core_var = 1.0 / inv_mcv
            dev2 = np.sum((comp.cores - comp.C[None]) ** 2, axis=0)
            shape = cfg.a_s + 0.5 * n
            rate = cfg.b_s + 0.5 * dev2 / comp.tau2
            gdraw = rngv.standard_gamma(shape, size=rate.shape) / rate
            comp.cell_var = 1.0 / gdraw
            ss_tau = float(np.sum(dev2 / comp.cell_var))
            inv_tau2 = variance_gibbs(cfg.a_tau, cfg.b_tau,
                                      n * comp.C.size, ss_tau, rngv)
            comp.tau2 = 1.0 / inv_tau2

    def update_sigma_eps(self, sweep: int) -> float:
        cfg = self.config.prior
        ss, count = 0.0, 0
        for i, s in enumerate(self.data.subjects):
            pred = self.subject_alpha(i)[None] + self.subject_beta_at_visits(i)
            ss += float(np.sum((self.y_work[i] - pred) ** 2))
            count += self.y_work[i].size
        rng = block_stream(self.seed, sweep, "variances", 2)
        inv = variance_gibbs(cfg.a_eps, cfg.b_eps, count, ss, rng)
        self.state.sigma_eps2 = 1.0 / inv
        return ss

    def update_shrinkage(self, sweep: int) -> None:
        for j, tag in enumerate(("alpha", "beta")):
            comp = getattr(self.state, tag)
            for s in comp.mode_order:
                mode = comp.modes[s]
                stats = []
                for z in range(mode.r):
                    g1 = mode.gamma[z, 0]
                    s_z = float(g1 @ mode.kernel.Q_prec @ g1)
                    fields = mode.column_fields(z)
                    uz = np.prod(fields[:, 1:], axis=1) if mode.q > 1 \
                        else np.ones(mode.d)
                    a_minus = np.delete(mode.columns, z, axis=1)
                    gam = (a_minus * uz[:, None]).T @ mode.kernel.G.T \
                        if a_minus.shape[1] else np.zeros((0, mode.kernel.m))
                    if mode.constrained:
                        sep = np.zeros(mode.d)
                        sep[:2] = 1.0
                        gam = np.vstack([gam, (sep @ mode.kernel.G.T)[None]])
                    pruned, _ = prune_constraint_rows(gam, np.zeros(gam.shape[0]))
                    stats.append((s_z, mode.kernel.m - pruned.shape[0]))
                rng = block_stream(self.seed, sweep, "shrinkage", j, MODE_IDX[s])
                comp.chains[s] = shrinkage_gibbs_update(
                    comp.chains[s], stats, rng, self.state.shrink_mode)

    # -- adaptive rank ---------------------------------------------------------

    def adapt_rank(self, iteration: int) -> None:
        acfg = self.config.adapt
        if not acfg.enabled:
            return
        p = acfg.probability(iteration)
        for j, tag in enumerate(("alpha", "beta")):
            comp = getattr(self.state, tag)
            for s in comp.mode_order:
                rng = block_stream(self.seed, iteration, "adapt", j, MODE_IDX[s])
                if rng.random() >= p:
                    continue
                self._adapt_mode(comp, tag, s, rng)
                self._invalidate_alpha()
                self._invalidate_beta()

    def _mode_axis(self, comp: ComponentParams, s: str) -> int:
        return comp.mode_order.index(s)

    def _adapt_mode(self, comp: ComponentParams, tag: str, s: str,
                    rng: np.random.Generator) -> None:
        acfg = self.config.adapt
        mode = comp.modes[s]
        axis = self._mode_axis(comp, s) + 1          # cores have subject axis 0
        cols = mode.columns
        col_norm = np.sqrt(np.einsum("dz,dz->z", cols, cols))
        stacked = np.concatenate([comp.cores, comp.C[None]], axis=0)
        sl = np.sqrt(np.sum(np.moveaxis(stacked, axis, 0).reshape(mode.r, -1) ** 2,
                            axis=1))
        score = col_norm * sl
        top = score.max()
        if top <= 0.0:
            return
        weak = np.where(score < acfg.threshold * top)[0]
        keep = np.setdiff1d(np.arange(mode.r), weak)
        if keep.size < acfg.min_rank:
            keep = np.argsort(score)[::-1][: acfg.min_rank]
            keep = np.sort(keep)
        if keep.size < mode.r:
            self._drop_columns(comp, s, keep)
            return
        cap = mode.d - 1 if mode.constrained else mode.d
        if mode.r >= cap:
            return
        self._append_column(comp, tag, s, rng)

    def _drop_columns(self, comp: ComponentParams, s: str, keep) -> None:
        mode = comp.modes[s]
        axis = self._mode_axis(comp, s)
        mode.gamma = mode.gamma[keep]
        comp.chains[s] = comp.chains[s].dropped(keep)
        comp.cores = np.take(comp.cores, keep, axis=axis + 1)
        comp.C = np.take(comp.C, keep, axis=axis)
        comp.cell_var = np.take(comp.cell_var, keep, axis=axis)

    def _append_column(self, comp: ComponentParams, tag: str, s: str,
                       rng: np.random.Generator) -> None:
        cfg = self.config.prior
        mode = comp.modes[s]
        axis = self._mode_axis(comp, s)
        chain = comp.chains[s].extended(rng)
        sigma_new = chain.sigma[-1]
        if mode.constrained:
            sep = np.zeros((1, mode.d))
            sep[0, :2] = 1.0
            cons = np.vstack([sep, mode.columns.T])
            cov1 = component_scale_cov(mode.kernel.Q, sigma_new, 1,
                                       self.state.shrink_mode)
            gnew = sample_constrained_mvn(np.zeros(mode.kernel.m), cov=cov1,
                                          A=cons, c=np.zeros(cons.shape[0]),
                                          rng=rng)[None, :]
        else:
            _, gnew = ping_column_draw(mode.kernel, mode.q, mode.r + 1,
                                       mode.columns, sigma_new, rng,
                                       mode=self.state.shrink_mode)
        mode.gamma = np.concatenate([mode.gamma, gnew[None] if gnew.ndim == 1
                                     else gnew.reshape(1, mode.q, mode.kernel.m)])
        comp.chains[s] = chain
        shape_new_c = list(comp.C.shape)
        shape_new_c[axis] = 1
        c_new = rng.normal(0.0, np.sqrt(comp.mean_core_var), size=shape_new_c)
        var_new = 1.0 / rng.gamma(cfg.a_s, 1.0 / cfg.b_s, size=shape_new_c)
        core_new = c_new[None] + np.sqrt(comp.tau2 * var_new)[None] * \
            rng.standard_normal((self.n_subjects,) + tuple(shape_new_c))
        comp.C = np.concatenate([comp.C, c_new], axis=axis)
        comp.cell_var = np.concatenate([comp.cell_var, var_new], axis=axis)
        comp.cores = np.concatenate([comp.cores, core_new], axis=axis + 1)

    # -- one sweep --------------------------------------------------------------

    def sweep(self, iteration: int) -> dict:
        self._enable_memos()
        self.impute_missing(iteration)
        self.update_gamma_alpha(iteration)
        self._check_finite(iteration, "gamma_alpha")
        self.update_core_alpha(iteration)
        self._check_finite(iteration, "core_alpha")
        self.update_gamma_beta(iteration)
        self.update_temporal_mode(iteration)
        self._check_finite(iteration, "gamma_beta/temporal")
        self.update_core_beta(iteration)
        self._check_finite(iteration, "core_beta")
        self.update_mean_cores_and_variances(iteration)
        self.update_shrinkage(iteration)
        ss = self.update_sigma_eps(iteration)
        self._check_finite(iteration, "variances")
        n_obs = int(sum(y.size for y in self.y_work))
        loglik = -0.5 * (ss / self.state.sigma_eps2
                         + n_obs * np.log(2.0 * np.pi * self.state.sigma_eps2))
        self.adapt_rank(iteration)
        rec = {
            "iteration": iteration,
            "loglik": float(loglik),
            "sigma_eps2": float(self.state.sigma_eps2),
            "ranks_alpha": list(self.state.alpha.ranks),
            "ranks_beta": list(self.state.beta.ranks),
        }
        self.diagnostics.append(rec)
        self._memo_alpha = None
        self._memo_beta_visits = None
        return rec

    def _check_finite(self, iteration: int, block: str) -> None:
        if not self.state.is_finite():
            raise NumericalError(
                f"non-finite state after block {block!r} at sweep {iteration}")


def _bandwidth(mat: np.ndarray) -> int:
    n = mat.shape[0]
    bw = 0
    for k in range(n - 1, 0, -1):
        if np.any(np.abs(np.diag(mat, k)) > 0.0):
            bw = k
            break
    return bw


def _to_banded(mat: np.ndarray, bw: int) -> np.ndarray:
    n = mat.shape[0]
    ab = np.zeros((bw + 1, n))
    for k in range(bw + 1):
        ab[bw - k, k:] = np.diag(mat, k)
    return ab


def _snapshot(state: ModelState) -> ModelState:
    import copy

    new_modes = {}

    def copy_comp(comp: ComponentParams) -> ComponentParams:
        modes = {s: ModeParam(name=p.name, kernel=p.kernel,
                              gamma=p.gamma.copy(), constrained=p.constrained)
                 for s, p in comp.modes.items()}
        chains = {s: ShrinkageChain(comp.chains[s].varsigma.copy(),
                                    comp.chains[s].kappa1, comp.chains[s].kappa2)
                  for s in comp.chains}
        return ComponentParams(mode_order=comp.mode_order, modes=modes,
                               cores=comp.cores.copy(), C=comp.C.copy(),
                               cell_var=comp.cell_var.copy(), tau2=comp.tau2,
                               chains=chains, mean_core_var=comp.mean_core_var)

    return ModelState(alpha=copy_comp(state.alpha), beta=copy_comp(state.beta),
                      spline=state.spline, sigma_eps2=state.sigma_eps2,
                      dims=state.dims, n_groups=state.n_groups,
                      shrink_mode=state.shrink_mode)


def run_chain(data: LongitudinalDataset, config: SamplerConfig,
              init: ModelState | None = None, start_iteration: int = 0,
              diag_sink=None) -> PosteriorDraws:
    """Run the blocked Gibbs sampler and collect thinned draws.

    Deterministic for fixed (seed, config, data) at any worker count.  Pass
    `init`/`start_iteration` to resume from a checkpointed state; the resumed
    chain is bit-identical to the uninterrupted one.
    """
    sampler = GibbsSampler(data, config, state=init,
                           start_iteration=start_iteration)
    d_g = data.n_groups
    sig, amean, bcoef, ra_l, rb_l, states = [], [], [], [], [], []
    for it in range(start_iteration, config.iterations):
        rec = sampler.sweep(it)
        if diag_sink is not None:
            diag_sink.write(json.dumps(rec) + "\n")
        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
            st = sampler.state
            sig.append(st.sigma_eps2)
            amean.append(np.stack([
                np.einsum("gabc,g,ia,jb,kc->ijk", st.alpha.C,
                          st.alpha.modes["g"].columns[g],
                          st.alpha.modes["x1"].columns,
                          st.alpha.modes["x2"].columns,
                          st.alpha.modes["x3"].columns, optimize=True)
                for g in range(d_g)]))
            bcoef.append(np.stack([beta_coeff_tensor(st, None, g + 1)
                                   for g in range(d_g)]))
            ra_l.append(st.alpha.ranks)
            rb_l.append(st.beta.ranks)
            if config.keep_states:
                states.append(_snapshot(sampler.state))
    n_draws = len(sig)
    dt = config.n_spline
    return PosteriorDraws(
        config=config, dims=data.dims, n_groups=d_g, spline=sampler.spline,
        sigma_eps2=np.array(sig),
        alpha_mean=np.array(amean) if n_draws else np.zeros((0, d_g) + data.dims),
        beta_coeff_mean=np.array(bcoef) if n_draws else
        np.zeros((0, d_g) + data.dims + (dt,)),
        ranks_alpha=ra_l, ranks_beta=rb_l,
        states=states if config.keep_states else None,
        diagnostics=sampler.diagnostics,
        final_state=_snapshot(sampler.state),
        final_iteration=config.iterations)
