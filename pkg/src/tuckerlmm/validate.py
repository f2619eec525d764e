"""Correctness oracles: dense-conditioning block checks and SBC.

The block oracle rebuilds each Gaussian Gibbs block's conditional from
scratch: it materializes the design matrix of the block's parameters against
the full vectorized observation vector (the model mean is linear in every
block), forms the posterior by brute force, applies its own projection
formula for the linear constraints, and compares moments with the sampler's
conditionals.

SBC draws ground truths from the generative prior (with a prior-Gibbs warmup
over the constrained mode matrices so truth draws and the posterior kernel
share one target), simulates data, runs the chain, and checks that the rank
statistics of surface functionals are uniform.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats as sstats

from .config import SamplerConfig
from .errors import OracleFailure
from .model import LongitudinalDataset, ModelState, beta_coeff_tensor, eval_alpha
from .priors import component_scale_cov, sample_constrained_mvn
from .rngstream import stream
from .sampler import (GibbsSampler, draw_subject_cores, run_chain,
                      state_from_prior)
from .simulate import simulate_from_state


# ---------------------------------------------------------------------------
# Dense joint-Gaussian conditioning oracle
# ---------------------------------------------------------------------------


def _predict_all(state: ModelState, data: LongitudinalDataset) -> np.ndarray:
    out = []
    for i, s in enumerate(data.subjects):
        al = eval_alpha(state, i, s.group)
        coeff = beta_coeff_tensor(state, i, s.group)
        bt = state.spline.design(s.times)
        out.append((al[None] + np.einsum("ijkm,nm->nijk", coeff, bt)).ravel())
    return np.concatenate(out)


def _observed_all(data: LongitudinalDataset) -> np.ndarray:
    return np.concatenate([s.observations.ravel() for s in data.subjects])


def _project_constrained(mean, cov, gam):
    """Independent implementation of Gaussian conditioning on gam @ x = 0."""
    if gam is None or gam.shape[0] == 0:
        return mean, cov
    g = np.atleast_2d(gam)
    # drop dependent rows by explicit Gram pivoting
    keep = []
    for j in range(g.shape[0]):
        trial = g[keep + [j]]
        if np.linalg.matrix_rank(trial @ trial.T, tol=1e-12 * max(
                1.0, float(np.abs(trial).max())**2)) == len(keep) + 1:
            keep.append(j)
    g = g[keep]
    sa = cov @ g.T
    m = g @ sa
    minv = np.linalg.inv(m)
    mean_c = mean - sa @ (minv @ (g @ mean))
    cov_c = cov - sa @ minv @ sa.T
    return mean_c, 0.5 * (cov_c + cov_c.T)


def _dense_posterior(theta_dim, setter, sampler: GibbsSampler, prior_mean,
                     prior_cov, gam):
    """Brute-force conditional of one block through the data likelihood."""
    state = sampler.state
    data = sampler.data
    y = np.concatenate([yw.ravel() for yw in sampler.y_work])
    base = np.zeros(theta_dim)
    setter(base)
    off = _predict_all(state, data)
    x_cols = np.empty((off.size, theta_dim))
    for j in range(theta_dim):
        e = np.zeros(theta_dim)
        e[j] = 1.0
        setter(e)
        x_cols[:, j] = _predict_all(state, data) - off
    sig2 = state.sigma_eps2
    s0inv = np.linalg.inv(prior_cov)
    prec = x_cols.T @ x_cols / sig2 + s0inv
    lin = x_cols.T @ (y - off) / sig2 + s0inv @ prior_mean
    cov = np.linalg.inv(prec)
    mean = cov @ lin
    return _project_constrained(mean, cov, gam)


def _rel_err(a, b) -> float:
    scale = 1.0 + float(np.abs(b).max(initial=0.0))
    return float(np.abs(a - b).max(initial=0.0)) / scale


@dataclass
class BlockCheck:
    name: str
    err_mean: float
    err_cov: float


def check_blocks(data: LongitudinalDataset, config: SamplerConfig,
                 warm_sweeps: int = 3, rtol: float = 1e-8) -> list:
    """Compare every Gaussian Gibbs block with the dense oracle.

    Runs a few warm sweeps so the comparison happens at a generic state,
    then freezes the state and interrogates each block.  Returns the list of
    BlockCheck results; raises OracleFailure if any exceeds rtol.
    """
    sampler = GibbsSampler(data, config)
    for it in range(warm_sweeps):
        sampler.sweep(it)
    state = sampler.state
    results = []

    def record(name, mean_cov_impl, mean_cov_oracle):
        (mi, ci), (mo, co) = mean_cov_impl, mean_cov_oracle
        results.append(BlockCheck(name, _rel_err(mi, mo), _rel_err(ci, co)))

    # mode-matrix blocks (baseline, time-varying, temporal)
    for tag in ("alpha", "beta"):
        comp = getattr(state, tag)
        for s in comp.mode_order:
            mode = comp.modes[s]
            cache = (sampler.alpha_mode_cache(s) if tag == "alpha" and s != "t"
                     else sampler.beta_mode_cache(s) if s != "t" else None)
            for l in range(mode.r):
                for k in range(mode.q):
                    if s == "t":
                        prec, lin, gam = sampler.temporal_system(
                            l, sampler.temporal_cache())
                    else:
                        prec, lin, gam = sampler.gamma_system(tag, s, l, k, cache)
                    cov = np.linalg.inv(prec)
                    impl = _project_constrained(cov @ lin, cov, gam)
                    sigma_l = comp.chains[s].sigma[l]
                    pc = component_scale_cov(mode.kernel.Q, sigma_l, k + 1,
                                             state.shrink_mode)
                    gamma_backup = mode.gamma[l, k].copy()

                    def setter(vec, _m=mode, _l=l, _k=k):
                        _m.gamma[_l, _k] = vec

                    oracle = _dense_posterior(mode.kernel.m, setter, sampler,
                                              np.zeros(mode.kernel.m), pc, gam)
                    mode.gamma[l, k] = gamma_backup
                    record(f"{tag}.gamma[{s}][l={l},k={k}]", impl, oracle)

    # core blocks: subject 0 and 1, a few cells
    for tag in ("alpha", "beta"):
        comp = getattr(state, tag)
        r_g = comp.modes["g"].r
        spatial_cells = int(np.prod(comp.C.shape[1:4]))
        for i in (0, min(1, sampler.n_subjects - 1)):
            if tag == "alpha":
                prec_all, lin_all = sampler.core_alpha_system(i)
                cells = range(0, spatial_cells, max(1, spatial_cells // 3))
                for cell in cells:
                    prec, lin = prec_all[cell], lin_all[cell]
                    cov = np.linalg.inv(prec)
                    impl = (cov @ lin, cov)
                    backup = comp.cores[i].copy()

                    def setter(vec, _i=i, _cell=cell, _c=comp, _b=backup):
                        core = _b.copy().reshape(r_g, -1)
                        core[:, _cell] = vec
                        _c.cores[_i] = core.reshape(_b.shape)

                    pm = comp.C.reshape(r_g, -1)[:, cell]
                    pv = np.diag(comp.tau2 * comp.cell_var.reshape(r_g, -1)[:, cell])
                    oracle = _dense_posterior(r_g, setter, sampler, pm, pv, None)
                    comp.cores[i] = backup
                    record(f"alpha.core[i={i},cell={cell}]", impl, oracle)
            else:
                r_t = comp.modes["t"].r
                systems = sampler.core_beta_systems(i)
                for l in range(r_t):
                    prec_all, lin_all = sampler.core_beta_slice_system(i, l, systems)
                    cell = (l * 2) % int(np.prod(comp.C.shape[1:4]))
                    prec, lin = prec_all[cell], lin_all[cell]
                    cov = np.linalg.inv(prec)
                    impl = (cov @ lin, cov)
                    backup = comp.cores[i].copy()
                    sshape = comp.C.shape[1:4]

                    def setter(vec, _i=i, _cell=cell, _l=l, _c=comp, _b=backup,
                               _ss=sshape):
                        core = _b.copy()
                        flat = core[..., _l].reshape(r_g, -1)
                        flat[:, _cell] = vec
                        core[..., _l] = flat.reshape((r_g,) + _ss)
                        _c.cores[_i] = core

                    pm = comp.C[..., l].reshape(r_g, -1)[:, cell]
                    pv = np.diag(comp.tau2
                                 * comp.cell_var[..., l].reshape(r_g, -1)[:, cell])
                    oracle = _dense_posterior(r_g, setter, sampler, pm, pv, None)
                    comp.cores[i] = backup
                    record(f"beta.core[i={i},slice={l},cell={cell}]", impl, oracle)

    # mean-core blocks: the "data" are the subject cores
    for tag in ("alpha", "beta"):
        comp = getattr(state, tag)
        prec, lin = sampler.mean_core_system(tag)
        impl = (lin.ravel() / prec.ravel(), np.diag(1.0 / prec.ravel()))
        n = sampler.n_subjects
        dvar = (comp.tau2 * comp.cell_var).ravel()
        prec_o = n / dvar + 1.0 / comp.mean_core_var
        cov_o = np.diag(1.0 / prec_o)
        mean_o = (comp.cores.reshape(n, -1).sum(axis=0) / dvar) / prec_o
        record(f"{tag}.mean_core", impl, (mean_o, cov_o))

    bad = [r for r in results if max(r.err_mean, r.err_cov) > rtol]
    if bad:
        worst = max(bad, key=lambda r: max(r.err_mean, r.err_cov))
        raise OracleFailure(
            f"{len(bad)} blocks exceed rtol={rtol}: worst {worst.name} "
            f"(mean err {worst.err_mean:.2e}, cov err {worst.err_cov:.2e})")
    return results


# ---------------------------------------------------------------------------
# Simulation-based calibration
# ---------------------------------------------------------------------------

SBC_DEFAULTS = dict(dims=(4, 4, 4), n_groups=2, n_subjects=6, n_visits=3)


def prior_mode_gibbs(state: ModelState, sweeps: int, rng: np.random.Generator) -> None:
    """Gibbs over the constrained mode matrices under the prior alone.

    Aligns ground-truth draws with the stationary law of the posterior
    kernel's constrained-column updates (data-free limit of the same
    conditionals).
    """
    for _ in range(sweeps):
        for tag in ("alpha", "beta"):
            comp = getattr(state, tag)
            for s in comp.mode_order:
                mode = comp.modes[s]
                for l in range(mode.r):
                    for k in range(mode.q):
                        fields = mode.column_fields(l)
                        u = (np.prod(np.delete(fields, k, axis=1), axis=1)
                             if mode.q > 1 else np.ones(mode.d))
                        a_minus = np.delete(mode.columns, l, axis=1)
                        gam = ((a_minus * u[:, None]).T @ mode.kernel.G.T
                               if a_minus.shape[1] else None)
                        if mode.constrained:
                            sep = np.zeros((1, mode.d))
                            sep[0, :2] = 1.0
                            row = sep @ mode.kernel.G.T
                            gam = row if gam is None else np.vstack([gam, row])
                        sigma_l = comp.chains[s].sigma[l]
                        cov = component_scale_cov(mode.kernel.Q, sigma_l, k + 1,
                                                  state.shrink_mode)
                        mode.gamma[l, k] = sample_constrained_mvn(
                            np.zeros(mode.kernel.m), cov=cov, A=gam, c=None,
                            rng=rng)


def surface_functionals(alpha_mean: np.ndarray, beta_coeff: np.ndarray,
                        spline) -> np.ndarray:
    """Ten scalar functionals of the population alpha/beta surfaces."""
    d_g = alpha_mean.shape[0]
    dims = alpha_mean.shape[1:]
    g2 = min(1, d_g - 1)
    v = tuple(min(2, d - 1) for d in dims)
    w05 = spline.design([0.5])[0]
    w10 = spline.design([1.0])[0]
    dw05 = spline.design_deriv([0.5])[0]
    beta05 = np.tensordot(beta_coeff, w05, axes=([4], [0]))
    beta10 = np.tensordot(beta_coeff, w10, axes=([4], [0]))
    dbeta05 = np.tensordot(beta_coeff, dw05, axes=([4], [0]))
    return np.array([
        alpha_mean[0][1, 2, 1],
        alpha_mean[g2][v],
        float(np.sqrt(np.sum(alpha_mean[0] ** 2))),
        float(alpha_mean[g2].mean()),
        beta05[0][2, 1, 2],
        beta10[g2][1, 2, 1],
        float(np.sqrt(np.sum(beta_coeff[0] ** 2))),
        float(np.abs(beta10[g2]).mean()),
        float(((beta05[0] - beta05[g2]) ** 2).mean()),
        float(dbeta05[0][v]),
    ])


def _sbc_one(args):
    (rep, seed, config, dims, n_groups, n_subjects, n_visits, warm) = args
    rng = stream(seed, 2000, rep)
    truth = state_from_prior(dims, n_groups, config, rng)
    prior_mode_gibbs(truth, warm, rng)
    groups = [1 + (i % n_groups) for i in range(n_subjects)]
    draw_subject_cores(truth, groups, rng)
    times = [np.sort(rng.random(n_visits)) for _ in range(n_subjects)]
    data = simulate_from_state(truth, groups, times, rng)
    spline = truth.spline
    f_true = surface_functionals(
        np.stack([np.einsum("gabc,g,ia,jb,kc->ijk", truth.alpha.C,
                            truth.alpha.modes["g"].columns[g],
                            truth.alpha.modes["x1"].columns,
                            truth.alpha.modes["x2"].columns,
                            truth.alpha.modes["x3"].columns, optimize=True)
                  for g in range(n_groups)]),
        np.stack([beta_coeff_tensor(truth, None, g + 1)
                  for g in range(n_groups)]), spline)
    cfg = SamplerConfig(
        iterations=config.iterations, burn_in=config.burn_in, thin=config.thin,
        seed=seed + 7919 * rep, ranks_alpha=config.ranks_alpha,
        ranks_beta=config.ranks_beta, spline_degree=config.spline_degree,
        n_spline=config.n_spline, prior=config.prior, adapt=config.adapt,
        workers=1, keep_states=False)
    draws = run_chain(data, cfg, init=truth)
    f_draws = np.stack([
        surface_functionals(draws.alpha_mean[d], draws.beta_coeff_mean[d], spline)
        for d in range(draws.n_draws)])
    return (f_draws < f_true[None, :]).sum(axis=0)


def run_sbc(replications: int = 200, seed: int = 20240901,
            config: SamplerConfig | None = None, dims=(4, 4, 4),
            n_groups: int = 2, n_subjects: int = 6, n_visits: int = 3,
            warm: int = 120, workers: int = 1, n_bins: int = 10):
    """Simulation-based calibration of the full chain.

    Returns dict with the (replications x n_functionals) rank array, the
    number of retained draws L, and per-functional chi-square p-values for
    uniformity of ranks over {0..L}.
    """
    if config is None:
        config = SamplerConfig(
            iterations=420, burn_in=120, thin=3, seed=0,
            ranks_alpha=(2, 2, 2, 2), ranks_beta=(2, 2, 2, 2, 2),
            n_spline=4, workers=1, keep_states=False)
    args = [(rep, seed, config, tuple(dims), n_groups, n_subjects, n_visits,
             warm) for rep in range(replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            ranks = np.stack(list(ex.map(_sbc_one, args)))
    else:
        ranks = np.stack([_sbc_one(a) for a in args])
    n_draws = config.n_draws
    pvals = np.array([_uniform_chi2_pvalue(ranks[:, j], n_draws, n_bins)
                      for j in range(ranks.shape[1])])
    return {"ranks": ranks, "L": n_draws, "pvalues": pvals}


def _uniform_chi2_pvalue(ranks: np.ndarray, L: int, n_bins: int) -> float:
    edges = np.linspace(0, L + 1, n_bins + 1)
    counts, _ = np.histogram(ranks, bins=edges)
    expected = len(ranks) / n_bins
    chi2 = float(np.sum((counts - expected) ** 2) / expected)
    return float(sstats.chi2.sf(chi2, df=n_bins - 1))


def assert_sbc_uniform(result: dict, p_threshold: float = 0.01) -> None:
    bad = np.where(result["pvalues"] <= p_threshold)[0]
    if bad.size:
        raise OracleFailure(
            f"SBC uniformity failed for functionals {bad.tolist()} "
            f"(p-values {result['pvalues'][bad].round(5).tolist()})")
