"""Synthetic longitudinal tensor datasets: bump-design study and model draws.

The bump design places six separable Gaussian bumps in the volume; group
h_g activates the first 2*h_g of them, and every bump grows like
time_coef * t^2, so group surfaces are pointwise ordered and vanish at t=0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SimulationSpec
from .errors import ConfigError
from .model import LongitudinalDataset, ModelState, Subject
from .rngstream import stream

# Visit schedules (in months over a 48-month window) with the irregular 1-5
# visit structure of a longitudinal imaging study; resampled with replacement.
BUNDLED_SCHEDULES_MONTHS = (
    (0.0,),
    (0.0, 12.0),
    (0.0, 6.0, 24.0),
    (0.0, 12.0, 24.0),
    (0.0, 4.0, 12.0, 36.0),
    (0.0, 6.0, 18.0, 30.0),
    (0.0, 12.0, 24.0, 36.0),
    (0.0, 6.0, 12.0, 24.0, 48.0),
    (0.0, 4.0, 16.0, 28.0, 40.0),
    (6.0, 18.0, 30.0, 42.0),
    (0.0, 24.0, 48.0),
    (12.0, 36.0),
)
SCHEDULE_WINDOW_MONTHS = 48.0


def bump_weights(spec: SimulationSpec, h_g: int) -> np.ndarray:
    """Indicator weights: group h_g activates bumps 1..2*h_g."""
    n_bumps = len(spec.bump_centers_1)
    ell = np.arange(1, n_bumps + 1)
    return (ell <= 2 * h_g).astype(np.float64)


def _bump_profiles(spec: SimulationSpec) -> list:
    """Per-axis (n_bumps, d) separable bump factors exp(-(h - d*u)^2 / scale)."""
    out = []
    for dim, centers in zip(spec.dims, (spec.bump_centers_1, spec.bump_centers_2,
                                        spec.bump_centers_3)):
        h = np.arange(1, dim + 1, dtype=np.float64)
        c = dim * np.asarray(centers)
        out.append(np.exp(-((h[None, :] - c[:, None]) ** 2) / spec.bump_scale))
    return out


def true_beta_volume(spec: SimulationSpec, h_g: int, t: float) -> np.ndarray:
    """Population time-varying surface (d1,d2,d3) for group h_g at time t."""
    p1, p2, p3 = _bump_profiles(spec)
    w = bump_weights(spec, h_g) * spec.time_coef * t * t
    return np.einsum("l,la,lb,lc->abc", w, p1, p2, p3)


def true_beta(spec: SimulationSpec, h_g: int, h1: int, h2: int, h3: int,
              t: float) -> float:
    """Closed-form true beta at one (group, voxel, time) point (1-based voxels)."""
    p1, p2, p3 = _bump_profiles(spec)
    w = bump_weights(spec, h_g) * spec.time_coef * t * t
    return float(np.sum(w * p1[:, h1 - 1] * p2[:, h2 - 1] * p3[:, h3 - 1]))


def synthetic_alpha(spec: SimulationSpec) -> np.ndarray:
    """Deterministic smooth low-rank baseline field, one volume per group."""
    rng = stream(spec.seed, 101)
    r = spec.alpha_rank
    cols = []
    for dim in spec.dims:
        h = np.linspace(0.0, 1.0, dim)
        prof = np.stack([np.sin((z + 1) * np.pi * h + 0.3 * z) for z in range(r)],
                        axis=1)
        cols.append(prof)
    gw = rng.normal(0.0, 1.0, size=(spec.n_groups, r))
    field = np.einsum("gz,az,bz,cz->gabc", gw, *cols)
    scale = np.max(np.abs(field))
    return spec.alpha_scale * field / (scale if scale > 0 else 1.0)


@dataclass
class GroundTruth:
    spec: SimulationSpec
    alpha: np.ndarray            # (d_g, d1, d2, d3) per-group baseline
    groups: np.ndarray           # (N,)
    subject_offsets: np.ndarray  # (N,) or (N, d1, d2, d3)

    def beta_volume(self, h_g: int, t: float) -> np.ndarray:
        return true_beta_volume(self.spec, h_g, t)

    def nonzero_mask(self, h_g: int, tol: float = 1e-6) -> np.ndarray:
        return np.abs(self.beta_volume(h_g, 1.0)) > tol


def _draw_times(spec: SimulationSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.schedule == "bundled":
        idx = rng.integers(0, len(BUNDLED_SCHEDULES_MONTHS))
        months = np.asarray(BUNDLED_SCHEDULES_MONTHS[idx])
        return months / SCHEDULE_WINDOW_MONTHS
    n = int(rng.integers(spec.min_visits, spec.max_visits + 1))
    t = np.sort(rng.random(n))
    return np.unique(np.round(t, 6))


def generate_dataset(spec: SimulationSpec, rng: np.random.Generator | None = None):
    """Simulate a dataset from the bump design; returns (dataset, truth)."""
    if rng is None:
        rng = stream(spec.seed, 100)
    alpha = synthetic_alpha(spec) if spec.alpha_source == "synthetic" else \
        _load_alpha_stack(spec)
    subjects = []
    groups = []
    offsets = []
    n_total = spec.n_groups * spec.subjects_per_group
    profiles = _bump_profiles(spec)
    for h_g in range(1, spec.n_groups + 1):
        for j in range(spec.subjects_per_group):
            i = len(subjects)
            srng = stream(spec.seed, 102, i)
            times = _draw_times(spec, srng)
            if spec.per_voxel_subject_noise:
                off = srng.normal(0.0, spec.subject_beta_sd, size=spec.dims)
            else:
                off = float(srng.normal(0.0, spec.subject_beta_sd))
            w0 = bump_weights(spec, h_g)
            obs = np.empty((len(times),) + spec.dims)
            for k, t in enumerate(times):
                w = w0 * spec.time_coef * t * t
                beta = np.einsum("l,la,lb,lc->abc", w, *profiles)
                mean = alpha[h_g - 1] + beta + off
                obs[k] = mean + srng.normal(0.0, spec.noise_sd, size=spec.dims)
            subjects.append(Subject(subject_id=f"s{i:03d}", group=h_g,
                                    times=times, observations=obs))
            groups.append(h_g)
            offsets.append(off)
    truth = GroundTruth(
        spec=spec, alpha=alpha, groups=np.array(groups),
        subject_offsets=np.array(offsets))
    data = LongitudinalDataset(subjects=subjects, dims=spec.dims,
                               n_groups=spec.n_groups)
    return data, truth


def _load_alpha_stack(spec: SimulationSpec) -> np.ndarray:
    from .tensor import read_ltf

    alpha = read_ltf(spec.alpha_source)
    if alpha.shape != (spec.n_groups,) + spec.dims:
        raise ConfigError(
            f"alpha stack {spec.alpha_source} has shape {alpha.shape}, "
            f"expected {(spec.n_groups,) + spec.dims}")
    return alpha


def simulate_from_state(state: ModelState, groups, times_list,
                        rng: np.random.Generator) -> LongitudinalDataset:
    """Generate observations from a fully populated ModelState.

    `groups` holds 1-based group labels per subject; state.*.cores must
    already contain one core per subject (see draw_subject_cores).
    """
    from .model import beta_coeff_tensor, eval_alpha

    subjects = []
    sd = float(np.sqrt(state.sigma_eps2))
    for i, (h_g, times) in enumerate(zip(groups, times_list)):
        times = np.asarray(times, dtype=np.float64)
        al = eval_alpha(state, i, int(h_g))
        coeff = beta_coeff_tensor(state, i, int(h_g))
        bt = state.spline.design(times)
        mean = al[None] + np.einsum("ijkm,nm->nijk", coeff, bt)
        obs = mean + sd * rng.standard_normal(mean.shape)
        subjects.append(Subject(subject_id=f"s{i:03d}", group=int(h_g),
                                times=times, observations=obs))
    return LongitudinalDataset(subjects=subjects, dims=state.dims,
                               n_groups=state.n_groups)
