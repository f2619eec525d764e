"""Configuration dataclasses and their JSON file format.

Every field of SamplerConfig / CscPingConfig / SimulationSpec can be set from
a JSON config file; unknown keys are rejected so typos fail loudly.  See
README for the documented schema.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError


def _from_dict(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        val = data[f.name]
        sub = _NESTED.get((cls.__name__, f.name))
        kwargs[f.name] = _from_dict(sub, val) if sub else val
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class CscPingConfig:
    """Prior hyperparameters for the CSC-PING construction."""

    kappa1: float = 2.1
    kappa2: float = 3.1
    a_s: float = 10.0
    b_s: float = 0.1
    a_tau: float = 0.1
    b_tau: float = 0.1
    a_eps: float = 0.1
    b_eps: float = 0.1
    q_alpha_spatial: int = 1
    q_beta_spatial: int = 3
    spatial_kernel: str = "gaussian"   # "gaussian" (smooth) | "laplacian" (non-smooth)
    gaussian_m: int | None = None      # bases per spatial dim; default floor(d/2)
    shrink_mode: str = "scale"         # "scale" (as written) | "precision"

    def __post_init__(self):
        if self.kappa1 <= 0 or self.kappa2 <= 0:
            raise ConfigError("kappa1, kappa2 must be positive")
        if min(self.q_alpha_spatial, self.q_beta_spatial) < 1:
            raise ConfigError("PING depth must be >= 1")
        if self.spatial_kernel not in ("gaussian", "laplacian"):
            raise ConfigError(f"unknown spatial_kernel {self.spatial_kernel!r}")
        if self.shrink_mode not in ("scale", "precision"):
            raise ConfigError(f"unknown shrink_mode {self.shrink_mode!r}")


@dataclass(frozen=True)
class AdaptConfig:
    """Adaptive-rank step: fires with probability exp(-a0 - a1*iter)."""

    enabled: bool = False
    prob_intercept: float = 1.0
    prob_slope: float = 5e-4
    threshold: float = 1e-4
    min_rank: int = 1

    def probability(self, iteration: int) -> float:
        import math

        return math.exp(-self.prob_intercept - self.prob_slope * iteration)


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int = 500
    burn_in: int = 250
    thin: int = 1
    seed: int = 0
    ranks_alpha: tuple = (2, 3, 3, 3)      # (r_g, r_1, r_2, r_3)
    ranks_beta: tuple = (2, 3, 3, 3, 2)    # (r_g, r_1, r_2, r_3, r_t)
    spline_degree: int = 2
    n_spline: int = 8                      # d_t
    prior: CscPingConfig = field(default_factory=CscPingConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    workers: int = 1
    keep_states: bool = True
    banded_bandwidth_max: int = 8
    jitter: float = 1e-10
    max_consecutive_jitter: int = 5

    def __post_init__(self):
        object.__setattr__(self, "ranks_alpha", tuple(int(r) for r in self.ranks_alpha))
        object.__setattr__(self, "ranks_beta", tuple(int(r) for r in self.ranks_beta))
        if self.burn_in >= self.iterations and self.iterations > 0:
            if self.burn_in > self.iterations:
                raise ConfigError("burn_in must be <= iterations")
        if self.burn_in < 0 or self.thin < 1:
            raise ConfigError("need burn_in >= 0 and thin >= 1")
        if len(self.ranks_alpha) != 4 or len(self.ranks_beta) != 5:
            raise ConfigError("ranks_alpha has 4 entries, ranks_beta has 5")
        if min(self.ranks_alpha) < 1 or min(self.ranks_beta) < 1:
            raise ConfigError("all starting ranks must be >= 1")
        if self.n_spline < self.spline_degree + 2:
            raise ConfigError("n_spline must be >= spline_degree + 2")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def n_draws(self) -> int:
        return max(0, (self.iterations - self.burn_in)) // self.thin


@dataclass(frozen=True)
class SimulationSpec:
    """Synthetic bump-design generator (desk-scale version of the study design)."""

    dims: tuple = (15, 15, 15)
    n_groups: int = 3
    subjects_per_group: int = 10
    bump_centers_1: tuple = (0.50, 0.50, 0.30, 0.80, 0.30, 0.60)
    bump_centers_2: tuple = (0.40, 0.80, 0.40, 0.80, 0.60, 0.40)
    bump_centers_3: tuple = (0.20, 0.20, 0.60, 0.60, 0.50, 0.50)
    bump_scale: float = 5.0
    time_coef: float = 4.0                 # beta time profile: time_coef * t^2
    subject_beta_sd: float = 0.1
    per_voxel_subject_noise: bool = False
    noise_sd: float = 0.5
    alpha_source: str = "synthetic"        # "synthetic" | path to LTF1 stack
    alpha_rank: int = 3
    alpha_scale: float = 1.0
    schedule: str = "bundled"              # "bundled" | "uniform"
    min_visits: int = 1
    max_visits: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        for name in ("bump_centers_1", "bump_centers_2", "bump_centers_3"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        nb = len(self.bump_centers_1)
        if len(self.bump_centers_2) != nb or len(self.bump_centers_3) != nb:
            raise ConfigError("bump center lists must have equal length")
        for u in (self.bump_centers_1, self.bump_centers_2, self.bump_centers_3):
            if any(not (0.0 < x < 1.0) for x in u):
                raise ConfigError("bump centers must lie strictly inside (0, 1)")
        if min(self.dims) < 8:
            raise ConfigError("dims must be >= 8 per axis to resolve the bumps")
        if self.n_groups < 1 or self.subjects_per_group < 1:
            raise ConfigError("need at least one group and one subject per group")
        if self.schedule not in ("bundled", "uniform"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not 1 <= self.min_visits <= self.max_visits:
            raise ConfigError("need 1 <= min_visits <= max_visits")


_NESTED = {
    ("SamplerConfig", "prior"): CscPingConfig,
    ("SamplerConfig", "adapt"): AdaptConfig,
}


def config_to_json(cfg, path=None) -> str:
    text = json.dumps(dataclasses.asdict(cfg), indent=1)
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return text


def _load(path_or_dict, cls):
    if isinstance(path_or_dict, dict):
        return _from_dict(cls, path_or_dict)
    try:
        with open(path_or_dict, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path_or_dict}: {exc}") from exc
    return _from_dict(cls, data)


def load_sampler_config(path_or_dict) -> SamplerConfig:
    return _load(path_or_dict, SamplerConfig)


def load_simulation_spec(path_or_dict) -> SimulationSpec:
    return _load(path_or_dict, SimulationSpec)
