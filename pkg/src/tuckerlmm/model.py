"""Model state, datasets, surface evaluation, and derived moments.

The full parameter set mirrors the two-part mixed model: a baseline tensor
field (4 modes: group + 3 spatial) and a time-varying field (5 modes: group +
3 spatial + spline), each with per-subject random core tensors around a mean
core, per-cell core variances, a global core scale, and cumulative-shrinkage
chains on the mode-matrix columns.  The temporal mode additionally satisfies
row1 + row2 = 0 so every time-varying surface vanishes at t = 0.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .bases import (SplineBasis, PriorKernel, constraint_expander,
                    gaussian_kernel, identity_kernel, laplacian_kernel)
from .errors import (CapabilityError, DataError, DomainError, ShapeError)
from .priors import SCALE_MODE, ShrinkageChain, assemble_column

MARGINAL_SIZE_GUARD = 4096  # max n * d1*d2*d3 for marginal_moments

ALPHA_MODES = ("g", "x1", "x2", "x3")
BETA_MODES = ("g", "x1", "x2", "x3", "t")


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass
class Subject:
    subject_id: str
    group: int                 # 1-based group label
    times: np.ndarray          # increasing, in [0, 1]
    observations: np.ndarray   # (n_i, d1, d2, d3)

    @property
    def n_visits(self) -> int:
        return len(self.times)


@dataclass
class LongitudinalDataset:
    subjects: list
    dims: tuple
    n_groups: int
    mask: np.ndarray | None = None  # optional bool (d1,d2,d3); True = observed

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.validate()

    def validate(self):
        seen = set()
        for idx, s in enumerate(self.subjects):
            s.times = np.asarray(s.times, dtype=np.float64)
            s.observations = np.asarray(s.observations, dtype=np.float64)
            if s.group < 1 or s.group > self.n_groups:
                raise DataError(f"subject {s.subject_id}: group {s.group} out of range")
            if s.observations.shape != (len(s.times),) + self.dims:
                raise DataError(
                    f"subject {s.subject_id}: observations shape "
                    f"{s.observations.shape} != (n_i, {self.dims})")
            if np.any(s.times < 0.0) or np.any(s.times > 1.0):
                raise DataError(f"subject {s.subject_id}: times outside [0, 1]")
            if np.any(np.diff(s.times) <= 0.0):
                raise DataError(f"subject {s.subject_id}: times not strictly increasing")
            if not np.all(np.isfinite(s.observations)):
                raise DataError(f"subject {s.subject_id}: non-finite observation values")
            for t in s.times:
                key = (s.subject_id, float(t))
                if key in seen:
                    raise DataError(f"duplicate subject-time row {key}")
                seen.add(key)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.dims:
                raise DataError("mask dims do not match grid dims")

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def groups(self) -> np.ndarray:
        return np.array([s.group for s in self.subjects], dtype=int)

    def subjects_in_group(self, h_g: int):
        return [i for i, s in enumerate(self.subjects) if s.group == h_g]


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class ModeParam:
    """One mode matrix stored through its PING component coefficients."""

    name: str
    kernel: PriorKernel
    gamma: np.ndarray          # (r, q, m) component coefficients
    constrained: bool = False  # temporal boundary constraint row1+row2=0

    @property
    def r(self) -> int:
        return self.gamma.shape[0]

    @property
    def q(self) -> int:
        return self.gamma.shape[1]

    @property
    def d(self) -> int:
        return self.kernel.d

    def column_fields(self, z: int) -> np.ndarray:
        """(d, q) component fields of column z."""
        return self.kernel.G.T @ self.gamma[z].T

    def column(self, z: int) -> np.ndarray:
        return np.prod(self.column_fields(z), axis=1)

    @property
    def columns(self) -> np.ndarray:
        """Assembled (d, r) mode matrix."""
        if self.r == 0:
            return np.zeros((self.d, 0))
        return np.stack([self.column(z) for z in range(self.r)], axis=1)

    def mode_matrix(self) -> tensor.ModeMatrix:
        kind = {"g": "group", "t": "spline"}.get(self.name, "spatial")
        return tensor.ModeMatrix(self.columns, domain_kind=kind, semi_orthogonal=True)


@dataclass
class ComponentParams:
    """Everything belonging to one tensor field (baseline or time-varying)."""

    mode_order: tuple
    modes: dict                  # name -> ModeParam
    cores: np.ndarray            # (N, r_g, r1, r2, r3[, r_t])
    C: np.ndarray                # mean core, cores.shape[1:]
    cell_var: np.ndarray         # per-cell core variances, same shape as C
    tau2: float
    chains: dict                 # name -> ShrinkageChain
    mean_core_var: float = 1.0   # hyper variance of mean-core entries

    @property
    def ranks(self) -> tuple:
        return tuple(self.modes[s].r for s in self.mode_order)

    def column_stack(self) -> dict:
        return {s: self.modes[s].columns for s in self.mode_order}

    def gram_diags(self) -> dict:
        """Diagonal of A'A per mode (columns are mutually orthogonal)."""
        out = {}
        for s in self.mode_order:
            a = self.modes[s].columns
            out[s] = np.einsum("dz,dz->z", a, a)
        return out

    def validate(self):
        shape = self.cores.shape[1:]
        if shape != tuple(self.modes[s].r for s in self.mode_order):
            raise ShapeError("core dims do not match mode ranks")
        if self.C.shape != shape or self.cell_var.shape != shape:
            raise ShapeError("mean core / cell variances shape mismatch")
        if np.any(self.cell_var <= 0.0) or self.tau2 <= 0.0:
            raise ShapeError("variances must be strictly positive")


@dataclass
class ModelState:
    alpha: ComponentParams
    beta: ComponentParams
    spline: SplineBasis
    sigma_eps2: float
    dims: tuple
    n_groups: int
    shrink_mode: str = SCALE_MODE

    def validate(self):
        self.alpha.validate()
        self.beta.validate()
        if self.sigma_eps2 <= 0.0:
            raise ShapeError("sigma_eps2 must be positive")
        for comp in (self.alpha, self.beta):
            for s in comp.mode_order:
                if not tensor.is_semi_orthogonal(comp.modes[s].columns):
                    raise ShapeError(f"mode {s} lost semi-orthogonality")

    @property
    def temporal_free(self) -> np.ndarray:
        """Free (d_t-1) x r_t parameterization of the temporal mode."""
        return self.beta.modes["t"].columns[1:, :]

    def is_finite(self) -> bool:
        arrays = [self.alpha.cores, self.alpha.C, self.alpha.cell_var,
                  self.beta.cores, self.beta.C, self.beta.cell_var]
        arrays += [p.gamma for p in self.alpha.modes.values()]
        arrays += [p.gamma for p in self.beta.modes.values()]
        scalars = [self.alpha.tau2, self.beta.tau2, self.sigma_eps2,
                   self.alpha.mean_core_var, self.beta.mean_core_var]
        return all(np.all(np.isfinite(a)) for a in arrays) and all(
            np.isfinite(x) for x in scalars)


# ---------------------------------------------------------------------------
# Surface evaluation
# ---------------------------------------------------------------------------


def _group_row(comp: ComponentParams, h_g: int) -> np.ndarray:
    a_g = comp.modes["g"].columns
    if h_g < 1 or h_g > a_g.shape[0]:
        raise DomainError(f"group label {h_g} out of range 1..{a_g.shape[0]}")
    return a_g[h_g - 1]


def _core_for(comp: ComponentParams, subject: int | None) -> np.ndarray:
    if subject is None:
        return comp.C
    if subject < 0 or subject >= comp.cores.shape[0]:
        raise DomainError(f"unknown subject index {subject}")
    return comp.cores[subject]


def expand_spatial(t: np.ndarray, a1: np.ndarray, a2: np.ndarray,
                   a3: np.ndarray) -> np.ndarray:
    """Contract the three leading latent axes of t against spatial modes.

    t has shape (r1, r2, r3, ...); output (d1, d2, d3, ...)."""
    trail = t.ndim - 3
    out = np.tensordot(t, a1, axes=([0], [1]))      # (r2, r3, ..., d1)
    out = np.tensordot(out, a2, axes=([0], [1]))    # (r3, ..., d1, d2)
    out = np.tensordot(out, a3, axes=([0], [1]))    # (..., d1, d2, d3)
    if trail:
        out = np.moveaxis(out, tuple(range(trail)), tuple(range(-trail, 0)))
    return out


def eval_alpha(state: ModelState, subject: int | None, h_g: int) -> np.ndarray:
    """Baseline surface (d1,d2,d3) for a subject, or the group mean if None."""
    comp = state.alpha
    core = _core_for(comp, subject)
    v = _group_row(comp, h_g)
    t = np.tensordot(core, v, axes=([0], [0]))
    a1, a2, a3 = (comp.modes[s].columns for s in ("x1", "x2", "x3"))
    return expand_spatial(t, a1, a2, a3)


def beta_coeff_tensor(state: ModelState, subject: int | None, h_g: int) -> np.ndarray:
    """Spline-coefficient field (d1,d2,d3,d_t) of the time-varying surface."""
    comp = state.beta
    core = _core_for(comp, subject)
    v = _group_row(comp, h_g)
    t = np.tensordot(core, v, axes=([0], [0]))                 # (r1,r2,r3,r_t)
    t = np.tensordot(t, comp.modes["t"].columns, axes=([3], [1]))
    a1, a2, a3 = (comp.modes[s].columns for s in ("x1", "x2", "x3"))
    return expand_spatial(t, a1, a2, a3)


def eval_beta(state: ModelState, subject: int | None, h_g: int, t: float) -> np.ndarray:
    """Time-varying surface (d1,d2,d3) at time t in [0,1]."""
    comp = state.beta
    core = _core_for(comp, subject)
    v = _group_row(comp, h_g)
    w = state.spline.design([t])[0] @ comp.modes["t"].columns  # (r_t,)
    tt = np.tensordot(np.tensordot(core, v, axes=([0], [0])), w,
                      axes=([3], [0]))
    a1, a2, a3 = (comp.modes[s].columns for s in ("x1", "x2", "x3"))
    return expand_spatial(tt, a1, a2, a3)


def eval_beta_at_times(state: ModelState, subject: int | None, h_g: int,
                       times) -> np.ndarray:
    """(n, d1, d2, d3) stack of time-varying surfaces at several times."""
    coeff = beta_coeff_tensor(state, subject, h_g)
    w = state.spline.design(times)                             # (n, d_t)
    return np.moveaxis(np.tensordot(coeff, w, axes=([3], [1])), -1, 0)


# ---------------------------------------------------------------------------
# Latent-factor moments and covariance tensors
# ---------------------------------------------------------------------------


def _lambda_alpha(state: ModelState, h_g: int) -> np.ndarray:
    comp = state.alpha
    row = _group_row(comp, h_g)[None, :]
    a1, a2, a3 = (comp.modes[s].columns for s in ("x1", "x2", "x3"))
    return np.kron(np.kron(np.kron(row, a1), a2), a3)


def _lambda_beta(state: ModelState, h_g: int, t: float) -> np.ndarray:
    comp = state.beta
    row = _group_row(comp, h_g)[None, :]
    a1, a2, a3 = (comp.modes[s].columns for s in ("x1", "x2", "x3"))
    w = (state.spline.design([t])[0] @ comp.modes["t"].columns)[None, :]
    return np.kron(np.kron(np.kron(np.kron(row, a1), a2), a3), w)


def marginal_moments(state: ModelState, h_g: int, times):
    """Mean vector and covariance matrix of vec'd space-time observations.

    Index order: time major, then voxel (C-order over d1,d2,d3).  Small
    instances only; guarded by MARGINAL_SIZE_GUARD.
    """
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    n = times.size
    p = int(np.prod(state.dims))
    if n * p > MARGINAL_SIZE_GUARD:
        raise CapabilityError(
            f"marginal_moments guard: {n * p} > {MARGINAL_SIZE_GUARD}")
    la = _lambda_alpha(state, h_g)
    d_alpha = state.alpha.tau2 * state.alpha.cell_var.ravel()
    d_beta = state.beta.tau2 * state.beta.cell_var.ravel()
    lbs = [_lambda_beta(state, h_g, t) for t in times]
    mean = np.concatenate([
        la @ state.alpha.C.ravel() + lbs[j] @ state.beta.C.ravel()
        for j in range(n)])
    cov = np.zeros((n * p, n * p))
    base = la @ (d_alpha[:, None] * la.T)
    for j in range(n):
        for k in range(n):
            blk = base + lbs[j] @ (d_beta[:, None] * lbs[k].T)
            if j == k:
                blk = blk + state.sigma_eps2 * np.eye(p)
            cov[j * p:(j + 1) * p, k * p:(k + 1) * p] = blk
    return mean, cov


def covariance_tensor(state: ModelState, component: str, point1, point2) -> float:
    """Model covariance between two surface values of one subject.

    For component "alpha" the points are (h_g, h1, h2, h3); for "beta" they
    are (h_g, h1, h2, h3, t).  Both points must share the group label (a
    subject belongs to exactly one group).  Indices are 1-based.
    """
    if point1[0] != point2[0]:
        raise DomainError("covariance is defined within a single group")
    h_g = int(point1[0])
    if component == "alpha":
        comp = state.alpha
        phi1 = _phi_alpha(state, h_g, point1[1:])
        phi2 = _phi_alpha(state, h_g, point2[1:])
    elif component == "beta":
        comp = state.beta
        phi1 = _phi_beta(state, h_g, point1[1:4], point1[4])
        phi2 = _phi_beta(state, h_g, point2[1:4], point2[4])
    else:
        raise DomainError(f"unknown component {component!r}")
    return float(comp.tau2 * np.sum(comp.cell_var * phi1 * phi2))


def _phi_alpha(state: ModelState, h_g: int, voxel) -> np.ndarray:
    comp = state.alpha
    row = _group_row(comp, h_g)
    h1, h2, h3 = (int(h) for h in voxel)
    a1 = comp.modes["x1"].columns[h1 - 1]
    a2 = comp.modes["x2"].columns[h2 - 1]
    a3 = comp.modes["x3"].columns[h3 - 1]
    return np.einsum("g,a,b,c->gabc", row, a1, a2, a3)


def _phi_beta(state: ModelState, h_g: int, voxel, t: float) -> np.ndarray:
    comp = state.beta
    row = _group_row(comp, h_g)
    h1, h2, h3 = (int(h) for h in voxel)
    a1 = comp.modes["x1"].columns[h1 - 1]
    a2 = comp.modes["x2"].columns[h2 - 1]
    a3 = comp.modes["x3"].columns[h3 - 1]
    w = state.spline.design([float(t)])[0] @ comp.modes["t"].columns
    return np.einsum("g,a,b,c,u->gabcu", row, a1, a2, a3, w)


def stacked_core_equivalence_check(subject_mode: np.ndarray,
                                   shared_core: np.ndarray) -> np.ndarray:
    """Per-subject cores from a stacked factorization with a subject mode.

    A stacked tensor factorized with an N x r_N subject mode matrix and a
    shared core equals the subject-specific-core model with cores
    eta^(i) = shared_core x_N row_i; returns the (N, ...) stack.
    """
    subject_mode = np.asarray(subject_mode, dtype=np.float64)
    if subject_mode.ndim != 2 or subject_mode.shape[1] != shared_core.shape[0]:
        raise ShapeError("subject mode columns must match the core's first dim")
    return np.tensordot(subject_mode, shared_core, axes=([1], [0]))


# ---------------------------------------------------------------------------
# Checkpoints: zip container of LTF1 blobs + a JSON manifest.  Bit-exact.
# ---------------------------------------------------------------------------


def _kernel_spec(k: PriorKernel) -> dict:
    return {"kind": k.kind, "d": int(k.d), "m": int(k.m)}


def _kernel_from_spec(spec: dict) -> PriorKernel:
    kind = spec["kind"]
    if kind == "gaussian":
        return gaussian_kernel(spec["d"], spec["m"])
    if kind == "identity":
        return identity_kernel(spec["d"])
    if kind == "laplacian":
        return laplacian_kernel(spec["d"])
    raise DataError(f"unknown kernel kind {kind!r}")


def _component_manifest(comp: ComponentParams) -> dict:
    return {
        "mode_order": list(comp.mode_order),
        "modes": {s: {"kernel": _kernel_spec(p.kernel),
                      "constrained": p.constrained}
                  for s, p in comp.modes.items()},
        "tau2": comp.tau2,
        "mean_core_var": comp.mean_core_var,
        "chains": {s: {"varsigma": comp.chains[s].varsigma.tolist(),
                       "kappa1": comp.chains[s].kappa1,
                       "kappa2": comp.chains[s].kappa2}
                   for s in comp.mode_order},
    }


def save_checkpoint(state: ModelState, path, extra: dict | None = None) -> None:
    manifest = {
        "format": "tuckerlmm-checkpoint-1",
        "dims": list(state.dims),
        "n_groups": state.n_groups,
        "sigma_eps2": state.sigma_eps2,
        "shrink_mode": state.shrink_mode,
        "spline": {"degree": state.spline.degree, "n_bases": state.spline.n_bases},
        "alpha": _component_manifest(state.alpha),
        "beta": _component_manifest(state.beta),
        "extra": extra or {},
    }
    blobs = {}
    for tag, comp in (("alpha", state.alpha), ("beta", state.beta)):
        blobs[f"{tag}/cores"] = comp.cores
        blobs[f"{tag}/C"] = comp.C
        blobs[f"{tag}/cell_var"] = comp.cell_var
        for s, p in comp.modes.items():
            blobs[f"{tag}/gamma_{s}"] = p.gamma
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        for name, arr in blobs.items():
            buf = io.BytesIO()
            _write_ltf_stream(buf, np.asarray(arr, dtype=np.float64))
            zf.writestr(name + ".ltf", buf.getvalue())


def _write_ltf_stream(fh, t: np.ndarray) -> None:
    import struct as _struct

    fh.write(tensor.MAGIC_FLOAT)
    fh.write(_struct.pack("<I", t.ndim))
    fh.write(_struct.pack(f"<{t.ndim}I", *t.shape))
    fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes(order="C"))


def _read_ltf_bytes(raw: bytes, name: str) -> np.ndarray:
    import struct as _struct

    if raw[:4] != tensor.MAGIC_FLOAT:
        raise DataError(f"{name}: bad LTF1 magic")
    (order,) = _struct.unpack_from("<I", raw, 4)
    dims = _struct.unpack_from(f"<{order}I", raw, 8)
    n = int(np.prod(dims))
    if len(raw) != 8 + 4 * order + 8 * n:
        raise DataError(f"{name}: truncated LTF1 blob")
    return np.frombuffer(raw, dtype="<f8", offset=8 + 4 * order, count=n).reshape(dims).copy()


def load_checkpoint(path):
    """Load a checkpoint; returns (ModelState, extra_manifest_dict)."""
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        blob = {n[:-4]: _read_ltf_bytes(zf.read(n), n)
                for n in zf.namelist() if n.endswith(".ltf")}
    comps = {}
    for tag in ("alpha", "beta"):
        man = manifest[tag]
        modes = {}
        for s, mspec in man["modes"].items():
            modes[s] = ModeParam(
                name=s,
                kernel=_kernel_from_spec(mspec["kernel"]),
                gamma=blob[f"{tag}/gamma_{s}"],
                constrained=bool(mspec["constrained"]),
            )
        chains = {s: ShrinkageChain(np.asarray(cs["varsigma"]),
                                    cs["kappa1"], cs["kappa2"])
                  for s, cs in man["chains"].items()}
        comps[tag] = ComponentParams(
            mode_order=tuple(man["mode_order"]),
            modes=modes,
            cores=blob[f"{tag}/cores"],
            C=blob[f"{tag}/C"],
            cell_var=blob[f"{tag}/cell_var"],
            tau2=float(man["tau2"]),
            chains=chains,
            mean_core_var=float(man["mean_core_var"]),
        )
    state = ModelState(
        alpha=comps["alpha"], beta=comps["beta"],
        spline=SplineBasis(manifest["spline"]["degree"], manifest["spline"]["n_bases"]),
        sigma_eps2=float(manifest["sigma_eps2"]),
        dims=tuple(manifest["dims"]),
        n_groups=int(manifest["n_groups"]),
        shrink_mode=manifest["shrink_mode"],
    )
    return state, manifest.get("extra", {})
