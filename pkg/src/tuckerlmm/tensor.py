"""Dense tensor algebra: mode products, unfoldings, Tucker/CP/HOSVD factors.

Tensors are plain C-contiguous float64 ``numpy.ndarray``s (last index varies
fastest), so a "DenseTensor" here is just an array together with its shape.
Modes are numbered 0..p-1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FactorizationError, ShapeError

ORTHO_TOL = 1e-8      # relative off-diagonal tolerance for semi-orthogonality
QR_RANK_TOL = 1e-10   # pivoted-QR rank acceptance, relative to leading pivot


def as_tensor(values, dims=None) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, optionally reshaping to dims."""
    t = np.ascontiguousarray(values, dtype=np.float64)
    if dims is not None:
        dims = tuple(int(d) for d in dims)
        if any(d < 1 for d in dims):
            raise ShapeError(f"all dims must be >= 1, got {dims}")
        if t.size != int(np.prod(dims)):
            raise ShapeError(f"value count {t.size} != product of dims {dims}")
        t = t.reshape(dims)
    return t


def mode_product(t: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """Mode-`mode` product: contract t's given axis with the columns of m.

    m has shape (d, r) with r == t.shape[mode]; the result replaces that axis
    by d:  out[..., l, ...] = sum_z t[..., z, ...] * m[l, z].
    """
    t = np.asarray(t, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if mode < 0 or mode >= t.ndim:
        raise ShapeError(f"mode {mode} out of range for order-{t.ndim} tensor")
    if m.ndim != 2 or m.shape[1] != t.shape[mode]:
        raise ShapeError(
            f"mode {mode}: matrix of shape {m.shape} cannot contract axis of "
            f"size {t.shape[mode]}"
        )
    out = np.tensordot(t, m, axes=([mode], [1]))
    return np.ascontiguousarray(np.moveaxis(out, -1, mode))


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-`mode` unfolding: d_mode x (prod of the other dims)."""
    t = np.asarray(t)
    if mode < 0 or mode >= t.ndim:
        raise ShapeError(f"mode {mode} out of range for order-{t.ndim} tensor")
    return np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1)


def fold(mat: np.ndarray, mode: int, dims) -> np.ndarray:
    """Inverse of :func:`unfold` for a tensor of the given dims."""
    dims = tuple(dims)
    lead = (dims[mode],) + tuple(d for i, d in enumerate(dims) if i != mode)
    return np.ascontiguousarray(np.moveaxis(np.asarray(mat).reshape(lead), 0, mode))


def frobenius(t: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(t, dtype=np.float64)))))


def sup_norm(t: np.ndarray) -> float:
    t = np.asarray(t)
    return float(np.max(np.abs(t))) if t.size else 0.0


def kronecker(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.kron(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def is_semi_orthogonal(m: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    """True when m's Gram matrix is diagonal to relative tolerance tol."""
    g = np.asarray(m).T @ np.asarray(m)
    d = np.abs(np.diag(g))
    off = g - np.diag(np.diag(g))
    scale = d.max() if d.size else 0.0
    if scale == 0.0:
        return True
    return bool(np.max(np.abs(off)) <= tol * scale)


@dataclass
class ModeMatrix:
    """One factor matrix: d grid rows by r latent columns."""

    entries: np.ndarray
    domain_kind: str = "spatial"  # spatial | temporal | group | spline
    semi_orthogonal: bool = False

    def __post_init__(self):
        self.entries = np.ascontiguousarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2:
            raise ShapeError("mode matrix must be 2-d")
        d, r = self.entries.shape
        if r > d:
            raise ShapeError(f"mode matrix has more columns ({r}) than rows ({d})")
        if self.semi_orthogonal and not is_semi_orthogonal(self.entries):
            raise FactorizationError("matrix flagged semi-orthogonal is not")

    @property
    def shape(self):
        return self.entries.shape


def _mode_entries(m) -> np.ndarray:
    return m.entries if isinstance(m, ModeMatrix) else np.asarray(m, dtype=np.float64)


@dataclass
class TuckerFactor:
    """Core tensor plus one mode matrix per axis."""

    core: np.ndarray
    modes: list = field(default_factory=list)

    def __post_init__(self):
        self.core = as_tensor(self.core)
        self.modes = [
            m if isinstance(m, ModeMatrix) else ModeMatrix(m) for m in self.modes
        ]
        if len(self.modes) != self.core.ndim:
            raise ShapeError(
                f"core order {self.core.ndim} != number of modes {len(self.modes)}"
            )
        for j, m in enumerate(self.modes):
            if m.shape[1] != self.core.shape[j]:
                raise ShapeError(
                    f"mode {j}: {m.shape[1]} columns != core dim {self.core.shape[j]}"
                )

    @property
    def mode_arrays(self):
        return [m.entries for m in self.modes]

    @property
    def dims(self):
        return tuple(m.shape[0] for m in self.modes)

    @property
    def ranks(self):
        return self.core.shape


def reconstruct(f: TuckerFactor) -> np.ndarray:
    """Expand a Tucker factor to the full dense tensor."""
    out = f.core
    for j, m in enumerate(f.mode_arrays):
        out = mode_product(out, m, j)
    return out


def cp_to_tucker(weights: np.ndarray, factors) -> TuckerFactor:
    """Embed a CP factorization (rank-r diagonal core) as a TuckerFactor."""
    weights = np.asarray(weights, dtype=np.float64)
    r = weights.shape[0]
    p = len(factors)
    core = np.zeros((r,) * p)
    core[tuple(np.arange(r) for _ in range(p))] = weights
    return TuckerFactor(core, [np.asarray(a, dtype=np.float64) for a in factors])


def _numerical_rank(m: np.ndarray) -> int:
    from scipy.linalg import qr as scipy_qr

    r = scipy_qr(m, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return 0
    return int(np.sum(diag > QR_RANK_TOL * diag[0]))


def tucker_to_hosvd(f: TuckerFactor) -> TuckerFactor:
    """Rewrite a Tucker factor with semi-orthogonal (here orthonormal) modes.

    Each mode matrix is QR-factorized; the R factors are absorbed into the
    core, which leaves the reconstruction unchanged.  R diagonals are forced
    nonnegative so the output is deterministic.
    """
    core = f.core
    new_modes = []
    for j, a in enumerate(f.mode_arrays):
        rank = _numerical_rank(a)
        if rank < a.shape[1]:
            raise FactorizationError(
                f"mode {j} is rank deficient: numerical rank {rank} < {a.shape[1]} columns"
            )
        q, r = np.linalg.qr(a)
        signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
        q = q * signs
        r = r * signs[:, None]
        core = mode_product(core, r, j)
        new_modes.append(ModeMatrix(q, domain_kind=f.modes[j].domain_kind,
                                    semi_orthogonal=True))
    return TuckerFactor(core, new_modes)


# ---------------------------------------------------------------------------
# LTF1 binary tensor files.  Layout: 4 magic bytes, u32 LE order p, p x u32 LE
# dims, then prod(dims) payload values (f64 LE for "LTF1", i64 LE for the
# integer-mask variant "LTI1"), last index fastest.
# ---------------------------------------------------------------------------

MAGIC_FLOAT = b"LTF1"
MAGIC_INT = b"LTI1"


def write_ltf(path, t: np.ndarray, integer: bool = False) -> None:
    t = np.ascontiguousarray(t)
    magic = MAGIC_INT if integer else MAGIC_FLOAT
    payload = t.astype("<i8" if integer else "<f8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", t.ndim))
        fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
        fh.write(payload.tobytes(order="C"))


def read_ltf(path, integer: bool = False) -> np.ndarray:
    expect = MAGIC_INT if integer else MAGIC_FLOAT
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != expect:
        raise DataError(f"{path}: bad magic {raw[:4]!r}, expected {expect!r}")
    (order,) = struct.unpack_from("<I", raw, 4)
    head = 8 + 4 * order
    if len(raw) < head:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{order}I", raw, 8)
    if any(d < 1 for d in dims):
        raise DataError(f"{path}: invalid dims {dims}")
    n = int(np.prod(dims))
    width = 8
    if len(raw) != head + n * width:
        raise DataError(
            f"{path}: payload has {len(raw) - head} bytes, expected {n * width}"
        )
    dtype = "<i8" if integer else "<f8"
    values = np.frombuffer(raw, dtype=dtype, offset=head, count=n)
    out = values.reshape(dims).copy()
    return out if integer else out.astype(np.float64)
