"""Dense linear algebra, random streams and matrix persistence.

Matrices are plain 2-D ``float64`` numpy arrays.  The symmetric eigensolver and
the Cholesky solve are LAPACK-backed (``syevd`` / ``potrf``), which keeps them
deterministic for a fixed BLAS thread count.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

RNG_ALGORITHM = "philox4x64-10"
MAGIC = b"FLGM"
_HEADER = struct.Struct("<4sII")


class NumericsError(ValueError):
    pass


@dataclass(frozen=True)
class Spectrum:
    """Eigenpairs sorted by descending eigenvalue; ``eigenvectors[:, k]`` pairs with ``eigenvalues[k]``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def __len__(self) -> int:
        return len(self.eigenvalues)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; identical seeds give identical streams on every platform."""
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


def child_seed(seed: int, *keys: int) -> int:
    """Derive an independent 64-bit seed from ``seed`` and integer keys."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise NumericsError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericsError(f"{name} has non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise NumericsError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _check_symmetric(a: np.ndarray, tol: float = 1e-8) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NumericsError(f"expected a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    if a.size and float(np.max(np.abs(a - a.T))) > tol * scale:
        raise NumericsError("matrix is not symmetric")


def sym_eig(a) -> Spectrum:
    a = np.asarray(a, dtype=np.float64)
    _check_symmetric(a)
    try:
        w, v = np.linalg.eigh(0.5 * (a + a.T))
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise NumericsError(f"eigensolver did not converge: {exc}") from exc
    order = np.argsort(-w, kind="stable")
    return Spectrum(w[order], np.ascontiguousarray(v[:, order]))


def solve_spd(k, y, ridge: float = 0.0, refine: int = 2) -> np.ndarray:
    """Solve ``(k + ridge*I) x = y`` by Cholesky with a few rounds of iterative refinement."""
    k = np.asarray(k, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_symmetric(k)
    if ridge < 0:
        raise NumericsError("ridge must be non-negative")
    if y.shape[0] != k.shape[0]:
        raise NumericsError(f"right-hand side has {y.shape[0]} rows, kernel has {k.shape[0]}")
    a = k + ridge * np.eye(k.shape[0])
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericsError("matrix is not positive definite after ridge") from exc
    x = scipy.linalg.cho_solve(factor, y, check_finite=False)
    for _ in range(refine):
        r = y - a @ x
        x = x + scipy.linalg.cho_solve(factor, r, check_finite=False)
    return x


def qr_orthonormal(g, tol: float = 1e-12) -> np.ndarray:
    """Orthonormal basis of span(g) with sign fixed so that diag(R) > 0."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < g.shape[1]:
        raise NumericsError(f"need rows >= cols, got {g.shape}")
    q, r = np.linalg.qr(g)
    d = np.diag(r)
    scale = max(float(np.max(np.abs(d))), 1e-300)
    if np.any(np.abs(d) <= tol * scale):
        raise NumericsError("matrix is rank deficient")
    return q * np.sign(d)


def gaussian(rng: np.random.Generator, rows: int, cols: int, std: float) -> np.ndarray:
    if std < 0:
        raise NumericsError("std must be non-negative")
    return rng.standard_normal((rows, cols)) * std


# --- persistence -----------------------------------------------------------


def write_matrix(path, a) -> None:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    rows, cols = a.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, cols))
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise NumericsError(f"{path}: truncated header")
    magic, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise NumericsError(f"{path}: bad magic {magic!r}")
    payload = raw[_HEADER.size :]
    if len(payload) != 8 * rows * cols:
        raise NumericsError(f"{path}: expected {rows}x{cols} payload, got {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)


def write_matrix_csv(path, a) -> None:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in a:
            w.writerow([repr(float(x)) for x in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    return np.array(rows, dtype=np.float64)
