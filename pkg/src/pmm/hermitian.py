"""Dense Hermitian building blocks: packed real parameterizations, spectral
factorization, unitaries from matrix exponentials, and eigenphase extraction.

Packed layout (fixed convention, enables bit-exact checkpoints): diagonal
entries first in ascending index order, then upper-triangle off-diagonals in
row-major order; complex off-diagonals stored as (re, im) pairs.

Modes:
    complex-hermitian   n diagonal reals + n(n-1)/2 (re, im) pairs -> n^2 reals
    real-symmetric      n diagonal + n(n-1)/2 off-diagonal reals
    real-diagonal       n reals
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EigenConvergenceError,
    HermiticityError,
    ModeMismatchError,
    NonUnitaryError,
    PackedLengthError,
    PhaseWrapWarning,
)

COMPLEX_HERMITIAN = "complex-hermitian"
REAL_SYMMETRIC = "real-symmetric"
REAL_DIAGONAL = "real-diagonal"
MODES = (COMPLEX_HERMITIAN, REAL_SYMMETRIC, REAL_DIAGONAL)

# Relative tolerance for construction-time checks, with an absolute floor.
CHECK_RTOL = 1e-12
CHECK_ATOL = 1e-14


def packed_length(dim: int, mode: str) -> int:
    if mode == COMPLEX_HERMITIAN:
        return dim * dim
    if mode == REAL_SYMMETRIC:
        return dim * (dim + 1) // 2
    if mode == REAL_DIAGONAL:
        return dim
    raise ValueError(f"unknown packed mode {mode!r}")


@dataclass(frozen=True)
class PackedParams:
    """Flat real parameter vector for one Hermitian matrix."""

    dim: int
    mode: str
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        expected = packed_length(self.dim, self.mode)
        if vals.shape != (expected,):
            raise PackedLengthError(
                f"mode {self.mode!r} at dim {self.dim} needs {expected} values, "
                f"got shape {vals.shape}"
            )

    def to_dict(self) -> dict:
        return {"dim": self.dim, "mode": self.mode, "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "PackedParams":
        return cls(dim=int(data["dim"]), mode=str(data["mode"]),
                   values=np.asarray(data["values"], dtype=np.float64))


@dataclass(frozen=True)
class EigenDecomposition:
    """Ascending eigenvalues and phase-fixed orthonormal eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def fro_norm(matrix: np.ndarray) -> float:
    return float(np.linalg.norm(matrix))


def hermiticity_defect(matrix: np.ndarray) -> float:
    return float(np.max(np.abs(matrix - matrix.conj().T))) if matrix.size else 0.0


def require_hermitian(matrix: np.ndarray, context: str = "matrix") -> np.ndarray:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise HermiticityError(f"{context} is not square: shape {matrix.shape}")
    tol = max(CHECK_ATOL, CHECK_RTOL * fro_norm(matrix))
    defect = hermiticity_defect(matrix)
    if defect > tol:
        raise HermiticityError(
            f"{context} is not Hermitian: max|M - M^dag| = {defect:.3e} > {tol:.3e}"
        )
    return matrix


def require_unitary(matrix: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.complex128)
    defect = np.linalg.norm(matrix.conj().T @ matrix - np.eye(matrix.shape[0]))
    if defect > tol:
        raise NonUnitaryError(f"norm(U^dag U - I) = {defect:.3e} > {tol:.1e}")
    return matrix


def pack(matrix: np.ndarray, mode: str) -> PackedParams:
    """Extract the packed real parameters of a Hermitian matrix.

    The inverse of `unpack`: round-trips bit-for-bit for matrices that satisfy
    the mode's structure exactly.
    """
    matrix = require_hermitian(np.asarray(matrix))
    n = matrix.shape[0]
    tol = max(CHECK_ATOL, CHECK_RTOL * fro_norm(matrix))
    diag = matrix.diagonal().real.astype(np.float64)
    if mode == REAL_DIAGONAL:
        off = matrix - np.diag(matrix.diagonal())
        if off.size and np.max(np.abs(off)) > tol:
            raise ModeMismatchError("matrix has off-diagonal entries; mode is real-diagonal")
        return PackedParams(n, mode, diag)
    iu, ju = np.triu_indices(n, k=1)
    upper = matrix[iu, ju]
    if mode == REAL_SYMMETRIC:
        if upper.size and np.max(np.abs(np.imag(upper))) > tol:
            raise ModeMismatchError("matrix has complex off-diagonals; mode is real-symmetric")
        return PackedParams(n, mode, np.concatenate([diag, np.real(upper)]))
    if mode == COMPLEX_HERMITIAN:
        pairs = np.empty(2 * upper.size)
        pairs[0::2] = np.real(upper)
        pairs[1::2] = np.imag(upper)
        return PackedParams(n, mode, np.concatenate([diag, pairs]))
    raise ValueError(f"unknown packed mode {mode!r}")


def unpack(params: PackedParams) -> np.ndarray:
    """Rebuild the Hermitian matrix; Hermiticity holds exactly by construction."""
    n = params.dim
    vals = params.values
    if params.mode == REAL_DIAGONAL:
        return np.diag(vals)
    iu, ju = np.triu_indices(n, k=1)
    if params.mode == REAL_SYMMETRIC:
        matrix = np.zeros((n, n))
        matrix[iu, ju] = vals[n:]
        matrix += matrix.T
        matrix[np.diag_indices(n)] = vals[:n]
        return matrix
    upper = vals[n::2] + 1j * vals[n + 1::2]
    matrix = np.zeros((n, n), dtype=np.complex128)
    matrix[iu, ju] = upper
    matrix += matrix.conj().T
    matrix[np.diag_indices(n)] = vals[:n]
    return matrix


def unpack_batch(values: np.ndarray, dim: int, mode: str) -> np.ndarray:
    """Vectorized `unpack`: rows of packed values to a stack of matrices."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != packed_length(dim, mode):
        raise PackedLengthError(
            f"expected (m, {packed_length(dim, mode)}) packed rows, got {values.shape}"
        )
    m = values.shape[0]
    rng = np.arange(dim)
    if mode == REAL_DIAGONAL:
        out = np.zeros((m, dim, dim))
        out[:, rng, rng] = values
        return out
    iu, ju = np.triu_indices(dim, k=1)
    if mode == REAL_SYMMETRIC:
        out = np.zeros((m, dim, dim))
        out[:, iu, ju] = values[:, dim:]
        out[:, ju, iu] = values[:, dim:]
        out[:, rng, rng] = values[:, :dim]
        return out
    upper = values[:, dim::2] + 1j * values[:, dim + 1 :: 2]
    out = np.zeros((m, dim, dim), dtype=np.complex128)
    out[:, iu, ju] = upper
    out[:, ju, iu] = upper.conj()
    out[:, rng, rng] = values[:, :dim]
    return out


def eigh(matrix: np.ndarray) -> EigenDecomposition:
    """Spectral factorization with ascending eigenvalues.

    Each eigenvector's phase is fixed so its largest-magnitude component is
    real and positive (ties broken by lowest index), making decompositions
    comparable across calls.
    """
    matrix = require_hermitian(np.asarray(matrix))
    try:
        eigenvalues, vectors = np.linalg.eigh(matrix)
    except np.linalg.LinAlgError as exc:
        raise EigenConvergenceError(
            f"eigh failed to converge: dim {matrix.shape[0]}, "
            f"fro norm {fro_norm(matrix):.3e} ({exc})"
        ) from exc
    anchors = np.argmax(np.abs(vectors), axis=0)
    pivots = vectors[anchors, np.arange(vectors.shape[1])]
    vectors = vectors * np.conj(pivots / np.abs(pivots))
    return EigenDecomposition(eigenvalues, vectors)


def sort_complex(values: np.ndarray) -> np.ndarray:
    """Ascending real part, ties broken by ascending imaginary part."""
    values = np.asarray(values, dtype=np.complex128)
    return values[np.lexsort((values.imag, values.real))]


def eig_general(matrix: np.ndarray) -> np.ndarray:
    """Eigenvalues of an arbitrary square complex matrix, sort_complex order."""
    matrix = np.asarray(matrix, dtype=np.complex128)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"matrix is not square: shape {matrix.shape}")
    try:
        values = np.linalg.eigvals(matrix)
    except np.linalg.LinAlgError as exc:
        raise EigenConvergenceError(
            f"general eigensolve failed: dim {matrix.shape[0]}, "
            f"fro norm {fro_norm(matrix):.3e} ({exc})"
        ) from exc
    return sort_complex(values)


def expm_hermitian(matrix: np.ndarray, t: float) -> np.ndarray:
    """exp(-i * matrix * t), computed in the eigenbasis; exactly unitary up to
    the factorization error."""
    decomp = eigh(matrix)
    phases = np.exp(-1j * decomp.eigenvalues * t)
    return (decomp.eigenvectors * phases) @ decomp.eigenvectors.conj().T


def eigenphases(unitary: np.ndarray, dt: float) -> np.ndarray:
    """Energies E with exp(-i E dt) an eigenvalue of `unitary`, ascending.

    The principal branch arg in (-pi, pi] is used, so recovery is faithful
    only while |E * dt| < pi; values past 0.9 pi trigger PhaseWrapWarning.
    """
    if dt == 0:
        raise ValueError("dt must be nonzero")
    unitary = require_unitary(unitary)
    mu = np.linalg.eigvals(unitary)
    energies = np.sort(-np.angle(mu) / dt)
    if np.max(np.abs(energies * dt), initial=0.0) > 0.9 * np.pi:
        warnings.warn(
            "eigenphase within 10% of the branch cut; energies may be aliased",
            PhaseWrapWarning,
            stacklevel=2,
        )
    return energies
