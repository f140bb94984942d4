"""The learned model families.

All models map input parameters to a Hermitian matrix and read their outputs
off its spectrum:

    AffinePMM          M(c) = diag + sum_i c_i * B_i, outputs selected eigenvalues
    UnitaryProductPMM  U(dt) = prod_j exp(-i F_j dt), outputs eigenphase energies
    TensorNetworkPMM   affine family over image pixels with the per-pixel packed
                       entries drawn from a three-tensor network
    ObservableModel    Hermitian form evaluated in a host model's ground state

Models are immutable value objects; evaluation is pure. Training code owns a
flat real parameter vector (see `flat_params` / `with_params`) whose layout is
the concatenation of each component's packed values in field order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateLevelError, PackedLengthError
from .hermitian import (
    COMPLEX_HERMITIAN,
    REAL_DIAGONAL,
    PackedParams,
    eig_general,
    eigenphases,
    eigh,
    expm_hermitian,
    fro_norm,
    packed_length,
    unpack,
)

# Eigenvalue gaps below GAP_RTOL * fro_norm(M) count as degenerate: analytic
# derivatives are refused and callers fall back to finite differences.
GAP_RTOL = 1e-9

CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class OutputSelector:
    """Which eigenvalues of the model matrix form the output vector."""

    kind: str
    k: int | None = None

    def __post_init__(self):
        if self.kind not in ("lowest_k", "interior_pair"):
            raise ValueError(f"unknown selector kind {self.kind!r}")
        if self.kind == "lowest_k" and (self.k is None or self.k < 1):
            raise ValueError("lowest_k selector needs k >= 1")

    @classmethod
    def lowest_k(cls, k: int) -> "OutputSelector":
        return cls("lowest_k", k)

    @classmethod
    def interior_pair(cls) -> "OutputSelector":
        return cls("interior_pair")

    def level_indices(self, dim: int) -> np.ndarray:
        if self.kind == "lowest_k":
            if self.k > dim:
                raise ValueError(f"selector asks for {self.k} levels of a dim-{dim} model")
            return np.arange(self.k)
        if dim < 2:
            raise ValueError("interior_pair needs dim >= 2")
        mid = (dim + 1) // 2
        return np.array([mid - 1, mid])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "k": self.k}


@dataclass(frozen=True)
class AffinePMM:
    """Affine pencil: constant real diagonal plus one matrix per input feature."""

    dim: int
    diag: PackedParams
    matrices: tuple[PackedParams, ...]
    selector: OutputSelector

    def __post_init__(self):
        object.__setattr__(self, "matrices", tuple(self.matrices))
        if self.diag.mode != REAL_DIAGONAL or self.diag.dim != self.dim:
            raise ValueError("diag must be real-diagonal packed at the model dim")
        for m in self.matrices:
            if m.dim != self.dim:
                raise ValueError("feature matrix dim mismatch")
        self.selector.level_indices(self.dim)

    @property
    def n_features(self) -> int:
        return len(self.matrices)


@dataclass(frozen=True)
class UnitaryProductPMM:
    """Ordered product of learned matrix exponentials exp(-i F_j dt)."""

    dim: int
    factors: tuple[PackedParams, ...]
    n_levels: int

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if not self.factors:
            raise ValueError("need at least one factor")
        for f in self.factors:
            if f.mode != COMPLEX_HERMITIAN or f.dim != self.dim:
                raise ValueError("factors must be complex-hermitian packed at the model dim")
        if not (1 <= self.n_levels <= self.dim):
            raise ValueError("n_levels out of range")


@dataclass(frozen=True)
class TensorNetworkPMM:
    """Affine model over p x q images whose per-pixel packed entries come from
    a three-tensor contraction (row_factor, core, col_factor)."""

    rows: int
    cols: int
    dim: int
    feature_bond: int
    internal_bond: int
    row_factor: np.ndarray = field(repr=False)
    core: np.ndarray = field(repr=False)
    col_factor: np.ndarray = field(repr=False)
    diag: PackedParams = field(repr=False)
    entry_mode: str = "real-symmetric"

    def __post_init__(self):
        k = self.slot_count
        shapes = {
            "row_factor": (self.rows, self.feature_bond, self.internal_bond),
            "core": (self.internal_bond, k, self.internal_bond),
            "col_factor": (self.internal_bond, self.feature_bond, self.cols),
        }
        for name, expected in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != expected:
                raise ValueError(f"{name} has shape {arr.shape}, expected {expected}")
            object.__setattr__(self, name, arr)
        if self.diag.mode != REAL_DIAGONAL or self.diag.dim != self.dim:
            raise ValueError("diag must be real-diagonal packed at the model dim")

    @property
    def slot_count(self) -> int:
        return packed_length(self.dim, self.entry_mode)

    @property
    def stored_param_count(self) -> int:
        return (
            self.row_factor.size + self.core.size + self.col_factor.size
            + self.diag.values.size
        )

    @property
    def expanded_param_count(self) -> int:
        """Parameter count of the equivalent fully-independent affine model."""
        return self.rows * self.cols * self.slot_count + self.dim


@dataclass(frozen=True)
class ObservableModel:
    """Learned Hermitian observable evaluated in a host model's ground state."""

    matrix: PackedParams

    def __post_init__(self):
        if self.matrix.mode != COMPLEX_HERMITIAN:
            raise ValueError("observable must be complex-hermitian packed")

    @property
    def dim(self) -> int:
        return self.matrix.dim


# --- affine evaluation -------------------------------------------------------

def affine_terms(model: AffinePMM) -> tuple[np.ndarray, np.ndarray]:
    """(diagonal matrix, stacked feature matrices of shape (f, n, n))."""
    base = unpack(model.diag)
    if model.n_features == 0:
        return base, np.zeros((0, model.dim, model.dim))
    stack = np.stack([unpack(m) for m in model.matrices])
    return base, stack


def affine_eval(model: AffinePMM, c) -> np.ndarray:
    """Model matrix at feature vector c (Hermitian by construction)."""
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    if c.shape != (model.n_features,):
        raise ValueError(f"expected {model.n_features} features, got shape {c.shape}")
    base, stack = affine_terms(model)
    if model.n_features == 0:
        return base
    return base + np.tensordot(c, stack, axes=1)


def affine_eval_batch(model: AffinePMM, C: np.ndarray) -> np.ndarray:
    """Model matrices for a batch of feature rows, shape (m, n, n)."""
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[1] != model.n_features:
        raise ValueError(f"expected (m, {model.n_features}) features, got {C.shape}")
    base, stack = affine_terms(model)
    return base + np.tensordot(C, stack, axes=(1, 0))


def affine_outputs(model: AffinePMM, c) -> np.ndarray:
    """Selected eigenvalues at c, ascending within the selection."""
    decomp = eigh(affine_eval(model, c))
    return decomp.eigenvalues[model.selector.level_indices(model.dim)]


def affine_eval_complex(model: AffinePMM, c) -> np.ndarray:
    """All eigenvalues at a complex feature vector, sort_complex order.

    The matrix is generally non-Hermitian off the real axis; restricted to
    real c this reproduces the Hermitian spectrum.
    """
    c = np.atleast_1d(np.asarray(c, dtype=np.complex128))
    if c.shape != (model.n_features,):
        raise ValueError(f"expected {model.n_features} features, got shape {c.shape}")
    base, stack = affine_terms(model)
    matrix = base.astype(np.complex128)
    if model.n_features:
        matrix = matrix + np.tensordot(c, stack.astype(np.complex128), axes=1)
    return eig_general(matrix)


# --- unitary product evaluation ----------------------------------------------

def unitary_product_eval(model: UnitaryProductPMM, dt: float) -> np.ndarray:
    """Ordered product of the factor exponentials at step dt."""
    product = np.eye(model.dim, dtype=np.complex128)
    for factor in model.factors:
        product = product @ expm_hermitian(unpack(factor), dt)
    return product


def factor_sum(model: UnitaryProductPMM) -> np.ndarray:
    total = np.zeros((model.dim, model.dim), dtype=np.complex128)
    for factor in model.factors:
        total += unpack(factor)
    return total


def unitary_product_energies(model: UnitaryProductPMM, dt: float) -> np.ndarray:
    """Lowest n_levels eigenphase energies; at dt = 0 the analytic limit, the
    spectrum of the factor sum, is returned."""
    if dt == 0:
        return eigh(factor_sum(model)).eigenvalues[: model.n_levels]
    return eigenphases(unitary_product_eval(model, dt), dt)[: model.n_levels]


# --- tensor network ----------------------------------------------------------

def tn_expand(model: TensorNetworkPMM) -> np.ndarray:
    """Contract the three tensors into the full (rows, cols, slots) array of
    per-pixel packed entries."""
    return np.einsum(
        "itu,ukv,vtj->ijk",
        model.row_factor, model.core, model.col_factor,
        optimize=True,
    )


def tn_packed(model: TensorNetworkPMM, i: int, j: int) -> PackedParams:
    """Packed parameters of the matrix attached to pixel (i, j)."""
    return PackedParams(model.dim, model.entry_mode, tn_expand(model)[i, j])


def tn_matrix(model: TensorNetworkPMM, image: np.ndarray,
              slots: np.ndarray | None = None) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (model.rows, model.cols):
        raise ValueError(f"expected {(model.rows, model.cols)} image, got {image.shape}")
    if slots is None:
        slots = tn_expand(model)
    packed = np.einsum("ij,ijk->k", image, slots)
    return np.diag(model.diag.values) + unpack(PackedParams(model.dim, model.entry_mode, packed))


def tn_affine_outputs(model: TensorNetworkPMM, image: np.ndarray) -> np.ndarray:
    """Interior-pair eigenvalues of the pixel-weighted matrix: the 2D embedding."""
    decomp = eigh(tn_matrix(model, image))
    return decomp.eigenvalues[OutputSelector.interior_pair().level_indices(model.dim)]


def tn_to_affine(model: TensorNetworkPMM) -> AffinePMM:
    """Equivalent fully-expanded affine model over flattened (row-major) pixels."""
    slots = tn_expand(model)
    matrices = tuple(
        PackedParams(model.dim, model.entry_mode, slots[i, j])
        for i in range(model.rows)
        for j in range(model.cols)
    )
    return AffinePMM(model.dim, model.diag, matrices, OutputSelector.interior_pair())


# --- observables -------------------------------------------------------------

def ground_state(host: AffinePMM, c) -> tuple[np.ndarray, np.ndarray, float]:
    """(ground eigenvector, all eigenvalues, fro norm); refuses a degenerate
    ground level."""
    matrix = affine_eval(host, c)
    decomp = eigh(matrix)
    norm = fro_norm(matrix)
    if host.dim > 1:
        gap = decomp.eigenvalues[1] - decomp.eigenvalues[0]
        if gap < GAP_RTOL * max(norm, 1e-300):
            raise DegenerateLevelError(
                f"ground state degenerate: gap {gap:.3e} below {GAP_RTOL:.0e} * norm",
                gap=float(gap),
            )
    return decomp.eigenvectors[:, 0], decomp.eigenvalues, norm


def observable_expectation(host: AffinePMM, obs: ObservableModel, c) -> float:
    """Hermitian quadratic form of the observable in the host ground state."""
    if obs.dim != host.dim:
        raise ValueError("observable dim does not match host dim")
    vec, _, _ = ground_state(host, c)
    return float(np.real(vec.conj() @ unpack(obs.matrix) @ vec))


# --- flat parameter plumbing --------------------------------------------------

Model = AffinePMM | UnitaryProductPMM | TensorNetworkPMM | ObservableModel


def _packed_group(model: Model) -> list[PackedParams]:
    if isinstance(model, AffinePMM):
        return [model.diag, *model.matrices]
    if isinstance(model, UnitaryProductPMM):
        return list(model.factors)
    if isinstance(model, ObservableModel):
        return [model.matrix]
    raise TypeError(f"unsupported model type {type(model).__name__}")


def flat_params(model: Model) -> np.ndarray:
    """All trainable parameters as one real vector (fixed field order)."""
    if isinstance(model, TensorNetworkPMM):
        return np.concatenate([
            model.row_factor.ravel(),
            model.core.ravel(),
            model.col_factor.ravel(),
            model.diag.values,
        ])
    return np.concatenate([p.values for p in _packed_group(model)])


def param_count(model: Model) -> int:
    return flat_params(model).size


def with_params(model: Model, flat: np.ndarray) -> Model:
    """Rebuild the model around a new flat parameter vector."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (param_count(model),):
        raise PackedLengthError(
            f"flat vector has shape {flat.shape}, model needs {param_count(model)}"
        )
    if isinstance(model, TensorNetworkPMM):
        sizes = [model.row_factor.size, model.core.size, model.col_factor.size]
        row, core, col, diag = np.split(flat, np.cumsum(sizes))
        return replace(
            model,
            row_factor=row.reshape(model.row_factor.shape),
            core=core.reshape(model.core.shape),
            col_factor=col.reshape(model.col_factor.shape),
            diag=PackedParams(model.dim, REAL_DIAGONAL, diag),
        )
    group = _packed_group(model)
    parts = np.split(flat, np.cumsum([p.values.size for p in group])[:-1])
    rebuilt = [PackedParams(p.dim, p.mode, part) for p, part in zip(group, parts)]
    if isinstance(model, AffinePMM):
        return replace(model, diag=rebuilt[0], matrices=tuple(rebuilt[1:]))
    if isinstance(model, UnitaryProductPMM):
        return replace(model, factors=tuple(rebuilt))
    return ObservableModel(matrix=rebuilt[0])


# --- checkpoints ---------------------------------------------------------------

def _tensor_to_dict(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "values": arr.ravel().tolist()}


def _tensor_from_dict(data: dict) -> np.ndarray:
    return np.asarray(data["values"], dtype=np.float64).reshape(data["shape"])


def model_to_dict(model: Model) -> dict:
    data: dict = {"schema": CHECKPOINT_SCHEMA}
    if isinstance(model, AffinePMM):
        data.update(
            family="affine",
            dim=model.dim,
            selector=model.selector.to_dict(),
            diag=model.diag.to_dict(),
            matrices=[m.to_dict() for m in model.matrices],
        )
    elif isinstance(model, UnitaryProductPMM):
        data.update(
            family="unitary_product",
            dim=model.dim,
            n_levels=model.n_levels,
            factors=[f.to_dict() for f in model.factors],
        )
    elif isinstance(model, TensorNetworkPMM):
        data.update(
            family="tensor_network",
            rows=model.rows,
            cols=model.cols,
            dim=model.dim,
            feature_bond=model.feature_bond,
            internal_bond=model.internal_bond,
            entry_mode=model.entry_mode,
            row_factor=_tensor_to_dict(model.row_factor),
            core=_tensor_to_dict(model.core),
            col_factor=_tensor_to_dict(model.col_factor),
            diag=model.diag.to_dict(),
        )
    elif isinstance(model, ObservableModel):
        data.update(family="observable", matrix=model.matrix.to_dict())
    else:
        raise TypeError(f"unsupported model type {type(model).__name__}")
    return data


def model_from_dict(data: dict) -> Model:
    schema = data.get("schema")
    if schema != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {schema!r}")
    family = data["family"]
    if family == "affine":
        sel = data["selector"]
        return AffinePMM(
            dim=int(data["dim"]),
            diag=PackedParams.from_dict(data["diag"]),
            matrices=tuple(PackedParams.from_dict(m) for m in data["matrices"]),
            selector=OutputSelector(sel["kind"], sel.get("k")),
        )
    if family == "unitary_product":
        return UnitaryProductPMM(
            dim=int(data["dim"]),
            factors=tuple(PackedParams.from_dict(f) for f in data["factors"]),
            n_levels=int(data["n_levels"]),
        )
    if family == "tensor_network":
        return TensorNetworkPMM(
            rows=int(data["rows"]),
            cols=int(data["cols"]),
            dim=int(data["dim"]),
            feature_bond=int(data["feature_bond"]),
            internal_bond=int(data["internal_bond"]),
            row_factor=_tensor_from_dict(data["row_factor"]),
            core=_tensor_from_dict(data["core"]),
            col_factor=_tensor_from_dict(data["col_factor"]),
            diag=PackedParams.from_dict(data["diag"]),
            entry_mode=data["entry_mode"],
        )
    if family == "observable":
        return ObservableModel(matrix=PackedParams.from_dict(data["matrix"]))
    raise ValueError(f"unknown model family {family!r}")


def save_model(model: Model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1)


def load_model(path) -> Model:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
