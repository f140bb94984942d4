"""Losses, the optimizer, and the training loop.

Three loss kinds cover every experiment: weighted eigenvalue MSE (energy
curves and eigenphases), ground-state observable MSE with a frozen host, and
a Kullback-Leibler embedding loss over pairwise neighbor distributions.
Optimization is plain Adam on the flat parameter vector with validation-based
early stopping and a best-snapshot guarantee: the returned model's validation
loss never exceeds the initial model's.

Gradient accumulation over examples is in ascending example order throughout,
so runs are bit-reproducible given (seed, config, dataset ordering).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateLevelError, TrainingDivergedError
from .gradients import (
    PHASE_GAP,
    factor_decompositions,
    packed_readout,
    phase_energies_and_grad_batch,
)
from .hermitian import (
    COMPLEX_HERMITIAN,
    REAL_DIAGONAL,
    REAL_SYMMETRIC,
    PackedParams,
    eigh,
    packed_length,
    unpack,
    unpack_batch,
)
from .models import (
    GAP_RTOL,
    AffinePMM,
    Model,
    ObservableModel,
    OutputSelector,
    TensorNetworkPMM,
    UnitaryProductPMM,
    affine_eval_batch,
    factor_sum,
    flat_params,
    tn_expand,
    unitary_product_energies,
    with_params,
)
from .rng import substream

log = logging.getLogger("pmm.training")

SPLITS = ("train", "validation", "test")
LOSS_KINDS = ("eigen_mse", "observable_mse", "kl_embedding")

# Probability floor applied inside logarithms of the embedding loss.
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class Dataset:
    """Inputs with optional targets and integer labels, tagged by split."""

    inputs: np.ndarray
    targets: np.ndarray | None = None
    labels: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if inputs.ndim == 1:
            inputs = inputs[:, None]
        object.__setattr__(self, "inputs", inputs)
        if self.targets is not None:
            targets = np.asarray(self.targets, dtype=np.float64)
            if targets.ndim == 1:
                targets = targets[:, None]
            if targets.shape[0] != inputs.shape[0]:
                raise ValueError("targets row count does not match inputs")
            object.__setattr__(self, "targets", targets)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (inputs.shape[0],):
                raise ValueError("labels length does not match inputs")
            object.__setattr__(self, "labels", labels)
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def level_targets_sorted(self) -> bool:
        """Whether every target row is ascending (energy-level convention)."""
        if self.targets is None or self.targets.shape[1] < 2:
            return True
        return bool(np.all(np.diff(self.targets, axis=1) >= -1e-12))


@dataclass(frozen=True)
class LossSpec:
    """Which loss to optimize and its fixed hyperparameters."""

    kind: str
    weights: np.ndarray | None = None
    perplexity: float = 30.0
    host: AffinePMM | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if np.any(w < 0):
                raise ValueError("level weights must be nonnegative")
            object.__setattr__(self, "weights", w)
        if not self.perplexity > 1:
            raise ValueError("perplexity must exceed 1")
        if self.kind == "observable_mse" and self.host is None:
            raise ValueError("observable_mse needs the frozen host model")


@dataclass(frozen=True)
class OptimizerConfig:
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_epochs: int = 1000
    batch_size: int | None = None
    patience: int = 50
    seed: int = 0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_epochs < 0:
            raise ValueError("max epochs must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("moment decay rates must lie in [0, 1)")


@dataclass
class TrainState:
    params: np.ndarray
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf
    best_params: np.ndarray | None = None
    history: list[tuple[int, float, float]] = field(default_factory=list)


# --- eigenvalue MSE ------------------------------------------------------------


def _fd_level_readout(matrix: np.ndarray, idx: np.ndarray, mode: str,
                      h: float = 1e-6) -> np.ndarray:
    """d(selected eigenvalues)/d(packed slot) by central differences on the
    matrix itself; the fallback route for degenerate clusters. Shape (K, k)."""
    n = matrix.shape[0]
    k = packed_length(n, mode)
    out = np.zeros((k, idx.size))
    for s in range(k):
        unit = np.zeros(k)
        unit[s] = 1.0
        direction = unpack(PackedParams(n, mode, unit))
        plus = np.linalg.eigvalsh(matrix + h * direction)[idx]
        minus = np.linalg.eigvalsh(matrix - h * direction)[idx]
        out[s] = (plus - minus) / (2.0 * h)
    return out


def _degenerate_rows(lam: np.ndarray, idx: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Boolean mask of examples whose selected levels sit too close to a
    neighboring level for analytic derivatives."""
    m, n = lam.shape
    gaps = np.full(m, np.inf)
    diffs = np.diff(lam, axis=1)
    for l in idx:
        if l > 0:
            gaps = np.minimum(gaps, diffs[:, l - 1])
        if l < n - 1:
            gaps = np.minimum(gaps, diffs[:, l])
    return gaps < GAP_RTOL * np.maximum(scale, 1e-300)


def _resolve_weights(weights, k: int) -> np.ndarray:
    if weights is None:
        return np.ones(k)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise ValueError(f"expected {k} level weights, got shape {w.shape}")
    if np.any(w < 0):
        raise ValueError("level weights must be nonnegative")
    return w


def _affine_eigen_mse(model: AffinePMM, dataset: Dataset, weights) -> tuple[float, np.ndarray]:
    if dataset.targets is None:
        raise ValueError("eigen_mse needs targets")
    idx = model.selector.level_indices(model.dim)
    k = idx.size
    if dataset.targets.shape[1] != k:
        raise ValueError(
            f"targets have width {dataset.targets.shape[1]}, model selects {k} levels"
        )
    w = _resolve_weights(weights, k)
    m = dataset.size
    mats = affine_eval_batch(model, dataset.inputs)
    lam, vecs = np.linalg.eigh(mats)
    resid = lam[:, idx] - dataset.targets
    loss = float(np.sum(w * resid**2) / m)
    coeff = 2.0 * w * resid / m

    scale = np.linalg.norm(mats, axis=(1, 2))
    bad = _degenerate_rows(lam, idx, scale)
    good = ~bad
    vsel = vecs[:, :, idx]
    weighted = np.einsum(
        "mak,mk,mbk->mab", vsel[good].conj(), coeff[good], vsel[good], optimize=True
    )
    diag_grad = packed_readout(weighted, REAL_DIAGONAL).sum(axis=0)
    mode_readout: dict[str, np.ndarray] = {}
    blocks = []
    c_good = dataset.inputs[good]
    for i, mat in enumerate(model.matrices):
        if mat.mode not in mode_readout:
            mode_readout[mat.mode] = packed_readout(weighted, mat.mode)
        blocks.append(c_good[:, i] @ mode_readout[mat.mode])

    for e in np.nonzero(bad)[0]:
        log.warning("degenerate levels at example %d; finite-difference fallback", e)
        fd_cache: dict[str, np.ndarray] = {
            REAL_DIAGONAL: _fd_level_readout(mats[e], idx, REAL_DIAGONAL)
        }
        diag_grad = diag_grad + fd_cache[REAL_DIAGONAL] @ coeff[e]
        for i, mat in enumerate(model.matrices):
            if mat.mode not in fd_cache:
                fd_cache[mat.mode] = _fd_level_readout(mats[e], idx, mat.mode)
            blocks[i] = blocks[i] + dataset.inputs[e, i] * (fd_cache[mat.mode] @ coeff[e])

    return loss, np.concatenate([diag_grad, *blocks])


def _unitary_eigen_mse(model: UnitaryProductPMM, dataset: Dataset,
                       weights) -> tuple[float, np.ndarray]:
    if dataset.targets is None:
        raise ValueError("eigen_mse needs targets")
    k = model.n_levels
    if dataset.targets.shape[1] != k:
        raise ValueError(
            f"targets have width {dataset.targets.shape[1]}, model tracks {k} levels"
        )
    w = _resolve_weights(weights, k)
    idx = np.arange(k)
    m = dataset.size
    dts = dataset.inputs.ravel().astype(np.float64)
    if dts.size != m:
        raise ValueError("unitary-product inputs must be scalar time steps")
    n_params = model.dim * model.dim * len(model.factors)

    loss = 0.0
    grad = np.zeros(n_params)
    base_flat = flat_params(model)

    def fd_rows(dt):
        log.warning("degenerate eigenphases at dt=%g; finite-difference fallback", dt)
        return _fd_param_rows(
            lambda flat: unitary_product_energies(with_params(model, flat), dt)[idx],
            base_flat, k,
        )

    zero = dts == 0.0
    for e in np.nonzero(zero)[0]:
        # dt -> 0 limit: plain eigenvalues of the factor sum, each factor
        # receiving the same readout block.
        summed = factor_sum(model)
        decomp = eigh(summed)
        energies = decomp.eigenvalues[idx]
        scale = float(np.linalg.norm(summed))
        if _degenerate_rows(decomp.eigenvalues[None, :], idx, np.array([scale]))[0]:
            rows = fd_rows(0.0)
        else:
            rows = np.empty((k, n_params))
            for r, l in enumerate(idx):
                v = decomp.eigenvectors[:, l]
                block = packed_readout(np.outer(v.conj(), v), COMPLEX_HERMITIAN)
                rows[r] = np.tile(block, len(model.factors))
        resid = energies - dataset.targets[e]
        loss += float(np.sum(w * resid**2))
        grad += (2.0 * w * resid / m) @ rows

    live = np.nonzero(~zero)[0]
    if live.size:
        decomps = factor_decompositions(model)
        energies, rows3, gaps = phase_energies_and_grad_batch(decomps, dts[live], idx)
        resid = energies - dataset.targets[live]
        loss += float(np.sum(w * resid**2))
        coeff = 2.0 * (w * resid) / m
        bad = gaps < PHASE_GAP
        if np.any(bad):
            for pos in np.nonzero(bad)[0]:
                rows3[pos] = fd_rows(float(dts[live[pos]]))
        grad += np.einsum("mk,mkp->p", coeff, rows3)
    return loss / m, grad


def _fd_param_rows(output_fn, flat: np.ndarray, k: int, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian (k, n_params) of a vector output over the
    flat parameter vector; last-resort fallback."""
    rows = np.zeros((k, flat.size))
    for s in range(flat.size):
        step = np.zeros_like(flat)
        step[s] = h
        rows[:, s] = (output_fn(flat + step) - output_fn(flat - step)) / (2.0 * h)
    return rows


def eigen_mse_loss(model, dataset: Dataset, weights=None) -> tuple[float, np.ndarray]:
    """Mean over examples of the weighted squared error of the selected
    eigenvalues (eigenphase energies for unitary-product models), with the
    analytic gradient over the flat parameters.

    Examples whose tracked levels are degenerate fall back to finite
    differences; the event is logged.
    """
    if isinstance(model, AffinePMM):
        return _affine_eigen_mse(model, dataset, weights)
    if isinstance(model, UnitaryProductPMM):
        return _unitary_eigen_mse(model, dataset, weights)
    raise TypeError(f"eigen_mse_loss does not support {type(model).__name__}")


# --- observable MSE ------------------------------------------------------------


def _observable_terms(host: AffinePMM, obs: ObservableModel, c: np.ndarray,
                      include_host: bool):
    """(value, obs-gradient, host-gradient|None) from a single factorization."""
    mats = affine_eval_batch(host, c[None, :])[0]
    decomp = eigh(mats)
    lam, V = decomp.eigenvalues, decomp.eigenvectors
    if host.dim > 1:
        gap = lam[1] - lam[0]
        floor = GAP_RTOL * max(float(np.linalg.norm(mats)), 1e-300)
        if gap < floor:
            raise DegenerateLevelError(
                f"ground state gap {gap:.3e} below degeneracy floor {floor:.3e}",
                gap=float(gap),
            )
    v0 = V[:, 0]
    O = unpack(obs.matrix)
    value = float(np.real(v0.conj() @ O @ v0))
    obs_grad = packed_readout(np.outer(v0.conj(), v0), obs.matrix.mode)
    if not include_host or host.dim == 1:
        return value, obs_grad, None
    t = v0.conj() @ O @ V
    u = V[:, 1:] @ (t[1:].conj() / (lam[0] - lam[1:]))
    Z = 2.0 * np.outer(u.conj(), v0)
    blocks = [np.real(np.diag(Z))]
    cache: dict[str, np.ndarray] = {}
    for weight, mat in zip(c, host.matrices):
        if mat.mode not in cache:
            cache[mat.mode] = packed_readout(Z, mat.mode)
        blocks.append(weight * cache[mat.mode])
    return value, obs_grad, np.concatenate(blocks)


def observable_mse_loss(host: AffinePMM, obs: ObservableModel, dataset: Dataset,
                        include_host: bool = False):
    """Mean squared error of the ground-state expectation against scalar
    targets. Returns (loss, obs gradient, host gradient or None); the host is
    frozen unless `include_host`. Degeneracy errors propagate to the caller.
    """
    if dataset.targets is None:
        raise ValueError("observable_mse needs targets")
    targets = dataset.targets.ravel()
    m = dataset.size
    loss = 0.0
    obs_grad = np.zeros(obs.matrix.values.size)
    host_grad = np.zeros(flat_params(host).size) if include_host else None
    for e in range(m):
        value, og, hg = _observable_terms(host, obs, dataset.inputs[e], include_host)
        resid = value - targets[e]
        loss += resid**2
        obs_grad += (2.0 * resid / m) * og
        if include_host:
            host_grad += (2.0 * resid / m) * hg
    return loss / m, obs_grad, host_grad


# --- embedding loss --------------------------------------------------------------


def perplexity_search(distances_sq: np.ndarray, perplexity: float,
                      tol: float = 1e-5, max_iter: int = 50) -> np.ndarray:
    """Conditional neighbor probabilities for one point.

    `distances_sq` holds squared distances to the other points (self excluded).
    A Gaussian bandwidth is bisected until the entropy of p matches
    log2(perplexity) within `tol` bits; after `max_iter` iterations the best
    bandwidth found is used and the miss is logged.
    """
    d = np.asarray(distances_sq, dtype=np.float64).ravel()
    if np.any(d < 0):
        raise ValueError("squared distances must be nonnegative")
    target = math.log2(perplexity)
    beta = 1.0
    lo: float | None = None
    hi: float | None = None
    best_p = None
    best_miss = math.inf
    for _ in range(max_iter):
        logits = -beta * d
        logits -= logits.max()
        p = np.exp(logits)
        p /= p.sum()
        positive = p[p > 0]
        entropy = float(-np.sum(positive * np.log2(positive)))
        miss = abs(entropy - target)
        if miss < best_miss:
            best_miss = miss
            best_p = p
        if miss <= tol:
            return p
        if entropy > target:
            lo = beta
            beta = beta * 2.0 if hi is None else 0.5 * (beta + hi)
        else:
            hi = beta
            beta = beta / 2.0 if lo is None else 0.5 * (beta + lo)
    log.warning("perplexity search missed target by %.2e bits after %d iterations",
                best_miss, max_iter)
    return best_p


def pairwise_sq_distances(points: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance matrix with an exactly zero diagonal."""
    points = np.asarray(points, dtype=np.float64)
    sq = np.sum(points**2, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def joint_probabilities(images: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized neighbor distribution P over a batch of raw images.

    Rows come from `perplexity_search` on raw pixel distances; the matrix is
    symmetrized and normalized to sum to 1 with a zero diagonal.
    """
    flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    m = flat.shape[0]
    if not 1 < perplexity < m:
        raise ValueError(f"perplexity must lie in (1, {m}), got {perplexity}")
    dist = pairwise_sq_distances(flat)
    conditional = np.zeros((m, m))
    others = ~np.eye(m, dtype=bool)
    for i in range(m):
        conditional[i, others[i]] = perplexity_search(dist[i, others[i]], perplexity)
    joint = (conditional + conditional.T) / (2.0 * m)
    return joint


def _student_t_q(embedding: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(Q, kernel weights) of the heavy-tailed similarity on the embedding."""
    weights = 1.0 / (1.0 + pairwise_sq_distances(embedding))
    np.fill_diagonal(weights, 0.0)
    return weights / weights.sum(), weights


def _embedding_matrices(model, images: np.ndarray):
    """(matrix batch, level indices, grad assembler) for the embedding loss.

    The assembler maps per-example packed-slot sensitivities (h, h_diag) to
    the flat parameter gradient of the underlying model family.
    """
    if isinstance(model, TensorNetworkPMM):
        imgs = np.asarray(images, dtype=np.float64)
        if imgs.ndim != 3 or imgs.shape[1:] != (model.rows, model.cols):
            raise ValueError(
                f"expected (m, {model.rows}, {model.cols}) images, got {imgs.shape}"
            )
        slots = tn_expand(model)
        packed = np.einsum("mij,ijk->mk", imgs, slots, optimize=True)
        mats = unpack_batch(packed, model.dim, model.entry_mode)
        mats[:, np.arange(model.dim), np.arange(model.dim)] += model.diag.values
        idx = OutputSelector.interior_pair().level_indices(model.dim)

        def assemble(h, h_diag):
            d_slots = np.einsum("mij,mk->ijk", imgs, h, optimize=True)
            d_row = np.einsum("ijk,ukv,vtj->itu", d_slots, model.core,
                              model.col_factor, optimize=True)
            d_core = np.einsum("ijk,itu,vtj->ukv", d_slots, model.row_factor,
                               model.col_factor, optimize=True)
            d_col = np.einsum("ijk,itu,ukv->vtj", d_slots, model.row_factor,
                              model.core, optimize=True)
            return np.concatenate(
                [d_row.ravel(), d_core.ravel(), d_col.ravel(), h_diag.sum(axis=0)]
            )

        return mats, idx, model.entry_mode, assemble

    if isinstance(model, AffinePMM):
        feats = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        mats = affine_eval_batch(model, feats)
        idx = model.selector.level_indices(model.dim)
        modes = {m.mode for m in model.matrices}
        if len(modes) != 1:
            raise ValueError("embedding loss needs a single feature-matrix mode")
        mode = modes.pop()

        def assemble(h, h_diag):
            return np.concatenate([h_diag.sum(axis=0), (feats.T @ h).ravel()])

        return mats, idx, mode, assemble

    raise TypeError(f"kl_embedding_loss does not support {type(model).__name__}")


def kl_embedding_loss(model, images: np.ndarray, perplexity: float = 30.0,
                      p_matrix: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """KL divergence between the pixel-space neighbor distribution P and the
    heavy-tailed neighbor distribution Q of the 2D spectral embedding, with
    the analytic gradient over the flat parameters.

    P depends only on the images; pass `p_matrix` to reuse one across steps
    (it is treated as constant during differentiation either way).
    """
    m = len(images)
    if m < 8:
        raise ValueError(f"embedding batches need at least 8 images, got {m}")
    if p_matrix is None:
        p_matrix = joint_probabilities(images, perplexity)
    elif p_matrix.shape != (m, m):
        raise ValueError("p_matrix shape does not match the batch")

    mats, idx, mode, assemble = _embedding_matrices(model, images)
    lam, vecs = np.linalg.eigh(mats)
    embedding = lam[:, idx]
    q_matrix, kernel = _student_t_q(embedding)

    loss = float(
        np.sum(
            p_matrix
            * (np.log(np.maximum(p_matrix, PROB_FLOOR)) - np.log(np.maximum(q_matrix, PROB_FLOOR)))
        )
    )
    mix = (p_matrix - q_matrix) * kernel
    d_dy = 4.0 * (mix.sum(axis=1)[:, None] * embedding - mix @ embedding)

    scale = np.linalg.norm(mats, axis=(1, 2))
    bad = _degenerate_rows(lam, idx, scale)
    vsel = vecs[:, :, idx]
    weighted = np.einsum("mak,mk,mbk->mab", vsel.conj(), d_dy, vsel, optimize=True)
    h = packed_readout(weighted, mode)
    h_diag = packed_readout(weighted, REAL_DIAGONAL)
    for e in np.nonzero(bad)[0]:
        log.warning("degenerate interior pair at image %d; finite-difference fallback", e)
        h[e] = _fd_level_readout(mats[e], idx, mode) @ d_dy[e]
        h_diag[e] = _fd_level_readout(mats[e], idx, REAL_DIAGONAL) @ d_dy[e]
    return loss, assemble(h, h_diag)


# --- initialization ---------------------------------------------------------------


def _init_packed(rng: np.random.Generator, dim: int, mode: str, scale: float) -> PackedParams:
    """Sorted uniform diagonal, normal(0, scale/sqrt(dim)) off-diagonal slots."""
    diag = np.sort(rng.uniform(-1.0, 1.0, size=dim)) * scale
    extra = packed_length(dim, mode) - dim
    off = rng.normal(0.0, scale / math.sqrt(dim), size=extra) if extra else np.empty(0)
    return PackedParams(dim, mode, np.concatenate([diag, off]))


def init_model(family: str, dims, seed: int, scale: float = 0.1, **kwargs) -> Model:
    """Deterministic random model of the given family.

    dims per family:
        affine          (dim, n_features); kwargs: selector (required), mode
        unitary_product (dim, n_factors);  kwargs: n_levels
        tensor_network  (rows, cols, dim, feature_bond, internal_bond);
                        kwargs: entry_mode
        observable      (dim,)
    """
    rng = substream(seed, "init")
    if family == "affine":
        dim, n_features = dims
        mode = kwargs.pop("mode", COMPLEX_HERMITIAN)
        selector = kwargs.pop("selector")
        _reject_extra(kwargs)
        diag = PackedParams(dim, REAL_DIAGONAL, np.sort(rng.uniform(-1, 1, dim)) * scale)
        mats = tuple(_init_packed(rng, dim, mode, scale) for _ in range(n_features))
        return AffinePMM(dim, diag, mats, selector)
    if family == "unitary_product":
        dim, n_factors = dims
        n_levels = kwargs.pop("n_levels", dim)
        _reject_extra(kwargs)
        factors = tuple(
            _init_packed(rng, dim, COMPLEX_HERMITIAN, scale) for _ in range(n_factors)
        )
        return UnitaryProductPMM(dim, factors, n_levels)
    if family == "tensor_network":
        rows, cols, dim, feature_bond, internal_bond = dims
        entry_mode = kwargs.pop("entry_mode", REAL_SYMMETRIC)
        _reject_extra(kwargs)
        k = packed_length(dim, entry_mode)
        return TensorNetworkPMM(
            rows=rows,
            cols=cols,
            dim=dim,
            feature_bond=feature_bond,
            internal_bond=internal_bond,
            row_factor=rng.normal(0.0, scale, size=(rows, feature_bond, internal_bond)),
            core=rng.normal(0.0, scale, size=(internal_bond, k, internal_bond)),
            col_factor=rng.normal(0.0, scale, size=(internal_bond, feature_bond, cols)),
            diag=PackedParams(dim, REAL_DIAGONAL, np.sort(rng.uniform(-1, 1, dim)) * scale),
            entry_mode=entry_mode,
        )
    if family == "observable":
        (dim,) = dims
        _reject_extra(kwargs)
        return ObservableModel(matrix=_init_packed(rng, dim, COMPLEX_HERMITIAN, scale))
    raise ValueError(f"unknown model family {family!r}")


def _reject_extra(kwargs: dict) -> None:
    if kwargs:
        raise TypeError(f"unexpected keyword arguments {sorted(kwargs)}")


# --- training loop ------------------------------------------------------------------


def _loss_eval(model, spec: LossSpec, dataset: Dataset,
               p_matrix: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    if spec.kind == "eigen_mse":
        return eigen_mse_loss(model, dataset, spec.weights)
    if spec.kind == "observable_mse":
        loss, obs_grad, _ = observable_mse_loss(spec.host, model, dataset)
        return loss, obs_grad
    value, grad = kl_embedding_loss(
        model, dataset.inputs, spec.perplexity, p_matrix=p_matrix
    )
    return value, grad


def train(model: Model, train_set: Dataset, val_set: Dataset, loss: LossSpec,
          opt: OptimizerConfig) -> tuple[Model, list[tuple[int, float, float]]]:
    """Adam on the flat parameters with per-epoch validation, best-snapshot
    tracking, and patience-based early stopping.

    Physics losses take one full-batch step per epoch; the embedding loss
    walks a fixed batch partition (neighbor distributions cached per batch).
    Returns the best-validation snapshot and the (epoch, train, val) history.
    """
    state = TrainState(
        params=flat_params(model).copy(),
        first_moment=np.zeros(flat_params(model).size),
        second_moment=np.zeros(flat_params(model).size),
    )
    if opt.max_epochs == 0:
        return model, []

    batches: list[np.ndarray]
    if loss.kind == "kl_embedding" and opt.batch_size is not None \
            and opt.batch_size < train_set.size:
        order = substream(opt.seed, "batches").permutation(train_set.size)
        n_batches = math.ceil(train_set.size / opt.batch_size)
        batches = [np.sort(chunk) for chunk in np.array_split(order, n_batches)]
    else:
        batches = [np.arange(train_set.size)]

    train_p: list[np.ndarray | None] = [None] * len(batches)
    val_p: np.ndarray | None = None
    if loss.kind == "kl_embedding":
        train_p = [joint_probabilities(train_set.inputs[b], loss.perplexity)
                   for b in batches]
        val_p = joint_probabilities(val_set.inputs, loss.perplexity)

    def subset(dataset: Dataset, rows: np.ndarray) -> Dataset:
        if len(rows) == dataset.size:
            return dataset
        return Dataset(
            dataset.inputs[rows],
            None if dataset.targets is None else dataset.targets[rows],
            None if dataset.labels is None else dataset.labels[rows],
            dataset.split,
        )

    def val_loss(flat: np.ndarray) -> float:
        value, _ = _loss_eval(with_params(model, flat), loss, val_set, p_matrix=val_p)
        return value

    state.best_val = val_loss(state.params)
    state.best_params = state.params.copy()
    if not math.isfinite(state.best_val):
        raise TrainingDivergedError(
            f"validation loss not finite before training (step size {opt.step_size})"
        )

    stale = 0
    for epoch in range(1, opt.max_epochs + 1):
        state.epoch = epoch
        epoch_losses = []
        for b, rows in enumerate(batches):
            current = with_params(model, state.params)
            value, grad = _loss_eval(current, loss, subset(train_set, rows),
                                     p_matrix=train_p[b])
            if not (math.isfinite(value) and np.all(np.isfinite(grad))):
                raise TrainingDivergedError(
                    f"loss diverged at epoch {epoch} (step size {opt.step_size})"
                )
            epoch_losses.append(value)
            state.step += 1
            state.first_moment = opt.beta1 * state.first_moment + (1 - opt.beta1) * grad
            state.second_moment = opt.beta2 * state.second_moment + (1 - opt.beta2) * grad**2
            m_hat = state.first_moment / (1 - opt.beta1**state.step)
            v_hat = state.second_moment / (1 - opt.beta2**state.step)
            state.params = state.params - opt.step_size * m_hat / (np.sqrt(v_hat) + opt.epsilon)

        current_val = val_loss(state.params)
        state.history.append((epoch, float(np.mean(epoch_losses)), current_val))
        if current_val < state.best_val:
            state.best_val = current_val
            state.best_params = state.params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= opt.patience:
                break

    return with_params(model, state.best_params), state.history


def history_to_csv(history: list[tuple[int, float, float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        writer.writerows(history)
