"""Analytic derivatives with respect to packed model parameters.

Everything here is first-order perturbation theory. The central primitive is
`packed_readout`: given the sensitivity of a scalar to the complex matrix
entries (a matrix G with dL = Re sum_ab E_ab G_ab for a Hermitian basis
direction E), it produces the derivative for every packed real slot.

Degenerate levels are refused with `DegenerateLevelError`; callers fall back
to finite differences over the offending example. `fd_check` is the verifier
every analytic path is held against in the tests.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateLevelError, PhaseWrapWarning
from .hermitian import (
    COMPLEX_HERMITIAN,
    REAL_DIAGONAL,
    REAL_SYMMETRIC,
    EigenDecomposition,
    eigh,
    fro_norm,
    require_hermitian,
    unpack,
)
from .models import (
    GAP_RTOL,
    AffinePMM,
    ObservableModel,
    UnitaryProductPMM,
    affine_eval,
)

# Eigenvalue differences below this are treated as coincident inside the
# divided-difference rule for the exponential derivative.
FRECHET_COINCIDENT = 1e-10

# Minimum angular separation of tracked eigenphases on the unit circle.
PHASE_GAP = 1e-8


def packed_readout(G: np.ndarray, mode: str) -> np.ndarray:
    """Derivative of Re sum_ab E_ab G_ab for each packed slot's basis matrix E.

    G may carry leading batch dimensions; the readout applies to the last two.
    Slot order matches `pack`: diagonal first, then upper-triangle row-major
    (real, imag interleaved for the complex mode).
    """
    G = np.asarray(G)
    n = G.shape[-1]
    diag = np.real(np.einsum("...ii->...i", G))
    if mode == REAL_DIAGONAL:
        return diag
    iu, ju = np.triu_indices(n, k=1)
    upper = G[..., iu, ju]
    lower = G[..., ju, iu]
    sym = np.real(upper + lower)
    if mode == REAL_SYMMETRIC:
        return np.concatenate([diag, sym], axis=-1)
    anti = np.real(1j * (upper - lower))
    out = np.empty(G.shape[:-2] + (n * n,))
    out[..., :n] = diag
    out[..., n::2] = sym
    out[..., n + 1 :: 2] = anti
    return out


def _require_level_gaps(eigenvalues: np.ndarray, indices: np.ndarray, scale: float) -> None:
    floor = GAP_RTOL * max(scale, 1e-300)
    n = eigenvalues.size
    for l in indices:
        neighbors = []
        if l > 0:
            neighbors.append(eigenvalues[l] - eigenvalues[l - 1])
        if l < n - 1:
            neighbors.append(eigenvalues[l + 1] - eigenvalues[l])
        if neighbors and min(neighbors) < floor:
            gap = float(min(neighbors))
            raise DegenerateLevelError(
                f"level {l} gap {gap:.3e} below degeneracy floor {floor:.3e}",
                gap=gap,
            )


def _resolve_levels(model: AffinePMM, level_indices) -> np.ndarray:
    if level_indices is None:
        return model.selector.level_indices(model.dim)
    return np.atleast_1d(np.asarray(level_indices, dtype=int))


def eigenvalue_grad(model: AffinePMM, c, level_indices=None) -> np.ndarray:
    """Rows of d(lambda_l)/d(theta) over the flat parameter vector.

    Slot derivative is v_l^H E v_l with E the slot's basis matrix, scaled by
    the feature value for slots inside a feature matrix and by 1 for the
    constant diagonal. Levels closer than the degeneracy floor to a neighbor
    are refused.
    """
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    matrix = affine_eval(model, c)
    decomp = eigh(matrix)
    idx = _resolve_levels(model, level_indices)
    _require_level_gaps(decomp.eigenvalues, idx, fro_norm(matrix))
    rows = []
    for l in idx:
        v = decomp.eigenvectors[:, l]
        G = np.outer(v.conj(), v)
        blocks = [np.real(np.diag(G))]
        cache: dict[str, np.ndarray] = {}
        for weight, m in zip(c, model.matrices):
            if m.mode not in cache:
                cache[m.mode] = packed_readout(G, m.mode)
            blocks.append(weight * cache[m.mode])
        rows.append(np.concatenate(blocks))
    return np.stack(rows)


def groundstate_expectation_grad(
    host: AffinePMM, obs: ObservableModel, c
) -> tuple[np.ndarray, np.ndarray]:
    """(gradient over host params, gradient over observable params) of the
    ground-state expectation value.

    The observable part is the packed readout of the ground projector. The
    host part follows the first-order eigenvector response
    dv0 = sum_{j!=0} v_j (v_j^H dM v0) / (lambda_0 - lambda_j).
    """
    if obs.dim != host.dim:
        raise ValueError("observable dim does not match host dim")
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    matrix = affine_eval(host, c)
    decomp = eigh(matrix)
    lam, V = decomp.eigenvalues, decomp.eigenvectors
    if host.dim > 1:
        gap = lam[1] - lam[0]
        floor = GAP_RTOL * max(fro_norm(matrix), 1e-300)
        if gap < floor:
            raise DegenerateLevelError(
                f"ground state gap {gap:.3e} below degeneracy floor {floor:.3e}",
                gap=float(gap),
            )
    v0 = V[:, 0]
    O = unpack(obs.matrix)
    obs_grad = packed_readout(np.outer(v0.conj(), v0), obs.matrix.mode)
    if host.dim == 1:
        host_grad = np.zeros(1 + sum(m.values.size for m in host.matrices))
        return host_grad, obs_grad
    t = v0.conj() @ O @ V
    weights = t[1:].conj() / (lam[0] - lam[1:])
    u = V[:, 1:] @ weights
    Z = 2.0 * np.outer(u.conj(), v0)
    blocks = [np.real(np.diag(Z))]
    cache: dict[str, np.ndarray] = {}
    for weight, m in zip(c, host.matrices):
        if m.mode not in cache:
            cache[m.mode] = packed_readout(Z, m.mode)
        blocks.append(weight * cache[m.mode])
    return np.concatenate(blocks), obs_grad


def _divided_difference(eigenvalues: np.ndarray, dt: float) -> np.ndarray:
    """Matrix of (f(a)-f(b))/(a-b) for f(x)=exp(-i x dt), with the confluent
    limit -i dt f(a) on near-coincident pairs."""
    phases = np.exp(-1j * eigenvalues * dt)
    den = eigenvalues[:, None] - eigenvalues[None, :]
    small = np.abs(den) < FRECHET_COINCIDENT
    num = phases[:, None] - phases[None, :]
    safe = np.where(small, 1.0, den)
    confluent = np.broadcast_to((-1j * dt * phases)[:, None], den.shape)
    return np.where(small, confluent, num / safe)


def _divided_difference_batch(eigenvalues: np.ndarray, dts: np.ndarray) -> np.ndarray:
    """Stack of divided-difference matrices, one per time step: shape (m, n, n)."""
    phases = np.exp(-1j * np.outer(dts, eigenvalues))
    den = eigenvalues[:, None] - eigenvalues[None, :]
    small = np.abs(den) < FRECHET_COINCIDENT
    num = phases[:, :, None] - phases[:, None, :]
    safe = np.where(small, 1.0, den)
    confluent = np.broadcast_to(
        (-1j * dts[:, None] * phases)[:, :, None], num.shape
    )
    return np.where(small[None, :, :], confluent, num / safe[None, :, :])


def expm_frechet(matrix: np.ndarray, t: float, direction: np.ndarray) -> np.ndarray:
    """Derivative of exp(-i * matrix * t) along a Hermitian direction."""
    require_hermitian(matrix, context="expm_frechet matrix")
    require_hermitian(direction, context="expm_frechet direction")
    decomp = eigh(matrix)
    V = decomp.eigenvectors
    A = V.conj().T @ np.asarray(direction, dtype=np.complex128) @ V
    F = _divided_difference(decomp.eigenvalues, t)
    return V @ (F * A) @ V.conj().T


def factor_decompositions(model: UnitaryProductPMM) -> list[EigenDecomposition]:
    """Eigendecompositions of every factor matrix, dt-independent; compute
    once per parameter vector and reuse across time steps."""
    return [eigh(unpack(f)) for f in model.factors]


def _wrapped_angle_gaps(angles: np.ndarray) -> np.ndarray:
    """Min angular distance from each phase to every other phase."""
    diff = angles[:, None] - angles[None, :]
    dist = np.abs((diff + np.pi) % (2 * np.pi) - np.pi)
    np.fill_diagonal(dist, np.inf)
    return dist.min(axis=1)


def phase_energies_and_grad_batch(
    decomps: list[EigenDecomposition], dts: np.ndarray, level_indices: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eigenphase energies and gradient rows over a vector of nonzero time
    steps, vectorized across the batch.

    Returns (energies (m, k), grads (m, k, P), min tracked angular gap (m,)).
    Rows whose tracked gap is below the angular floor carry zero gradient
    rows; callers decide between raising and a finite-difference fallback.
    """
    dts = np.asarray(dts, dtype=np.float64)
    if np.any(dts == 0):
        raise ValueError("eigenphases are undefined at dt = 0")
    m = dts.size
    dim = decomps[0].eigenvectors.shape[0]
    n_factors = len(decomps)
    idx = np.asarray(level_indices, dtype=int)
    k = idx.size

    factor_units = []
    freqs = []
    for d in decomps:
        V = d.eigenvectors
        phases = np.exp(-1j * np.outer(dts, d.eigenvalues))
        factor_units.append((V[None, :, :] * phases[:, None, :]) @ V.conj().T)
        freqs.append(_divided_difference_batch(d.eigenvalues, dts))
    eye = np.broadcast_to(np.eye(dim, dtype=np.complex128), (m, dim, dim))
    prefix = [eye]
    for U in factor_units:
        prefix.append(prefix[-1] @ U)
    suffix = [eye] * (n_factors + 1)
    for j in range(n_factors - 1, -1, -1):
        suffix[j] = factor_units[j] @ suffix[j + 1]

    mu, W = np.linalg.eig(prefix[n_factors])
    W = W / np.linalg.norm(W, axis=1, keepdims=True)
    angles = np.angle(mu)
    energies = -angles / dts[:, None]
    order = np.argsort(energies, axis=1, kind="stable")
    energies = np.take_along_axis(energies, order, axis=1)
    angles = np.take_along_axis(angles, order, axis=1)
    W = np.take_along_axis(W, order[:, None, :], axis=2)

    if np.max(np.abs(angles)) > 0.9 * np.pi:
        import warnings

        warnings.warn(
            "eigenphase magnitude beyond 0.9*pi: energies may wrap",
            PhaseWrapWarning,
            stacklevel=2,
        )
    diff = angles[:, :, None] - angles[:, None, :]
    dist = np.abs((diff + np.pi) % (2 * np.pi) - np.pi)
    dist[:, np.arange(dim), np.arange(dim)] = np.inf
    tracked_gap = dist.min(axis=2)[:, idx].min(axis=1)
    good = tracked_gap >= PHASE_GAP

    slot_count = dim * dim
    grads = np.zeros((m, k, n_factors * slot_count))
    if np.any(good):
        g_dts = dts[good]
        for row, l in enumerate(idx):
            w = W[good, :, l]
            scale = 1j * np.exp(1j * energies[good, l] * g_dts) / g_dts
            for j, d in enumerate(decomps):
                V = d.eigenvectors
                a = np.einsum("mba,mb->ma", prefix[j][good].conj(), w)
                b = np.einsum("mab,mb->ma", suffix[j + 1][good], w)
                at = a @ V.conj()
                bt = b @ V.conj()
                Wmat = at.conj()[:, :, None] * bt[:, None, :] * freqs[j][good]
                Y = V.conj() @ (Wmat @ V.T)
                grads[good, row, j * slot_count : (j + 1) * slot_count] = (
                    packed_readout(scale[:, None, None] * Y, COMPLEX_HERMITIAN)
                )
    return energies[:, idx], grads, tracked_gap


def phase_energies_and_grad(
    decomps: list[EigenDecomposition], dt: float, level_indices: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Eigenphase energies and gradient rows for one time step, given the
    factor eigendecompositions. Shared workhorse behind `unitary_phase_grad`."""
    energies, grads, gap = phase_energies_and_grad_batch(
        decomps, np.array([dt], dtype=np.float64), np.asarray(level_indices, dtype=int)
    )
    if gap[0] < PHASE_GAP:
        raise DegenerateLevelError(
            f"tracked eigenphase angular gap {gap[0]:.3e} below {PHASE_GAP:.0e}",
            gap=float(gap[0]),
        )
    return energies[0], grads[0]


def unitary_phase_grad(model: UnitaryProductPMM, dt: float, level_indices=None) -> np.ndarray:
    """Rows of dE_l/d(theta) over the flat factor parameters at step dt.

    Differentiates E = -arg(mu)/dt through the ordered product by the product
    rule, with each factor's exponential handled by the divided-difference
    rule. Tracked phases closer than the angular floor to any other phase are
    refused.
    """
    if level_indices is None:
        idx = np.arange(model.n_levels)
    else:
        idx = np.atleast_1d(np.asarray(level_indices, dtype=int))
    _, grads = phase_energies_and_grad(factor_decompositions(model), dt, idx)
    return grads


def fd_check(loss_fn, params, h: float = 1e-5) -> float:
    """Max slotwise relative deviation between the analytic gradient and a
    central finite difference.

    `loss_fn(params)` must return `(value, gradient)` and be pure. Deviation
    per slot is |g - g_fd| / max(1e-12, |g_fd|).
    """
    params = np.asarray(params, dtype=np.float64)
    _, grad = loss_fn(params)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match params {params.shape}")
    worst = 0.0
    for a in range(params.size):
        step = np.zeros_like(params)
        step[a] = h
        plus, _ = loss_fn(params + step)
        minus, _ = loss_fn(params - step)
        g_fd = (plus - minus) / (2.0 * h)
        worst = max(worst, abs(grad[a] - g_fd) / max(1e-12, abs(g_fd)))
    return worst
