"""Exact reference systems that generate every training, validation, and
ground-truth table: non-interacting spins, the quartic anharmonic oscillator,
disordered Heisenberg chains (next-to-nearest-neighbor and antisymmetric
exchange variants) with their Trotter step products, and the LMG collective
spin model.

Conventions, fixed once:
    - spin chains are 0-based, periodic; site 0 is the leftmost Kronecker
      factor, so basis state ordering is |s_0 s_1 ...> with s=up first
    - the even|odd sublattice sums run over all sites of that parity with
      neighbor indices taken mod N
    - the oscillator ladder matrix is truncated first, then raised to the
      fourth power
    - the collective-spin basis orders m descending from +S
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import PresetError
from .hermitian import eig_general, eigenphases, eigh, expm_hermitian, fro_norm
from .models import GAP_RTOL
from .rng import substream
from .training import Dataset

log = logging.getLogger("pmm.oracles")

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=np.complex128)
_EYE2 = np.eye(2, dtype=np.complex128)

# Largest Hilbert-space dimension any chain builder will materialize.
MAX_CHAIN_DIM = 4096


@dataclass(frozen=True)
class SpinChainSpec:
    """Disordered periodic chain. j1 is the nearest-neighbor exchange in both
    variants; j2 the next-to-nearest exchange; dm the antisymmetric coupling.
    The per-site field strengths r_i come from the seed unless given."""

    n_sites: int
    b: float = 1.0
    j1: float = 1.0
    j2: float = 0.0
    dm: float = 0.0
    seed: int = 0
    r_values: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n_sites < 2 or self.n_sites % 2:
            raise ValueError("n_sites must be even and at least 2")
        if self.r_values is not None:
            r = tuple(float(v) for v in self.r_values)
            if len(r) != self.n_sites:
                raise ValueError("r_values length must equal n_sites")
            object.__setattr__(self, "r_values", r)

    @property
    def r(self) -> np.ndarray:
        if self.r_values is not None:
            return np.asarray(self.r_values)
        return substream(self.seed, "r_i").uniform(0.0, 1.0, size=self.n_sites)


@dataclass(frozen=True)
class AHOSpec:
    """Quartic anharmonic oscillator on a truncated number basis."""

    n_max: int
    g: float

    def __post_init__(self):
        if self.n_max < 2:
            raise ValueError("n_max must be at least 2")


@dataclass(frozen=True)
class LMGSpec:
    """Collective spin model: N sites in the S = N/2 representation."""

    n_sites: int
    c: float = 0.0

    def __post_init__(self):
        if self.n_sites < 2 or self.n_sites % 2:
            raise ValueError("n_sites must be even and at least 2")

    @property
    def dim(self) -> int:
        return self.n_sites + 1


# --- elementary spin algebra ----------------------------------------------------


def site_operator(op: np.ndarray, site: int, n_sites: int) -> np.ndarray:
    """Single-site operator embedded in the chain's product space."""
    left = 2**site
    right = 2 ** (n_sites - site - 1)
    return np.kron(np.eye(left), np.kron(op, np.eye(right)))


def _placed(ops: dict[int, np.ndarray], n_sites: int) -> np.ndarray:
    out = np.eye(1, dtype=np.complex128)
    for s in range(n_sites):
        out = np.kron(out, ops.get(s, _EYE2))
    return out


def _exchange(i: int, j: int, n_sites: int) -> np.ndarray:
    return (
        _placed({i: SIGMA_X, j: SIGMA_X}, n_sites)
        + _placed({i: SIGMA_Y, j: SIGMA_Y}, n_sites)
        + _placed({i: SIGMA_Z, j: SIGMA_Z}, n_sites)
    )


def _antisymmetric(i: int, j: int, n_sites: int) -> np.ndarray:
    return _placed({i: SIGMA_X, j: SIGMA_Y}, n_sites) - _placed(
        {i: SIGMA_Y, j: SIGMA_X}, n_sites
    )


# --- non-interacting spins (the extrapolation toy system) ------------------------


def noninteracting_spin_energy(n_sites: int, c, level: int = 0):
    """Exact energy level of H = (1/2N) sum_i (sigma^z_i + c sigma^x_i).

    Distinct levels are (2k - N) sqrt(1+c^2) / (2N) for k = 0..N; the ground
    level is -sqrt(1+c^2)/2 for every N. Accepts complex c (principal root),
    which analytically continues each level off the real axis.
    """
    if n_sites < 1:
        raise ValueError("need at least one site")
    if not 0 <= level <= n_sites:
        raise ValueError(f"level must lie in [0, {n_sites}]")
    root = np.sqrt(1.0 + np.asarray(c) ** 2)
    value = (2 * level - n_sites) * root / (2 * n_sites)
    return complex(value) if np.iscomplexobj(value) else float(value)


def noninteracting_spin_components(n_sites: int) -> tuple[np.ndarray, np.ndarray]:
    """(H0, H1) with H(c) = H0 + c H1 on the full 2^N space."""
    if 2**n_sites > MAX_CHAIN_DIM:
        raise ValueError(f"2^{n_sites} exceeds the dense ceiling {MAX_CHAIN_DIM}")
    dim = 2**n_sites
    h0 = np.zeros((dim, dim), dtype=np.complex128)
    h1 = np.zeros((dim, dim), dtype=np.complex128)
    for i in range(n_sites):
        h0 += site_operator(SIGMA_Z, i, n_sites)
        h1 += site_operator(SIGMA_X, i, n_sites)
    return h0 / (2 * n_sites), h1 / (2 * n_sites)


def noninteracting_spin_hamiltonian(n_sites: int, c: float) -> np.ndarray:
    h0, h1 = noninteracting_spin_components(n_sites)
    return h0 + c * h1


# --- anharmonic oscillator --------------------------------------------------------


def aho_hamiltonian(spec: AHOSpec) -> np.ndarray:
    """diag(0..n_max) + g A^4 with A the truncated ladder sum a + a^dagger."""
    n = spec.n_max + 1
    ladder = np.zeros((n, n))
    offdiag = np.sqrt(np.arange(1, n))
    ladder[np.arange(n - 1), np.arange(1, n)] = offdiag
    ladder[np.arange(1, n), np.arange(n - 1)] = offdiag
    return np.diag(np.arange(n, dtype=np.float64)) + spec.g * np.linalg.matrix_power(ladder, 4)


def aho_energies(spec: AHOSpec, k: int) -> np.ndarray:
    return eigh(aho_hamiltonian(spec)).eigenvalues[:k]


# --- Heisenberg chains and Trotter products ---------------------------------------

CHAIN_VARIANTS = ("nnn", "dm")


def heisenberg_terms(spec: SpinChainSpec, variant: str) -> list[np.ndarray]:
    """The five Hermitian terms whose ordered exponentials form the Trotter
    step: field term, then even/odd nearest-neighbor exchange, then even/odd
    second-neighbor exchange (nnn) or antisymmetric exchange (dm)."""
    if variant not in CHAIN_VARIANTS:
        raise ValueError(f"variant must be one of {CHAIN_VARIANTS}, got {variant!r}")
    n = spec.n_sites
    if 2**n > MAX_CHAIN_DIM:
        raise ValueError(f"2^{n} exceeds the dense ceiling {MAX_CHAIN_DIM}")
    dim = 2**n
    field = np.zeros((dim, dim), dtype=np.complex128)
    for i, strength in enumerate(spec.r):
        field += strength * site_operator(SIGMA_Z, i, n)
    field *= spec.b

    def parity_sum(pair_fn, offset: int, parity: int, coupling: float) -> np.ndarray:
        total = np.zeros((dim, dim), dtype=np.complex128)
        for i in range(parity, n, 2):
            total += pair_fn(i, (i + offset) % n, n)
        return coupling * total

    terms = [
        field,
        parity_sum(_exchange, 1, 0, spec.j1),
        parity_sum(_exchange, 1, 1, spec.j1),
    ]
    if variant == "nnn":
        terms.append(parity_sum(_exchange, 2, 0, spec.j2))
        terms.append(parity_sum(_exchange, 2, 1, spec.j2))
    else:
        terms.append(parity_sum(_antisymmetric, 1, 0, spec.dm))
        terms.append(parity_sum(_antisymmetric, 1, 1, spec.dm))
    return terms


def heisenberg_hamiltonian(spec: SpinChainSpec, variant: str) -> np.ndarray:
    return sum(heisenberg_terms(spec, variant))


def trotter_unitary(spec: SpinChainSpec, variant: str, dt: float) -> np.ndarray:
    """Ordered product of the five term exponentials at step dt."""
    terms = heisenberg_terms(spec, variant)
    product = np.eye(2**spec.n_sites, dtype=np.complex128)
    for term in terms:
        product = product @ expm_hermitian(term, dt)
    return product


def trotter_energies(spec: SpinChainSpec, variant: str, dt: float, k: int) -> np.ndarray:
    """Lowest k eigenphase energies of the Trotter step."""
    return eigenphases(trotter_unitary(spec, variant, dt), dt)[:k]


def chain_energies(spec: SpinChainSpec, variant: str, k: int) -> np.ndarray:
    """Lowest k exact eigenvalues of the full chain Hamiltonian."""
    return eigh(heisenberg_hamiltonian(spec, variant)).eigenvalues[:k]


# --- LMG collective spin -----------------------------------------------------------


def collective_spin_matrices(n_sites: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(S_x, S_y, S_z) in the S = N/2 representation, m descending from +S."""
    s = n_sites / 2.0
    i = np.arange(n_sites)
    raising = np.diag(np.sqrt((2 * s - i) * (i + 1)), 1)
    lowering = raising.conj().T
    sx = (raising + lowering) / 2.0
    sy = (raising - lowering) / 2.0j
    sz = np.diag(s - np.arange(n_sites + 1))
    return sx, sy, sz


def lmg_hamiltonian(spec: LMGSpec, c: complex | None = None) -> np.ndarray:
    """-S_z - (2c/N)(S_x^2 - S_y^2/2); Hermitian for real c, and the same
    analytic family evaluated off the real axis when c is complex."""
    sx, sy, sz = collective_spin_matrices(spec.n_sites)
    coupling = spec.c if c is None else c
    return -sz - (2.0 * coupling / spec.n_sites) * (sx @ sx - 0.5 * (sy @ sy))


def lmg_energies(spec: LMGSpec, k: int | None = None) -> np.ndarray:
    values = eigh(lmg_hamiltonian(spec)).eigenvalues
    return values if k is None else values[:k]


def lmg_complex_energies(n_sites: int, c: complex) -> np.ndarray:
    """All eigenvalues at complex coupling, in sort_complex order."""
    matrix = lmg_hamiltonian(LMGSpec(n_sites), c=complex(c))
    return eig_general(matrix)


def lmg_observables(spec: LMGSpec) -> tuple[float, float]:
    """(<S_x^2>/N^2, <S_z>/N) in the exact ground state.

    At a degenerate ground level the lowest-index eigenvector is used and the
    event logged; the quadratic forms stay well-defined either way.
    """
    matrix = lmg_hamiltonian(spec)
    decomp = eigh(matrix)
    gap = decomp.eigenvalues[1] - decomp.eigenvalues[0]
    if gap < GAP_RTOL * fro_norm(matrix):
        log.warning("degenerate LMG ground state at c=%g (gap %.3e)", spec.c, gap)
    v0 = decomp.eigenvectors[:, 0]
    sx, _, sz = collective_spin_matrices(spec.n_sites)
    n = spec.n_sites
    sx2 = float(np.real(v0.conj() @ (sx @ sx) @ v0)) / n**2
    szv = float(np.real(v0.conj() @ sz @ v0)) / n
    return sx2, szv


# --- dataset presets ----------------------------------------------------------------

TROTTER_LEVELS = 3
LMG_SITES = 100
LMG_LEVELS = 5


def _two_branch_grid(inner: float, outer: float, per_branch: int) -> np.ndarray:
    """Evenly spaced points over [-outer,-inner] then [inner,outer]."""
    left = np.linspace(-outer, -inner, per_branch)
    right = np.linspace(inner, outer, per_branch)
    return np.concatenate([left, right])


def _offset_branch_grid(inner: float, outer: float, per_branch: int) -> np.ndarray:
    """Interior points of each branch, avoiding the training grid."""
    left = np.linspace(-outer, -inner, per_branch + 2)[1:-1]
    right = np.linspace(inner, outer, per_branch + 2)[1:-1]
    return np.concatenate([left, right])


def _trotter_splits(spec: SpinChainSpec, variant: str, inner: float,
                    outer: float) -> dict[str, Dataset]:
    train_dt = _two_branch_grid(inner, outer, 5)
    val_dt = _offset_branch_grid(inner, outer, 15)
    train_t = np.stack([trotter_energies(spec, variant, dt, TROTTER_LEVELS)
                        for dt in train_dt])
    val_t = np.stack([trotter_energies(spec, variant, dt, TROTTER_LEVELS)
                      for dt in val_dt])
    exact = chain_energies(spec, variant, TROTTER_LEVELS)
    return {
        "train": Dataset(train_dt, train_t, split="train"),
        "validation": Dataset(val_dt, val_t, split="validation"),
        "test": Dataset(np.array([0.0]), exact[None, :], split="test"),
    }


def _lmg_energy_table(c_values: np.ndarray) -> np.ndarray:
    return np.stack([lmg_energies(LMGSpec(LMG_SITES, c), LMG_LEVELS) for c in c_values])


def _lmg_observable_splits(which: str, gap: tuple[float, float]) -> dict[str, Dataset]:
    lo, hi = gap
    train_c = np.concatenate([np.linspace(0.0, lo, 10), np.linspace(hi, 1.0, 10)])
    val_c = np.concatenate([
        np.linspace(0.0, lo, 12)[1:-1],
        np.linspace(hi, 1.0, 12)[1:-1],
    ])
    test_c = np.linspace(0.0, 1.0, 100)

    def table(cs: np.ndarray) -> np.ndarray:
        pairs = [lmg_observables(LMGSpec(LMG_SITES, c)) for c in cs]
        column = 0 if which == "sx2" else 1
        return np.array([[p[column]] for p in pairs])

    return {
        "train": Dataset(train_c, table(train_c), split="train"),
        "validation": Dataset(val_c, table(val_c), split="validation"),
        "test": Dataset(test_c, table(test_c), split="test"),
    }


def make_dataset(preset: str, seed: int = 0) -> dict[str, Dataset]:
    """Training/validation/test splits for a named experiment preset.

    Grids follow the documented experiment layouts; all randomness (the
    chain's per-site field strengths) flows from `seed`.
    """
    if preset == "fig1_spin":
        n = 10
        train_c = np.linspace(-1.0, -0.2, 5)
        val_c = np.linspace(-1.0, 1.0, 101)
        test_c = np.linspace(0.0, 1.0, 51)

        def levels(cs):
            # Both extreme levels of the spectrum. Interpolating the pair at
            # the training points pins a 2x2 model to the exact closed form;
            # the lowest-level column alone admits spurious interpolants.
            return np.array([
                [noninteracting_spin_energy(n, c, 0),
                 noninteracting_spin_energy(n, c, n)]
                for c in cs
            ])

        return {
            "train": Dataset(train_c, levels(train_c), split="train"),
            "validation": Dataset(val_c, levels(val_c), split="validation"),
            "test": Dataset(test_c, levels(test_c), split="test"),
        }
    if preset == "fig2_aho":
        train_g = np.linspace(-0.01, 0.01, 10)
        val_g = np.linspace(-0.01, 0.01, 100)

        def table(gs):
            return np.stack([aho_energies(AHOSpec(100, g), 2) for g in gs])

        return {
            "train": Dataset(train_g, table(train_g), split="train"),
            "validation": Dataset(val_g, table(val_g), split="validation"),
            "test": Dataset(val_g, table(val_g), split="test"),
        }
    if preset == "fig3_trotter":
        spec = SpinChainSpec(8, b=1.0, j1=1.0, j2=0.5, seed=seed)
        return _trotter_splits(spec, "nnn", 0.15, 0.18)
    if preset == "s_trotter_dm":
        spec = SpinChainSpec(8, b=1.0, j1=1.0, dm=0.5, seed=seed)
        return _trotter_splits(spec, "dm", 0.10, 0.18)
    if preset in ("s_lmg_energies", "s_lmg_complex"):
        train_c = np.linspace(0.0, 1.0, 10)
        val_c = np.linspace(0.0, 1.0, 100)
        return {
            "train": Dataset(train_c, _lmg_energy_table(train_c), split="train"),
            "validation": Dataset(val_c, _lmg_energy_table(val_c), split="validation"),
            "test": Dataset(val_c, _lmg_energy_table(val_c), split="test"),
        }
    if preset == "s_lmg_obs_sx2":
        return _lmg_observable_splits("sx2", (0.4, 0.6))
    if preset == "s_lmg_obs_sz":
        return _lmg_observable_splits("sz", (0.4, 0.55))
    raise PresetError(f"unknown dataset preset {preset!r}")


def dataset_to_csv(dataset: Dataset, path, feature_names=None, target_names=None) -> None:
    """One example per row; header names every feature and target column."""
    n_feat = dataset.inputs.shape[1] if dataset.inputs.ndim == 2 else int(
        np.prod(dataset.inputs.shape[1:])
    )
    feats = dataset.inputs.reshape(dataset.size, n_feat)
    if feature_names is None:
        feature_names = [f"x{i}" for i in range(n_feat)]
    columns = [np.asarray(feats[:, i]) for i in range(n_feat)]
    header = list(feature_names)
    if dataset.targets is not None:
        n_t = dataset.targets.shape[1]
        if target_names is None:
            target_names = [f"y{i}" for i in range(n_t)]
        header += list(target_names)
        columns += [dataset.targets[:, i] for i in range(n_t)]
    body = np.column_stack(columns)
    np.savetxt(path, body, delimiter=",", header=",".join(header), comments="")


def export_splits(splits: dict[str, Dataset], base_path,
                  feature_names=None, target_names=None) -> list[str]:
    """Write .train/.val/.test CSVs next to `base_path`; returns the paths."""
    suffix = {"train": ".train", "validation": ".val", "test": ".test"}
    written = []
    for name, dataset in splits.items():
        path = f"{base_path}{suffix[name]}"
        dataset_to_csv(dataset, path, feature_names, target_names)
        written.append(path)
    return written


__all__ = [
    "SIGMA_X", "SIGMA_Y", "SIGMA_Z",
    "SpinChainSpec", "AHOSpec", "LMGSpec",
    "site_operator", "noninteracting_spin_energy",
    "noninteracting_spin_components", "noninteracting_spin_hamiltonian",
    "aho_hamiltonian", "aho_energies",
    "heisenberg_terms", "heisenberg_hamiltonian",
    "trotter_unitary", "trotter_energies", "chain_energies",
    "collective_spin_matrices", "lmg_hamiltonian", "lmg_energies",
    "lmg_complex_energies", "lmg_observables",
    "make_dataset", "dataset_to_csv", "export_splits",
    "CHAIN_VARIANTS", "TROTTER_LEVELS", "LMG_SITES", "LMG_LEVELS",
]
