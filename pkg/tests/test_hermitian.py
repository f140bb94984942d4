"""Packed Hermitian parameterizations and spectral primitives."""

import numpy as np
import pytest
import scipy.linalg

from pmm.errors import (
    EigenConvergenceError,
    HermiticityError,
    ModeMismatchError,
    NonUnitaryError,
    PackedLengthError,
    PhaseWrapWarning,
)
from pmm.hermitian import (
    COMPLEX_HERMITIAN,
    MODES,
    REAL_DIAGONAL,
    REAL_SYMMETRIC,
    PackedParams,
    eig_general,
    eigenphases,
    eigh,
    expm_hermitian,
    pack,
    packed_length,
    sort_complex,
    unpack,
    unpack_batch,
)


def random_hermitian(rng, dim, mode):
    if mode == COMPLEX_HERMITIAN:
        raw = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
        return (raw + raw.conj().T) / 2
    if mode == REAL_SYMMETRIC:
        raw = rng.normal(size=(dim, dim))
        return (raw + raw.T) / 2
    return np.diag(rng.normal(size=dim))


def test_packed_lengths():
    assert packed_length(3, COMPLEX_HERMITIAN) == 9
    assert packed_length(3, REAL_SYMMETRIC) == 6
    assert packed_length(3, REAL_DIAGONAL) == 3
    assert packed_length(1, COMPLEX_HERMITIAN) == 1
    with pytest.raises(ValueError):
        packed_length(3, "banana")


def test_pack_layout_diagonal_first():
    # sigma_x has zero diagonal and a single unit off-diagonal entry
    sigma_x = np.array([[0.0, 1.0], [1.0, 0.0]])
    packed = pack(sigma_x, REAL_SYMMETRIC)
    assert packed.values.tolist() == [0.0, 0.0, 1.0]

    # upper triangle is walked row-major after the diagonal block
    m = np.array([[1.0, 4.0, 5.0], [4.0, 2.0, 6.0], [5.0, 6.0, 3.0]])
    assert pack(m, REAL_SYMMETRIC).values.tolist() == [1, 2, 3, 4, 5, 6]


def test_pack_complex_interleaves_re_im():
    m = np.array([[2.0, 3.0 + 4.0j], [3.0 - 4.0j, 7.0]])
    packed = pack(m, COMPLEX_HERMITIAN)
    assert packed.values.tolist() == [2.0, 7.0, 3.0, 4.0]


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("dim", [1, 2, 5])
def test_pack_unpack_roundtrip(mode, dim):
    rng = np.random.default_rng(7 * dim)
    m = random_hermitian(rng, dim, mode)
    packed = pack(m, mode)
    assert packed.values.shape == (packed_length(dim, mode),)
    assert np.allclose(unpack(packed), m)


def test_pack_rejects_non_hermitian():
    with pytest.raises(HermiticityError):
        pack(np.array([[0.0, 1.0], [0.0, 0.0]]), COMPLEX_HERMITIAN)


def test_pack_rejects_mode_mismatch():
    complex_h = np.array([[1.0, 1.0j], [-1.0j, 2.0]])
    with pytest.raises(ModeMismatchError):
        pack(complex_h, REAL_SYMMETRIC)
    non_diag = np.array([[1.0, 0.5], [0.5, 2.0]])
    with pytest.raises(ModeMismatchError):
        pack(non_diag, REAL_DIAGONAL)


def test_packed_params_length_validation():
    with pytest.raises(PackedLengthError):
        PackedParams(3, REAL_SYMMETRIC, np.zeros(5))


def test_unpack_batch_matches_unpack():
    rng = np.random.default_rng(11)
    rows = rng.normal(size=(4, packed_length(3, COMPLEX_HERMITIAN)))
    batch = unpack_batch(rows, 3, COMPLEX_HERMITIAN)
    for i in range(4):
        single = unpack(PackedParams(3, COMPLEX_HERMITIAN, rows[i]))
        assert np.allclose(batch[i], single)


def test_eigh_matches_numpy_and_orders_ascending():
    rng = np.random.default_rng(3)
    m = random_hermitian(rng, 6, COMPLEX_HERMITIAN)
    decomp = eigh(m)
    assert np.all(np.diff(decomp.eigenvalues) >= 0)
    assert np.allclose(decomp.eigenvalues, np.linalg.eigvalsh(m))
    recon = (decomp.eigenvectors * decomp.eigenvalues) @ decomp.eigenvectors.conj().T
    assert np.allclose(recon, m)


def test_eigh_phase_convention_is_deterministic():
    rng = np.random.default_rng(5)
    m = random_hermitian(rng, 4, COMPLEX_HERMITIAN)
    v1 = eigh(m).eigenvectors
    v2 = eigh(m * 1.0).eigenvectors
    assert np.array_equal(v1, v2)
    anchors = np.argmax(np.abs(v1), axis=0)
    pivots = v1[anchors, np.arange(4)]
    assert np.allclose(pivots.imag, 0.0)
    assert np.all(pivots.real > 0)


def test_eigh_rejects_non_hermitian():
    with pytest.raises(HermiticityError):
        eigh(np.array([[0.0, 1.0], [2.0, 0.0]]))


def test_sort_complex_orders_by_real_then_imag():
    values = np.array([1 + 2j, -1 + 0j, 1 - 2j, 0 + 0j])
    ordered = sort_complex(values)
    assert np.allclose(ordered, [-1 + 0j, 0 + 0j, 1 - 2j, 1 + 2j])


def test_eig_general_agrees_with_eigh_on_hermitian_input():
    rng = np.random.default_rng(9)
    m = random_hermitian(rng, 5, COMPLEX_HERMITIAN)
    general = eig_general(m)
    assert np.allclose(general.imag, 0.0, atol=1e-10)
    assert np.allclose(np.sort(general.real), eigh(m).eigenvalues)


def test_eig_general_rejects_non_square():
    with pytest.raises(ValueError):
        eig_general(np.zeros((2, 3)))


def test_expm_hermitian_matches_scipy():
    rng = np.random.default_rng(13)
    m = random_hermitian(rng, 5, COMPLEX_HERMITIAN)
    for t in (0.0, 0.3, -1.7):
        ours = expm_hermitian(m, t)
        reference = scipy.linalg.expm(-1j * m * t)
        assert np.allclose(ours, reference, atol=1e-12)
    u = expm_hermitian(m, 0.8)
    assert np.allclose(u @ u.conj().T, np.eye(5), atol=1e-12)


def test_eigenphases_recover_spectrum():
    rng = np.random.default_rng(17)
    m = random_hermitian(rng, 4, COMPLEX_HERMITIAN)
    dt = 0.05
    energies = eigenphases(expm_hermitian(m, dt), dt)
    assert np.allclose(energies, np.linalg.eigvalsh(m), atol=1e-10)


def test_eigenphases_zero_dt_rejected():
    with pytest.raises(ValueError):
        eigenphases(np.eye(2), 0.0)


def test_eigenphases_warn_near_branch_cut():
    # one level at 0.95 pi / dt sits inside the warning band
    dt = 0.1
    m = np.diag([0.95 * np.pi / dt, 0.0])
    with pytest.warns(PhaseWrapWarning):
        eigenphases(expm_hermitian(m, dt), dt)


def test_eigenphases_reject_non_unitary():
    with pytest.raises(NonUnitaryError):
        eigenphases(np.diag([2.0, 1.0]), 0.1)
