"""End-to-end scored checks, one per headline capability.

Each test drives a full experiment (or the shared trained host) at the
documented protocol, asserts its gate, and prints a single summary line.
Budgets are wall-clock ceilings for this interpreter on one core; measured
values land in the printed line so reruns can be compared.
"""

import time

import numpy as np
import pytest

from pmm.baselines import spline_eval, spline_fit
from pmm.experiments import (
    _connected_region,
    _staged_train,
    _train_lmg_host,
    preset_config,
    run_experiment,
)
from pmm.gradients import fd_check
from pmm.hermitian import eigh, pack, unpack
from pmm.models import (
    OutputSelector,
    affine_eval_complex,
    affine_outputs,
    flat_params,
    observable_expectation,
    with_params,
)
from pmm.oracles import (
    SpinChainSpec,
    chain_energies,
    lmg_complex_energies,
    make_dataset,
    trotter_energies,
    trotter_unitary,
)
from pmm.training import (
    Dataset,
    LossSpec,
    eigen_mse_loss,
    init_model,
    joint_probabilities,
    kl_embedding_loss,
    observable_mse_loss,
)

COMPLEX_HERMITIAN = "complex-hermitian"
REAL_SYMMETRIC = "real-symmetric"
REAL_DIAGONAL = "real-diagonal"


def report(name, detail):
    print(f"ACCEPT {name}: PASS ({detail})")


@pytest.fixture(scope="module")
def lmg_host():
    """One collective-spin host model, trained once and shared by the
    energy, observable, and complex-plane checks. Training cost is charged
    to the energies budget below."""
    config = preset_config("s_lmg_energies", seeds=[0])
    started = time.time()
    model, hist, splits = _train_lmg_host(config, 0)
    return model, hist, splits, time.time() - started


def test_01_spin_extrapolation_beats_continuation(tmp_path):
    # 2x2 affine model trained on 5 points at c < 0 must reproduce the
    # closed-form ground energy to 1e-6 across c in [-1, 1] (best of 10
    # seeds) and beat the snapshot-continuation comparator on [0, 1]
    started = time.time()
    config = preset_config("fig1_spin", out_dir=str(tmp_path / "run"))
    manifest = run_experiment(config)
    best = next(row for row in manifest.per_seed_metrics
                if row["seed"] == manifest.best_seed)
    assert best["max_e0_err"] < 1e-6, best
    assert best["ec_strictly_worse"], best
    assert best["ec_max_err_pos"] > best["pmm_max_err_pos"], best
    elapsed = time.time() - started
    assert elapsed < 240.0
    report("spin extrapolation",
           f"max_e0_err={best['max_e0_err']:.2e} < 1e-6, "
           f"continuation err {best['ec_max_err_pos']:.2e} > "
           f"model err {best['pmm_max_err_pos']:.2e}; {elapsed:.0f}s")


def test_02_oscillator_beats_spline_with_ordered_levels(tmp_path):
    # 5x5 model on 10 quartic-well couplings: smaller max validation error
    # than the natural cubic spline, and lambda0 <= lambda1 everywhere
    started = time.time()
    config = preset_config("fig2_aho", seeds=[0], out_dir=str(tmp_path / "run"))
    manifest = run_experiment(config)
    best = manifest.per_seed_metrics[0]
    assert best["pmm_max_abs_err"] < best["spline_max_abs_err"], best
    assert best["ordering_ok"], best
    elapsed = time.time() - started
    assert elapsed < 60.0
    report("quartic oscillator",
           f"model {best['pmm_max_abs_err']:.3f} < spline "
           f"{best['spline_max_abs_err']:.3f}, ordering ok; {elapsed:.0f}s")


def test_03_trotter_extrapolation_beats_polynomial(tmp_path):
    # 10x10 unitary-product model trained on step sizes away from zero:
    # better E1/E2 relative error at dt=0 than per-branch polynomials, with
    # an avoided crossing (positive minimum gap) where the polynomials cross
    started = time.time()
    config = preset_config("fig3_trotter", seeds=[0],
                           out_dir=str(tmp_path / "run"))
    manifest = run_experiment(config)
    best = manifest.per_seed_metrics[0]
    assert best["pmm_rel_err_1"] < best["poly_rel_err_1"], best
    assert best["pmm_rel_err_2"] < best["poly_rel_err_2"], best
    assert best["pmm_min_gap"] > 0.0, best
    assert best["poly_crossing"], best
    elapsed = time.time() - started
    assert elapsed < 600.0
    report("trotter extrapolation",
           f"E1 {best['pmm_rel_err_1']:.2e} < {best['poly_rel_err_1']:.2e}, "
           f"E2 {best['pmm_rel_err_2']:.2e} < {best['poly_rel_err_2']:.2e}, "
           f"min gap {best['pmm_min_gap']:.3f} > 0, poly crosses; "
           f"{elapsed:.0f}s")


def test_04_antisymmetric_chain_improvement_factor(tmp_path):
    # antisymmetric-coupling variant with 5x5 factors: mean relative error
    # at dt=0 at least 3x below the polynomial baseline
    started = time.time()
    config = preset_config("s_trotter_dm", seeds=[0],
                           out_dir=str(tmp_path / "run"))
    manifest = run_experiment(config)
    best = manifest.per_seed_metrics[0]
    assert best["improvement_factor"] >= 3.0, best
    elapsed = time.time() - started
    assert elapsed < 300.0
    report("antisymmetric chain",
           f"improvement factor {best['improvement_factor']:.1f}x >= 3x; "
           f"{elapsed:.0f}s")


def test_05_tensor_network_parameter_counts(tmp_path):
    # 28x28 pixel grid with n=8, d=6, D=12: exactly 9224 stored trainable
    # parameters versus 28232 in the expanded per-pixel representation
    started = time.time()
    config = preset_config("s_tn_counts", out_dir=str(tmp_path / "run"))
    manifest = run_experiment(config)
    row = manifest.per_seed_metrics[0]
    assert row["stored_param_count"] == 9224, row
    assert row["expanded_param_count"] == 28232, row
    elapsed = time.time() - started
    assert elapsed < 5.0
    report("tensor-network counts",
           f"stored 9224, expanded 28232, exact; {elapsed:.1f}s")


def test_06_collective_spin_energies_and_observables(lmg_host):
    # 15x15 model on the 5 lowest collective-spin levels: validation grid
    # max relative error < 1e-2; observables fit with the host frozen beat
    # the spline across each withheld transition window
    host, hist, splits, host_seconds = lmg_host
    started = time.time()
    val = splits["validation"]
    preds = np.array([affine_outputs(host, row) for row in val.inputs])
    rel = np.abs((preds - val.targets)
                 / np.maximum(np.abs(val.targets), 1e-12))
    max_rel = float(rel.max())
    assert max_rel < 1e-2, max_rel

    obs_config = preset_config("s_lmg_observables", seeds=[0])
    obs_optimizer = {"stages": obs_config.optimizer["observable_stages"],
                     "batch_size": None}
    details = []
    sx2_loss = None
    for short, key, window in (("sx2", "s_lmg_obs_sx2", (0.4, 0.6)),
                               ("sz", "s_lmg_obs_sz", (0.4, 0.55))):
        osp = make_dataset(key)
        otr, oval, otest = osp["train"], osp["validation"], osp["test"]
        obs = init_model("observable", (host.dim,), seed=0, scale=0.1)
        obs, ohist = _staged_train(obs, otr, oval,
                                   LossSpec("observable_mse", host=host),
                                   obs_optimizer, 0)
        cgrid = otest.inputs.ravel()
        inside = (cgrid > window[0]) & (cgrid < window[1])
        truth = otest.targets[:, 0]
        pmm = np.array([observable_expectation(host, obs, np.array([c]))
                        for c in cgrid])
        sp_pred = spline_eval(spline_fit(otr.inputs.ravel(), otr.targets[:, 0]),
                              cgrid)
        pmm_err = float(np.abs(pmm[inside] - truth[inside]).max())
        sp_err = float(np.abs(sp_pred[inside] - truth[inside]).max())
        assert pmm_err < sp_err, (short, pmm_err, sp_err)
        if short == "sx2":
            sx2_loss = float(ohist[-1][1])
        details.append(f"{short} {pmm_err:.2e} < spline {sp_err:.2e}")
    # reference-run convergence mark for the fixed-seed sx2 fit
    assert sx2_loss < 1e-6, sx2_loss

    elapsed = host_seconds + (time.time() - started)
    # ~300s on a quiet core (host ~120s); ceiling leaves room for contention
    assert elapsed < 600.0
    report("collective-spin energies+observables",
           f"max rel err {max_rel:.2e} < 1e-2, " + ", ".join(details)
           + f", sx2 loss {sx2_loss:.1e} < 1e-6; {elapsed:.0f}s incl. host")


def test_07_complex_plane_extrapolation_region(lmg_host):
    # the real-trained host, evaluated off-axis, must show a connected
    # region touching the real-axis training interval where the relative
    # ground-energy error stays below the 1e-3 contour
    host, _, _, _ = lmg_host
    started = time.time()
    re = np.linspace(0.0, 1.0, 81)
    im = np.linspace(-0.25, 0.25, 41)
    exact = np.empty((im.size, re.size), dtype=np.complex128)
    pred = np.empty_like(exact)
    for a, y in enumerate(im):
        for b, x in enumerate(re):
            exact[a, b] = lmg_complex_energies(100, complex(x, y))[0]
            pred[a, b] = affine_eval_complex(host, np.array([complex(x, y)]))[0]
    rel = np.abs(pred - exact) / np.maximum(np.abs(exact), 1e-12)
    good = rel < 1e-3
    axis_row = int(np.argmin(np.abs(im)))
    on_axis = int(good[axis_row].sum())
    connected = _connected_region(good, axis_row)
    assert on_axis > 0, "no sub-contour cells on the real axis"
    assert connected > on_axis, (connected, on_axis)
    elapsed = time.time() - started
    assert elapsed < 120.0
    report("complex-plane extrapolation",
           f"{connected} connected cells below the 1e-3 contour "
           f"({on_axis} on the real axis, grid 81x41); {elapsed:.0f}s")


def test_08_embedding_kl_drop_and_knn(tmp_path):
    # spectral embedding of the bundled digit corpus: KL loss falls by at
    # least half from initialization and the 1-NN test error lands strictly
    # below the 2-component PCA baseline on the same split
    started = time.time()
    config = preset_config("fig4_mnist", out_dir=str(tmp_path / "run"))
    manifest = run_experiment(config)
    best = manifest.per_seed_metrics[0]
    assert best["kl_drop"] >= 0.50, best
    assert best["knn_err_percent"] < best["pca_knn_err_percent"], best
    elapsed = time.time() - started
    assert elapsed < 3600.0
    report("embedding",
           f"KL {best['kl_init']:.3f} -> {best['kl_final']:.3f} "
           f"({100 * best['kl_drop']:.0f}% drop >= 50%), 1-NN "
           f"{best['knn_err_percent']:.1f}% < PCA "
           f"{best['pca_knn_err_percent']:.1f}%; {elapsed:.0f}s")


def test_09_numerical_hygiene():
    # gradient paths against central differences at their stated
    # thresholds over 20 seeds, structural invariants, and product-formula
    # convergence under step halving
    started = time.time()

    def sweep(builder, threshold, label):
        worst = 0.0
        for seed in range(20):
            loss, params = builder(seed)
            worst = max(worst, fd_check(loss, params))
        assert worst < threshold, (label, worst, threshold)
        return worst

    def affine_builder(mode):
        def build(seed):
            rng = np.random.default_rng(100 + seed)
            model = init_model("affine", (4, 2), seed=seed, scale=0.5,
                               mode=mode,
                               selector=OutputSelector.lowest_k(2))
            ds = Dataset(inputs=rng.normal(size=(4, 2)),
                         targets=rng.normal(size=(4, 2)))
            return (lambda p: eigen_mse_loss(with_params(model, p), ds),
                    flat_params(model))
        return build

    def unitary_builder(seed):
        rng = np.random.default_rng(200 + seed)
        model = init_model("unitary_product", (4, 2), seed=seed, scale=0.4,
                           n_levels=2)
        ds = Dataset(inputs=rng.uniform(0.1, 0.2, size=4)[:, None],
                     targets=rng.normal(size=(4, 2)))
        return (lambda p: eigen_mse_loss(with_params(model, p), ds),
                flat_params(model))

    def observable_builder(seed):
        rng = np.random.default_rng(300 + seed)
        host = init_model("affine", (4, 1), seed=seed, scale=0.5,
                          mode=COMPLEX_HERMITIAN,
                          selector=OutputSelector.lowest_k(1))
        obs = init_model("observable", (4,), seed=seed + 50, scale=0.5)
        ds = Dataset(inputs=rng.normal(size=(5, 1)),
                     targets=rng.normal(size=(5, 1)))

        def loss(p):
            value, grad, _ = observable_mse_loss(host, with_params(obs, p), ds)
            return value, grad

        return loss, flat_params(obs)

    def kl_builder(seed):
        rng = np.random.default_rng(400 + seed)
        model = init_model("tensor_network", (2, 2, 4, 2, 2), seed=seed,
                           scale=0.4, entry_mode=REAL_SYMMETRIC)
        images = rng.uniform(size=(8, 2, 2))
        P = joint_probabilities(images, 4.0)
        return (lambda p: kl_embedding_loss(with_params(model, p), images,
                                            4.0, P),
                flat_params(model))

    grad_worst = max(
        sweep(affine_builder(COMPLEX_HERMITIAN), 1e-6, "affine complex"),
        sweep(affine_builder(REAL_SYMMETRIC), 1e-6, "affine real-symmetric"),
        sweep(affine_builder(REAL_DIAGONAL), 1e-6, "affine diagonal"),
        sweep(unitary_builder, 1e-6, "unitary product"),
    )
    obs_worst = sweep(observable_builder, 1e-5, "observable")
    kl_worst = sweep(kl_builder, 1e-4, "embedding")

    # structural invariants: packed storage stays Hermitian, product
    # unitaries stay unitary, neighbor probabilities stay normalized,
    # eigenvector frames stay orthonormal
    for seed in range(20):
        rng = np.random.default_rng(500 + seed)
        raw = rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5))
        herm = raw + raw.conj().T
        assert np.allclose(unpack(pack(herm, COMPLEX_HERMITIAN)), herm,
                           atol=1e-12)
        decomp = eigh(herm)
        V = decomp.eigenvectors
        assert np.allclose(V.conj().T @ V, np.eye(5), atol=1e-12)
        assert np.all(np.diff(decomp.eigenvalues) >= 0)
        images = rng.uniform(size=(9, 2, 2))
        P = joint_probabilities(images, 4.0)
        assert np.allclose(P, P.T, atol=1e-15)
        assert P.min() >= 0.0
        assert abs(P.sum() - 1.0) < 1e-9
    for variant, spec in (("nnn", SpinChainSpec(6, b=1.0, j1=1.0, j2=0.5,
                                                seed=3)),
                          ("dm", SpinChainSpec(6, b=1.0, j1=1.0, dm=0.5,
                                               seed=3))):
        U = trotter_unitary(spec, variant, 0.05)
        assert np.allclose(U.conj().T @ U, np.eye(U.shape[0]), atol=1e-12)

    # step-halving convergence of the product-formula oracle: the complex
    # (antisymmetric-coupling) chain is first order with ratio near 1/2;
    # the real chain's reality symmetry cancels the first-order term for
    # isolated levels, so its measured ratio sits near 1/4 (second order,
    # i.e. at least first-order convergence) and is recorded here
    dm_spec = SpinChainSpec(8, b=1.0, j1=1.0, dm=0.5, seed=0)
    exact = chain_energies(dm_spec, "dm", 3)
    ratio_dm = (trotter_energies(dm_spec, "dm", 5e-3, 3) - exact) / (
        trotter_energies(dm_spec, "dm", 1e-2, 3) - exact)
    assert np.all((0.4 < ratio_dm) & (ratio_dm < 0.6)), ratio_dm
    nnn_spec = SpinChainSpec(8, b=1.0, j1=1.0, j2=0.5, seed=0)
    exact = chain_energies(nnn_spec, "nnn", 3)
    ratio_nnn = (trotter_energies(nnn_spec, "nnn", 5e-3, 3) - exact) / (
        trotter_energies(nnn_spec, "nnn", 1e-2, 3) - exact)
    assert np.all((0.2 < ratio_nnn) & (ratio_nnn < 0.6)), ratio_nnn

    elapsed = time.time() - started
    assert elapsed < 120.0
    report("numerical hygiene",
           f"gradients fd<{grad_worst:.1e} (obs {obs_worst:.1e}, "
           f"kl {kl_worst:.1e}), invariants hold, halving ratio "
           f"dm {np.round(ratio_dm, 2)} in [0.4,0.6], "
           f"real-chain {np.round(ratio_nnn, 2)} recorded; {elapsed:.0f}s")
