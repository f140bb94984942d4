"""Parametric matrix models: learnable Hermitian matrix families whose
eigenvalues, eigenphases, and ground-state expectations are fit to data,
plus the exact physics oracles, baselines, and experiment presets used to
exercise them.
"""

from ._version import __version__
from .baselines import (
    ECReducedModel,
    PCAModel,
    SplineModel,
    branch_extrapolate,
    ec_build,
    ec_energy,
    error_report,
    knn_error,
    pca_fit,
    pca_transform,
    polyeval,
    polyfit,
    spline_eval,
    spline_fit,
)
from .experiments import (
    ExperimentConfig,
    RunManifest,
    config_from_json,
    config_hash,
    emit_curves,
    ingest_images,
    list_presets,
    load_bundled_digits,
    load_config,
    preset_config,
    run_experiment,
)
from .errors import (
    ConfigError,
    DatasetError,
    DegenerateLevelError,
    EigenConvergenceError,
    HermiticityError,
    ImageFormatError,
    ModeMismatchError,
    NonUnitaryError,
    PackedLengthError,
    PhaseWrapWarning,
    PmmError,
    PresetError,
    TrainingDivergedError,
)
from .gradients import (
    eigenvalue_grad,
    expm_frechet,
    fd_check,
    groundstate_expectation_grad,
    packed_readout,
    unitary_phase_grad,
)
from .hermitian import (
    COMPLEX_HERMITIAN,
    MODES,
    REAL_DIAGONAL,
    REAL_SYMMETRIC,
    EigenDecomposition,
    PackedParams,
    eig_general,
    eigenphases,
    eigh,
    expm_hermitian,
    pack,
    packed_length,
    sort_complex,
    unpack,
)
from .models import (
    AffinePMM,
    ObservableModel,
    OutputSelector,
    TensorNetworkPMM,
    UnitaryProductPMM,
    affine_eval,
    affine_eval_complex,
    affine_outputs,
    flat_params,
    load_model,
    model_from_dict,
    model_to_dict,
    observable_expectation,
    param_count,
    save_model,
    tn_affine_outputs,
    tn_expand,
    tn_to_affine,
    unitary_product_energies,
    unitary_product_eval,
    with_params,
)
from .oracles import (
    AHOSpec,
    LMGSpec,
    SpinChainSpec,
    aho_hamiltonian,
    heisenberg_hamiltonian,
    lmg_hamiltonian,
    lmg_observables,
    make_dataset,
    noninteracting_spin_energy,
    trotter_energies,
    trotter_unitary,
)
from .training import (
    Dataset,
    LossSpec,
    OptimizerConfig,
    TrainState,
    eigen_mse_loss,
    init_model,
    joint_probabilities,
    kl_embedding_loss,
    observable_mse_loss,
    perplexity_search,
    train,
)
