"""Matrix-free spectral density estimation for large symmetric operators,
with a numpy neural-net module exposing the loss Hessian and its
outer-product/functional split for curvature analysis."""

__version__ = "0.1.0"

from .data import LabeledDataset
from .deflation import TopSpectrum, low_rank_deflation, subspace_iteration
from .errors import (
    AsymmetricInputError,
    ConvergenceError,
    DegenerateSpectrumError,
    DimensionMismatchError,
    InputFormatError,
    NumericalError,
    RankDeficiencyError,
    SpecdensError,
    TrainingDivergedError,
    UsageError,
)
from .lanczos import (
    RitzSummary,
    SpectralDensity,
    approx_log_spectrum,
    approx_spectrum,
    density_from_eigenvalues,
    estimate_range,
    fast_lanczos,
    sigma_for,
    slow_lanczos,
    tv_distance,
)
from .linalg import (
    EigenPairs,
    TridiagonalMatrix,
    dense_eig,
    eig_tridiagonal,
    householder_tridiagonalize,
    qr_orthonormalize,
)
from .net import (
    Checkpoint,
    MlpSpec,
    error_rate,
    gnvp,
    gradient,
    hessian_operator,
    hvp,
    hvp_h,
    init_params,
    load_checkpoint,
    loss,
    save_checkpoint,
)
from .operators import (
    NormalizationMap,
    SymmetricOperator,
    affine_operator,
    deflated_operator,
    dense_operator,
    difference_operator,
    sum_operator,
    symmetry_defect,
)
from .pipeline import (
    EpochMetrics,
    GmmSpec,
    TrainConfig,
    TrainResult,
    gaussian_mixture,
    load_idx,
    train_sgd,
)
from .rmt import (
    EnsembleSpec,
    PowerLawFit,
    default_ensemble,
    fit_power_law,
    mp_density,
    mp_support,
    mp_zero_mass,
    sample,
    semicircle_density,
)
from .decomp import (
    ClusterStats,
    GaussNewtonParts,
    PerExampleVectors,
    StreamingSource,
    build_decomposition,
    cluster_statistics,
    component_attribution,
    gauss_newton_parts,
    identity_residual,
    per_example_vectors,
    streaming_cluster_statistics,
    validate_report,
)
