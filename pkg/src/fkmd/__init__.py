"""Featurized Koopman mode decomposition.

Forecasting of nonlinear dynamical systems from time-embedded observations,
with Gaussian-kernel or random Fourier features scaled by an iteratively
learned Mahalanobis metric.
"""

from .embed import EmbeddedDataset, embed, embedding_of_prefix
from .featurize import (
    FourierFeatures,
    KernelFeatures,
    MahalanobisMatrix,
    feature_gradients,
    feature_matrix,
    kernel_eval,
    psd_sqrt,
    rff_gram_estimate,
)
from .koopman import (
    KoopmanModel,
    ModeFilter,
    ObservationMap,
    apply_filter,
    eigenfunctions,
    fit,
    predict,
    predict_rollout,
)
from .lorenz96 import Lorenz96Params, default_initial, rhs, simulate
from .mahalanobis import (
    BandwidthState,
    JEstimate,
    assemble_metric,
    channel_block_norms,
    compute_J_batch,
    compute_J_modal,
    curvature_constancy,
    estimate_sigma,
    regularize_metric,
    rescale_metric,
)
from .pipeline import FKMDConfig, IterationReport, ordinary_kmd, run
from .tseries import TimeSeries, augment_noise, load_csv, save_csv

__version__ = "0.1.0"

__all__ = [
    "BandwidthState",
    "EmbeddedDataset",
    "FKMDConfig",
    "FourierFeatures",
    "IterationReport",
    "JEstimate",
    "KernelFeatures",
    "KoopmanModel",
    "Lorenz96Params",
    "MahalanobisMatrix",
    "ModeFilter",
    "ObservationMap",
    "TimeSeries",
    "apply_filter",
    "assemble_metric",
    "augment_noise",
    "channel_block_norms",
    "compute_J_batch",
    "compute_J_modal",
    "curvature_constancy",
    "default_initial",
    "eigenfunctions",
    "embed",
    "embedding_of_prefix",
    "estimate_sigma",
    "feature_gradients",
    "feature_matrix",
    "fit",
    "kernel_eval",
    "load_csv",
    "ordinary_kmd",
    "predict",
    "predict_rollout",
    "psd_sqrt",
    "regularize_metric",
    "rescale_metric",
    "rff_gram_estimate",
    "rhs",
    "run",
    "save_csv",
    "simulate",
    "__version__",
]
