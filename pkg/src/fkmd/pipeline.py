"""Iterative driver: bandwidth, features, regression, forecast, metric update.

Each iteration starts from the current metric M (identity at first), rescales
it by the pairwise-distance spread of the transformed subsample, builds the
feature matrices in row blocks, fits the transfer and observation matrices,
emits a forecast from the end of the training window, and finally reassembles
M from the modal sensitivity matrices over the subsample. The single-pass
variant (``ordinary_kmd``) skips the metric update, which reduces iteration 1
to plain Gaussian-kernel mode decomposition.
"""

import time
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .embed import embed, embedding_of_prefix
from .errors import IterationError
from .featurize import (
    FourierFeatures,
    KernelFeatures,
    MahalanobisMatrix,
    feature_matrix,
)
from .koopman import (
    ModeFilter,
    ObservationMap,
    apply_filter,
    fit_normal_equations,
    predict,
    predict_rollout,
)
from .mahalanobis import (
    J_SOURCES,
    JEstimate,
    assemble_metric,
    compute_J_batch,
    curvature_constancy,
    estimate_sigma,
    regularize_metric,
    rescale_metric,
)

FEATURE_KINDS = ("kernel", "rff")
PREDICTION_SCHEMES = ("spectral", "rollout")


@dataclass(frozen=True)
class FKMDConfig:
    """Knobs of one driver run; see the field comments for semantics."""

    ell: int                                 # embedding length
    feature_kind: str = "kernel"             # "kernel" (R = N) or "rff"
    n_features: int = 0                      # R for rff features; ignored for kernel
    h: float = 1.0                           # bandwidth factor
    iterations: int = 1
    ridge: float = None                      # None -> 1e-8 tr(Psi* Psi)/R
    metric_delta: float = 0.0                # diagonal shift after each update
    subsample: int = 5000                    # rows used for sigma and the update
    metric_mode_filter: ModeFilter = ModeFilter(top_k=20)
    predict_mode_filter: ModeFilter = ModeFilter()
    seed: int = 0
    observation: ObservationMap = ObservationMap.identity()
    prediction_steps: int = 100
    prediction_scheme: str = "spectral"      # "spectral" or "rollout"
    j_source: str = "modal"                  # "modal", "finite_difference", "full_state"
    rff_redraw: bool = True                  # fresh frequencies every iteration
    block_rows: int = 1024                   # feature-assembly tile height

    def __post_init__(self):
        if self.ell < 1:
            raise ValueError(f"ell must be >= 1, got {self.ell}")
        if self.feature_kind not in FEATURE_KINDS:
            raise ValueError(f"feature_kind must be one of {FEATURE_KINDS}")
        if self.feature_kind == "rff" and self.n_features < 1:
            raise ValueError("rff features need n_features >= 1")
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError(f"ridge must be >= 0, got {self.ridge}")
        if self.metric_delta < 0:
            raise ValueError(f"metric_delta must be >= 0, got {self.metric_delta}")
        if self.subsample < 2:
            raise ValueError(f"subsample must be >= 2, got {self.subsample}")
        if self.prediction_steps < 1:
            raise ValueError(f"prediction_steps must be >= 1, got {self.prediction_steps}")
        if self.prediction_scheme not in PREDICTION_SCHEMES:
            raise ValueError(f"prediction_scheme must be one of {PREDICTION_SCHEMES}")
        if self.j_source not in J_SOURCES:
            raise ValueError(f"j_source must be one of {J_SOURCES}")
        if self.block_rows < 1:
            raise ValueError(f"block_rows must be >= 1, got {self.block_rows}")


@dataclass
class IterationReport:
    """Everything one iteration produced, minus the (large) model itself."""

    iteration: int
    sigma: float
    ridge: float
    residual: float
    eigenvalues: np.ndarray          # mu_m
    log_eigenvalues: np.ndarray      # lambda_m = log(mu_m)/lag
    mode_norms: np.ndarray
    forecast: np.ndarray             # (steps, L), real
    metric: MahalanobisMatrix        # metric the features used (post-rescale)
    metric_updated: MahalanobisMatrix  # metric after the update step; None if skipped
    retained_predict: int
    retained_metric: int             # None if the update was skipped
    constancy_deviation: float       # None if the update was skipped
    timings: dict

    def eigenvalue_table(self):
        """(R, 6) array: index, Re mu, Im mu, Re lambda, Im lambda, |v_m|."""
        r = self.eigenvalues.shape[0]
        table = np.empty((r, 6))
        table[:, 0] = np.arange(r)
        table[:, 1] = self.eigenvalues.real
        table[:, 2] = self.eigenvalues.imag
        table[:, 3] = self.log_eigenvalues.real
        table[:, 4] = self.log_eigenvalues.imag
        table[:, 5] = self.mode_norms
        return table


def _subseed(seed, namespace, index=0):
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(namespace, index))
    return int(ss.generate_state(1, np.uint64)[0])


def _build_features(config, dataset, metric, iteration):
    if config.feature_kind == "kernel":
        if config.n_features:
            warnings.warn(
                "n_features is ignored for kernel features (R = N)", RuntimeWarning
            )
        return KernelFeatures(centers=dataset.X, metric=metric)
    draw_index = iteration if config.rff_redraw else 1
    return FourierFeatures.draw(
        config.n_features, metric, _subseed(config.seed, 1, draw_index)
    )


def accumulate_normal_blocks(features, dataset, observation, block_rows):
    """Gram-space accumulation of Psi_x*Psi_x, Psi_x*Psi_y, Psi_x*G, |Psi_y|^2.

    Walks the embedded windows in row tiles so the N x R feature matrices are
    never materialized; each tile of W+1 consecutive windows yields both the
    inputs (first W rows) and the shifted outputs (last W rows).
    """
    r = features.n_features
    dtype = np.complex128 if features.is_complex else np.float64
    gram = np.zeros((r, r), dtype)
    cross = np.zeros((r, r), dtype)
    n_out = observation.n_outputs(dataset.dim)
    obs_proj = np.zeros((r, n_out), dtype)
    y_sq = 0.0
    n = dataset.n_samples
    for lo in range(0, n, block_rows):
        hi = min(lo + block_rows, n)
        windows = dataset.window_rows(lo, hi + 1)
        psi = feature_matrix(features, windows)
        px = psi[:-1]
        py = psi[1:]
        gram += px.conj().T @ px
        cross += px.conj().T @ py
        obs_proj += px.conj().T @ observation(windows[:-1]).astype(dtype, copy=False)
        y_sq += float(np.sum(np.abs(py) ** 2))
    gram = (gram + gram.conj().T) / 2.0
    return gram, cross, obs_proj, y_sq


def _forecast(config, model, features, seed_state):
    if config.prediction_scheme == "rollout":
        return predict_rollout(
            model, features, seed_state, config.prediction_steps,
            config.predict_mode_filter,
        )
    return predict(
        model, features, seed_state, config.prediction_steps,
        config.predict_mode_filter,
    )


def _run(config, series, update_metric, on_report=None):
    config.observation.validate(config.ell * series.n_channels)
    dataset = embed(series, config.ell)
    seed_state = embedding_of_prefix(series, config.ell, series.n_samples)

    rng = np.random.default_rng(_subseed(config.seed, 0))
    k = min(config.subsample, dataset.n_samples)
    if k < dataset.n_samples:
        sub_idx = np.sort(rng.choice(dataset.n_samples, size=k, replace=False))
    else:
        sub_idx = np.arange(dataset.n_samples)
    x_sub = dataset.x_take(sub_idx)

    metric = MahalanobisMatrix.identity(dataset.dim)
    reports = []
    iteration = 0
    step = "setup"
    try:
        for iteration in range(1, config.iterations + 1):
            timings = {}
            t_iter = time.perf_counter()

            step = "bandwidth"
            t0 = time.perf_counter()
            sigma = estimate_sigma(x_sub, metric, subsample=k, seed=0)
            metric = rescale_metric(metric, config.h, sigma)
            timings["bandwidth"] = time.perf_counter() - t0

            step = "features"
            t0 = time.perf_counter()
            features = _build_features(config, dataset, metric, iteration)
            gram, cross, obs_proj, y_sq = accumulate_normal_blocks(
                features, dataset, config.observation, config.block_rows
            )
            timings["features"] = time.perf_counter() - t0

            step = "regression"
            t0 = time.perf_counter()
            model = fit_normal_equations(
                gram, cross, obs_proj, y_sq,
                ridge=config.ridge, lag=series.lag,
            )
            timings["regression"] = time.perf_counter() - t0

            step = "prediction"
            t0 = time.perf_counter()
            forecast = _forecast(config, model, features, seed_state)
            retained_predict = apply_filter(model, config.predict_mode_filter).size
            timings["prediction"] = time.perf_counter() - t0

            retained_metric = None
            constancy = None
            metric_updated = None
            if update_metric:
                step = "metric_update"
                t0 = time.perf_counter()
                retained_metric = apply_filter(model, config.metric_mode_filter).size
                j_stack = compute_J_batch(
                    model, features, x_sub,
                    config.metric_mode_filter, source=config.j_source,
                )
                estimate = JEstimate(J_values=j_stack, source=config.j_source)
                raw_metric = assemble_metric(estimate)
                constancy = curvature_constancy(estimate, raw_metric, trials=100, seed=0)
                metric_updated = regularize_metric(raw_metric, config.metric_delta)
                metric = metric_updated
                timings["metric_update"] = time.perf_counter() - t0

            timings["total"] = time.perf_counter() - t_iter
            report = IterationReport(
                iteration=iteration,
                sigma=sigma,
                ridge=model.ridge,
                residual=model.residual,
                eigenvalues=model.mu,
                log_eigenvalues=model.lam,
                mode_norms=model.mode_norms(),
                forecast=forecast,
                metric=features.metric,
                metric_updated=metric_updated,
                retained_predict=retained_predict,
                retained_metric=retained_metric,
                constancy_deviation=constancy,
                timings=timings,
            )
            reports.append(report)
            if on_report is not None:
                on_report(report)
    except Exception as exc:
        raise IterationError(
            f"iteration {iteration} failed at step {step}: {exc}",
            iteration=iteration,
            step=step,
            reports=reports,
        ) from exc
    return reports


def run(config, series, on_report=None):
    """Full iterative procedure; returns one report per completed iteration."""
    return _run(config, series, update_metric=True, on_report=on_report)


def ordinary_kmd(config, series):
    """Single pass with the metric update skipped (plain scaled-Gaussian KMD).

    Identical to one iteration of ``run`` up to (and including) the forecast;
    the metric stays at I/(h*sigma)^2.
    """
    single = replace(config, iterations=1)
    return _run(single, series, update_metric=False)[0]
