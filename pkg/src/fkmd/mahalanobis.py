"""Metric learning: gradient-outerproduct assembly and bandwidth scaling.

The metric is built from per-sample sensitivity matrices J(x): the gradient
of the instantaneous rate of change of the predicted observable. Summing the
outer products J J* over a subsample gives a PSD matrix whose square root
stretches state space toward dynamically active directions; dividing by
(h * sigma)^2, with sigma the pairwise-distance spread of the transformed
samples, fixes the kernel bandwidth.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _accel
from .errors import DegenerateDataError, SingularMetricError
from .featurize import (
    FourierFeatures,
    KernelFeatures,
    MahalanobisMatrix,
    feature_matrix,
    rff_projection,
)
from .koopman import apply_filter

J_SOURCES = ("modal", "finite_difference", "full_state")


@dataclass(frozen=True)
class JEstimate:
    """Stack of per-sample sensitivity matrices, shape (n, D, L)."""

    J_values: np.ndarray
    source: str = "modal"

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.J_values), dtype=np.complex128)
        if arr.ndim != 3:
            raise ValueError(f"J_values must be (n, D, L), got shape {arr.shape}")
        if arr.shape[0] == 0:
            raise ValueError("J_values is empty")
        if not np.all(np.isfinite(arr.view(np.float64))):
            raise ValueError("J_values contain non-finite entries")
        if self.source not in J_SOURCES:
            raise ValueError(f"unknown J source {self.source!r}")
        object.__setattr__(self, "J_values", arr)


@dataclass(frozen=True)
class BandwidthState:
    """Bandwidth factor h, pairwise spread sigma, and the subsample size used."""

    h: float
    sigma: float
    subsample: int

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def pairwise_distance_std(z):
    """Population std of all pairwise Euclidean distances between rows of z."""
    total, total_sq, count = _accel.pairwise_stats(np.ascontiguousarray(z, dtype=np.float64))
    if count < 1:
        raise ValueError("need at least 2 rows for pairwise distances")
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    return math.sqrt(var)


def estimate_sigma(x, metric, subsample, seed):
    """Spread of pairwise distances between metric-transformed sample rows.

    Draws min(subsample, N) rows without replacement (deterministic under
    ``seed``), maps them through sqrt(M), and returns the population standard
    deviation over all pairs.
    """
    x = np.asarray(x, dtype=np.float64)
    if subsample < 2:
        raise ValueError(f"subsample must be >= 2, got {subsample}")
    n = x.shape[0]
    k = min(subsample, n)
    if k < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=k, replace=False) if k < n else np.arange(n)
    sigma = pairwise_distance_std(x[idx] @ metric.sqrt)
    if sigma == 0.0:
        raise DegenerateDataError(
            "all pairwise distances are identical (sigma = 0); "
            "the data carries no usable spread under this metric"
        )
    return sigma


def rescale_metric(metric, h, sigma):
    """Bandwidth step: M <- M / (h * sigma)^2 (square root scaled accordingly)."""
    if not (h > 0 and sigma > 0):
        raise ValueError("h and sigma must be positive")
    c = (h * sigma) ** 2
    return MahalanobisMatrix(
        M=_ro(metric.M / c),
        sqrt=_ro(metric.sqrt / (h * sigma)),
        ridge_delta=metric.ridge_delta,
    )


def regularize_metric(metric, delta):
    """Diagonal shift M <- M + delta * I; the square root is recomputed."""
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    if delta == 0:
        return metric
    shifted = metric.M + delta * np.eye(metric.dim)
    return MahalanobisMatrix.from_matrix(shifted, ridge_delta=delta)


def _ro(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def _mode_weights(model, idx, source):
    if source == "modal":
        return model.lam[idx]
    if source == "finite_difference":
        # One-lag difference quotient: (mu - 1)/lag stands in for log(mu)/lag.
        return (model.mu[idx] - 1.0) / model.lag
    raise ValueError(f"unknown J source {source!r}")


def compute_J_batch(model, features, points, mode_filter, source="modal", chunk=64):
    """Sensitivity matrices J(x) for each row of ``points``: array (n, D, L).

    modal:             J(x) = sum_m lambda_m grad phi_m(x) v_m*
    finite_difference: lambda_m replaced by (mu_m - 1)/lag
    full_state:        J(x) = (sum_m lambda_m phi_m(x) v_m*)^*, requiring the
                       identity observation; gives a (D, 1) column per point.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    idx = apply_filter(model, mode_filter)
    if idx.size == 0:
        raise ValueError("mode filter retained no modes for the metric update")

    if source == "full_state":
        if model.n_outputs != features.dim:
            raise ValueError(
                "full_state J needs the identity observation "
                f"(L = {model.n_outputs}, D = {features.dim})"
            )
        psi = feature_matrix(features, points)
        phi = psi @ model.Xi[:, idx]
        rows = (phi * model.lam[idx][None, :]) @ model.V[idx]
        return np.conj(rows)[:, :, None]

    weights = _mode_weights(model, idx, source)
    zv = (model.Xi[:, idx] * weights[None, :]) @ model.V[idx]  # (R, L)
    n = points.shape[0]
    dim = features.dim
    n_out = model.n_outputs
    out = np.empty((n, dim, n_out), dtype=np.complex128)

    if isinstance(features, KernelFeatures):
        centers_t = features.centers.T  # (D, R)
        m_mat = features.metric.M
        k_all = feature_matrix(features, points)  # (n, R) real
        a = k_all @ zv  # (n, L)
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            t1 = points[lo:hi][:, :, None] * a[lo:hi][:, None, :]
            t2 = np.matmul(centers_t, k_all[lo:hi][:, :, None] * zv[None, :, :])
            out[lo:hi] = -2.0 * np.matmul(m_mat, t1 - t2)
        return out

    if isinstance(features, FourierFeatures):
        proj = rff_projection(features)  # (D, R)
        psi = feature_matrix(features, points)  # (n, R) complex
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            scaled = (1j * psi[lo:hi])[:, :, None] * zv[None, :, :]
            out[lo:hi] = np.matmul(proj, scaled)
        return out

    raise TypeError(f"unsupported feature type {type(features).__name__}")


def compute_J_modal(model, features, x, mode_filter):
    """Single-point modal sensitivity matrix (D x L)."""
    return compute_J_batch(model, features, np.asarray(x)[None, :], mode_filter)[0]


def assemble_metric(j_values):
    """Unscaled metric sum_n Re(J(x_n) J(x_n)*), symmetrized.

    The bandwidth factor is deliberately left to ``rescale_metric``; the
    result is PSD by construction up to floating-point noise.
    """
    arr = j_values.J_values if isinstance(j_values, JEstimate) else np.asarray(j_values)
    if arr.ndim != 3:
        raise ValueError(f"expected (n, D, L) J stack, got shape {arr.shape}")
    if not np.all(np.isfinite(arr.view(np.float64))):
        raise ValueError("J values contain non-finite entries")
    dim = arr.shape[1]
    flat = np.ascontiguousarray(arr.transpose(1, 0, 2).reshape(dim, -1))
    m = (flat @ flat.conj().T).real
    return MahalanobisMatrix.from_matrix((m + m.T) / 2.0)


def curvature_constancy(j_values, metric, trials=100, seed=0):
    """Isotropy diagnostic for a metric assembled from these J values.

    For random real unit vectors u, f(u) = (1/n) sum_n |u' M^{-1/2} J(x_n)|^2
    is a constant (the squared bandwidth over n) whenever M came from exactly
    this J stack, under any overall rescaling. Returns the maximum relative
    deviation of f from that constant over ``trials`` directions.
    """
    arr = j_values.J_values if isinstance(j_values, JEstimate) else np.asarray(j_values)
    n, dim, _ = arr.shape
    w, q = np.linalg.eigh(metric.M)
    tiny = 1e-14 * max(abs(w[-1]), 1e-300)
    if w[0] <= tiny:
        raise SingularMetricError(
            f"metric has a near-zero eigenvalue {w[0]:.3e}; "
            "regularize with a positive delta before this diagnostic"
        )
    inv_sqrt = q @ (q / np.sqrt(w)).T

    flat = np.ascontiguousarray(arr.transpose(1, 0, 2).reshape(dim, -1))
    raw = (flat @ flat.conj().T).real
    raw = (raw + raw.T) / 2.0
    scale = np.linalg.norm(raw) / np.linalg.norm(metric.M)  # recovers (h*sigma)^2
    target = scale / n

    transformed = inv_sqrt @ flat  # (D, n*L)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((trials, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    proj = u @ transformed  # (trials, n*L) complex
    f = np.sum(np.abs(proj) ** 2, axis=1) / n
    return float(np.max(np.abs(f - target)) / target)


def channel_block_norms(metric, d_raw, ell):
    """Frobenius norms of the per-channel-pair sub-blocks of M.

    Embedded coordinates are ordered time-major (channel c of delay t sits at
    index t*d_raw + c), so block (c1, c2) collects the ell x ell sub-matrix
    coupling those two raw channels across all delays. Supports the
    nuisance-vs-signal split of the learned metric.
    """
    m = metric.M if isinstance(metric, MahalanobisMatrix) else np.asarray(metric)
    if m.shape[0] != d_raw * ell:
        raise ValueError(
            f"metric dimension {m.shape[0]} != d_raw * ell = {d_raw * ell}"
        )
    blocks = m.reshape(ell, d_raw, ell, d_raw)
    return np.sqrt(np.einsum("acbd,acbd->cd", blocks, blocks))
