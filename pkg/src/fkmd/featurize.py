"""Feature maps: Mahalanobis-scaled Gaussian kernels and random Fourier features.

Both families share a learned symmetric PSD metric M. The kernel family puts
one Gaussian bump exp(-(x-c)' M (x-c)) at every training input; the Fourier
family uses unit-modulus complex exponentials exp(i w' M^{1/2} x) with
standard Gaussian frequencies w, whose conjugate inner products estimate the
same kernel. Analytic gradients of both families feed the metric update.
"""

from dataclasses import dataclass

import numpy as np

from . import _accel
from .errors import NotPositiveSemidefiniteError

PSD_SLACK = 1e-10  # relative eigenvalue slack below zero tolerated as noise

# Fourier phase transform x -> RFF_SCALE * M^{1/2} x. The sqrt(2) makes the
# expected conjugate feature product equal exp(-(x-x')' M (x-x')) exactly
# (standard normal frequencies contribute a 1/2 in the characteristic
# function that the scale absorbs).
RFF_SCALE = np.sqrt(2.0)


def psd_sqrt(m):
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in [-slack, 0) are clamped to zero; anything below the slack
    threshold raises NotPositiveSemidefiniteError.
    """
    m = np.asarray(m, dtype=np.float64)
    scale = max(np.abs(m).max(), 1.0) if m.size else 1.0
    if np.abs(m - m.T).max() > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    w, q = np.linalg.eigh((m + m.T) / 2.0)
    norm2 = np.abs(w).max() if w.size else 0.0
    if w.min() < -PSD_SLACK * max(norm2, 1e-300):
        raise NotPositiveSemidefiniteError(
            f"eigenvalue {w.min():.3e} below PSD slack {-PSD_SLACK * norm2:.3e}"
        )
    root = q @ (np.sqrt(np.clip(w, 0.0, None))[:, None] * q.T)
    return (root + root.T) / 2.0


def _freeze(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MahalanobisMatrix:
    """Symmetric PSD metric M with its cached square root.

    ``ridge_delta`` records the last diagonal shift applied (metadata only).
    """

    M: np.ndarray
    sqrt: np.ndarray
    ridge_delta: float = 0.0

    @classmethod
    def from_matrix(cls, m, ridge_delta=0.0):
        m = np.asarray(m, dtype=np.float64)
        m = (m + m.T) / 2.0
        return cls(M=_freeze(m), sqrt=_freeze(psd_sqrt(m)), ridge_delta=ridge_delta)

    @classmethod
    def identity(cls, dim):
        eye = np.eye(dim)
        return cls(M=_freeze(eye), sqrt=_freeze(np.eye(dim)))

    @property
    def dim(self):
        return self.M.shape[0]


def kernel_eval(metric, x, xp):
    """Scalar Mahalanobis-Gaussian kernel exp(-(x-xp)' M (x-xp))."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(xp, dtype=np.float64)
    return float(np.exp(-d @ (metric.M @ d)))


@dataclass(frozen=True)
class KernelFeatures:
    """One Gaussian feature per training input (feature count R = N)."""

    centers: np.ndarray
    metric: MahalanobisMatrix

    def __post_init__(self):
        centers = np.ascontiguousarray(self.centers, dtype=np.float64)
        if centers.ndim != 2:
            raise ValueError("centers must be a 2-D array")
        if centers.shape[1] != self.metric.dim:
            raise ValueError(
                f"centers have dimension {centers.shape[1]}, metric {self.metric.dim}"
            )
        if not np.all(np.isfinite(centers)):
            raise ValueError("centers contain non-finite entries")
        object.__setattr__(self, "centers", _freeze(centers))

    @property
    def n_features(self):
        return self.centers.shape[0]

    @property
    def dim(self):
        return self.metric.dim

    @property
    def is_complex(self):
        return False


@dataclass(frozen=True)
class FourierFeatures:
    """R unit-modulus complex exponentials with i.i.d. standard normal frequencies."""

    omegas: np.ndarray
    metric: MahalanobisMatrix
    seed: int = 0

    def __post_init__(self):
        om = np.ascontiguousarray(self.omegas, dtype=np.float64)
        if om.ndim != 2:
            raise ValueError("omegas must be a 2-D array")
        if om.shape[1] != self.metric.dim:
            raise ValueError(
                f"omegas have dimension {om.shape[1]}, metric {self.metric.dim}"
            )
        object.__setattr__(self, "omegas", _freeze(om))

    @classmethod
    def draw(cls, n_features, metric, seed):
        """Draw the frequency matrix deterministically from ``seed``."""
        rng = np.random.default_rng(seed)
        omegas = rng.standard_normal((n_features, metric.dim))
        return cls(omegas=omegas, metric=metric, seed=seed)

    @property
    def n_features(self):
        return self.omegas.shape[0]

    @property
    def dim(self):
        return self.metric.dim

    @property
    def is_complex(self):
        return True


def _check_points(features, points):
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[1] != features.dim:
        raise ValueError(
            f"points have dimension {points.shape[1]}, features expect {features.dim}"
        )
    return points


def rff_projection(features):
    """(D, R) phase projection: column m maps x to the phase of feature m."""
    return RFF_SCALE * (features.metric.sqrt @ features.omegas.T)


def feature_matrix(features, points):
    """Evaluate all features at each point: entry (i, m) = psi_m(points[i]).

    Real (n, R) for kernel features, complex (n, R) for Fourier features.
    """
    points = _check_points(features, points)
    if isinstance(features, KernelFeatures):
        zp = points @ features.metric.sqrt
        zc = features.centers @ features.metric.sqrt
        return _accel.kernel_block(zp, zc)
    zp = RFF_SCALE * (points @ features.metric.sqrt)
    return _accel.rff_block(zp, features.omegas)


def feature_gradients(features, x):
    """Gradient columns: (D, R) matrix whose column m is grad psi_m at x."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != features.dim:
        raise ValueError(f"x has dimension {x.shape[0]}, features expect {features.dim}")
    row = feature_matrix(features, x[None, :])[0]
    if isinstance(features, KernelFeatures):
        diffs = x[:, None] - features.centers.T
        return -2.0 * (features.metric.M @ diffs) * row[None, :]
    return 1j * rff_projection(features) * row[None, :]


def rff_gram_estimate(features, x, xp):
    """Monte-Carlo kernel estimate (1/R) sum_m conj(psi_m(x)) psi_m(xp), real part."""
    if not isinstance(features, FourierFeatures):
        raise TypeError("rff_gram_estimate requires FourierFeatures")
    px = feature_matrix(features, np.asarray(x)[None, :])[0]
    pxp = feature_matrix(features, np.asarray(xp)[None, :])[0]
    return float(np.vdot(px, pxp).real / features.n_features)
