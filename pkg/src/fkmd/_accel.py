"""Hot numeric kernels, each with a numba-jitted and a pure-numpy implementation.

The jitted path is the default when numba imports cleanly; set
``FKMD_DISABLE_NUMBA=1`` to force the numpy fallback (identical results up
to floating-point summation order, just slower). The public names at the
bottom of this module are the selected implementations; the ``*_np`` /
``*_nb`` variants stay importable so the benchmark can compare both.

All parallel kernels partition work per output element or per outer row,
so results do not depend on the thread count.
"""

import os

import numpy as np
from scipy.spatial.distance import cdist, pdist


def _env_flag(name):
    return os.environ.get(name, "").strip().lower() in {"1", "true", "yes", "on"}


NUMBA_DISABLED = _env_flag("FKMD_DISABLE_NUMBA")

if not NUMBA_DISABLED:
    try:
        import numba
        from numba import njit, prange

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        HAVE_NUMBA = False
else:
    HAVE_NUMBA = False

NUMBA_ENABLED = HAVE_NUMBA


def set_num_threads(n):
    """Limit numba's thread pool. BLAS threads are handled by the CLI."""
    if NUMBA_ENABLED:
        numba.set_num_threads(max(1, int(n)))


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def kernel_block_np(zp, zc):
    """Gaussian kernel block exp(-|zp_i - zc_m|^2) for pre-transformed rows."""
    return np.exp(-cdist(zp, zc, "sqeuclidean"))


def rff_block_np(zp, omegas):
    """Unit-modulus Fourier feature block exp(i zp_i . omega_m)."""
    phase = zp @ omegas.T
    return np.exp(1j * phase)


def pairwise_stats_np(z):
    """(sum, sum of squares, count) over all pairwise Euclidean distances."""
    d = pdist(z)
    return float(d.sum()), float((d * d).sum()), d.size


def _lorenz96_rhs_np(theta, forcing):
    return (np.roll(theta, -1) - np.roll(theta, 2)) * np.roll(theta, 1) - theta + forcing


def lorenz96_trajectory_np(theta0, forcing, dt, steps_per_sample, n_samples):
    """RK4 trajectory sampled every ``steps_per_sample`` steps, row 0 = theta0.

    Returns (trajectory, first_bad_sample); first_bad_sample is -1 when the
    whole trajectory stayed finite.
    """
    out = np.empty((n_samples, theta0.shape[0]))
    y = theta0.astype(np.float64, copy=True)
    out[0] = y
    for s in range(1, n_samples):
        for _ in range(steps_per_sample):
            k1 = _lorenz96_rhs_np(y, forcing)
            k2 = _lorenz96_rhs_np(y + 0.5 * dt * k1, forcing)
            k3 = _lorenz96_rhs_np(y + 0.5 * dt * k2, forcing)
            k4 = _lorenz96_rhs_np(y + dt * k3, forcing)
            y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[s] = y
        if not np.all(np.isfinite(y)):
            return out, s
    return out, -1


def lorenz96_advance_np(theta0, forcing, dt, n_steps):
    """Advance the state by n_steps RK4 steps without recording."""
    y = theta0.astype(np.float64, copy=True)
    for _ in range(n_steps):
        k1 = _lorenz96_rhs_np(y, forcing)
        k2 = _lorenz96_rhs_np(y + 0.5 * dt * k1, forcing)
        k3 = _lorenz96_rhs_np(y + 0.5 * dt * k2, forcing)
        k4 = _lorenz96_rhs_np(y + dt * k3, forcing)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:

    @njit(cache=True, parallel=True)
    def kernel_block_nb(zp, zc):
        n, dim = zp.shape
        r = zc.shape[0]
        out = np.empty((n, r))
        for i in prange(n):
            for m in range(r):
                acc = 0.0
                for k in range(dim):
                    diff = zp[i, k] - zc[m, k]
                    acc += diff * diff
                out[i, m] = np.exp(-acc)
        return out

    @njit(cache=True, parallel=True)
    def rff_block_nb(zp, omegas):
        n, dim = zp.shape
        r = omegas.shape[0]
        out = np.empty((n, r), np.complex128)
        for i in prange(n):
            for m in range(r):
                ph = 0.0
                for k in range(dim):
                    ph += zp[i, k] * omegas[m, k]
                out[i, m] = complex(np.cos(ph), np.sin(ph))
        return out

    @njit(cache=True, parallel=True)
    def pairwise_stats_nb(z):
        # Per-row partials combined in fixed order: bit-stable across threads.
        k, dim = z.shape
        sums = np.zeros(k)
        sqs = np.zeros(k)
        for i in prange(k):
            si = 0.0
            qi = 0.0
            for j in range(i + 1, k):
                acc = 0.0
                for t in range(dim):
                    d = z[i, t] - z[j, t]
                    acc += d * d
                r = np.sqrt(acc)
                si += r
                qi += acc
            sums[i] = si
            sqs[i] = qi
        total = 0.0
        total_sq = 0.0
        for i in range(k):
            total += sums[i]
            total_sq += sqs[i]
        return total, total_sq, k * (k - 1) // 2

    @njit(cache=True)
    def _l96_rhs_nb(theta, forcing, out):
        n = theta.shape[0]
        for j in range(n):
            out[j] = (theta[(j + 1) % n] - theta[(j - 2) % n]) * theta[(j - 1) % n] - theta[j] + forcing

    @njit(cache=True)
    def _l96_rk4_step_nb(y, forcing, dt, k1, k2, k3, k4, tmp):
        n = y.shape[0]
        _l96_rhs_nb(y, forcing, k1)
        for j in range(n):
            tmp[j] = y[j] + 0.5 * dt * k1[j]
        _l96_rhs_nb(tmp, forcing, k2)
        for j in range(n):
            tmp[j] = y[j] + 0.5 * dt * k2[j]
        _l96_rhs_nb(tmp, forcing, k3)
        for j in range(n):
            tmp[j] = y[j] + dt * k3[j]
        _l96_rhs_nb(tmp, forcing, k4)
        for j in range(n):
            y[j] = y[j] + (dt / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])

    @njit(cache=True)
    def lorenz96_trajectory_nb(theta0, forcing, dt, steps_per_sample, n_samples):
        dim = theta0.shape[0]
        out = np.empty((n_samples, dim))
        y = theta0.copy()
        k1 = np.empty(dim)
        k2 = np.empty(dim)
        k3 = np.empty(dim)
        k4 = np.empty(dim)
        tmp = np.empty(dim)
        out[0] = y
        for s in range(1, n_samples):
            for _ in range(steps_per_sample):
                _l96_rk4_step_nb(y, forcing, dt, k1, k2, k3, k4, tmp)
            finite = True
            for j in range(dim):
                out[s, j] = y[j]
                if not np.isfinite(y[j]):
                    finite = False
            if not finite:
                return out, s
        return out, -1

    @njit(cache=True)
    def lorenz96_advance_nb(theta0, forcing, dt, n_steps):
        dim = theta0.shape[0]
        y = theta0.copy()
        k1 = np.empty(dim)
        k2 = np.empty(dim)
        k3 = np.empty(dim)
        k4 = np.empty(dim)
        tmp = np.empty(dim)
        for _ in range(n_steps):
            _l96_rk4_step_nb(y, forcing, dt, k1, k2, k3, k4, tmp)
        return y


# ---------------------------------------------------------------------------
# selected implementations
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:
    kernel_block = kernel_block_nb
    rff_block = rff_block_nb
    pairwise_stats = pairwise_stats_nb
    lorenz96_trajectory = lorenz96_trajectory_nb
    lorenz96_advance = lorenz96_advance_nb
else:
    kernel_block = kernel_block_np
    rff_block = rff_block_np
    pairwise_stats = pairwise_stats_np
    lorenz96_trajectory = lorenz96_trajectory_np
    lorenz96_advance = lorenz96_advance_np
