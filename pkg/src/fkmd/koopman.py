"""Koopman operator estimation in feature space and spectral forecasting.

The transfer matrix K and observation matrix B are ridge-regression solutions
of Psi_x K = Psi_y and Psi_x B = G. Eigendecomposing K with biorthogonally
normalized left/right eigenvectors yields, per mode m: an eigenvalue mu_m
(continuous-time form lambda_m = log(mu_m)/lag), an eigenfunction
phi_m(x) = psi(x) xi_m, and a mode row v_m* = w_m* B. Forecasts advance the
seed's eigenfunction values by eigenvalue powers and recombine with the modes.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    DivergenceError,
    NumericalError,
    RankDeficiencyError,
    UnsupportedObservationError,
)
from .featurize import feature_matrix

LEFT_COND_LIMIT = 1e12


@dataclass(frozen=True)
class ObservationMap:
    """Selects what g(x) observes: the full embedded state or a subset of it.

    ``indices`` is None for the identity observation (g(x) = x, L = D) or a
    tuple of 0-based embedded-coordinate indices (L = len(indices)).
    """

    indices: tuple = None

    @classmethod
    def identity(cls):
        return cls(indices=None)

    @classmethod
    def select(cls, indices):
        return cls(indices=tuple(int(i) for i in indices))

    def validate(self, dim):
        if self.indices is None:
            return
        for i in self.indices:
            if not 0 <= i < dim:
                raise ValueError(f"observation index {i} outside [0, {dim})")

    def n_outputs(self, dim):
        return dim if self.indices is None else len(self.indices)

    def __call__(self, block):
        if self.indices is None:
            return block
        return block[:, list(self.indices)]


@dataclass(frozen=True)
class ModeFilter:
    """Conjunctive retention rule on the continuous-time eigenvalues.

    Drops mode m unless re_min <= Re(lambda_m) <= re_max and
    |Im(lambda_m)| <= im_max; ``top_k`` then keeps the k survivors with the
    largest Re(lambda_m) (ties: smaller |Im|, then lower index).
    """

    re_max: float = math.inf
    re_min: float = -math.inf
    im_max: float = math.inf
    top_k: int = None


@dataclass
class KoopmanModel:
    """Fitted transfer matrix with its spectral triple."""

    K: np.ndarray
    B: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    Xi: np.ndarray
    W: np.ndarray
    V: np.ndarray
    lag: float
    ridge: float
    residual: float
    is_real: bool
    degenerate: bool

    @property
    def n_features(self):
        return self.K.shape[0]

    @property
    def n_outputs(self):
        return self.B.shape[1]

    def mode_norms(self):
        return np.linalg.norm(self.V, axis=1)

    def eigenvalue_table(self):
        """(R, 6) float array: index, Re mu, Im mu, Re lambda, Im lambda, |v_m|."""
        r = self.n_features
        table = np.empty((r, 6))
        table[:, 0] = np.arange(r)
        table[:, 1] = self.mu.real
        table[:, 2] = self.mu.imag
        table[:, 3] = self.lam.real
        table[:, 4] = self.lam.imag
        table[:, 5] = self.mode_norms()
        return table


def default_ridge(gram):
    """Relative default regularizer: 1e-8 * trace(Psi* Psi) / R."""
    r = gram.shape[0]
    return 1e-8 * float(np.trace(gram).real) / r


def _solve_spd(gram, ridge, rhs_list):
    h = gram + ridge * np.eye(gram.shape[0], dtype=gram.dtype)
    try:
        factor = scipy.linalg.cho_factor(h, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        if ridge == 0.0:
            raise RankDeficiencyError(
                "normal matrix is singular at ridge=0; pass a positive ridge"
            ) from exc
        raise NumericalError(f"Cholesky factorization failed: {exc}") from exc
    return [scipy.linalg.cho_solve(factor, rhs, check_finite=False) for rhs in rhs_list]


def _left_eigenvectors(k_matrix, mu, xi):
    """Columns w_m with w_m* K = mu_m w_m* and w_m* xi_m = 1."""
    try:
        xi_inv = np.linalg.inv(xi)
    except np.linalg.LinAlgError:
        xi_inv = None
    if xi_inv is not None:
        cond1 = np.linalg.norm(xi, 1) * np.linalg.norm(xi_inv, 1)
        if cond1 <= LEFT_COND_LIMIT:
            return xi_inv.conj().T
    # Ill-conditioned eigenbasis: solve the adjoint problem and pair spectra.
    warnings.warn(
        "right-eigenvector matrix is ill-conditioned; computing left "
        "eigenvectors from the adjoint problem",
        RuntimeWarning,
    )
    mw, u = np.linalg.eig(k_matrix.conj().T)
    mw = np.conj(mw)
    order_r = np.lexsort((mu.imag, mu.real))
    order_l = np.lexsort((mw.imag, mw.real))
    w = np.empty_like(u)
    w[:, order_r] = u[:, order_l]
    for m in range(w.shape[1]):
        c = np.vdot(w[:, m], xi[:, m])
        if abs(c) < 1e-300:
            raise NumericalError(
                f"cannot biorthogonalize mode {m}: w*xi is numerically zero"
            )
        w[:, m] = w[:, m] / np.conj(c)
    return w


def _has_repeated_eigenvalues(mu):
    if mu.size < 2:
        return False
    order = np.lexsort((mu.imag, mu.real))
    s = mu[order]
    gaps = np.abs(np.diff(s))
    return bool(np.any(gaps <= 1e-9 * (1.0 + np.abs(s[:-1]))))


def fit_normal_equations(gram, cross, obs_proj, y_sq_norm, ridge=None, lag=1.0):
    """Fit from accumulated normal-equation blocks.

    gram = Psi_x* Psi_x, cross = Psi_x* Psi_y, obs_proj = Psi_x* G and
    y_sq_norm = |Psi_y|_F^2; this is what the blocked driver accumulates
    without materializing the feature matrices.
    """
    if ridge is None:
        ridge = default_ridge(gram)
    if ridge < 0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")
    k_matrix, b_matrix = _solve_spd(gram, ridge, [cross, obs_proj])

    t1 = float(np.sum(np.conj(k_matrix) * (gram @ k_matrix)).real)
    t2 = float(np.sum(np.conj(k_matrix) * cross).real)
    sq = max(t1 - 2.0 * t2 + y_sq_norm, 0.0)
    residual = math.sqrt(sq) / math.sqrt(y_sq_norm) if y_sq_norm > 0 else 0.0

    try:
        mu, xi = np.linalg.eig(k_matrix)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc
    w = _left_eigenvectors(k_matrix, mu, xi)
    v = w.conj().T @ b_matrix

    degenerate = _has_repeated_eigenvalues(mu)
    if degenerate:
        warnings.warn(
            "repeated eigenvalues detected; spectral reconstruction of K is "
            "unreliable (prediction still uses the computed basis)",
            RuntimeWarning,
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.log(mu.astype(np.complex128)) / lag

    is_real = not (np.iscomplexobj(k_matrix) or np.iscomplexobj(b_matrix))
    return KoopmanModel(
        K=k_matrix,
        B=b_matrix,
        mu=mu,
        lam=lam,
        Xi=xi,
        W=w,
        V=v,
        lag=float(lag),
        ridge=float(ridge),
        residual=residual,
        is_real=is_real,
        degenerate=degenerate,
    )


def fit(psi_x, psi_y, g, ridge=None, lag=1.0):
    """Ridge-regression fit of K and B from dense feature matrices.

    K minimizes |Psi_x K - Psi_y|_F^2 + ridge |K|_F^2 and B the analogous
    problem against the observation matrix G (conjugate transposes
    throughout, so complex feature matrices are fine).
    """
    psi_x = np.asarray(psi_x)
    psi_y = np.asarray(psi_y)
    g = np.asarray(g)
    if psi_x.shape != psi_y.shape:
        raise ValueError(f"Psi_x {psi_x.shape} and Psi_y {psi_y.shape} differ in shape")
    if g.ndim != 2 or g.shape[0] != psi_x.shape[0]:
        raise ValueError(f"G has {g.shape} rows, expected {psi_x.shape[0]}")
    gram = psi_x.conj().T @ psi_x
    cross = psi_x.conj().T @ psi_y
    obs_proj = psi_x.conj().T @ g.astype(cross.dtype, copy=False)
    y_sq = float(np.sum(np.abs(psi_y) ** 2))
    return fit_normal_equations(gram, cross, obs_proj, y_sq, ridge=ridge, lag=lag)


def eigenfunctions(model, psi):
    """Sample the eigenfunctions: column m of Psi @ Xi evaluates phi_m."""
    psi = np.asarray(psi)
    if psi.shape[1] != model.n_features:
        raise ValueError(
            f"Psi has {psi.shape[1]} columns, model has {model.n_features} features"
        )
    return psi @ model.Xi


def apply_filter(model, mode_filter):
    """Indices of retained modes.

    Bound filters keep ascending index order; with ``top_k`` the result is
    ranked by descending Re(lambda), ties by ascending |Im(lambda)| then index.
    """
    lam = model.lam
    re = lam.real
    im = np.abs(lam.imag)
    mask = (re >= mode_filter.re_min) & (re <= mode_filter.re_max) & (im <= mode_filter.im_max)
    idx = np.flatnonzero(mask)
    if mode_filter.top_k is not None and mode_filter.top_k < idx.size:
        order = np.lexsort((idx, im[idx], -re[idx]))
        idx = idx[order][: mode_filter.top_k]
    return idx


def _conjugate_closed(vals):
    a = np.sort_complex(vals)
    b = np.sort_complex(np.conj(vals))
    return np.allclose(a, b, rtol=1e-9, atol=1e-12)


def _retained_or_raise(model, mode_filter):
    idx = apply_filter(model, mode_filter)
    if idx.size == 0:
        raise ValueError("mode filter retained no modes")
    return idx


def _check_finite_forecast(out, model, idx):
    if np.all(np.isfinite(out.view(np.float64))):
        return
    worst = idx[int(np.argmax(model.lam[idx].real))]
    raise DivergenceError(
        f"forecast diverged; fastest retained mode {worst} has "
        f"lambda = {model.lam[worst]:.6g}"
    )


def predict(model, features, x0, steps, mode_filter=ModeFilter()):
    """Multi-step spectral forecast from a fixed seed.

    Row k (k = 1..steps) is sum_m mu_m^k phi_m(x0) v_m* over retained modes;
    the eigenfunctions are evaluated once at the seed. Returns the real part;
    when the features are real and the retained spectrum is closed under
    conjugation the imaginary residue is checked against 1e-6 (warning).
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    idx = _retained_or_raise(model, mode_filter)
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    psi0 = feature_matrix(features, x0[None, :])
    phi0 = (psi0 @ model.Xi)[0, idx]
    with np.errstate(over="ignore", invalid="ignore"):
        powers = model.mu[idx][None, :] ** np.arange(1, steps + 1)[:, None]
        out = (powers * phi0[None, :]) @ model.V[idx]
    _check_finite_forecast(out, model, idx)
    if model.is_real and _conjugate_closed(model.lam[idx]):
        residue = np.abs(out.imag) - 1e-6 * (1.0 + np.abs(out.real))
        if np.any(residue > 0):
            warnings.warn(
                f"imaginary residue {np.abs(out.imag).max():.3e} exceeds the "
                "1e-6 tolerance for a conjugate-closed real model",
                RuntimeWarning,
            )
    return np.ascontiguousarray(out.real)


def predict_rollout(model, features, x0, steps, mode_filter=ModeFilter()):
    """Multi-step forecast that re-embeds each one-step prediction.

    Requires the identity observation (L == D) so the predicted observable
    can be fed back as the next state; re-featurizes every step.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if model.n_outputs != features.dim:
        raise UnsupportedObservationError(
            f"rollout needs the identity observation: model outputs "
            f"{model.n_outputs}, feature dimension {features.dim}"
        )
    idx = _retained_or_raise(model, mode_filter)
    z = np.asarray(x0, dtype=np.float64).reshape(-1).copy()
    out = np.empty((steps, model.n_outputs))
    mu = model.mu[idx]
    xi = model.Xi[:, idx]
    v = model.V[idx]
    for k in range(steps):
        psi = feature_matrix(features, z[None, :])
        phi = (psi @ xi)[0]
        row = (mu * phi) @ v
        _check_finite_forecast(row, model, idx)
        z = np.ascontiguousarray(row.real)
        out[k] = z
    return out
