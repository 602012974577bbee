import math

import numpy as np
import pytest
import scipy.linalg

from fkmd.errors import (
    DivergenceError,
    RankDeficiencyError,
    UnsupportedObservationError,
)
from fkmd.featurize import KernelFeatures, MahalanobisMatrix, feature_matrix
from fkmd.koopman import (
    KoopmanModel,
    ModeFilter,
    ObservationMap,
    apply_filter,
    eigenfunctions,
    fit,
    predict,
    predict_rollout,
)

PI_THIRD = math.pi / 3.0


def model_with_lambdas(lams, lag=1.0, n_out=1):
    """Diagonal model with prescribed continuous-time eigenvalues."""
    lams = np.asarray(lams, dtype=complex)
    r = lams.size
    mu = np.exp(lag * lams)
    return KoopmanModel(
        K=np.diag(mu),
        B=np.ones((r, n_out), complex),
        mu=mu,
        lam=lams,
        Xi=np.eye(r, dtype=complex),
        W=np.eye(r, dtype=complex),
        V=np.ones((r, n_out), complex),
        lag=lag,
        ridge=0.0,
        residual=0.0,
        is_real=False,
        degenerate=False,
    )


def constant_feature(dim):
    """All-ones feature map (zero metric makes the kernel identically 1)."""
    metric = MahalanobisMatrix.from_matrix(np.zeros((dim, dim)))
    return KernelFeatures(centers=np.zeros((1, dim)), metric=metric)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def test_fit_identity_dynamics():
    g = np.random.default_rng(0).standard_normal((5, 2))
    model = fit(np.eye(5), np.eye(5), g, ridge=0.0, lag=1.0)
    assert np.allclose(model.K, np.eye(5), atol=1e-12)
    assert np.allclose(model.mu, np.ones(5), atol=1e-12)
    assert np.allclose(model.lam, np.zeros(5), atol=1e-12)
    assert np.allclose(model.B, g, atol=1e-12)
    assert model.degenerate  # all eigenvalues equal


def test_fit_diagonal_dynamics():
    psi_y = np.diag([2.0, 3.0])
    model = fit(np.eye(2), psi_y, np.ones((2, 1)), ridge=0.0, lag=1.0)
    assert sorted(model.mu.real) == pytest.approx([2.0, 3.0], rel=1e-12)
    assert sorted(model.lam.real) == pytest.approx(
        [math.log(2.0), math.log(3.0)], rel=1e-12
    )
    half = fit(np.eye(2), psi_y, np.ones((2, 1)), ridge=0.0, lag=0.5)
    assert sorted(half.lam.real) == pytest.approx(
        [2 * math.log(2.0), 2 * math.log(3.0)], rel=1e-12
    )


def test_fit_matches_dense_normal_equations_oracle():
    rng = np.random.default_rng(1)
    psi_x = rng.standard_normal((20, 5))
    psi_y = rng.standard_normal((20, 5))
    g = rng.standard_normal((20, 2))
    ridge = 1e-8
    model = fit(psi_x, psi_y, g, ridge=ridge, lag=1.0)
    a = psi_x.T @ psi_x + ridge * np.eye(5)
    k_oracle = np.linalg.inv(a) @ psi_x.T @ psi_y
    b_oracle = np.linalg.inv(a) @ psi_x.T @ g
    assert np.linalg.norm(model.K - k_oracle) <= 1e-8 * np.linalg.norm(k_oracle)
    assert np.linalg.norm(model.B - b_oracle) <= 1e-8 * np.linalg.norm(b_oracle)


def test_fit_training_consistency_kernel_interpolation():
    # well-spaced centers with a strong metric: invertible Gram, ridge 0
    x = np.arange(12.0)[:, None]
    metric = MahalanobisMatrix.from_matrix(np.array([[4.0]]))
    feats = KernelFeatures(centers=x, metric=metric)
    psi_x = feature_matrix(feats, x)
    y = x + 0.3
    psi_y = feature_matrix(feats, y)
    model = fit(psi_x, psi_y, x, ridge=0.0, lag=1.0)
    assert np.linalg.norm(psi_x @ model.K - psi_y) <= 1e-6 * np.linalg.norm(psi_y)


def test_fit_rank_deficiency_advises_ridge():
    psi = np.ones((6, 3))
    with pytest.raises(RankDeficiencyError, match="ridge"):
        fit(psi, psi, np.ones((6, 1)), ridge=0.0)
    fit(psi, psi, np.ones((6, 1)), ridge=1e-6)  # regularized solve succeeds


def test_fit_shape_validation():
    with pytest.raises(ValueError):
        fit(np.eye(3), np.eye(4), np.ones((3, 1)))
    with pytest.raises(ValueError):
        fit(np.eye(3), np.eye(3), np.ones((4, 1)))


def test_fit_spectral_invariants_random():
    rng = np.random.default_rng(2)
    psi_x = rng.standard_normal((60, 12))
    psi_y = rng.standard_normal((60, 12))
    model = fit(psi_x, psi_y, rng.standard_normal((60, 3)), ridge=1e-10)
    k, xi, mu, w = model.K, model.Xi, model.mu, model.W
    assert np.linalg.norm(k @ xi - xi * mu[None, :]) <= 1e-8 * (1 + np.linalg.norm(k))
    diag = np.array([np.vdot(w[:, m], xi[:, m]) for m in range(12)])
    assert np.abs(diag - 1.0).max() <= 1e-10
    recon = (xi * mu[None, :]) @ w.conj().T
    assert np.linalg.norm(recon - k) <= 1e-6 * (1 + np.linalg.norm(k))
    # real inputs: spectrum closed under conjugation
    assert np.allclose(np.sort_complex(mu), np.sort_complex(np.conj(mu)), atol=1e-10)


def test_fit_residual_reporting():
    rng = np.random.default_rng(3)
    psi_x = rng.standard_normal((30, 4))
    k_true = rng.standard_normal((4, 4)) * 0.3
    psi_y = psi_x @ k_true
    model = fit(psi_x, psi_y, rng.standard_normal((30, 2)), ridge=0.0)
    # Gram-space residual evaluation is cancellation-limited near zero
    assert model.residual <= 1e-6
    noisy = fit(psi_x, psi_y + 0.1 * rng.standard_normal(psi_y.shape),
                rng.standard_normal((30, 2)), ridge=0.0)
    assert noisy.residual > 1e-3


# ---------------------------------------------------------------------------
# eigenfunctions
# ---------------------------------------------------------------------------

def test_eigenfunctions_identity_basis():
    model = model_with_lambdas([0.1, -0.2, 0.05])
    psi = np.random.default_rng(4).standard_normal((7, 3))
    assert np.array_equal(eigenfunctions(model, psi), psi.astype(complex))


def test_eigenfunctions_biorthogonal_row():
    rng = np.random.default_rng(5)
    model = fit(rng.standard_normal((40, 6)), rng.standard_normal((40, 6)),
                rng.standard_normal((40, 1)), ridge=1e-12)
    j = 2
    row = model.W[:, j].conj()[None, :]
    phi = eigenfunctions(model, row)[0]
    expected = np.zeros(6, complex)
    expected[j] = 1.0
    assert np.abs(phi - expected).max() <= 1e-8


def test_eigenfunctions_match_per_sample_loop():
    rng = np.random.default_rng(6)
    model = fit(rng.standard_normal((30, 5)), rng.standard_normal((30, 5)),
                rng.standard_normal((30, 2)), ridge=1e-10)
    psi = rng.standard_normal((4, 5))
    out = eigenfunctions(model, psi)
    for n in range(4):
        for m in range(5):
            assert out[n, m] == pytest.approx(psi[n] @ model.Xi[:, m], rel=1e-12)
    with pytest.raises(ValueError):
        eigenfunctions(model, np.zeros((2, 4)))


# ---------------------------------------------------------------------------
# apply_filter
# ---------------------------------------------------------------------------

def test_filter_unbounded_keeps_everything():
    model = model_with_lambdas([0.2, -0.1 + 1j, -0.05])
    assert apply_filter(model, ModeFilter()).tolist() == [0, 1, 2]


def test_filter_cell_experiment_thresholds():
    model = model_with_lambdas([0.2, -0.1 + 1j, -0.05])
    kept = apply_filter(model, ModeFilter(re_max=0.15, im_max=PI_THIRD))
    # index 0 dropped (Re too large); |Im| = 1 < pi/3 keeps index 1
    assert kept.tolist() == [1, 2]


def test_filter_top_k_tie_break():
    model = model_with_lambdas([-0.05 + 0.2j, -0.05 + 0.1j])
    kept = apply_filter(model, ModeFilter(top_k=1))
    assert kept.tolist() == [1]


def test_filter_re_min_cutoff():
    model = model_with_lambdas([-0.5, -0.05, 0.01])
    kept = apply_filter(model, ModeFilter(re_min=-0.1))
    assert kept.tolist() == [1, 2]


def test_filter_top_k_orders_by_descending_real_part():
    model = model_with_lambdas([-0.3, 0.05, -0.1])
    kept = apply_filter(model, ModeFilter(top_k=2))
    assert kept.tolist() == [1, 2]


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def test_predict_stationary_identity_model():
    rng = np.random.default_rng(7)
    b = rng.standard_normal((1, 3))
    model = KoopmanModel(
        K=np.eye(1), B=b, mu=np.ones(1, complex), lam=np.zeros(1, complex),
        Xi=np.eye(1, dtype=complex), W=np.eye(1, dtype=complex), V=b.astype(complex),
        lag=1.0, ridge=0.0, residual=0.0, is_real=True, degenerate=False,
    )
    feats = constant_feature(3)
    out = predict(model, feats, np.array([0.4, -1.0, 2.0]), steps=5)
    psi_b = np.ones((1, 1)) @ b
    assert np.allclose(out, np.repeat(psi_b, 5, axis=0), atol=1e-12)


def test_predict_geometric_decay():
    model = fit(np.array([[1.0]]), np.array([[0.5]]), np.array([[1.0]]), ridge=0.0)
    feats = constant_feature(2)
    out = predict(model, feats, np.zeros(2), steps=3)
    assert out[:, 0] == pytest.approx([0.5, 0.25, 0.125], rel=1e-12)


def test_predict_empty_filter_raises():
    model = model_with_lambdas([0.1, 0.2])
    feats = constant_feature(1)
    with pytest.raises(ValueError, match="no modes"):
        predict(model, feats, np.zeros(1), steps=2, mode_filter=ModeFilter(re_max=-1.0))


def test_predict_divergence_names_offender():
    model = fit(np.array([[1.0]]), np.array([[2.0]]), np.array([[1.0]]), ridge=0.0)
    feats = constant_feature(1)
    with pytest.raises(DivergenceError, match="mode 0"):
        predict(model, feats, np.zeros(1), steps=4000)


def test_predict_linear_rotation_recovery():
    # 2-D rotation flow: kernel interpolation reproduces the matrix exponential
    a = np.array([[0.0, 1.0], [-1.0, 0.0]])
    tau = 0.05
    prop = scipy.linalg.expm(tau * a)
    x = np.empty((301, 2))
    x[0] = [1.0, 0.0]
    for n in range(1, 301):
        x[n] = x[n - 1] @ prop
    x_in, y_in = x[:-1], x[1:]
    metric = MahalanobisMatrix.from_matrix(np.eye(2) * 2.0)
    feats = KernelFeatures(centers=x_in, metric=metric)
    model = fit(
        feature_matrix(feats, x_in), feature_matrix(feats, y_in), x_in,
        ridge=1e-10, lag=tau,
    )
    steps = 20
    out = predict(model, feats, x[-1], steps=steps)
    truth = np.empty((steps, 2))
    z = x[-1]
    for k in range(steps):
        z = z @ prop
        truth[k] = z
    assert np.linalg.norm(out - truth) <= 1e-3 * np.linalg.norm(truth)
    # rollout agrees with the spectral forecast for this linear flow
    roll = predict_rollout(model, feats, x[-1], steps=steps)
    assert np.linalg.norm(roll - out) <= 1e-6 * np.linalg.norm(out)


# ---------------------------------------------------------------------------
# predict_rollout
# ---------------------------------------------------------------------------

def test_rollout_identity_model_is_constant():
    rng = np.random.default_rng(8)
    b = rng.standard_normal((1, 3))
    model = KoopmanModel(
        K=np.eye(1), B=b, mu=np.ones(1, complex), lam=np.zeros(1, complex),
        Xi=np.eye(1, dtype=complex), W=np.eye(1, dtype=complex), V=b.astype(complex),
        lag=1.0, ridge=0.0, residual=0.0, is_real=True, degenerate=False,
    )
    feats = constant_feature(3)
    out = predict_rollout(model, feats, rng.standard_normal(3), steps=4)
    assert np.allclose(out, np.repeat(out[:1], 4, axis=0), atol=1e-12)


def test_rollout_requires_identity_observation():
    model = model_with_lambdas([0.0], n_out=2)
    feats = constant_feature(3)  # L=2 != D=3
    with pytest.raises(UnsupportedObservationError):
        predict_rollout(model, feats, np.zeros(3), steps=2)


# ---------------------------------------------------------------------------
# ObservationMap
# ---------------------------------------------------------------------------

def test_observation_map_identity_and_select():
    block = np.arange(12.0).reshape(3, 4)
    ident = ObservationMap.identity()
    assert ident.n_outputs(4) == 4
    assert np.array_equal(ident(block), block)
    sel = ObservationMap.select([3, 0])
    assert sel.n_outputs(4) == 2
    assert np.array_equal(sel(block), block[:, [3, 0]])
    with pytest.raises(ValueError):
        sel.validate(3)
    sel.validate(4)
