import math

import numpy as np
import pytest
import scipy.linalg
from scipy.spatial.distance import pdist

import fkmd.pipeline as pipeline_mod
from fkmd import _accel
from fkmd.embed import embed
from fkmd.errors import DegenerateDataError, IterationError
from fkmd.featurize import KernelFeatures, MahalanobisMatrix, feature_matrix
from fkmd.koopman import ModeFilter, ObservationMap
from fkmd.pipeline import (
    FKMDConfig,
    accumulate_normal_blocks,
    ordinary_kmd,
    run,
)
from fkmd.tseries import TimeSeries


def rotation_series(tau=0.05, n=500):
    a = np.array([[0.0, 1.0], [-1.0, 0.0]])
    prop = scipy.linalg.expm(tau * a)
    x = np.empty((n + 1, 2))
    x[0] = [1.0, 0.0]
    for i in range(1, n + 1):
        x[i] = x[i - 1] @ prop
    return TimeSeries(values=x, lag=tau), prop


def rotation_truth(series, prop, steps):
    truth = np.empty((steps, 2))
    z = series.values[-1]
    for k in range(steps):
        z = z @ prop
        truth[k] = z
    return truth


def noise_series(t=120, d=2, seed=0):
    rng = np.random.default_rng(seed)
    return TimeSeries(values=rng.standard_normal((t, d)), lag=0.1)


LINEAR_CFG = FKMDConfig(
    ell=1, feature_kind="kernel", iterations=1, ridge=1e-10,
    prediction_steps=20, subsample=500,
)


def test_linear_flow_recovery_single_iteration():
    series, prop = rotation_series()
    report = run(LINEAR_CFG, series)[0]
    truth = rotation_truth(series, prop, 20)
    err = np.linalg.norm(report.forecast - truth) / np.linalg.norm(truth)
    assert err <= 1e-3
    assert report.residual <= 1e-6
    assert math.isfinite(report.constancy_deviation)


def test_linear_flow_ordinary_kmd_also_passes():
    series, prop = rotation_series()
    report = ordinary_kmd(LINEAR_CFG, series)
    truth = rotation_truth(series, prop, 20)
    assert np.linalg.norm(report.forecast - truth) <= 1e-3 * np.linalg.norm(truth)
    assert report.metric_updated is None
    assert report.constancy_deviation is None


def test_rollout_scheme_through_driver():
    series, prop = rotation_series()
    cfg = FKMDConfig(
        ell=1, feature_kind="kernel", iterations=1, ridge=1e-10,
        prediction_steps=10, subsample=500, prediction_scheme="rollout",
    )
    report = run(cfg, series)[0]
    truth = rotation_truth(series, prop, 10)
    assert np.linalg.norm(report.forecast - truth) <= 1e-3 * np.linalg.norm(truth)


def _small_rff_cfg(iterations=2, **kw):
    base = dict(
        ell=3, feature_kind="rff", n_features=40, iterations=iterations,
        subsample=50, prediction_steps=5, seed=11,
        metric_mode_filter=ModeFilter(top_k=10), metric_delta=1e-12,
    )
    base.update(kw)
    return FKMDConfig(**base)


def test_reports_are_bitwise_reproducible():
    series = noise_series()
    first = run(_small_rff_cfg(), series)
    second = run(_small_rff_cfg(), series)
    assert len(first) == len(second) == 2
    for a, b in zip(first, second):
        assert np.array_equal(a.eigenvalue_table(), b.eigenvalue_table())
        assert np.array_equal(a.forecast, b.forecast)
        assert np.array_equal(a.metric.M, b.metric.M)
        assert np.array_equal(a.metric_updated.M, b.metric_updated.M)
        assert a.sigma == b.sigma


@pytest.mark.skipif(not _accel.NUMBA_ENABLED, reason="numba path disabled")
def test_reports_stable_across_thread_counts():
    import numba

    series = noise_series()
    old = numba.get_num_threads()
    try:
        _accel.set_num_threads(1)
        one = run(_small_rff_cfg(), series)
        _accel.set_num_threads(2)
        two = run(_small_rff_cfg(), series)
    finally:
        numba.set_num_threads(old)
    for a, b in zip(one, two):
        assert np.array_equal(a.eigenvalue_table(), b.eigenvalue_table())
        assert np.array_equal(a.forecast, b.forecast)


def test_ordinary_matches_single_iteration_run():
    series = noise_series(seed=5)
    cfg = _small_rff_cfg(iterations=1)
    solo = ordinary_kmd(cfg, series)
    full = run(cfg, series)[0]
    assert solo.sigma == full.sigma
    assert np.array_equal(solo.eigenvalue_table(), full.eigenvalue_table())
    assert np.array_equal(solo.forecast, full.forecast)
    assert solo.metric_updated is None and full.metric_updated is not None


def test_first_iteration_equals_plain_gaussian_kmd_oracle():
    # independent dense reimplementation with an isotropic Gaussian kernel
    series = noise_series(t=201, d=2, seed=9)
    h = 1.0
    ridge = 1e-3  # keeps the normal matrix well conditioned on both routes
    cfg = FKMDConfig(ell=1, feature_kind="kernel", iterations=1, h=h,
                     ridge=ridge, prediction_steps=6, subsample=5000)
    report = ordinary_kmd(cfg, series)

    x, y = series.values[:-1], series.values[1:]
    sigma = pdist(x).std()  # population convention
    assert report.sigma == pytest.approx(sigma, rel=1e-12)

    scale = (h * sigma) ** 2
    def gram(a, b):
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        return np.exp(-d2 / scale)

    psi_x = gram(x, x)
    psi_y = gram(y, x)
    a_mat = psi_x.T @ psi_x
    k_mat = np.linalg.solve(a_mat + ridge * np.eye(201 - 1), psi_x.T @ psi_y)
    b_mat = np.linalg.solve(a_mat + ridge * np.eye(200), psi_x.T @ x)
    mu, xi = np.linalg.eig(k_mat)
    v = np.linalg.inv(xi) @ b_mat
    psi0 = gram(series.values[-1:], x)
    phi0 = (psi0 @ xi)[0]
    steps = 6
    powers = mu[None, :] ** np.arange(1, steps + 1)[:, None]
    forecast = ((powers * phi0[None, :]) @ v).real

    # compare the resolved spectrum; the near-zero cluster is solver noise
    # whose sort order is not stable between the two routes
    floor = 1e-6 * np.abs(mu).max()
    got = np.sort_complex(report.eigenvalues[np.abs(report.eigenvalues) > floor])
    want = np.sort_complex(mu[np.abs(mu) > floor])
    assert got.shape == want.shape
    assert np.allclose(got, want, rtol=1e-10, atol=1e-10 * np.abs(mu).max())
    assert np.allclose(report.forecast, forecast, rtol=1e-10, atol=1e-10)


def test_blocked_accumulation_matches_dense_products():
    series = noise_series(t=90, d=2, seed=3)
    ds = embed(series, 3)
    metric = MahalanobisMatrix.identity(ds.dim)
    feats = KernelFeatures(centers=ds.X, metric=metric)
    obs = ObservationMap.select([0, 4])
    for block in (7, 128):
        gram, cross, proj, y_sq = accumulate_normal_blocks(feats, ds, obs, block)
        psi_x = feature_matrix(feats, ds.X)
        psi_y = feature_matrix(feats, ds.Y)
        assert np.allclose(gram, psi_x.T @ psi_x, rtol=1e-12, atol=1e-12)
        assert np.allclose(cross, psi_x.T @ psi_y, rtol=1e-12, atol=1e-12)
        assert np.allclose(proj, psi_x.T @ obs(ds.X), rtol=1e-12, atol=1e-12)
        assert y_sq == pytest.approx(np.sum(psi_y ** 2), rel=1e-12)


def test_iteration_failure_carries_partial_reports(monkeypatch):
    series = noise_series(seed=7)
    real_sigma = pipeline_mod.estimate_sigma
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] >= 2:
            raise DegenerateDataError("forced failure")
        return real_sigma(*args, **kwargs)

    monkeypatch.setattr(pipeline_mod, "estimate_sigma", flaky)
    with pytest.raises(IterationError) as info:
        run(_small_rff_cfg(iterations=3), series)
    err = info.value
    assert err.iteration == 2
    assert err.step == "bandwidth"
    assert len(err.reports) == 1
    assert isinstance(err.__cause__, DegenerateDataError)


def test_constant_series_degenerates_immediately():
    series = TimeSeries(values=np.ones((30, 2)), lag=1.0)
    with pytest.raises(IterationError) as info:
        run(_small_rff_cfg(), series)
    assert isinstance(info.value.__cause__, DegenerateDataError)
    assert info.value.reports == []


def test_rff_redraw_flag_changes_later_iterations():
    series = noise_series(seed=13)
    redraw = run(_small_rff_cfg(), series)
    fixed = run(_small_rff_cfg(rff_redraw=False), series)
    # same initial metric, different second-iteration frequency draws
    assert not np.array_equal(
        redraw[1].eigenvalue_table(), fixed[1].eigenvalue_table()
    )


def test_kernel_ignores_feature_count_with_warning():
    series = noise_series(t=60, seed=2)
    cfg = FKMDConfig(ell=2, feature_kind="kernel", n_features=17, iterations=1,
                     subsample=50, prediction_steps=3)
    with pytest.warns(RuntimeWarning, match="ignored"):
        report = ordinary_kmd(cfg, series)
    assert report.forecast.shape == (3, 4)


def test_cell_experiment_config_smoke():
    rng = np.random.default_rng(21)
    t = np.arange(600) * 0.5
    activity = np.sin(0.2 * t) + 0.05 * rng.standard_normal(600)
    series = TimeSeries(values=activity[:, None], lag=0.5)
    cfg = FKMDConfig(
        ell=49, feature_kind="kernel", iterations=2, h=1.05,
        subsample=200, prediction_steps=12,
        predict_mode_filter=ModeFilter(re_max=0.15, im_max=math.pi / 3),
        metric_mode_filter=ModeFilter(top_k=5), metric_delta=1e-10,
    )
    reports = run(cfg, series)
    assert len(reports) == 2
    for rep in reports:
        assert np.all(np.isfinite(rep.forecast))
        assert rep.retained_predict >= 1
        assert math.isfinite(rep.residual)
    assert reports[0].forecast.shape == (12, 49)


def test_config_validation():
    with pytest.raises(ValueError):
        FKMDConfig(ell=0)
    with pytest.raises(ValueError):
        FKMDConfig(ell=1, feature_kind="rff")  # missing n_features
    with pytest.raises(ValueError):
        FKMDConfig(ell=1, feature_kind="mystery")
    with pytest.raises(ValueError):
        FKMDConfig(ell=1, iterations=0)
    with pytest.raises(ValueError):
        FKMDConfig(ell=1, h=0.0)
    with pytest.raises(ValueError):
        FKMDConfig(ell=1, prediction_scheme="psychic")
    with pytest.raises(ValueError):
        FKMDConfig(ell=1, subsample=1)


def test_observation_subset_through_driver():
    series = noise_series(t=80, d=2, seed=4)
    cfg = FKMDConfig(
        ell=2, feature_kind="kernel", iterations=1, subsample=60,
        prediction_steps=4, observation=ObservationMap.select([2, 3]),
        j_source="modal",
    )
    report = run(cfg, series)[0]
    assert report.forecast.shape == (4, 2)
