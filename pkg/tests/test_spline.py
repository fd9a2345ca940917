import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from trajkit.spline import (
    FitFailureError,
    InsufficientSupportError,
    SplineBasisSpec,
    SplineModel,
    design_matrix,
    fit_penalized,
    gcv_score,
    make_basis_spec,
    penalty_matrix,
    scaled_penalty,
    predict,
    select_lambda,
)


def oracle_penalty(spec, X):
    S = penalty_matrix(spec)
    return S * np.abs(X).sum(axis=1).max() ** 2 / np.abs(S).sum(axis=0).max()


def dense_oracle(X, y, S, lam):
    """Plain normal equations, solved with a general LU solver."""
    return np.linalg.solve(X.T @ X + lam * S, X.T @ y)


def random_problem(rng, n=None):
    n = n or int(rng.integers(8, 51))
    t = np.sort(rng.uniform(-50, 120, n))
    y = np.sin(t / 30.0) * 10 + rng.normal(0, 1, n)
    spec = make_basis_spec(t, int(rng.integers(4, 12)))
    return t, y, spec


def test_knots_at_quantiles_and_basis_count():
    t = np.arange(100.0)
    spec = make_basis_spec(t, 10)
    assert spec.n_basis == 10
    assert spec.boundary == (0.0, 99.0)
    np.testing.assert_allclose(spec.knots, np.quantile(t, np.linspace(0, 1, 10)))


def test_basis_count_limited_by_distinct_times():
    t = np.repeat([0.0, 1.0, 2.0, 5.0, 9.0], 3)
    assert make_basis_spec(t, 30).n_basis == 4


def test_too_few_distinct_times():
    with pytest.raises(InsufficientSupportError):
        make_basis_spec([1.0, 1.0, 2.0, 3.0], 30)


def test_basis_interpolates_knot_values():
    spec = make_basis_spec(np.linspace(0, 10, 40), 7)
    X = design_matrix(spec, spec.knots)
    np.testing.assert_allclose(X, np.eye(spec.n_basis), atol=1e-12)


def test_partition_of_unity_and_linear_reproduction():
    spec = make_basis_spec(np.linspace(-3, 7, 40), 8)
    t = np.linspace(-6, 10, 101)
    X = design_matrix(spec, t)
    np.testing.assert_allclose(X.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(X @ spec.knots, t, atol=1e-10)


def test_c2_continuity_at_knots():
    rng = np.random.default_rng(3)
    spec = make_basis_spec(np.sort(rng.uniform(0, 100, 60)), 9)
    beta = rng.normal(size=spec.n_basis)
    h = 1e-7
    for knot in spec.interior_knots:
        for deriv in (0, 1, 2):
            left = design_matrix(spec, [knot - h], deriv) @ beta
            right = design_matrix(spec, [knot + h], deriv) @ beta
            scale = max(1.0, np.abs(design_matrix(spec, [knot], deriv) @ beta).max())
            assert abs(left - right)[0] / scale < 1e-5


def test_natural_boundary_and_linear_extrapolation():
    spec = make_basis_spec(np.linspace(0, 20, 30), 6)
    beta = np.random.default_rng(0).normal(size=6)
    f2 = design_matrix(spec, [0.0, 20.0, -5.0, 30.0], deriv=2) @ beta
    np.testing.assert_allclose(f2, 0.0, atol=1e-10)
    outside = np.array([25.0, 30.0, 35.0])
    vals = design_matrix(spec, outside) @ beta
    assert np.isclose(vals[2] - vals[1], vals[1] - vals[0])


def test_derivatives_match_finite_differences():
    spec = make_basis_spec(np.linspace(-10, 10, 50), 8)
    beta = np.random.default_rng(1).normal(size=8)
    t = np.array([-7.3, -1.1, 0.4, 6.6])
    h = 1e-5
    f = lambda x: design_matrix(spec, x) @ beta
    d1 = design_matrix(spec, t, 1) @ beta
    np.testing.assert_allclose(d1, (f(t + h) - f(t - h)) / (2 * h), rtol=1e-6, atol=1e-8)
    f1 = lambda x: design_matrix(spec, x, 1) @ beta
    d2 = design_matrix(spec, t, 2) @ beta
    np.testing.assert_allclose(d2, (f1(t + h) - f1(t - h)) / (2 * h), rtol=1e-5, atol=1e-7)


def test_penalty_matches_quadrature():
    rng = np.random.default_rng(7)
    spec = make_basis_spec(np.sort(rng.uniform(-365, 730, 80)), 7)
    S = penalty_matrix(spec)
    breaks = spec.knots
    for _ in range(8):
        i, j = rng.integers(0, spec.n_basis, 2)

        def integrand(x):
            B = design_matrix(spec, [x], deriv=2)[0]
            return B[i] * B[j]

        total = sum(quad(integrand, a, b, epsabs=0, epsrel=1e-12)[0] for a, b in zip(breaks[:-1], breaks[1:]))
        # the penalty is defined on time rescaled to [0, 1]
        expected = total * spec.span**3
        assert S[i, j] == pytest.approx(expected, rel=1e-6, abs=1e-9 * np.abs(S).max())


def test_penalty_scale_matches_mgcv_rule():
    t = np.linspace(0, 10, 40)
    spec = make_basis_spec(t, 8)
    X = design_matrix(spec, t)
    np.testing.assert_allclose(scaled_penalty(spec, X), oracle_penalty(spec, X), rtol=1e-14)


def test_penalty_null_space_is_affine():
    spec = make_basis_spec(np.linspace(0, 1, 30), 9)
    S = penalty_matrix(spec)
    np.testing.assert_allclose(S, S.T, atol=1e-12)
    w = np.linalg.eigvalsh(S)
    assert np.all(w > -1e-9 * w.max())
    assert np.linalg.matrix_rank(S, tol=1e-9 * w.max()) == spec.n_basis - 2
    np.testing.assert_allclose(S @ np.ones(9), 0, atol=1e-9)
    np.testing.assert_allclose(S @ spec.knots, 0, atol=1e-8)


def test_fit_matches_dense_oracle():
    rng = np.random.default_rng(11)
    for lam in (1e-4, 1e-2, 1.0, 1e2, 1e4):
        t, y, spec = random_problem(rng, 20)
        model = fit_penalized(t, y, spec, lam)
        X = design_matrix(spec, t)
        ref = dense_oracle(X, y, oracle_penalty(spec, X), lam)
        np.testing.assert_allclose(model.coefficients, ref, rtol=1e-8, atol=1e-8 * np.abs(ref).max())


def test_edf_is_hat_matrix_trace():
    t, y, spec = random_problem(np.random.default_rng(2), 30)
    X = design_matrix(spec, t)
    S = oracle_penalty(spec, X)
    model = fit_penalized(t, y, spec, 0.5)
    hat = X @ np.linalg.solve(X.T @ X + 0.5 * S, X.T)
    assert model.edf == pytest.approx(np.trace(hat), rel=1e-9)
    assert model.rss == pytest.approx(float(np.sum((y - X @ model.coefficients) ** 2)), rel=1e-9)


def test_unpenalized_fit_interpolates_knots():
    spec = make_basis_spec(np.linspace(0, 10, 6), 6)
    t = spec.knots.copy()
    y = np.array([3.0, 1.0, 4.0, 1.0, 5.0])
    model = fit_penalized(t, y, spec, 0.0)
    np.testing.assert_allclose(predict(model, t), y, atol=1e-9)


@pytest.mark.parametrize("lam", [0.0, 1e-6, 1.0, 1e6, 1e12])
def test_affine_data_reproduced_for_any_lambda(lam):
    t = np.linspace(-365, 730, 60)
    y = 150.0 - 0.02 * t
    spec = make_basis_spec(t, 12)
    model = fit_penalized(t, y, spec, lam)
    np.testing.assert_allclose(predict(model, t), y, rtol=1e-8)


def test_huge_lambda_gives_least_squares_line():
    rng = np.random.default_rng(5)
    t = np.sort(rng.uniform(0, 100, 80))
    y = 0.01 * (t - 40) ** 2 + rng.normal(0, 1, 80)
    model = fit_penalized(t, y, make_basis_spec(t, 10), 1e12)
    assert model.edf == pytest.approx(2.0, abs=0.05)
    line = np.polyval(np.polyfit(t, y, 1), t)
    np.testing.assert_allclose(predict(model, t), line, rtol=1e-4)


def test_negative_lambda_rejected():
    t, y, spec = random_problem(np.random.default_rng(0), 20)
    with pytest.raises(ValueError):
        fit_penalized(t, y, spec, -1.0)


def test_gcv_recovers_smooth_curve():
    rng = np.random.default_rng(9)
    t = np.sort(rng.uniform(0, 10, 300))
    truth = np.sin(t)
    y = truth + rng.normal(0, 0.2, 300)
    lam, model = select_lambda(t, y, make_basis_spec(t, 20))
    assert 1e-6 <= lam <= 1e8
    assert np.sqrt(np.mean((predict(model, t) - truth) ** 2)) < 0.06
    assert 3 < model.edf < 20


def test_gcv_on_pure_noise_prefers_a_line():
    rng = np.random.default_rng(4)
    t = np.sort(rng.uniform(0, 10, 200))
    _, model = select_lambda(t, rng.normal(0, 1, 200), make_basis_spec(t, 20))
    assert model.edf < 3.5


def test_gcv_selection_beats_grid_neighbours():
    t, y, spec = random_problem(np.random.default_rng(12), 50)
    lam, model = select_lambda(t, y, spec)
    for factor in (0.5, 2.0):
        other = fit_penalized(t, y, spec, lam * factor)
        assert model.gcv <= other.gcv + 1e-12


def test_gcv_score_undefined_without_residual_df():
    assert gcv_score(1.0, 10.0, 10) == np.inf
    assert gcv_score(2.0, 2.0, 4) == pytest.approx(4 * 2.0 / 4.0)


def test_select_lambda_rejects_tiny_samples():
    spec = make_basis_spec([0.0, 1.0, 2.0, 3.0], 4)
    with pytest.raises(FitFailureError):
        select_lambda([0.0, 1.0, 2.0], [1.0, 2.0, 3.0], spec)


def test_time_shift_equivariance():
    rng = np.random.default_rng(6)
    t = np.sort(rng.uniform(0, 50, 70))
    y = np.cos(t / 8) + rng.normal(0, 0.1, 70)
    lam_a, a = select_lambda(t, y, make_basis_spec(t, 10))
    lam_b, b = select_lambda(t + 1000, y, make_basis_spec(t + 1000, 10))
    assert lam_a == pytest.approx(lam_b, rel=1e-6)
    np.testing.assert_allclose(predict(a, t), predict(b, t + 1000), rtol=1e-7)


def test_model_roundtrip():
    t, y, spec = random_problem(np.random.default_rng(8), 30)
    model = fit_penalized(t, y, spec, 3.0)
    back = SplineModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(predict(back, t), predict(model, t))
    assert back.lam == 3.0 and back.edf == model.edf


def test_spec_validation():
    with pytest.raises(ValueError):
        SplineBasisSpec(np.array([0.0, 1.0]), (0.0, 1.0))
    with pytest.raises(ValueError):
        SplineBasisSpec(np.array([0.0, 2.0, 1.0]), (0.0, 1.0))
    with pytest.raises(ValueError):
        SplineBasisSpec(np.array([0.0, 1.0, 2.0]), (0.0, 3.0))


def test_predict_empty():
    t, y, spec = random_problem(np.random.default_rng(0), 20)
    assert predict(fit_penalized(t, y, spec, 1.0), []).shape == (0,)


@settings(max_examples=40, deadline=None)
@given(
    a=st.floats(-200, 200),
    b=st.floats(-1, 1),
    log_lam=st.floats(-6, 10),
    seed=st.integers(0, 10_000),
)
def test_affine_property(a, b, log_lam, seed):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(-365, 730, 25))
    y = a + b * t
    model = fit_penalized(t, y, make_basis_spec(t, 8), 10.0**log_lam)
    np.testing.assert_allclose(predict(model, t), y, rtol=1e-7, atol=1e-7 * (abs(a) + abs(b) * 730 + 1))


def test_smoothing_tradeoff_is_monotone():
    t, y, spec = random_problem(np.random.default_rng(21), 45)
    fits = [fit_penalized(t, y, spec, lam) for lam in 10.0 ** np.arange(-6, 9)]
    rss = [m.rss for m in fits]
    edf = [m.edf for m in fits]
    assert all(a <= b * (1 + 1e-10) for a, b in zip(rss, rss[1:]))
    assert all(a >= b for a, b in zip(edf, edf[1:]))
    assert all(1.0 <= e <= spec.n_basis + 1e-9 for e in edf)


def test_response_shift_equivariance():
    t, y, spec = random_problem(np.random.default_rng(22), 40)
    a = fit_penalized(t, y, spec, 2.0)
    b = fit_penalized(t, y + 37.5, spec, 2.0)
    np.testing.assert_allclose(predict(b, t), predict(a, t) + 37.5, rtol=1e-10)


def test_noiseless_cubic_recovered():
    t = np.linspace(-365, 730, 200)
    u = t / 365
    y = 150 + 10 * u - 8 * u**2 + 3 * u**3
    _, model = select_lambda(t, y, make_basis_spec(t, 30))
    rmse = np.sqrt(np.mean((predict(model, t) - y) ** 2))
    assert rmse < 1e-4 * np.ptp(y)


def test_selected_gcv_beats_every_grid_point():
    t, y, spec = random_problem(np.random.default_rng(23), 50)
    _, model = select_lambda(t, y, spec)
    grid = [fit_penalized(t, y, spec, 10.0**g).gcv for g in np.linspace(-6, 8, 15)]
    assert model.gcv <= min(grid) + 1e-12
