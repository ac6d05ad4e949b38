import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fbsde_game_lab.errors import NumericalFailure
from fbsde_game_lab.regression import fit_projection, independent_columns, poly_features, project


def test_poly_features_counts(rng):
    x = rng.normal(size=(50, 3))
    # 1 + 3 + 6 monomials
    assert poly_features(x, 2).shape == (50, 10)


def test_poly_features_drop_constant_columns(rng):
    x = np.column_stack([rng.normal(size=50), np.full(50, 4.0)])
    assert poly_features(x, 2).shape == (50, 3)


def test_independent_columns_prunes_affine_copies(rng):
    x = rng.normal(size=(100, 2))
    y = np.column_stack([x, 3 * x[:, 0] - 1, np.ones(100)])
    kept = independent_columns(y)
    assert kept.shape[1] == 2


def test_projection_is_idempotent(rng):
    X = rng.normal(size=(300, 3))
    y = X @ [1.0, -2.0, 0.5] + 0.3
    np.testing.assert_allclose(project(X, y), y, atol=1e-10)


@given(st.integers(0, 10_000))
def test_projection_residual_orthogonal_to_features(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(200, 4))
    y = np.sin(X[:, 0]) + rng.normal(size=200)
    resid = y - project(X, y)
    A = np.column_stack([np.ones(200), X])
    assert np.max(np.abs(A.T @ resid)) <= 1e-9 * np.sqrt(200) * (1 + np.abs(y).max())


def test_multiple_targets(rng):
    X = rng.normal(size=(100, 2))
    Y = np.column_stack([X[:, 0], X[:, 1] + 1])
    proj = fit_projection(X, Y)
    np.testing.assert_allclose(proj.predict(X), Y, atol=1e-10)
    np.testing.assert_allclose(proj.project_sample(Y), Y, atol=1e-10)


def test_rank_deficiency_reports_condition(rng):
    x = rng.normal(size=200)
    X = np.column_stack([x, x + 1e-12 * rng.normal(size=200)])
    with pytest.raises(NumericalFailure) as info:
        fit_projection(X, np.ones(200))
    assert info.value.report["condition"] > 1e10


def test_fitted_stderr_matches_theory(rng):
    # pure noise target: fitted-value variance is sigma^2 * leverage, mean leverage k / n
    n, k = 2000, 3
    X = rng.normal(size=(n, k - 1))
    y = rng.normal(size=n)
    proj = fit_projection(X, y)
    se = proj.fitted_stderr(X)
    assert np.mean(se**2) == pytest.approx(k / n, rel=0.1)
