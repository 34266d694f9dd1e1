import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_spd
from mc_oracle import regression_conditional, second_moment_se
from vlcurve.gaussian import (
    SubModel,
    assemble_moments,
    conditional_moments,
    extract_submodel,
    log_density,
    subject_moments,
)
from vlcurve.model import NotPositiveDefiniteError, SubjectRecord, ar1_correlation

THETA = np.array([1.0, 2.0, 3.0])
AR = 10 * ar1_correlation(0.9, 3)


def test_extract_singleton():
    sub = extract_submodel(THETA, np.eye(3), SubjectRecord([5.0], []), 2)
    assert sub.mean.tolist() == [2.0] and sub.cov.tolist() == [[1.0]] and sub.index_map.tolist() == [2]


def test_extract_pairs():
    sub = extract_submodel(THETA, AR, SubjectRecord([0, 0], [2]), 1)
    np.testing.assert_allclose(sub.mean, [1, 3])
    np.testing.assert_allclose(sub.cov, [[10, 8.1], [8.1, 10]])
    sub = extract_submodel(THETA, AR, SubjectRecord([0, 0], [1]), 2)
    np.testing.assert_allclose(sub.mean, [2, 3])
    np.testing.assert_allclose(sub.cov, AR[1:, 1:])


def test_extract_rejects_bad_origin_and_overflow():
    with pytest.raises(ValueError):
        extract_submodel(THETA, AR, SubjectRecord([0.0], []), 3)
    with pytest.raises(IndexError):
        extract_submodel(THETA, AR, SubjectRecord([0, 0], [2]), 2)


def test_log_density_examples():
    sub = SubModel(np.zeros(1), np.eye(1), 1, np.array([1]))
    assert log_density(sub, [0.0]) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-14)
    sub = SubModel(np.zeros(2), np.eye(2), 1, np.array([1, 2]))
    assert log_density(sub, [0.0, 0.0]) == pytest.approx(-np.log(2 * np.pi), abs=1e-14)


def test_log_density_bivariate_formula():
    S = np.array([[10, 8.1], [8.1, 10]])
    sub = SubModel(np.array([1.0, 3.0]), S, 1, np.array([1, 3]))
    r = np.array([2.0, 2.0]) - sub.mean
    det = S[0, 0] * S[1, 1] - S[0, 1] ** 2
    inv = np.array([[S[1, 1], -S[0, 1]], [-S[0, 1], S[0, 0]]]) / det
    expected = np.log(np.exp(-0.5 * r @ inv @ r) / (2 * np.pi * np.sqrt(det)))
    assert log_density(sub, [2.0, 2.0]) == pytest.approx(expected, abs=1e-12)


def test_log_density_not_pd():
    sub = SubModel(np.zeros(2), np.ones((2, 2)), 1, np.array([1, 2]))
    with pytest.raises(NotPositiveDefiniteError):
        log_density(sub, [0.0, 0.0])


@pytest.mark.parametrize("var", [0.3, 2.0])
def test_density_integrates_to_one_1d(var):
    sub = SubModel(np.array([0.7]), np.array([[var]]), 1, np.array([1]))
    grid = np.linspace(-30, 30, 60001)
    dens = np.exp([log_density(sub, [x]) for x in grid])
    assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-4)


def test_density_integrates_to_one_2d():
    S = np.array([[1.0, 0.6], [0.6, 2.0]])
    sub = SubModel(np.array([0.5, -1.0]), S, 1, np.array([1, 2]))
    g = np.linspace(-12, 12, 601)
    X, Y = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], 1) - sub.mean
    inv = np.linalg.inv(S)
    # vectorized twin of log_density checked at a few points first
    for p in pts[::50000]:
        dense = -0.5 * p @ inv @ p - np.log(2 * np.pi) - 0.5 * np.log(np.linalg.det(S))
        assert log_density(sub, p + sub.mean) == pytest.approx(dense, abs=1e-12)
    dens = np.exp(-0.5 * np.einsum("ij,jk,ik->i", pts, inv, pts)) / (2 * np.pi * np.sqrt(np.linalg.det(S)))
    total = np.trapezoid(np.trapezoid(dens.reshape(X.shape), g, axis=1), g)
    assert total == pytest.approx(1.0, abs=1e-4)


def test_conditional_independence():
    rec = SubjectRecord([5.0], [])
    theta = np.arange(5.0)
    cov = np.diag([1.0, 2.0, 3.0, 4.0, 4.0])
    sub = extract_submodel(theta, cov, rec, 2)
    law = conditional_moments(theta, cov, sub, rec.values)
    np.testing.assert_array_equal(law.mean_unobs, theta[[0, 2, 3, 4]])
    np.testing.assert_array_equal(law.cov_unobs, np.diag([1.0, 3.0, 4.0, 4.0]))


def test_conditional_scalar_ar1():
    theta = np.array([1.0, 2.0, 3.0])
    cov = ar1_correlation(0.5, 3)
    y = 4.0
    sub = extract_submodel(theta, cov, SubjectRecord([y], []), 1)
    law = conditional_moments(theta, cov, sub, [y])
    np.testing.assert_allclose(law.mean_unobs, [2 + 0.5 * (y - 1), 3 + 0.25 * (y - 1)], atol=1e-14)


def test_conditional_one_observed_one_hidden_closed_form():
    theta = np.array([1.5, -0.5])
    S = np.array([[2.0, 0.7], [0.7, 1.3]])
    sub = SubModel(theta[:1], S[:1, :1], 1, np.array([1]))
    y = 3.25
    law = conditional_moments(theta, S, sub, [y])
    assert law.mean_unobs[0] == pytest.approx(theta[1] + S[0, 1] / S[0, 0] * (y - theta[0]), abs=1e-15)
    assert law.cov_unobs[0, 0] == pytest.approx(S[1, 1] - S[0, 1] ** 2 / S[0, 0], abs=1e-15)


def test_conditional_monte_carlo():
    theta = np.array([1.0, 2.0, 3.0])
    cov = 10 * ar1_correlation(0.9, 3)
    rec = SubjectRecord([2.0, 2.0], [2])
    sub = extract_submodel(theta, cov, rec, 1)
    law = conditional_moments(theta, cov, sub, rec.values)
    unobs, e, V, se_e, se_V = regression_conditional(theta, cov, sub.index_map - 1, rec.values,
                                                     10 ** 6, np.random.default_rng(3))
    assert unobs.tolist() == law.unobs_index.tolist()
    assert np.all(np.abs(law.mean_unobs - e) < 3 * se_e)
    assert np.all(np.abs(law.cov_unobs - V) < 3 * se_V)
    _, C = assemble_moments(law, sub, rec.values)
    C_mc = V + np.outer(e, e)
    se_C = second_moment_se(e, se_e, se_V)
    u = law.unobs_index
    assert np.all(np.abs(C[np.ix_(u, u)] - C_mc) < 3 * se_C)


def test_conditional_edge_cases():
    theta = np.array([1.0, 2.0, 3.0])
    cov = 10 * ar1_correlation(0.9, 3)
    empty = SubModel(np.zeros(0), np.zeros((0, 0)), 1, np.zeros(0, dtype=int))
    law = conditional_moments(theta, cov, empty, [])
    np.testing.assert_array_equal(law.mean_unobs, theta)
    np.testing.assert_array_equal(law.cov_unobs, cov)
    full = SubModel(theta, cov, 1, np.array([1, 2, 3]))
    law = conditional_moments(theta, cov, full, [0.5, 0.1, 0.2])
    assert law.mean_unobs.size == 0 and law.cov_unobs.shape == (0, 0)
    y, C = assemble_moments(law, full, [0.5, 0.1, 0.2])
    np.testing.assert_array_equal(y, [0.5, 0.1, 0.2])
    np.testing.assert_array_equal(C, np.outer(y, y))


def test_assemble_independence():
    theta = np.array([1.0, 2.0, 3.0])
    cov = 2.0 * np.eye(3)
    y, C = subject_moments(theta, cov, SubjectRecord([7.0], []), 1)
    np.testing.assert_array_equal(y, [7.0, 2.0, 3.0])
    assert C[1, 1] == 2 + 4 and C[2, 2] == 2 + 9 and C[1, 2] == 6 and C[0, 1] == 14


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10 ** 6), st.integers(1, 3), st.data())
def test_assembled_moments_properties(d, seed, m, data):
    rng = np.random.default_rng(seed)
    L = 2 * d - 1
    theta = rng.standard_normal(L)
    cov = random_spd(rng, L)
    m = min(m, d)
    gaps = []
    for _ in range(m - 1):
        room = d - 1 - sum(gaps) - (m - 2 - len(gaps))
        gaps.append(data.draw(st.integers(1, max(room, 1))))
    if sum(gaps) >= d:
        return
    rec = SubjectRecord(rng.standard_normal(m), gaps)
    origin = data.draw(st.integers(1, d))
    sub = extract_submodel(theta, cov, rec, origin)
    law = conditional_moments(theta, cov, sub, rec.values)
    y, C = assemble_moments(law, sub, rec.values)
    np.testing.assert_array_equal(y[sub.index_map - 1], rec.values)
    resid = C - np.outer(y, y)
    assert np.allclose(resid, resid.T, atol=1e-10)
    assert np.linalg.eigvalsh(0.5 * (resid + resid.T))[0] > -1e-9
    assert np.linalg.eigvalsh(law.cov_unobs)[0] > -1e-9 if law.cov_unobs.size else True
