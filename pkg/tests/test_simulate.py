import numpy as np
import pytest

from vlcurve.model import AR1Covariance, OnsetWeights, TrajectoryParams, expand_tail
from vlcurve.simulate import (
    CategoricalGaps,
    EmpiricalMarginals,
    SyntheticTruth,
    UniformGaps,
    decreasing_gaps,
    parse_gap_law,
    preset_truth,
    semisynthetic_truth,
    simulate_multiplicities,
    simulate_semisynthetic,
    simulate_synthetic,
    standin_marginals,
)


def test_preset_shape():
    t = preset_truth()
    active = t.theta.theta[:14]
    assert int(np.argmax(active)) + 1 == 4
    assert active.max() == pytest.approx(17.0, rel=1e-12)
    assert t.cov == AR1Covariance(10.0, 0.9)
    assert np.all(np.diff(t.q.q) < 0) and t.q.q.sum() == pytest.approx(1.0)
    assert t.gap_law == UniformGaps(1, 14)


def test_onset_frequencies_follow_q():
    t = preset_truth()
    n = 20_000
    _, log = simulate_synthetic(t, n, seed=1)
    counts = np.bincount(log.first_day, minlength=15)[1:]
    q = t.q.q
    z = (counts - n * q) / np.sqrt(n * q * (1 - q))
    assert np.all(np.abs(z) < 4.5)


def test_small_noise_values_track_the_mean():
    d = 4
    theta = expand_tail([1.0, 5.0, 3.0, 2.0], d)
    t = SyntheticTruth(TrajectoryParams(theta), AR1Covariance(1e-8, 0.0), OnsetWeights(np.full(d, 0.25)),
                       UniformGaps(1, 3), m_per_subject=2)
    data, log = simulate_synthetic(t, 200, seed=2)
    for rec, x1, off in zip(data.records, log.first_day, log.offsets):
        np.testing.assert_allclose(rec.values, theta[x1 - 1 + off], atol=1e-3)
        assert rec.gaps.sum() < d


def test_gap_rejection_keeps_records_admissible():
    t = preset_truth(m_per_subject=3)
    data, log = simulate_synthetic(t, 3000, seed=3)
    assert all(r.gaps.sum() < 14 and r.m == 3 for r in data.records)
    assert log.rejected_gap_draws > 0


def test_impossible_gap_law():
    t = preset_truth(gap_law=UniformGaps(7, 9), m_per_subject=3)
    with pytest.raises(ValueError):
        simulate_synthetic(t, 10, seed=0)


def test_deterministic_and_block_stable():
    t = preset_truth()
    a, _ = simulate_synthetic(t, 1500, seed=9)
    b, _ = simulate_synthetic(t, 1500, seed=9)
    c, _ = simulate_synthetic(t, 1024, seed=9)
    assert all(np.array_equal(x.values, y.values) and np.array_equal(x.gaps, y.gaps)
               for x, y in zip(a.records, b.records))
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a.records[:1024], c.records))
    d, _ = simulate_synthetic(t, 1500, seed=10)
    assert not np.array_equal(a.records[0].values, d.records[0].values)


def test_multiplicities():
    data, log = simulate_multiplicities(preset_truth(), {2: 50, 3: 7, 4: 2}, seed=1)
    ms = [r.m for r in data.records]
    assert ms.count(2) == 50 and ms.count(3) == 7 and ms.count(4) == 2
    assert len({r.subject_id for r in data.records}) == 59
    assert log.first_day.size == 59


def test_semisynthetic_moments():
    marg = standin_marginals()
    d = 14
    L = 2 * d - 1
    theta, cov = semisynthetic_truth(marg, d)
    np.testing.assert_allclose(np.diag(cov), marg.variances()[:L] + 2.0)
    _, _, latent = simulate_semisynthetic(marg, UniformGaps(1, 13), 100_000, seed=4, return_latent=True)
    np.testing.assert_allclose(latent.var(0), np.diag(cov), rtol=0.05)
    lag1 = np.mean((latent[:, :-1] - latent[:, :-1].mean(0)) * (latent[:, 1:] - latent[:, 1:].mean(0)), axis=0)
    np.testing.assert_allclose(lag1, 1.0, atol=0.15)
    np.testing.assert_allclose(latent.mean(0), theta, atol=0.1)


def test_semisynthetic_values_come_from_latent():
    marg = standin_marginals()
    data, log, latent = simulate_semisynthetic(marg, UniformGaps(1, 13), 50, seed=5, return_latent=True)
    for i, (rec, x1, off) in enumerate(zip(data.records, log.first_day, log.offsets)):
        np.testing.assert_array_equal(rec.values, latent[i, x1 - 1 + off])


def test_marginal_validation():
    with pytest.raises(ValueError, match="day 2"):
        EmpiricalMarginals(([1.0], []))
    with pytest.raises(ValueError):
        semisynthetic_truth(EmpiricalMarginals(([1.0],) * 5), d=4)


def test_gap_laws():
    assert parse_gap_law("uniform:2:3", 14) == UniformGaps(2, 3)
    dec = parse_gap_law("decreasing", 4)
    assert dec == decreasing_gaps(4)
    np.testing.assert_allclose(dec.probs, [0.5, 1 / 3, 1 / 6])
    cat = parse_gap_law("categorical:1=0.25,3=0.75", 5)
    assert cat.support == (1, 3) and cat.probs == (0.25, 0.75)
    with pytest.raises(ValueError):
        parse_gap_law("poisson:3", 5)
    with pytest.raises(ValueError):
        CategoricalGaps((0, 1), (0.5, 0.5))
    with pytest.raises(ValueError):
        UniformGaps(3, 2)
