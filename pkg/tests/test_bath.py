import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from nvbath.bath import (BathParameters, SpinConfiguration, default_radius, make_rng, nearest_distances,
                         nn_mean, nn_pdf, sample_batch, sample_configuration)


def test_zero_density_is_always_empty():
    p = BathParameters(sigma=0.0, radius_R=25.0)
    assert all(len(sample_configuration(p, seed=1, index=i)) == 0 for i in range(50))


def test_poisson_mean_count():
    p = BathParameters(sigma=0.005, radius_R=25.0)
    assert p.mean_count == pytest.approx(9.817, abs=1e-3)
    b = sample_batch(p, 200_000, make_rng(4))
    # Poisson mean oracle: standard error sqrt(lambda / N)
    assert abs(b.counts.mean() - p.mean_count) < 4 * math.sqrt(p.mean_count / 200_000)
    assert b.counts.var() == pytest.approx(p.mean_count, rel=0.02)


def test_configuration_invariants():
    p = BathParameters(sigma=0.01, radius_R=30.0, stationary_fraction=0.3)
    c = sample_configuration(p, seed=9)
    assert len(c.r) == len(c.alpha) == len(c.states) == len(c.stationary_mask)
    assert np.all(c.r <= 30.0)
    assert set(np.unique(c.states)) <= {-1, 1}
    assert 0.1 < c.stationary_mask.mean() < 0.5


def test_parameter_validation():
    for kw in ({"sigma": -1, "radius_R": 1}, {"sigma": 1, "radius_R": 0},
               {"sigma": 1, "radius_R": 1, "stationary_fraction": 1.5}, {"sigma": 1, "radius_R": 1, "t1_bath": 0}):
        with pytest.raises(ValueError):
            BathParameters(**kw)
    with pytest.raises(OverflowError):
        sample_configuration(BathParameters(sigma=10.0, radius_R=1000.0), seed=0)


def test_default_radius_rule():
    assert default_radius(5.0, 0.005) == 35.35533905932738
    assert default_radius(2.0, 0.1) == 25.0
    assert default_radius(10.0, 0.1) == 50.0


def test_nn_pdf_normalisation_and_mean():
    for s in (0.001, 0.005, 0.05):
        norm, _ = integrate.quad(nn_pdf, 0, np.inf, args=(s,), epsabs=1e-12)
        mean, _ = integrate.quad(lambda r: r * nn_pdf(r, s), 0, np.inf, epsabs=1e-12)
        assert norm == pytest.approx(1.0, abs=1e-8)
        assert mean == pytest.approx(1 / (2 * math.sqrt(s)), rel=1e-8)
        assert nn_mean(s) == pytest.approx(mean, rel=1e-10)
    assert nn_mean(0.001) == pytest.approx(15.81, abs=0.01)


def test_nn_histogram_ks():
    s = 0.005
    p = BathParameters(sigma=s, radius_R=default_radius(5.0, s))
    d = nearest_distances(sample_batch(p, 100_000, make_rng(11)))
    d = d[np.isfinite(d)]
    cdf = lambda r: 1.0 - np.exp(-math.pi * s * r * r)  # noqa: E731
    res = stats.kstest(d, cdf)
    # 1% critical value of the one-sample KS statistic
    assert res.statistic < 1.63 / math.sqrt(d.size)
    assert d.mean() == pytest.approx(1 / (2 * math.sqrt(s)), rel=0.01)


def test_azimuthal_uniformity():
    b = sample_batch(BathParameters(sigma=0.01, radius_R=25.0), 20_000, make_rng(2))
    h, _ = np.histogram(b.alpha, bins=24, range=(0, 2 * math.pi))
    e = b.alpha.size / 24
    assert np.all(np.abs(h - e) < 3 * math.sqrt(e) + 1)
    # uniform areal density: r^2 / R^2 is uniform
    assert stats.kstest((b.r / 25.0) ** 2, "uniform").pvalue > 1e-3


@given(st.integers(0, 2**32), st.integers(0, 1000))
def test_identical_seed_bit_identical(seed, index):
    p = BathParameters(sigma=0.01, radius_R=20.0)
    a, b = sample_configuration(p, seed, index), sample_configuration(p, seed, index)
    assert a.r.tobytes() == b.r.tobytes() and a.states.tobytes() == b.states.tobytes()


def test_json_round_trip():
    c = sample_configuration(BathParameters(sigma=0.01, radius_R=20.0, stationary_fraction=0.5), seed=5)
    back = SpinConfiguration.from_json(c.to_json())
    assert back.r.tobytes() == c.r.tobytes() and back.alpha.tobytes() == c.alpha.tobytes()
    assert np.array_equal(back.states, c.states) and np.array_equal(back.stationary_mask, c.stationary_mask)


def test_configuration_validation():
    with pytest.raises(ValueError):
        SpinConfiguration(np.array([1.0]), np.array([0.0, 1.0]), np.array([1]), np.array([False]))
    with pytest.raises(ValueError):
        SpinConfiguration(np.array([30.0]), np.array([0.0]), np.array([1]), np.array([False]), radius_R=20.0)
    with pytest.raises(ValueError):
        SpinConfiguration(np.array([1.0]), np.array([0.0]), np.array([0]), np.array([False]))
