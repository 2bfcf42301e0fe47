import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ima_bss.densities import (
    FactorizedDensity,
    StandardLogistic,
    StandardNormal,
    Uniform,
    cdf,
    log_pdf,
    marginals_of,
    quantile,
    sample,
)
from ima_bss.errors import BoundaryError, OutOfSupportError
from ima_bss.numcore import make_rng


def test_log_pdf_examples():
    assert log_pdf(FactorizedDensity.uniform(2), [0.5, 0.5]) == 0.0
    assert log_pdf(FactorizedDensity.standard_normal(1), [0.0]) == pytest.approx(-0.9189385332046727, abs=1e-15)
    assert log_pdf(FactorizedDensity.standard_logistic(1), [0.0]) == pytest.approx(math.log(0.25), abs=1e-15)


def test_log_pdf_outside_support():
    with pytest.raises(OutOfSupportError):
        log_pdf(FactorizedDensity.uniform(2), [1.5, 0.5])


def test_cdf_and_quantile_examples():
    u = FactorizedDensity.uniform(1)
    for t in (0.0, 0.3, 1.0):
        assert cdf(u, [t])[0] == pytest.approx(t)
    g = FactorizedDensity.standard_normal(1)
    assert cdf(g, [0.0])[0] == 0.5
    # frozen from a bisection of the normal CDF
    assert quantile(g, [0.975])[0] == pytest.approx(1.959963984540054, abs=1e-9)


def test_quantile_rejects_boundary():
    with pytest.raises(BoundaryError):
        quantile(FactorizedDensity.standard_normal(1), [1.0])


@pytest.mark.parametrize("marginal", [Uniform(-1.0, 2.0), StandardNormal(), StandardLogistic()])
@given(u=st.floats(1e-6, 1 - 1e-6))
@settings(max_examples=40, deadline=None)
def test_quantile_inverts_cdf(marginal, u):
    x = marginal.quantile(np.array([u]))
    assert marginal.cdf(x)[0] == pytest.approx(u, abs=1e-9)


@pytest.mark.parametrize("marginal", [StandardNormal(), StandardLogistic()])
def test_score_matches_finite_difference(marginal):
    x = np.linspace(-3, 3, 13)
    h = 1e-6
    fd = (marginal.logpdf(x + h) - marginal.logpdf(x - h)) / (2 * h)
    np.testing.assert_allclose(marginal.dlogpdf(x), fd, atol=1e-7)


def test_sampling_moments_and_determinism():
    b = sample(FactorizedDensity.uniform(2), 100_000, make_rng(1))
    assert np.all(np.abs(b.data.mean(axis=0) - 0.5) < 0.005)
    g = sample(FactorizedDensity.standard_normal(1), 100_000, make_rng(2))
    assert abs(g.data.var() - 1.0) < 0.02
    again = sample(FactorizedDensity.uniform(2), 100_000, make_rng(1))
    np.testing.assert_array_equal(b.data, again.data)


def test_round_trip_serialisation():
    d = marginals_of(["uniform", "standard-logistic", "standard-normal"])
    assert FactorizedDensity.from_dict(d.to_dict()).to_dict() == d.to_dict()
    assert d.dim == 3
