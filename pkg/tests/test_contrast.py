import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from ima_bss.contrast import (
    ContrastEstimate,
    global_ima_contrast,
    igci_contrast,
    ima_contrast_on,
    left_kl_diagonality,
    local_ima_contrast,
    local_ima_contrast_batch,
    trace_gap,
)
from ima_bss.densities import FactorizedDensity, Marginal
from ima_bss.errors import ContaminatedEstimateError, NotPositiveDefiniteError
from ima_bss.mixing import ElementwiseMap, LinearMap, MoebiusMap, PolarMap, sample_moebius
from ima_bss.numcore import make_rng, rotation_2d, sample_orthogonal

HALF_LOG2 = 0.34657359027997264


def test_local_contrast_examples(rng):
    assert local_ima_contrast(np.eye(4)) == 0.0
    assert local_ima_contrast([[1.0, 0.0], [1.0, 1.0]]) == pytest.approx(HALF_LOG2, abs=1e-15)
    Q = sample_orthogonal(4, rng)
    assert abs(local_ima_contrast(Q @ np.diag([0.1, 2.0, 5.0, 1.0]))) <= 1e-10


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 6))
@settings(max_examples=60, deadline=None)
def test_local_contrast_nonnegative_and_invariant(seed, n):
    g = make_rng(seed)
    J = g.standard_normal((n, n))
    c = local_ima_contrast(J)
    assert c >= -1e-12
    Q = sample_orthogonal(n, g)
    D = np.diag(g.uniform(0.1, 10, n))
    P = np.eye(n)[g.permutation(n)]
    assert local_ima_contrast(Q @ J) == pytest.approx(c, abs=1e-9)
    assert local_ima_contrast(J @ P @ D) == pytest.approx(c, abs=1e-9)


def test_batch_agrees_with_single(rng):
    J = rng.standard_normal((30, 3, 3))
    np.testing.assert_allclose(local_ima_contrast_batch(J), [local_ima_contrast(j) for j in J], atol=1e-13)


def test_left_kl_diagonality_examples():
    assert left_kl_diagonality(np.diag([2.0, 5.0])) == pytest.approx(0.0, abs=1e-15)
    J = np.array([[1.0, 0.0], [1.0, 1.0]])
    assert left_kl_diagonality(J.T @ J) == pytest.approx(math.log(2.0), abs=1e-14)
    # twice the local contrast for any J
    assert left_kl_diagonality(J.T @ J) == pytest.approx(2 * local_ima_contrast(J), abs=1e-14)


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_left_kl_diagonality_nonnegative(seed):
    A = make_rng(seed).standard_normal((4, 4))
    assert left_kl_diagonality(A.T @ A + 1e-3 * np.eye(4)) >= -1e-12


def test_left_kl_rejects_non_spd():
    with pytest.raises(NotPositiveDefiniteError):
        left_kl_diagonality([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(NotPositiveDefiniteError):
        left_kl_diagonality([[1.0, 2.0], [2.0, 1.0]])


def test_global_contrast_examples(rng):
    f = sample_moebius(2, 2, rng)
    assert abs(global_ima_contrast(f, FactorizedDensity.uniform(2), 10_000, rng=1).value) <= 1e-9
    est = global_ima_contrast(LinearMap([[1.0, 0.0], [1.0, 1.0]]), FactorizedDensity.uniform(2), 5000, rng=2)
    assert est.value == pytest.approx(HALF_LOG2, abs=1e-14)
    assert est.std_error < 1e-14
    from ima_bss.densities import Uniform

    p = FactorizedDensity((Uniform(0.0, 1.0), Uniform(0.0, 2 * math.pi)))
    assert abs(global_ima_contrast(PolarMap(1.0), p, 10_000, rng=3).value) <= 1e-12


def test_global_contrast_independent_of_workers():
    f = LinearMap(np.array([[2.0, 1.0], [0.3, 1.0]]))
    from ima_bss.mixing import build_random_mlp

    g = build_random_mlp(3, 3, make_rng(0))
    p = FactorizedDensity.uniform(3)
    a = global_ima_contrast(g, p, 5000, rng=11, workers=1)
    b = global_ima_contrast(g, p, 5000, rng=11, workers=4)
    assert a == b
    assert global_ima_contrast(f, FactorizedDensity.uniform(2), 100, rng=1).n_samples == 100


def test_contaminated_estimate_reports_point():
    # the pole of a Moebius map placed inside the sampling region
    f = MoebiusMap(np.eye(2), [0.25, 0.25])
    pts = np.array([[0.5, 0.5], [0.25, 0.25]])
    with pytest.raises(Exception):
        ima_contrast_on(f, pts)
    degenerate = LinearMap([[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(ContaminatedEstimateError) as info:
        ima_contrast_on(degenerate, pts)
    assert info.value.point == [0.5, 0.5]


def test_estimate_validation():
    with pytest.raises(ValueError):
        ContrastEstimate(float("nan"), 0.0, 1)
    with pytest.raises(ValueError):
        ContrastEstimate(0.0, -1.0, 1)


class _RampMarginal(Marginal):
    """density 2s on (0, 1)"""

    kind = "ramp"

    def logpdf(self, x):
        return np.log(2 * x)

    def cdf(self, x):
        return np.clip(x, 0, 1) ** 2

    def quantile(self, u):
        return np.sqrt(u)

    def sample(self, rng, size):
        return np.sqrt(rng.uniform(size=size))

    def in_support(self, x):
        return (x > 0) & (x < 1)


def _square_map():
    return ElementwiseMap(1, lambda s: s * s, lambda s: 2 * s, np.sqrt, name="square")


def test_igci_square_map_against_quadrature():
    # oracle: E_p[log 2s] - E_Leb[log 2s] by adaptive quadrature
    on_p = quad(lambda s: math.log(2 * s) * 2 * s, 0, 1)[0]
    on_leb = quad(lambda s: math.log(2 * s), 0, 1)[0]
    expected = on_p - on_leb
    assert expected == pytest.approx(0.5, abs=1e-9)
    p = FactorizedDensity((_RampMarginal(),))
    for coupling in ("quantile", "independent"):
        est = igci_contrast(_square_map(), p, 20_000, rng=5, coupling=coupling)
        assert abs(est.value - expected) <= 3 * est.std_error


def test_igci_examples(rng):
    p = FactorizedDensity.standard_normal(2)
    ident = LinearMap(np.eye(2))
    assert igci_contrast(ident, p, 1000, rng=1).value == 0.0
    f = sample_moebius(2, 2, rng)
    u = FactorizedDensity.uniform(2)
    est = igci_contrast(f, u, 5000, rng=2, coupling="independent")
    assert abs(est.value) <= 2 * est.std_error
    assert igci_contrast(f, u, 5000, rng=2).value == 0.0
    with pytest.raises(ValueError):
        igci_contrast(f, u, 10, rng=2, coupling="bogus")


def test_trace_gap_examples(rng):
    A = rng.standard_normal((3, 3))
    assert trace_gap(A, np.eye(3)) == pytest.approx(0.0, abs=1e-14)
    S = rng.standard_normal((3, 3))
    S = S @ S.T + np.eye(3)
    assert trace_gap(np.eye(3), S) == pytest.approx(0.0, abs=1e-14)
    # diagonal A against a covariance with equal diagonal entries: hand value 0
    R = rotation_2d(math.pi / 4)
    S45 = R @ np.diag([1.0, 0.1]) @ R.T
    assert trace_gap(np.diag([1.0, 0.1]), S45) == pytest.approx(0.0, abs=1e-14)
    # hand value: tau(A S A^T) = 0.6, tau(S) = 0.55, tau(A A^T) = 1.5
    assert trace_gap([[1.0, 1.0], [0.0, 1.0]], np.diag([1.0, 0.1])) == pytest.approx(math.log(8 / 11), abs=1e-14)
