"""Randomised property checks used by the ``properties`` experiment.

Each check returns ``(value, threshold, passed)`` where ``value`` is the
worst case observed over the random trials.
"""
from __future__ import annotations

import numpy as np
from scipy.stats import kstest

from ..contrast import local_ima_contrast_batch
from ..densities import FactorizedDensity
from ..flow import ResidualFlow
from ..mixing import ComposedMap, LinearMap, cubic_elementwise, sample_moebius
from ..numcore import random_permutation_matrix, sample_orthogonal
from ..spurious import make_mpa
from ..training import TrainConfig, log_likelihood, objective_and_gradient, regularized_objective


def _random_matrices(rng, count, n):
    return rng.standard_normal((count, n, n))


def hadamard_nonnegativity(rng, n_matrices=10_000, n=3):
    c = local_ima_contrast_batch(_random_matrices(rng, n_matrices, n))
    worst = float(c.min())
    return worst, -1e-12, worst >= -1e-12


def left_invariance(rng, trials=200, n=3):
    worst = 0.0
    for _ in range(trials):
        J = rng.standard_normal((n, n))
        Q = sample_orthogonal(n, rng)
        a, b = local_ima_contrast_batch(np.stack([J, Q @ J]))
        worst = max(worst, abs(a - b))
    return worst, 1e-10, worst <= 1e-10


def right_invariance(rng, trials=200, n=3):
    worst = 0.0
    for _ in range(trials):
        J = rng.standard_normal((n, n))
        P = random_permutation_matrix(n, rng)
        D = np.diag(rng.uniform(0.2, 5.0, n) * rng.choice([-1.0, 1.0], n))
        a, b = local_ima_contrast_batch(np.stack([J, J @ P @ D]))
        worst = max(worst, abs(a - b))
    return worst, 1e-10, worst <= 1e-10


def reparametrization_invariance(rng, n_points=1000, n=3):
    """c(J_f(s)) against c(J_{f o h^-1 o P^-1}(P h(s))) on matched samples."""
    f = sample_moebius(n, 2, rng)
    h = cubic_elementwise(n)
    perm = rng.permutation(n)
    P = LinearMap(np.eye(n)[perm])
    reparam = ComposedMap(P, h)                      # s -> P h(s)
    inv = ComposedMap(f, ComposedMap(cubic_inverse_map(n), LinearMap(np.eye(n)[perm].T)))
    s = FactorizedDensity.uniform(n).sample(n_points, rng).data
    a = local_ima_contrast_batch(f.jacobian(s))
    b = local_ima_contrast_batch(inv.jacobian(reparam.forward(s)))
    worst = float(np.max(np.abs(a - b)))
    return worst, 1e-8, worst <= 1e-8


def cubic_inverse_map(n):
    """Elementwise inverse of ``x + x^3`` as a map."""
    from ..mixing import ElementwiseMap, _cubic_inverse

    return ElementwiseMap(
        n,
        _cubic_inverse,
        lambda y: 1.0 / (1.0 + 3.0 * _cubic_inverse(y) ** 2),
        inv=lambda x: x + x**3,
        name="cubic-inverse",
    )


def flow_roundtrip(rng, n_points=1000, n=3):
    flow = ResidualFlow.init_random(n, rng, n_blocks=8, init_scale=2.0)
    x = rng.standard_normal((n_points, n))
    err = float(np.max(np.abs(flow.inverse(flow.forward(x)) - x)))
    return err, 1e-6, err <= 1e-6


def gradient_check(rng, n=3, coords=20, step=1e-5, lam=0.7):
    flow = ResidualFlow.init_random(n, rng, n_blocks=3, hidden=12, n_sublayers=3, init_scale=1.5)
    flow.shift = rng.standard_normal(n) * 0.1
    flow.scale = rng.uniform(0.5, 2.0, n)
    x = rng.standard_normal((64, n))
    _, _, _, g = objective_and_gradient(flow, x, lam, "standard-logistic")
    idx = rng.choice(flow.n_params, coords, replace=False)
    fd = np.empty(coords)
    for t, i in enumerate(idx):
        old = flow.theta[i]
        flow.theta[i] = old + step
        up = objective_and_gradient(flow, x, lam, "standard-logistic")[0]
        flow.theta[i] = old - step
        dn = objective_and_gradient(flow, x, lam, "standard-logistic")[0]
        flow.theta[i] = old
        fd[t] = (up - dn) / (2 * step)
    err = float(np.linalg.norm(g[idx] - fd) / max(np.linalg.norm(fd), 1e-12))
    return err, 1e-4, err <= 1e-4


def triangularity(rng, n_points=100, n=3):
    flow = ResidualFlow.init_random(n, rng, n_blocks=8, triangular="lower", init_scale=2.0)
    J = flow.jacobian(rng.standard_normal((n_points, n)) * 2.0)
    worst = float(np.max(np.abs(np.triu(J, k=1))))
    return worst, 1e-9, worst <= 1e-9


def mpa_pushforward(rng, n_samples=100_000, n=3):
    p = FactorizedDensity.uniform(n)
    a = make_mpa(p, sample_orthogonal(n, rng))
    y = a.forward(p.sample(n_samples, rng).data)
    worst = max(kstest(y[:, i], "uniform").statistic for i in range(n))
    return float(worst), 0.02, worst <= 0.02


def mle_reduction(rng, n_points=1000, n=3):
    flow = ResidualFlow.init_random(n, rng, n_blocks=4)
    x = rng.standard_normal((n_points, n))
    a = regularized_objective(flow, "standard-logistic", x, 0.0)
    b = log_likelihood(flow, "standard-logistic", x)
    worst = float(np.max(np.abs(a - b)))
    return worst, 1e-12, worst <= 1e-12


# checks whose second argument is a number of evaluation points
POINT_SIZED = ("reparametrization-invariance", "flow-roundtrip", "darmois-triangularity", "objective-reduces-to-mle")

CHECKS = {
    "hadamard-nonnegativity": hadamard_nonnegativity,
    "left-invariance": left_invariance,
    "right-invariance": right_invariance,
    "reparametrization-invariance": reparametrization_invariance,
    "flow-roundtrip": flow_roundtrip,
    "gradient-vs-finite-difference": gradient_check,
    "darmois-triangularity": triangularity,
    "mpa-pushforward-ks": mpa_pushforward,
    "objective-reduces-to-mle": mle_reduction,
}
