import math

import numpy as np
import pytest
from scipy.integrate import quad

from ima_bss.contrast import local_ima_contrast_batch
from ima_bss.densities import FactorizedDensity
from ima_bss.errors import ConfigError, TrainingAborted
from ima_bss.flow import FlowModel, ResidualFlow, load_checkpoint
from ima_bss.metrics import kl_to_truth
from ima_bss.mixing import LinearMap, sample_moebius
from ima_bss.numcore import make_rng
from ima_bss.training import (
    Adam,
    TrainConfig,
    TrainHistory,
    cosine_lr,
    gradient,
    log_likelihood,
    objective_and_gradient,
    regularized_objective,
    train,
)

from conftest import BACKENDS


def test_log_likelihood_identity_flow():
    for n in (1, 2, 4):
        flow = ResidualFlow(n, n_blocks=2)
        assert log_likelihood(flow, "standard-normal", np.zeros(n)) == pytest.approx(-0.5 * n * math.log(2 * math.pi))


def test_log_likelihood_affine_1d_normalises():
    flow = ResidualFlow(1, n_blocks=1, scale=[0.5])  # y = 2 x
    assert log_likelihood(flow, "standard-normal", [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi) + math.log(2.0))
    mass, _ = quad(lambda t: math.exp(log_likelihood(flow, "standard-normal", [t])), -20, 20)
    assert mass == pytest.approx(1.0, abs=1e-3)


def test_log_likelihood_matches_model_samples():
    # interval probabilities from the density against the sampling frequency
    flow = ResidualFlow.init_random(1, make_rng(3), n_blocks=3, hidden=5, init_scale=3.0)
    model = FlowModel(flow, "standard-logistic")
    xs = model.sample(40_000, make_rng(4))[:, 0]
    for a, b in [(-1.0, 0.0), (0.0, 0.7), (0.7, 3.0)]:
        prob, _ = quad(lambda t: math.exp(log_likelihood(flow, "standard-logistic", [t])), a, b)
        freq = np.mean((xs > a) & (xs <= b))
        assert abs(freq - prob) < 4 * math.sqrt(prob * (1 - prob) / xs.size)


def test_log_likelihood_accepts_density_object(rng):
    flow = ResidualFlow.init_random(2, rng, n_blocks=2)
    x = rng.standard_normal((5, 2))
    np.testing.assert_array_equal(
        log_likelihood(flow, FactorizedDensity.standard_logistic(2), x),
        log_likelihood(flow, "standard-logistic", x),
    )


def test_objective_reduces_to_mle(rng):
    flow = ResidualFlow.init_random(3, rng, n_blocks=4, init_scale=2.0)
    x = rng.standard_normal((1000, 3))
    diff = regularized_objective(flow, "standard-logistic", x, 0.0) - log_likelihood(flow, "standard-logistic", x)
    assert np.max(np.abs(diff)) <= 1e-12


def test_objective_penalty_vanishes_for_diagonal_jacobian(rng):
    flow = ResidualFlow(2, n_blocks=3, scale=[0.3, 4.0], shift=[1.0, -1.0])
    x = rng.standard_normal((100, 2))
    np.testing.assert_allclose(
        regularized_objective(flow, "standard-normal", x, 1.0),
        log_likelihood(flow, "standard-normal", x),
        atol=1e-13,
    )


def test_objective_identity_against_contrast(rng):
    flow = ResidualFlow.init_random(3, rng, n_blocks=4, init_scale=2.0)
    x = rng.standard_normal((200, 3))
    lam = 0.8
    P = flow.jacobian(x)
    expected = log_likelihood(flow, "standard-normal", x) - lam * local_ima_contrast_batch(np.linalg.inv(P))
    assert np.max(np.abs(regularized_objective(flow, "standard-normal", x, lam) - expected)) <= 1e-10


def test_objective_rejects_negative_lambda(rng):
    with pytest.raises(ValueError):
        regularized_objective(ResidualFlow(2, n_blocks=1), "standard-normal", np.zeros((1, 2)), -0.1)


@pytest.mark.parametrize("backend", BACKENDS)
def test_gradient_hand_calculus_1d(backend):
    v0, c0, v1, c1, x = 0.7, -0.2, 0.5, 0.3, 0.9
    flow = ResidualFlow(1, n_blocks=1, hidden=1)
    (V0, C0), (V1, C1) = flow.layers()[0]
    V0[...], C0[...], V1[...], C1[...] = v0, c0, v1, c1
    a = v0 * x + c0
    t = math.tanh(a)
    s2 = 1 - t * t
    y = x + v1 * t + c1
    d = 1 + v1 * v0 * s2
    hand = {
        "V0": -y * v1 * s2 * x + (v1 * s2 + v1 * v0 * (-2 * t * s2) * x) / d,
        "C0": -y * v1 * s2 + v1 * v0 * (-2 * t * s2) / d,
        "V1": -y * t + v0 * s2 / d,
        "C1": -y,
    }
    g = gradient(flow, [[x]], 0.0, "standard-normal", backend)
    np.testing.assert_allclose(g, [hand["V0"], hand["C0"], hand["V1"], hand["C1"]], atol=1e-10)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize(
    "arch",
    [
        dict(n=2, n_blocks=8, hidden=16, n_sublayers=2, triangular="lower", lam=0.0, base="standard-normal"),
        dict(n=2, n_blocks=8, hidden=16, n_sublayers=2, triangular=None, lam=1.0, base="standard-logistic"),
        dict(n=3, n_blocks=3, hidden=12, n_sublayers=3, triangular=None, lam=0.5, base="standard-normal"),
    ],
)
def test_gradient_matches_central_differences(backend, arch):
    arch = dict(arch)
    lam, base = arch.pop("lam"), arch.pop("base")
    g = make_rng(21)
    flow = ResidualFlow.init_random(arch.pop("n"), g, init_scale=2.0, **arch)
    flow.shift = g.standard_normal(flow.dim) * 0.1
    flow.scale = g.uniform(0.5, 2.0, flow.dim)
    x = g.standard_normal((64, flow.dim))
    grad = gradient(flow, x, lam, base, backend)
    free = np.flatnonzero(flow.mask) if flow.mask is not None else np.arange(flow.n_params)
    idx = g.choice(free, 20, replace=False)
    fd = np.empty(20)
    h = 1e-5
    for t, i in enumerate(idx):
        old = flow.theta[i]
        flow.theta[i] = old + h
        up = objective_and_gradient(flow, x, lam, base, backend)[0]
        flow.theta[i] = old - h
        dn = objective_and_gradient(flow, x, lam, base, backend)[0]
        flow.theta[i] = old
        fd[t] = (up - dn) / (2 * h)
    assert np.linalg.norm(grad[idx] - fd) / np.linalg.norm(fd) <= 1e-4


def test_masked_gradient_entries_are_zero(rng):
    flow = ResidualFlow.init_random(3, rng, n_blocks=4, triangular="upper")
    grad = gradient(flow, rng.standard_normal((32, 3)), 0.7)
    assert np.all(grad[~flow.mask] == 0.0)
    assert np.any(grad[flow.mask] != 0.0)


def test_train_config_validation():
    with pytest.raises(ConfigError) as info:
        TrainConfig(lam=-1.0)
    assert info.value.field == "lam"
    with pytest.raises(ConfigError):
        TrainConfig(base="cauchy")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})
    cfg = TrainConfig(lam=0.5, batch_size=64, seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_effective_batch_rule():
    assert TrainConfig().effective_batch(1000) == 1000
    assert TrainConfig().effective_batch(5000) == 512
    assert TrainConfig(batch_size=256).effective_batch(5000) == 256
    assert TrainConfig(batch_size=256).effective_batch(100) == 100


def test_cosine_schedule_and_adam():
    assert cosine_lr(1e-3, 0, 100) == pytest.approx(1e-3)
    assert cosine_lr(1e-3, 50, 100) == pytest.approx(5e-4)
    # ascent on -(p - 3)^2 converges to 3
    opt = Adam(1)
    p = np.zeros(1)
    for _ in range(3000):
        opt.step(p, -2 * (p - 3.0), 0.05)
    assert p[0] == pytest.approx(3.0, abs=1e-3)


def test_train_gaussian_1d_fits():
    data = make_rng(0).standard_normal((2000, 1))
    flow = ResidualFlow.init_random(1, make_rng(1), n_blocks=2, hidden=8)
    cfg = TrainConfig(iterations=500, learning_rate=1e-2, seed=2)
    trained, hist = train(flow, data, cfg)
    kl = kl_to_truth(FlowModel(trained), LinearMap([[1.0]]), FactorizedDensity.standard_normal(1), 20_000, rng=5)
    assert kl.value <= 0.05
    assert hist.step[-1] == 500 and hist.loglik[-1] > hist.loglik[0]


def _moebius_data(n_points, seed):
    g = make_rng(seed)
    f = sample_moebius(2, 2, g)
    s = FactorizedDensity.uniform(2).sample(n_points, g).data
    return f, f.forward(s)


def test_train_regularised_moebius_has_small_contrast():
    f, x = _moebius_data(3000, 0)
    flow = ResidualFlow.init_random(2, make_rng(1), n_blocks=4, hidden=16)
    cfg = TrainConfig(lam=1.0, iterations=3000, batch_size=256, base="standard-logistic", seed=0)
    trained, _ = train(flow, x, cfg)
    c = local_ima_contrast_batch(np.linalg.inv(trained.jacobian(x[:2000])))
    assert c.mean() <= 0.05


def test_training_is_deterministic(tmp_path):
    _, x = _moebius_data(600, 3)
    flow = ResidualFlow.init_random(2, make_rng(1), n_blocks=3, hidden=8)
    cfg = TrainConfig(lam=0.5, iterations=60, batch_size=100, seed=9, log_every=10)
    a, ha = train(flow, x, cfg, history_path=tmp_path / "a.csv")
    b, hb = train(flow, x, cfg, history_path=tmp_path / "b.csv")
    np.testing.assert_array_equal(a.theta, b.theta)
    assert ha.rows() == hb.rows()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert TrainHistory.from_csv(tmp_path / "a.csv").rows() == ha.rows()


def test_training_checkpoint_matches_final_model(tmp_path):
    _, x = _moebius_data(300, 4)
    flow = ResidualFlow.init_random(2, make_rng(1), n_blocks=2, hidden=8, triangular="lower")
    ck = tmp_path / "ck.bin"
    cfg = TrainConfig(iterations=40, seed=1, checkpoint_every=10, checkpoint_path=str(ck))
    trained, _ = train(flow, x, cfg)
    back, header = load_checkpoint(ck)
    np.testing.assert_array_equal(back.theta, trained.theta)
    assert header["extra"]["step"] == 40
    np.testing.assert_array_equal(back.forward(x), trained.forward(x))


def test_training_aborts_on_non_finite(tmp_path):
    _, x = _moebius_data(200, 5)
    flow = ResidualFlow.init_random(2, make_rng(1), n_blocks=2, hidden=8)
    cfg = TrainConfig(iterations=50, learning_rate=1e308, seed=1, cosine_decay=False, log_every=1)
    with pytest.raises(TrainingAborted) as info:
        train(flow, x, cfg, history_path=tmp_path / "h.csv")
    assert np.all(np.isfinite(info.value.last_good))
    assert info.value.step >= 1
    assert (tmp_path / "h.csv").exists()


def test_train_rejects_bad_data():
    flow = ResidualFlow(2, n_blocks=1)
    with pytest.raises(ValueError):
        train(flow, np.zeros((10, 3)), TrainConfig(iterations=1))
    with pytest.raises(ValueError):
        train(flow, np.full((10, 2), np.nan), TrainConfig(iterations=1))
