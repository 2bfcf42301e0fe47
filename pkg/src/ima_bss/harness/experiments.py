"""Experiment runners.

Every experiment is a list of independent tasks, one per (condition, seed).
A task returns a list of row dicts; panels are plot-ready tables derived
from the rows.  Tasks own their models and RNG streams, so they can run on
a thread pool in any order; rows are sorted by (condition, seed) afterwards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import kstest, spearmanr

from ..contrast import global_ima_contrast, ima_contrast_on, igci_contrast, local_ima_contrast_batch
from ..densities import FactorizedDensity, Uniform
from ..flow import FlowModel, ResidualFlow
from ..metrics import evaluate
from ..mixing import LinearMap, PolarMap, build_random_mlp, sample_moebius
from ..numcore import rotation_2d, sample_orthogonal, stream
from ..spurious import (
    compose,
    learn_darmois,
    make_mpa,
    polar_darmois_cima,
    polar_darmois_integrand,
    polar_grid,
    polar_marginal_mass,
)
from ..training import TrainConfig, train
from . import properties


@dataclass(frozen=True)
class Task:
    condition: str
    seed: int
    run: Callable[[], list]


# stream keys keep the draws of different purposes apart
_MIX, _DATA, _TEST, _MC, _INIT = 1, 2, 3, 4, 5


def _sources(cfg) -> FactorizedDensity:
    return FactorizedDensity.uniform(cfg["n"])


def make_mixing(cfg, seed):
    m = cfg["mixing"]
    n = cfg["n"]
    rng = stream(seed, _MIX)
    kind = m["kind"]
    if kind == "moebius":
        return sample_moebius(n, m.get("eps", 2), rng, b_scale=m.get("b_scale", 1.0))
    if kind == "mlp":
        return build_random_mlp(n, m.get("layers", 2), rng, m.get("bias_scale", 0.0), m.get("slope", 0.1))
    if kind == "linear":
        return LinearMap(sample_orthogonal(n, rng))
    if kind == "polar":
        return PolarMap(m.get("R", 1.0))
    raise ValueError(f"unknown mixing kind {kind!r}")


def _polar_sources(R):
    return FactorizedDensity((Uniform(0.0, R), Uniform(0.0, 2.0 * math.pi)))


def _data(cfg, seed, f):
    m = cfg["mixing"]
    p = _polar_sources(m.get("R", 1.0)) if m["kind"] == "polar" else _sources(cfg)
    s = p.sample(cfg["data"]["n_train"], stream(seed, _DATA)).data
    st = p.sample(cfg["data"]["n_test"], stream(seed, _TEST)).data
    return p, s, f.forward(s), st, f.forward(st)


def _train_cfg(cfg, seed, **over) -> TrainConfig:
    return TrainConfig.from_dict({**cfg["train"], "seed": seed, **over})


# ---------------------------------------------------------------------------
def darmois_cima_tasks(cfg):
    def one(seed):
        f = make_mixing(cfg, seed)
        p, _, x, st, xt = _data(cfg, seed, f)
        tc = _train_cfg(cfg, seed)
        sol = learn_darmois(x, tc, init_seed=int(stream(seed, _INIT).integers(2**63)), **cfg["flow"])
        c = sol.cima(xt)
        true_c = ima_contrast_on(f, st)
        u = sol.unmix(xt)
        row = {
            "cima_true": true_c.value,
            "cima_darmois": c.value,
            "cima_darmois_se": c.std_error,
            "ks_max": float(max(kstest(u[:, i], "uniform").statistic for i in range(cfg["n"]))),
            "max_abs_rank_corr": _max_offdiag_rank_corr(u),
            "final_loglik": sol.history.loglik[-1],
        }
        if cfg.get("igci", True):
            # the Darmois outputs are uniform, so both IGCI expectations are
            # over the unit cube; the independent estimate is a diagnostic
            u_dist = FactorizedDensity.uniform(cfg["n"])
            m = min(cfg["contrast"]["n_samples"], 2000)
            ig = igci_contrast(sol.mixing_map(), u_dist, m, rng=stream(seed, _MC))
            ig2 = igci_contrast(sol.mixing_map(), u_dist, m, rng=stream(seed, _MC, 1), coupling="independent")
            row.update(igci=ig.value, igci_se=ig.std_error,
                       igci_independent=ig2.value, igci_independent_se=ig2.std_error)
        return [row]

    return [Task("darmois", s, (lambda s=s: one(s))) for s in cfg["seeds"]]


def _max_offdiag_rank_corr(u):
    rho = np.atleast_2d(spearmanr(u).statistic)
    if rho.size == 1:
        return 0.0
    return float(np.max(np.abs(rho - np.diag(np.diag(rho)))))


def mpa_sweep_tasks(cfg):
    thetas = 2 * np.pi * np.arange(cfg["theta_points"]) / cfg["theta_points"]
    n_mc = cfg["contrast"]["n_samples"]
    p = _sources(cfg)

    def sweep(seed, base_map, label):
        rows = []
        for k, th in enumerate(thetas):
            a = make_mpa(p, rotation_2d(th))
            est = global_ima_contrast(compose(base_map, a), p, n_mc, rng=int(stream(seed, _MC).integers(2**63)))
            rows.append({"theta_index": k, "theta": float(th), "cima": est.value, "cima_se": est.std_error,
                         "solution": label})
        return rows

    def true_solution(seed):
        return sweep(seed, make_mixing(cfg, seed), "true")

    def darmois_solution(seed):
        f = make_mixing(cfg, seed)
        _, _, x, _, _ = _data(cfg, seed, f)
        sol = learn_darmois(x, _train_cfg(cfg, seed), init_seed=int(stream(seed, _INIT).integers(2**63)), **cfg["flow"])
        return sweep(seed, sol.mixing_map(), "darmois")

    tasks = [Task("true", s, (lambda s=s: true_solution(s))) for s in cfg["seeds"]]
    if cfg.get("include_darmois"):
        tasks += [Task("darmois", s, (lambda s=s: darmois_solution(s))) for s in cfg["seeds"]]
    return tasks


def mlp_depth_tasks(cfg):
    n_mc = cfg["contrast"]["n_samples"]
    m = cfg["mixing"]

    def one(depth, seed):
        f = build_random_mlp(cfg["n"], depth, stream(seed, _MIX, depth), m.get("bias_scale", 0.0), m.get("slope", 0.1))
        est = global_ima_contrast(f, _sources(cfg), n_mc, rng=int(stream(seed, _MC, depth).integers(2**63)))
        return [{"depth": depth, "cima": est.value, "cima_se": est.std_error}]

    return [Task(f"L={d}", s, (lambda d=d, s=s: one(d, s))) for d in cfg["depths"] for s in cfg["seeds"]]


def regularized_mle_tasks(cfg):
    n_mc = cfg["contrast"]["n_samples"]

    def one(lam, seed):
        f = make_mixing(cfg, seed)
        p, _, x, _, _ = _data(cfg, seed, f)
        tc = _train_cfg(cfg, seed, lam=float(lam))
        flow0 = ResidualFlow.init_random(cfg["n"], stream(seed, _INIT), coeff=tc.coeff, **cfg["flow"])
        flow, hist = train(flow0, x, tc)
        model = FlowModel(flow, tc.base)
        rep = evaluate(model, f, p, n_points=cfg["data"]["n_test"], rng=stream(seed, _TEST))
        xt = f.forward(p.sample(min(n_mc, cfg["data"]["n_test"]), stream(seed, _MC)).data)
        P = flow.jacobian(xt)
        c = local_ima_contrast_batch(np.linalg.inv(P))
        return [{
            "lam": float(lam),
            "kl": rep.kl_to_truth,
            "kl_se": rep.kl_std_error,
            "cima": float(c.mean()),
            "cima_se": float(c.std(ddof=1) / math.sqrt(c.size)),
            "mcc": rep.mcc,
            "n_amari": rep.n_amari,
            "final_objective": hist.objective[-1],
            "final_loglik": hist.loglik[-1],
        }]

    return [Task(f"lambda={lam:g}", s, (lambda lam=lam, s=s: one(lam, s))) for lam in cfg["lambdas"] for s in cfg["seeds"]]


def polar_check_tasks(cfg):
    R = float(cfg["R"])
    grid = cfg["grid"]

    def one(seed):
        pts, _ = polar_grid(R, grid, grid)
        p = _polar_sources(R)
        mc = global_ima_contrast(PolarMap(R), p, cfg["contrast"]["n_samples"], rng=int(stream(seed, _MC).integers(2**63)))
        rows = []
        for variant in ("simplified", "exact"):
            vals = polar_darmois_integrand(pts, R, variant)
            rows.append({
                "variant": variant,
                "marginal_mass": polar_marginal_mass(R),
                "integrand_min": float(vals.min()),
                "darmois_cima_quadrature": polar_darmois_cima(R, grid, grid, variant),
                "true_cima_mc": mc.value,
                "true_cima_mc_se": mc.std_error,
            })
        return rows

    return [Task("polar", s, (lambda s=s: one(s))) for s in cfg["seeds"]]


def properties_tasks(cfg):
    n = cfg["n"]

    sized = {"hadamard-nonnegativity": cfg["n_matrices"]}
    sized.update(dict.fromkeys(properties.POINT_SIZED, cfg["n_points"]))

    def one(name, seed):
        check = properties.CHECKS[name]
        rng = stream(seed, _MC, list(properties.CHECKS).index(name))
        if name in sized:
            value, thr, ok = check(rng, sized[name], n=n)
        else:
            value, thr, ok = check(rng, n=n)
        return [{"property": name, "value": float(value), "threshold": float(thr), "passed": bool(ok)}]

    return [Task(name, s, (lambda name=name, s=s: one(name, s))) for name in properties.CHECKS for s in cfg["seeds"]]


TASKS = {
    "darmois-cima": darmois_cima_tasks,
    "mpa-sweep": mpa_sweep_tasks,
    "mlp-depth": mlp_depth_tasks,
    "regularized-mle": regularized_mle_tasks,
    "polar-check": polar_check_tasks,
    "properties": properties_tasks,
}

# numeric columns summarised per condition in the report
SUMMARY_COLUMNS = {
    "darmois-cima": ["cima_darmois", "cima_true", "igci", "ks_max"],
    "mpa-sweep": ["cima"],
    "mlp-depth": ["cima"],
    "regularized-mle": ["kl", "cima", "mcc", "n_amari"],
    "polar-check": ["darmois_cima_quadrature", "integrand_min", "true_cima_mc"],
    "properties": ["value"],
}

# plot-ready panels: file name -> columns
PANELS = {
    "darmois-cima": {"panel_cima_hist.csv": ["seed", "cima_darmois", "cima_true"]},
    "mpa-sweep": {"panel_theta_curve.csv": ["solution", "seed", "theta", "cima", "cima_se"]},
    "mlp-depth": {"panel_depth.csv": ["depth", "seed", "cima", "cima_se"]},
    "regularized-mle": {"panel_metrics.csv": ["lam", "seed", "kl", "cima", "mcc", "n_amari"]},
    "polar-check": {"panel_polar.csv": ["variant", "darmois_cima_quadrature", "integrand_min", "marginal_mass"]},
    "properties": {"panel_properties.csv": ["property", "seed", "value", "threshold", "passed"]},
}
