"""Evaluation metrics for learned unmixings: MCC, (nonlinear) Amari distance, KL."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .contrast import ContrastEstimate
from .densities import FactorizedDensity, as_array
from .errors import (
    DegenerateMetricError,
    InvalidDimensionError,
    NumericalOverflowError,
    SingularMatrixError,
)
from .numcore import as_matrix, log_abs_det_batch, make_rng

DEFAULT_EVAL_POINTS = 10_000


def spearman_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``rho[i, j]`` = Spearman correlation of ``a[:, i]`` and ``b[:, j]`` (average ranks)."""
    ra = rankdata(a, axis=0)
    rb = rankdata(b, axis=0)
    ra = ra - ra.mean(axis=0)
    rb = rb - rb.mean(axis=0)
    sa = np.sqrt((ra * ra).sum(axis=0))
    sb = np.sqrt((rb * rb).sum(axis=0))
    if np.any(sa == 0) or np.any(sb == 0):
        raise DegenerateMetricError("a column has zero rank variance")
    return (ra.T @ rb) / np.outer(sa, sb)


def mcc(true_sources, recon) -> tuple[float, np.ndarray]:
    """Mean matched absolute Spearman correlation and the matching.

    ``assignment[i]`` is the reconstructed coordinate paired with true
    source ``i``; pairs are chosen by linear sum assignment on ``1 - |rho|``.
    """
    s = np.asarray(as_array(true_sources), dtype=np.float64)
    r = np.asarray(as_array(recon), dtype=np.float64)
    if s.shape != r.shape or s.ndim != 2:
        raise InvalidDimensionError(f"shapes differ: {s.shape} vs {r.shape}")
    if s.shape[0] < 2:
        raise DegenerateMetricError("need at least two points")
    rho = np.abs(spearman_matrix(s, r))
    rows, cols = linear_sum_assignment(1.0 - rho)
    assignment = np.empty(s.shape[1], dtype=int)
    assignment[rows] = cols
    return float(rho[rows, cols].mean()), assignment


def amari_distance(R) -> float:
    """Row- plus column-normalised squared-entry Amari distance.

    Zero exactly for scaled permutation matrices.
    """
    R = as_matrix(R, square=True)
    return float(_amari_batch(R[None])[0])


def _amari_batch(R: np.ndarray) -> np.ndarray:
    R2 = R * R
    row_max = R2.max(axis=2, keepdims=True)
    col_max = R2.max(axis=1, keepdims=True)
    if np.any(row_max == 0) or np.any(col_max == 0):
        raise DegenerateMetricError("matrix has an all-zero row or column")
    rows = (R2 / row_max).sum(axis=2) - 1.0
    cols = (R2 / col_max).sum(axis=1) - 1.0
    return rows.sum(axis=1) + cols.sum(axis=1)


def nonlinear_amari_values(g, f, sources) -> np.ndarray:
    """Per-point ``d_Amari(J_g(x) J_f(s))`` at ``x = f(s)``."""
    s = np.atleast_2d(np.asarray(as_array(sources), dtype=np.float64))
    x = f.forward(s)
    prod = np.einsum("kij,kjl->kil", np.atleast_3d(g.jacobian(x)), np.atleast_3d(f.jacobian(s)))
    if np.any(np.abs(np.linalg.det(prod)) < 1e-300):
        raise SingularMatrixError("Jacobian product is singular at a sample")
    return _amari_batch(prod)


def nonlinear_amari(g, f, p_s: FactorizedDensity, n_points: int = DEFAULT_EVAL_POINTS, rng=None, sources=None) -> float:
    """Monte Carlo mean of the Amari distance of ``J_g(x) J_f(f^{-1}(x))``.

    Points ``x ~ p_x`` are generated as ``f(s)`` with ``s ~ p_s`` (or from
    the given ``sources``), so ``f^{-1}(x)`` never needs computing.
    """
    if sources is None:
        sources = p_s.sample(n_points, make_rng(rng)).data
    return float(nonlinear_amari_values(g, f, sources).mean())


def kl_to_truth(model, f_true, p_s: FactorizedDensity, n_points: int = DEFAULT_EVAL_POINTS, rng=None, sources=None) -> ContrastEstimate:
    """``E_x[log p_true(x) - log p_model(x)]`` with ``x = f_true(s)``, ``s ~ p_s``.

    ``log p_true(x) = log p_s(s) - log|det J_f(s)|``.  ``model`` needs a
    ``log_density(x)`` method.  The estimate can be slightly negative within
    Monte Carlo error.
    """
    if sources is None:
        sources = p_s.sample(n_points, make_rng(rng)).data
    s = np.atleast_2d(np.asarray(as_array(sources), dtype=np.float64))
    x = f_true.forward(s)
    logp_s, ok = p_s.log_pdf_batch(s)
    if not np.all(ok):
        raise ValueError("source samples outside the support of p_s")
    log_true = logp_s - log_abs_det_batch(np.atleast_3d(f_true.jacobian(s)))
    log_model = np.asarray(model.log_density(x), dtype=np.float64)
    if not np.all(np.isfinite(log_model)):
        raise NumericalOverflowError("model log-density is not finite at a sample")
    d = log_true - log_model
    se = float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else 0.0
    return ContrastEstimate(float(d.mean()), se, int(d.size))


@dataclass
class MetricReport:
    mcc: float
    assignment: list
    n_amari: float
    kl_to_truth: float
    kl_std_error: float
    n_eval_points: int

    def __post_init__(self):
        self.assignment = [int(i) for i in self.assignment]
        if sorted(self.assignment) != list(range(len(self.assignment))):
            raise ValueError("assignment is not a permutation")
        if not -1.0 <= self.mcc <= 1.0 + 1e-12:
            raise ValueError("mcc must lie in [-1, 1]")
        if self.n_amari < -1e-9:
            raise ValueError("nonlinear Amari distance must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)


def evaluate(model, f_true, p_s: FactorizedDensity, n_points: int = DEFAULT_EVAL_POINTS, rng=None) -> MetricReport:
    """All three metrics for a flow model ``model`` (unmixing ``model.flow``)
    on one shared set of evaluation sources."""
    s = p_s.sample(n_points, make_rng(rng)).data
    x = f_true.forward(s)
    y = model.flow.forward(x)
    m, assign = mcc(s, y)
    na = nonlinear_amari(model.flow, f_true, p_s, sources=s)
    kl = kl_to_truth(model, f_true, p_s, sources=s)
    return MetricReport(m, assign.tolist(), na, kl.value, kl.std_error, n_points)
