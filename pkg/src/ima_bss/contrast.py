"""IMA, IGCI and trace-method contrasts."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .densities import FactorizedDensity
from .errors import (
    ContaminatedEstimateError,
    DegenerateColumnError,
    InvalidDimensionError,
    NotPositiveDefiniteError,
    SingularMatrixError,
)
from .numcore import (
    as_matrix,
    column_log_norms_batch,
    log_abs_det,
    log_abs_det_batch,
    make_rng,
    stream,
)

DEFAULT_N_SAMPLES = 10_000
CHUNK = 1024


@dataclass(frozen=True)
class ContrastEstimate:
    value: float
    std_error: float
    n_samples: int

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("contrast estimate must be finite")
        if self.std_error < 0:
            raise ValueError("std_error must be non-negative")

    def to_dict(self):
        return asdict(self)


def local_ima_contrast(j) -> float:
    """Sum of log column norms minus log |det| of a single Jacobian."""
    m = as_matrix(j, square=True)
    return float(column_log_norms_batch(m).sum() - log_abs_det(m))


def local_ima_contrast_batch(J: np.ndarray) -> np.ndarray:
    """Vectorised local contrast over a stack ``(N, n, n)``.

    Singular or zero-column matrices raise; callers that want to know which
    point failed should use :func:`ima_contrast_on`.
    """
    J = np.asarray(J, dtype=np.float64)
    return column_log_norms_batch(J).sum(axis=-1) - log_abs_det_batch(J)


def _contrast_values(f, points: np.ndarray) -> np.ndarray:
    J = f.jacobian(points)
    try:
        return local_ima_contrast_batch(J)
    except (SingularMatrixError, DegenerateColumnError) as exc:
        norms = np.linalg.norm(J, axis=-2).min(axis=-1)
        sign, logdet = np.linalg.slogdet(J)
        bad = (sign == 0) | (logdet < np.log(1e-300)) | (norms < 1e-150)
        k = int(np.flatnonzero(bad)[0])
        raise ContaminatedEstimateError(f"singular Jacobian ({exc})", points[k].tolist()) from exc


def _moments(values: np.ndarray) -> tuple[float, float, int]:
    return float(values.sum()), float(np.square(values).sum()), int(values.size)


def _finish(parts) -> ContrastEstimate:
    total = math.fsum(p[0] for p in parts)
    total_sq = math.fsum(p[1] for p in parts)
    count = sum(p[2] for p in parts)
    mean = total / count
    if count > 1:
        var = max(total_sq / count - mean * mean, 0.0) * count / (count - 1)
        se = math.sqrt(var / count)
    else:
        se = 0.0
    return ContrastEstimate(mean, se, count)


def ima_contrast_on(f, points) -> ContrastEstimate:
    """Mean local IMA contrast of ``f`` over a fixed set of points."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return _finish([_moments(_contrast_values(f, pts))])


def _seed_from(rng) -> int:
    if rng is None:
        return int(np.random.SeedSequence().entropy % (2**63))
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return int(make_rng(rng).integers(2**63))


def _chunked(n_samples, seed, work, workers):
    n_chunks = (n_samples + CHUNK - 1) // CHUNK

    def run(c):
        size = min(CHUNK, n_samples - c * CHUNK)
        return work(stream(seed, c), size)

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(run, range(n_chunks)))
    return [run(c) for c in range(n_chunks)]


def global_ima_contrast(
    f,
    p: FactorizedDensity,
    n_samples: int = DEFAULT_N_SAMPLES,
    rng=None,
    workers: int = 1,
) -> ContrastEstimate:
    """Monte Carlo estimate of ``E_{s ~ p}[c_IMA(f, s)]``.

    Draws are organised in fixed chunks of 1024 indices, each with its own
    stream derived from the seed, so the estimate does not depend on how
    many workers share the chunks.
    """
    if f.dim != p.dim:
        raise InvalidDimensionError(f"map has dimension {f.dim}, density {p.dim}")
    seed = _seed_from(rng)

    def work(g, size):
        return _moments(_contrast_values(f, p.sample(size, g).data))

    return _finish(_chunked(n_samples, seed, work, workers))


def igci_contrast(
    f,
    p: FactorizedDensity,
    n_samples: int = DEFAULT_N_SAMPLES,
    rng=None,
    coupling: str = "quantile",
) -> ContrastEstimate:
    """``E_p[log|J_f|] - E_Leb[log|J_f|]`` with Lebesgue on the unit cube.

    ``coupling="quantile"`` draws one uniform sample ``u`` for the Lebesgue
    term and uses ``F_p^{-1}(u)`` for the ``p`` term (common random numbers),
    so the standard error comes from paired differences.  With
    ``coupling="independent"`` the two terms use separate draws.
    """
    if f.dim != p.dim:
        raise InvalidDimensionError(f"map has dimension {f.dim}, density {p.dim}")
    g = make_rng(rng)
    n = f.dim
    u = g.uniform(size=(n_samples, n))
    u = np.clip(u, 1e-15, 1 - 1e-15)

    def logdet(points):
        try:
            return log_abs_det_batch(f.jacobian(points))
        except SingularMatrixError as exc:
            sign, ld = np.linalg.slogdet(f.jacobian(points))
            k = int(np.flatnonzero((sign == 0) | (ld < np.log(1e-300)))[0])
            raise ContaminatedEstimateError("singular Jacobian", points[k].tolist()) from exc

    leb = logdet(u)
    if coupling == "quantile":
        d = logdet(p.quantile(u)) - leb
        return _finish([_moments(d)])
    if coupling == "independent":
        on_p = logdet(p.sample(n_samples, g).data)
        value = float(on_p.mean() - leb.mean())
        se = math.sqrt(on_p.var(ddof=1) / n_samples + leb.var(ddof=1) / n_samples)
        return ContrastEstimate(value, se, n_samples)
    raise ValueError(f"unknown coupling {coupling!r}")


def left_kl_diagonality(m) -> float:
    """``log|diag(m)| - log|m|`` for symmetric positive definite ``m``."""
    a = as_matrix(m, square=True)
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12):
        raise NotPositiveDefiniteError("matrix is not symmetric")
    try:
        L = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("matrix is not positive definite") from exc
    return float(np.log(np.diag(a)).sum() - 2.0 * np.log(np.diag(L)).sum())


def trace_gap(A, sigma) -> float:
    """``log tau(A S A^T) - log tau(S) - log tau(A A^T)``, tau = trace / n.

    Zero when the trace condition holds.
    """
    A = as_matrix(A, square=True)
    S = as_matrix(sigma, square=True)
    if A.shape != S.shape:
        raise InvalidDimensionError(f"A is {A.shape}, covariance is {S.shape}")
    n = A.shape[0]

    def tau(m):
        return np.trace(m) / n

    return float(np.log(tau(A @ S @ A.T)) - np.log(tau(S)) - np.log(tau(A @ A.T)))
