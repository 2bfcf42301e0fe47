"""Dense matrix helpers, seeded RNG plumbing and the finite-difference oracle.

Matrices are plain ``float64`` numpy arrays.  Batched variants take stacks of
shape ``(N, n, n)``; dimensions in this project stay below ~10 so nothing here
tries to be clever about blocking.
"""
from __future__ import annotations

from typing import Union

import numpy as np

from .errors import (
    DegenerateColumnError,
    DomainError,
    InvalidDimensionError,
    SingularMatrixError,
)

DEFAULT_FD_STEP = 1e-5
_DET_FLOOR = 1e-300
_LOG_DET_FLOOR = np.log(_DET_FLOOR)
_NORM_FLOOR = 1e-150

SeedLike = Union[int, np.random.SeedSequence, None]


def make_rng(seed: SeedLike = None) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical draw sequences."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def derive_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    """Independent child streams for parallel work (never share one state)."""
    return np.random.SeedSequence(seed).spawn(count)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream addressed by ``(seed, *key)``.

    Used for chunked Monte Carlo where the same chunk index must map to the
    same draws no matter how chunks are grouped across workers.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *key])))


def as_matrix(m, square: bool = False) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidDimensionError(f"expected a 2-d matrix, got shape {a.shape}")
    if square and a.shape[0] != a.shape[1]:
        raise InvalidDimensionError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def sample_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix via QR of a Gaussian matrix.

    The signs of R's diagonal are folded into Q, otherwise the distribution
    is not Haar.
    """
    if n < 1:
        raise InvalidDimensionError(f"dimension must be >= 1, got {n}")
    g = rng.standard_normal((n, n))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def finite_diff_jacobian(
    fmap, point, step: float = DEFAULT_FD_STEP
) -> np.ndarray:
    """Central-difference Jacobian of ``fmap`` at ``point``.

    ``fmap`` is either a DifferentiableMap (anything with a batched
    ``forward``) or a callable taking a 1-d vector.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    s = np.asarray(point, dtype=np.float64).ravel()
    n = s.size
    eye = np.eye(n) * step
    pts = np.concatenate([s + eye, s - eye], axis=0)
    if hasattr(fmap, "forward"):
        vals = np.asarray(fmap.forward(pts), dtype=np.float64)
    else:
        vals = np.stack([np.asarray(fmap(p), dtype=np.float64).ravel() for p in pts])
    if not np.all(np.isfinite(vals)):
        raise DomainError(f"map not finite in a {step:g}-neighbourhood of {s}")
    return ((vals[:n] - vals[n:]) / (2.0 * step)).T


def log_abs_det_batch(m: np.ndarray) -> np.ndarray:
    """log|det| for a stack of square matrices; raises on (near-)singular."""
    a = np.asarray(m, dtype=np.float64)
    sign, logdet = np.linalg.slogdet(a)
    bad = (sign == 0) | (logdet < _LOG_DET_FLOOR)
    if np.any(bad):
        idx = int(np.flatnonzero(np.atleast_1d(bad))[0])
        raise SingularMatrixError(f"|det| below {_DET_FLOOR:g} (matrix index {idx})")
    return logdet


def log_abs_det(m) -> float:
    """log|det m| via LU with partial pivoting."""
    a = as_matrix(m, square=True)
    return float(log_abs_det_batch(a))


def column_log_norms_batch(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(np.asarray(m, dtype=np.float64), axis=-2)
    if np.any(norms < _NORM_FLOOR):
        raise DegenerateColumnError(f"column norm below {_NORM_FLOOR:g}")
    return np.log(norms)


def column_log_norms(m) -> np.ndarray:
    """Log Euclidean norm of every column."""
    return column_log_norms_batch(as_matrix(m))


def random_permutation_matrix(n: int, rng: np.random.Generator) -> np.ndarray:
    return np.eye(n)[rng.permutation(n)]


def rotation_2d(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])

