"""Factorised densities: per-coordinate pdf, CDF, quantile and sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from .errors import BoundaryError, InvalidDimensionError, OutOfSupportError

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class Marginal:
    """One-dimensional marginal.  All methods are vectorised over arrays."""

    kind = "abstract"
    lower = -np.inf
    upper = np.inf

    def logpdf(self, x):
        raise NotImplementedError

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def dlogpdf(self, x):
        """Derivative of the log density (score)."""
        raise NotImplementedError

    def cdf(self, x):
        raise NotImplementedError

    def quantile(self, u):
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size):
        return self.quantile(rng.uniform(size=size))

    def in_support(self, x):
        x = np.asarray(x)
        return (x > self.lower) & (x < self.upper)

    def to_dict(self) -> dict:
        return {"kind": self.kind}


@dataclass(frozen=True)
class Uniform(Marginal):
    a: float = 0.0
    b: float = 1.0
    kind = "uniform"

    def __post_init__(self):
        if not self.b > self.a:
            raise ValueError("uniform marginal needs b > a")

    @property
    def lower(self):
        return self.a

    @property
    def upper(self):
        return self.b

    def logpdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.where(self.in_support(x), -np.log(self.b - self.a), -np.inf)

    def dlogpdf(self, x):
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    def cdf(self, x):
        return np.clip((np.asarray(x, dtype=np.float64) - self.a) / (self.b - self.a), 0.0, 1.0)

    def quantile(self, u):
        return self.a + (self.b - self.a) * np.asarray(u, dtype=np.float64)

    def sample(self, rng, size):
        return rng.uniform(self.a, self.b, size=size)

    def to_dict(self):
        return {"kind": self.kind, "a": self.a, "b": self.b}


@dataclass(frozen=True)
class StandardNormal(Marginal):
    kind = "standard-normal"

    def logpdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        return -0.5 * x * x - _LOG_SQRT_2PI

    def dlogpdf(self, x):
        return -np.asarray(x, dtype=np.float64)

    def cdf(self, x):
        return special.ndtr(x)

    def quantile(self, u):
        return special.ndtri(u)

    def sample(self, rng, size):
        return rng.standard_normal(size=size)


@dataclass(frozen=True)
class StandardLogistic(Marginal):
    kind = "standard-logistic"

    def logpdf(self, x):
        x = np.abs(np.asarray(x, dtype=np.float64))
        return -x - 2.0 * np.log1p(np.exp(-x))

    def dlogpdf(self, x):
        return -np.tanh(0.5 * np.asarray(x, dtype=np.float64))

    def cdf(self, x):
        return special.expit(x)

    def quantile(self, u):
        return special.logit(u)

    def sample(self, rng, size):
        return rng.logistic(size=size)


_KINDS = {"uniform": Uniform, "standard-normal": StandardNormal, "standard-logistic": StandardLogistic}


def marginal_from_dict(d: dict) -> Marginal:
    d = dict(d)
    kind = d.pop("kind")
    return _KINDS[kind](**d)


@dataclass(frozen=True)
class FactorizedDensity:
    """Product density ``p(s) = prod_i p_i(s_i)``."""

    marginals: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "marginals", tuple(self.marginals))
        if not self.marginals:
            raise InvalidDimensionError("density needs at least one marginal")

    @classmethod
    def iid(cls, marginal: Marginal, n: int) -> "FactorizedDensity":
        if n < 1:
            raise InvalidDimensionError(f"dimension must be >= 1, got {n}")
        return cls(tuple([marginal] * n))

    @classmethod
    def uniform(cls, n: int, a: float = 0.0, b: float = 1.0):
        return cls.iid(Uniform(a, b), n)

    @classmethod
    def standard_normal(cls, n: int):
        return cls.iid(StandardNormal(), n)

    @classmethod
    def standard_logistic(cls, n: int):
        return cls.iid(StandardLogistic(), n)

    @property
    def dim(self) -> int:
        return len(self.marginals)

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise InvalidDimensionError(
                f"point has dimension {x.shape[-1]}, density has {self.dim}"
            )
        return x

    def _columns(self, fn_name, x):
        out = np.empty_like(x)
        for i, m in enumerate(self.marginals):
            out[..., i] = getattr(m, fn_name)(x[..., i])
        return out

    def in_support(self, x) -> np.ndarray:
        x = self._check(x)
        ok = np.ones(x.shape[:-1], dtype=bool)
        for i, m in enumerate(self.marginals):
            ok &= m.in_support(x[..., i])
        return ok

    def log_pdf_batch(self, x):
        """Log densities of a batch plus the explicit in-support mask.

        Out-of-support rows carry ``-inf`` *and* ``False`` in the mask, so
        callers never have to infer support from the value.
        """
        x = self._check(x)
        ok = self.in_support(x)
        vals = self._columns("logpdf", x).sum(axis=-1)
        return np.where(ok, vals, -np.inf), ok

    def log_pdf(self, point) -> float:
        x = self._check(point)
        if x.ndim != 1:
            raise InvalidDimensionError("log_pdf takes a single point; use log_pdf_batch")
        val, ok = self.log_pdf_batch(x)
        if not ok:
            raise OutOfSupportError(f"point {x} outside the support")
        return float(val)

    def score(self, x):
        return self._columns("dlogpdf", self._check(x))

    def pdf_marginals(self, x):
        return self._columns("pdf", self._check(x))

    def cdf(self, x):
        return self._columns("cdf", self._check(x))

    def quantile(self, u):
        u = self._check(u)
        if np.any((u <= 0.0) | (u >= 1.0)):
            raise BoundaryError("quantile input must lie strictly inside (0, 1)")
        return self._columns("quantile", u)

    def sample(self, n_points: int, rng: np.random.Generator, tag: str | None = None) -> "SampleBatch":
        if n_points < 1:
            raise ValueError("n_points must be >= 1")
        data = np.empty((n_points, self.dim))
        for i, m in enumerate(self.marginals):
            data[:, i] = m.sample(rng, n_points)
        return SampleBatch(data, tag or self.describe())

    def describe(self) -> str:
        kinds = [m.kind for m in self.marginals]
        if len(set(kinds)) == 1:
            return f"{kinds[0]}^{self.dim}"
        return "x".join(kinds)

    def to_dict(self) -> dict:
        return {"marginals": [m.to_dict() for m in self.marginals]}

    @classmethod
    def from_dict(cls, d: dict) -> "FactorizedDensity":
        return cls(tuple(marginal_from_dict(m) for m in d["marginals"]))


@dataclass
class SampleBatch:
    """``(n_points, n_dims)`` array tagged with where it came from."""

    data: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise InvalidDimensionError(f"sample batch must be 2-d, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("sample batch has non-finite entries")

    def __len__(self):
        return self.data.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    @property
    def n_dims(self) -> int:
        return self.data.shape[1]


def as_array(batch) -> np.ndarray:
    """Accept a SampleBatch or anything array-like."""
    if isinstance(batch, SampleBatch):
        return batch.data
    return np.asarray(batch, dtype=np.float64)


def log_pdf(d: FactorizedDensity, point) -> float:
    return d.log_pdf(point)


def cdf(d: FactorizedDensity, point):
    return d.cdf(point)


def quantile(d: FactorizedDensity, u):
    return d.quantile(u)


def sample(d: FactorizedDensity, n_points: int, rng) -> SampleBatch:
    return d.sample(n_points, rng)


def marginals_of(kinds: Sequence[str]) -> FactorizedDensity:
    return FactorizedDensity(tuple(_KINDS[k]() for k in kinds))
