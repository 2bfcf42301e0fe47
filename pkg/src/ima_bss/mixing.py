"""Ground-truth mixing functions with analytic Jacobians.

Every map works on batches: ``forward`` takes ``(N, n)`` (or a single
``(n,)`` point) and ``jacobian`` returns ``(N, n, n)`` with
``J[k, i, j] = d f_i / d s_j`` at point ``k``.
"""
from __future__ import annotations

import json
from typing import Callable

import numpy as np

from .densities import SampleBatch, as_array
from .errors import DegenerateDataError, DomainError, InvalidDimensionError, SamplingError
from .numcore import as_matrix, sample_orthogonal

LEAKY_TANH_SLOPE = 0.1


def _as_batch(s, dim):
    a = np.asarray(s, dtype=np.float64)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[-1] != dim:
        raise InvalidDimensionError(f"expected points of dimension {dim}, got {a.shape[-1]}")
    return a, single


class DifferentiableMap:
    """Smooth invertible map with an exact Jacobian."""

    kind = "abstract"
    dim: int

    def _forward(self, s: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _jacobian(self, s: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _inverse(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no closed-form inverse")

    has_inverse = True

    def in_domain(self, s) -> np.ndarray:
        s, _ = _as_batch(s, self.dim)
        return np.ones(len(s), dtype=bool)

    def forward(self, s):
        s, single = _as_batch(s, self.dim)
        out = self._forward(s)
        return out[0] if single else out

    __call__ = forward

    def jacobian(self, s):
        s, single = _as_batch(s, self.dim)
        out = self._jacobian(s)
        return out[0] if single else out

    def inverse(self, x):
        x, single = _as_batch(x, self.dim)
        out = self._inverse(x)
        return out[0] if single else out

    def forward_and_jacobian(self, s):
        return self.forward(s), self.jacobian(s)

    def to_dict(self) -> dict:
        raise NotImplementedError(f"{type(self).__name__} is not serialisable")

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


class LinearMap(DifferentiableMap):
    """``f(s) = A s + offset``."""

    kind = "linear"

    def __init__(self, A, offset=None):
        self.A = as_matrix(A, square=True)
        self.dim = self.A.shape[0]
        self.offset = np.zeros(self.dim) if offset is None else np.asarray(offset, dtype=np.float64)

    def _forward(self, s):
        return s @ self.A.T + self.offset

    def _jacobian(self, s):
        return np.broadcast_to(self.A, (len(s), self.dim, self.dim)).copy()

    def _inverse(self, x):
        return np.linalg.solve(self.A, (x - self.offset).T).T

    def to_dict(self):
        return {"kind": self.kind, "A": self.A.tolist(), "offset": self.offset.tolist()}


def permutation_map(perm) -> LinearMap:
    perm = np.asarray(perm)
    return LinearMap(np.eye(len(perm))[perm])


class MoebiusMap(DifferentiableMap):
    """``f(s) = t + r A (s - b) / ||s - b||^eps`` with ``eps`` in {0, 2}.

    For ``eps = 2`` the Jacobian is ``r A H(u) / ||u||^2`` with ``u = s - b``
    and ``H(u) = I - 2 u u^T / ||u||^2`` a Householder reflection, so the map
    is conformal with scale factor ``r / ||u||^2``.
    """

    kind = "moebius"

    def __init__(self, A, b, t=None, r: float = 1.0, eps: int = 2):
        self.A = as_matrix(A, square=True)
        self.dim = self.A.shape[0]
        self.b = np.asarray(b, dtype=np.float64)
        self.t = np.zeros(self.dim) if t is None else np.asarray(t, dtype=np.float64)
        self.r = float(r)
        if eps not in (0, 2):
            raise ValueError("eps must be 0 or 2")
        if self.r <= 0:
            raise ValueError("r must be positive")
        self.eps = int(eps)

    def in_domain(self, s):
        """True where ``s`` lies in the open unit cube the map is meant for."""
        s, _ = _as_batch(s, self.dim)
        return np.all((s > 0) & (s < 1), axis=1)

    def _forward(self, s):
        u = s - self.b
        if self.eps == 0:
            return self.t + self.r * u @ self.A.T
        sq = np.einsum("ki,ki->k", u, u)
        if np.any(sq == 0):
            raise DomainError("Moebius map evaluated at its pole b")
        return self.t + self.r * (u / sq[:, None]) @ self.A.T

    def _jacobian(self, s):
        n = self.dim
        if self.eps == 0:
            return np.broadcast_to(self.r * self.A, (len(s), n, n)).copy()
        u = s - self.b
        sq = np.einsum("ki,ki->k", u, u)
        if np.any(sq == 0):
            raise DomainError("Moebius map evaluated at its pole b")
        H = np.eye(n) - 2.0 * u[:, :, None] * u[:, None, :] / sq[:, None, None]
        return self.r * np.einsum("ij,kjl->kil", self.A, H) / sq[:, None, None]

    def _inverse(self, x):
        v = (x - self.t) @ self.A / self.r
        if self.eps == 0:
            return self.b + v
        sq = np.einsum("ki,ki->k", v, v)
        return self.b + v / sq[:, None]

    def scale_factor(self, s):
        """Conformal scale ``lambda(s)`` with ``J^T J = lambda^2 I``."""
        s, single = _as_batch(s, self.dim)
        if self.eps == 0:
            lam = np.full(len(s), self.r)
        else:
            lam = self.r / np.sum((s - self.b) ** 2, axis=1)
        return lam[0] if single else lam

    def to_dict(self):
        return {
            "kind": self.kind,
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "t": self.t.tolist(),
            "r": self.r,
            "eps": self.eps,
        }


def sample_moebius(
    n: int,
    eps: int,
    rng: np.random.Generator,
    b_scale: float = 1.0,
    max_draws: int = 10**6,
) -> MoebiusMap:
    """Random Moebius mixing: Haar ``A``, ``t = 0``, ``r = 1``.

    ``b`` is Gaussian (std ``b_scale``), redrawn until it falls outside the
    closed unit cube so the pole never meets the source support.
    """
    if n < 1:
        raise InvalidDimensionError(f"dimension must be >= 1, got {n}")
    A = sample_orthogonal(n, rng)
    for _ in range(max_draws):
        b = b_scale * rng.standard_normal(n)
        if np.any((b < 0.0) | (b > 1.0)):
            return MoebiusMap(A, b, eps=eps)
    raise SamplingError(f"no pole outside the unit cube after {max_draws} draws")


def leaky_tanh(x, slope: float = LEAKY_TANH_SLOPE):
    return np.tanh(x) + slope * x


def leaky_tanh_deriv(x, slope: float = LEAKY_TANH_SLOPE):
    t = np.tanh(x)
    return 1.0 - t * t + slope


def leaky_tanh_inverse(y, slope: float = LEAKY_TANH_SLOPE, tol: float = 1e-13, max_iter: int = 100):
    """Invert ``tanh(x) + slope*x`` by safeguarded Newton.

    ``|tanh| < 1`` brackets the root in ``[(y-1)/slope, (y+1)/slope]``; a
    Newton step leaving the bracket is replaced by bisection.
    """
    y = np.asarray(y, dtype=np.float64)
    lo = (y - 1.0) / slope
    hi = (y + 1.0) / slope
    x = y / (1.0 + slope)
    for _ in range(max_iter):
        fx = leaky_tanh(x, slope) - y
        lo = np.where(fx < 0, x, lo)
        hi = np.where(fx > 0, x, hi)
        step = fx / leaky_tanh_deriv(x, slope)
        xn = x - step
        outside = (xn <= lo) | (xn >= hi)
        xn = np.where(outside, 0.5 * (lo + hi), xn)
        if np.max(np.abs(xn - x), initial=0.0) <= tol * (1.0 + np.max(np.abs(x), initial=0.0)):
            return xn
        x = xn
    return x


class MlpMixing(DifferentiableMap):
    """Invertible MLP ``f = act o (W_L . + b_L) o ... o act o (W_1 . + b_1)``."""

    kind = "mlp"

    def __init__(self, weights, biases, slope: float = LEAKY_TANH_SLOPE):
        self.weights = [as_matrix(W, square=True) for W in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        self.dim = self.weights[0].shape[0]
        self.slope = float(slope)
        if self.slope <= 0:
            raise ValueError("leaky-tanh slope must be positive")

    @property
    def n_layers(self):
        return len(self.weights)

    def _forward(self, s):
        z = s
        for W, b in zip(self.weights, self.biases):
            z = leaky_tanh(z @ W.T + b, self.slope)
        return z

    def _jacobian(self, s):
        z = s
        J = np.broadcast_to(np.eye(self.dim), (len(s), self.dim, self.dim))
        for W, b in zip(self.weights, self.biases):
            a = z @ W.T + b
            J = leaky_tanh_deriv(a, self.slope)[:, :, None] * np.einsum("ij,kjl->kil", W, J)
            z = leaky_tanh(a, self.slope)
        return J

    def _inverse(self, x):
        z = x
        for W, b in zip(reversed(self.weights), reversed(self.biases)):
            a = leaky_tanh_inverse(z, self.slope)
            z = np.linalg.solve(W, (a - b).T).T
        return z

    def to_dict(self):
        return {
            "kind": self.kind,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "slope": self.slope,
        }


def build_random_mlp(
    n: int,
    L: int,
    rng: np.random.Generator,
    bias_scale: float = 0.0,
    slope: float = LEAKY_TANH_SLOPE,
) -> MlpMixing:
    """Random invertible MLP with Haar-orthogonal square weights."""
    if L < 1:
        raise ValueError("an MLP needs at least one layer")
    weights = [sample_orthogonal(n, rng) for _ in range(L)]
    biases = [bias_scale * rng.standard_normal(n) for _ in range(L)]
    return MlpMixing(weights, biases, slope)


class PolarMap(DifferentiableMap):
    """Polar to Cartesian, ``(r, theta) -> (r cos theta, r sin theta)``.

    Domain ``(0, R) x (0, 2 pi)``; theta = 0 is excluded to keep the map
    injective.
    """

    kind = "polar"
    dim = 2

    def __init__(self, R: float = 1.0):
        if R <= 0:
            raise ValueError("radius must be positive")
        self.R = float(R)

    def in_domain(self, s):
        s, _ = _as_batch(s, 2)
        r, th = s[:, 0], s[:, 1]
        return (r > 0) & (r < self.R) & (th > 0) & (th < 2 * np.pi)

    def _check(self, s):
        if np.any(s[:, 0] <= 0):
            raise DomainError("polar map needs r > 0")

    def _forward(self, s):
        self._check(s)
        r, th = s[:, 0], s[:, 1]
        return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)

    def _jacobian(self, s):
        self._check(s)
        r, th = s[:, 0], s[:, 1]
        c, sn = np.cos(th), np.sin(th)
        J = np.empty((len(s), 2, 2))
        J[:, 0, 0] = c
        J[:, 0, 1] = -r * sn
        J[:, 1, 0] = sn
        J[:, 1, 1] = r * c
        return J

    def _inverse(self, x):
        r = np.hypot(x[:, 0], x[:, 1])
        th = np.mod(np.arctan2(x[:, 1], x[:, 0]), 2 * np.pi)
        return np.stack([r, th], axis=1)

    def to_dict(self):
        return {"kind": self.kind, "R": self.R}


class ElementwiseMap(DifferentiableMap):
    """Coordinate-wise map ``(h(s_1), ..., h(s_n))`` from vectorised callables."""

    kind = "elementwise"

    def __init__(self, dim: int, fn: Callable, dfn: Callable, inv: Callable | None = None, name: str = ""):
        self.dim = dim
        self.fn, self.dfn, self.inv = fn, dfn, inv
        self.name = name
        self.has_inverse = inv is not None

    def _forward(self, s):
        return self.fn(s)

    def _jacobian(self, s):
        d = self.dfn(s)
        J = np.zeros((len(s), self.dim, self.dim))
        idx = np.arange(self.dim)
        J[:, idx, idx] = d
        return J

    def _inverse(self, x):
        if self.inv is None:
            return super()._inverse(x)
        return self.inv(x)

    def to_dict(self):
        if self.name == "cubic":
            return {"kind": self.kind, "name": "cubic", "dim": self.dim}
        return super().to_dict()


def _cubic_inverse(y):
    # real root of x^3 + x - y = 0 (Cardano; discriminant is always positive)
    q = np.sqrt(y * y / 4.0 + 1.0 / 27.0)
    return np.cbrt(y / 2.0 + q) + np.cbrt(y / 2.0 - q)


def cubic_elementwise(dim: int) -> ElementwiseMap:
    """``h(x) = x + x^3`` applied to each coordinate."""
    return ElementwiseMap(
        dim,
        lambda s: s + s**3,
        lambda s: 1.0 + 3.0 * s**2,
        _cubic_inverse,
        name="cubic",
    )


class ComposedMap(DifferentiableMap):
    """``outer o inner`` with chain-rule Jacobian."""

    kind = "composed"

    def __init__(self, outer: DifferentiableMap, inner: DifferentiableMap):
        if outer.dim != inner.dim:
            raise InvalidDimensionError(f"cannot compose dimensions {outer.dim} and {inner.dim}")
        self.outer, self.inner = outer, inner
        self.dim = outer.dim
        self.has_inverse = outer.has_inverse and inner.has_inverse

    def in_domain(self, s):
        s, _ = _as_batch(s, self.dim)
        ok = self.inner.in_domain(s)
        return ok & self.outer.in_domain(self.inner.forward(s))

    def _forward(self, s):
        return self.outer._forward(self.inner._forward(s))

    def _jacobian(self, s):
        mid = self.inner._forward(s)
        return np.einsum("kij,kjl->kil", self.outer._jacobian(mid), self.inner._jacobian(s))

    def _inverse(self, x):
        return self.inner._inverse(self.outer._inverse(x))

    def to_dict(self):
        return {"kind": self.kind, "outer": self.outer.to_dict(), "inner": self.inner.to_dict()}


def map_from_dict(d: dict) -> DifferentiableMap:
    """Rebuild a map from its JSON parameter record."""
    kind = d["kind"]
    if kind == "linear":
        return LinearMap(d["A"], d.get("offset"))
    if kind == "moebius":
        return MoebiusMap(d["A"], d["b"], d.get("t"), d.get("r", 1.0), d.get("eps", 2))
    if kind == "mlp":
        return MlpMixing(d["weights"], d["biases"], d.get("slope", LEAKY_TANH_SLOPE))
    if kind == "polar":
        return PolarMap(d["R"])
    if kind == "elementwise" and d.get("name") == "cubic":
        return cubic_elementwise(d["dim"])
    if kind == "composed":
        return ComposedMap(map_from_dict(d["outer"]), map_from_dict(d["inner"]))
    if kind == "mpa":
        from .spurious import MpaMap

        return MpaMap.from_dict(d)
    raise ValueError(f"unknown map kind {kind!r}")


def whiten(batch) -> tuple[SampleBatch, np.ndarray]:
    """Zero-mean, identity-covariance transform ``z = V (x - mean)``.

    ``V = E D^{-1/2} E^T`` from the eigendecomposition of the sample
    covariance.
    """
    x = as_array(batch)
    if x.shape[0] < 2:
        raise DegenerateDataError("need at least two points to whiten")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    evals, E = np.linalg.eigh(cov)
    if evals[0] <= 1e-12 * max(evals[-1], 1e-300):
        raise DegenerateDataError("sample covariance is rank deficient")
    V = (E / np.sqrt(evals)) @ E.T
    tag = getattr(batch, "provenance", "")
    return SampleBatch(xc @ V.T, f"whiten({tag})"), V
