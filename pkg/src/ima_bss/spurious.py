"""Spurious ICA solutions: Darmois constructions and measure-preserving automorphisms."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr, ndtri

from .contrast import ContrastEstimate, local_ima_contrast_batch
from .densities import FactorizedDensity, as_array
from .errors import DomainError, InvalidDimensionError, OutOfSupportError
from .flow import DEFAULT_COEFF, ResidualFlow, inverse_budget, load_checkpoint, save_checkpoint
from .mixing import ComposedMap, DifferentiableMap, _as_batch
from .numcore import as_matrix, make_rng
from .training import TrainConfig, TrainHistory, train

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def _phi(z):
    return np.exp(-0.5 * z * z - _LOG_SQRT_2PI)


# ---------------------------------------------------------------------------
# Darmois construction
@dataclass
class DarmoisSolution:
    """Triangular flow ``g`` with a Gaussian-CDF output stage.

    The unmixing is ``g^D(x) = Phi(g(x[order]))`` with values in ``(0, 1)^n``;
    the induced mixing is ``f^D = (g^D)^{-1}``.
    """

    flow: ResidualFlow
    order: tuple[int, ...]
    history: TrainHistory = field(default_factory=TrainHistory)
    train_config: dict = field(default_factory=dict)
    base: str = "standard-normal"

    @property
    def dim(self) -> int:
        return self.flow.dim

    def _permute(self, x):
        return np.asarray(x)[..., list(self.order)]

    def reconstruct(self, x) -> np.ndarray:
        """Gaussianised sources ``g(x)`` (before the CDF stage)."""
        return self.flow.forward(self._permute(x))

    def unmix(self, x) -> np.ndarray:
        """Uniform sources ``g^D(x)`` in ``(0, 1)^n``."""
        return ndtr(self.reconstruct(x))

    def unmixing_jacobian(self, x) -> np.ndarray:
        X, single = _as_batch(x, self.dim)
        y, _, P = self.flow.forward_logdet(self._permute(X), want_jac=True)
        J = _phi(y)[:, :, None] * P[:, :, list(np.argsort(self.order))]
        return J[0] if single else J

    def flow_jacobian(self, x) -> np.ndarray:
        """Jacobian of the flow stage alone, in the flow's (permuted) coordinates."""
        X, single = _as_batch(x, self.dim)
        J = self.flow.forward_logdet(self._permute(X), want_jac=True)[2]
        return J[0] if single else J

    def mixing_map(self) -> "DarmoisMixing":
        return DarmoisMixing(self)

    def cima_values(self, x) -> np.ndarray:
        """Local contrast of ``f^D`` at ``u = g^D(x)`` for each observed ``x``.

        ``J_{f^D}(u) = J_{g^D}(x)^{-1}``; the CDF stage and the input
        permutation only rescale and permute, so the flow Jacobian suffices.
        """
        P = np.atleast_3d(self.flow_jacobian(np.atleast_2d(x)))
        return local_ima_contrast_batch(np.linalg.inv(P))

    def cima(self, x) -> ContrastEstimate:
        """Global contrast of the Darmois mixing estimated on observations ``x``
        (equivalently on ``u = g^D(x)``, which is uniform under the model)."""
        v = self.cima_values(np.asarray(as_array(x)))
        se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
        return ContrastEstimate(float(v.mean()), se, int(v.size))

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.flow, d / "flow.bin", seed=self.train_config.get("seed"))
        wrapper = {
            "kind": "darmois",
            "checkpoint": "flow.bin",
            "order": list(self.order),
            "base": self.base,
            "output_stage": "standard-normal-cdf",
            "train": self.train_config,
        }
        (d / "darmois.json").write_text(json.dumps(wrapper, indent=2, sort_keys=True))
        self.history.to_csv(d / "history.csv")
        return d / "darmois.json"

    @classmethod
    def load(cls, directory) -> "DarmoisSolution":
        d = Path(directory)
        wrapper = json.loads((d / "darmois.json").read_text())
        flow, _ = load_checkpoint(d / wrapper["checkpoint"])
        hist = TrainHistory.from_csv(d / "history.csv") if (d / "history.csv").exists() else TrainHistory()
        return cls(flow, tuple(wrapper["order"]), hist, wrapper.get("train", {}), wrapper.get("base", "standard-normal"))


class DarmoisMixing(DifferentiableMap):
    """``f^D``: uniform sources to observations, by inverting ``g^D``."""

    kind = "darmois-mixing"

    def __init__(self, solution: DarmoisSolution):
        self.solution = solution
        self.dim = solution.dim

    def in_domain(self, s):
        s = np.atleast_2d(s)
        return np.all((s > 0) & (s < 1), axis=-1)

    def _forward(self, u):
        if not np.all(self.in_domain(u)):
            raise DomainError("Darmois mixing is defined on the open unit cube")
        # trained blocks sit near the spectral bound, so the default
        # 200-step cap is too short; budget from the Banach rate instead
        coeff = self.solution.train_config.get("coeff", DEFAULT_COEFF)
        y = self.solution.flow.inverse(ndtri(u), max_iter=inverse_budget(coeff))
        inv = np.argsort(self.solution.order)
        return y[:, inv]

    def _jacobian(self, u):
        return np.linalg.inv(self.solution.unmixing_jacobian(self._forward(u)))

    def _inverse(self, x):
        return self.solution.unmix(x)

    def to_dict(self):
        return {"kind": self.kind, "order": list(self.solution.order)}


def learn_darmois(
    data,
    cfg: TrainConfig | None = None,
    n_blocks: int = 8,
    hidden: int | None = None,
    n_sublayers: int = 2,
    order=None,
    triangular: str = "lower",
    init_seed: int | None = None,
    history_path=None,
) -> DarmoisSolution:
    """Fit a triangular flow by maximum likelihood to a standard-normal base.

    Coordinates are processed in ``order`` (default: native order).  The
    output stage maps each Gaussianised coordinate through the base CDF.
    """
    X = np.asarray(as_array(data), dtype=np.float64)
    if X.ndim != 2:
        raise InvalidDimensionError("data must be a 2-d array")
    n = X.shape[1]
    cfg = cfg or TrainConfig()
    if cfg.lam != 0:
        cfg = TrainConfig(**{**cfg.to_dict(), "lam": 0.0})
    if cfg.base != "standard-normal":
        cfg = TrainConfig(**{**cfg.to_dict(), "base": "standard-normal"})
    order = tuple(range(n)) if order is None else tuple(int(i) for i in order)
    if sorted(order) != list(range(n)):
        raise ValueError(f"order must be a permutation of 0..{n - 1}")
    rng = make_rng(cfg.seed if init_seed is None else init_seed)
    flow = ResidualFlow.init_random(
        n, rng, n_blocks=n_blocks, hidden=hidden, n_sublayers=n_sublayers,
        triangular=triangular, coeff=cfg.coeff,
    )
    trained, history = train(flow, X[:, list(order)], cfg, history_path=history_path)
    return DarmoisSolution(trained, order, history, cfg.to_dict())


# ---------------------------------------------------------------------------
# closed-form Darmois terms for the polar-to-Cartesian example
def polar_darmois_terms(x, R: float = 1.0, variant: str = "simplified"):
    """``(p(x1), p(x2 | x1), c21(x))`` for uniform ``(r, theta)`` on the disk.

    ``c21`` is the derivative of the conditional CDF ``F(x2 | x1)`` in
    ``x1``.  ``variant="simplified"`` takes ``arcsinh(x2)`` as the
    antiderivative of ``1/sqrt(x1^2 + x2^2)`` in ``x2``, which leaves a
    compact closed form for ``c21``; ``variant="exact"`` uses
    ``arcsinh(x2 / |x1|)`` and differentiates it fully.  The marginal and conditional are identical in
    both variants.
    """
    if variant not in ("simplified", "exact"):
        raise ValueError("variant must be 'simplified' or 'exact'")
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[-1] != 2:
        raise InvalidDimensionError("polar example is two-dimensional")
    x1, x2 = X[:, 0], X[:, 1]
    r2 = x1 * x1 + x2 * x2
    if np.any(r2 >= R * R) or np.any(x1 == 0):
        raise OutOfSupportError("point outside the open disk (or on the x1 = 0 line)")
    a = np.abs(x1)
    A = np.arccosh(R / a)  # = arcsinh(sqrt((R/x1)^2 - 1))
    p1 = A / (np.pi * R)
    p21 = 1.0 / (2.0 * np.sqrt(r2) * A)
    root = np.sqrt(R * R - a * a)
    if variant == "simplified":
        c21 = R * np.arcsinh(x2) / (2.0 * x1 * root * A * A)
    else:
        N = np.arcsinh(x2 / a)
        dN = -x2 / (a * np.sqrt(r2))
        dA = -R / (a * root)
        c21 = np.sign(x1) * (dN * A - N * dA) / (2.0 * A * A)
    if single:
        return float(p1[0]), float(p21[0]), float(c21[0])
    return p1, p21, c21


def polar_darmois_integrand(x, R: float = 1.0, variant: str = "simplified"):
    """Local contrast of the Darmois mixing, ``0.5 log(1 + (c21 / p(x2|x1))^2)``."""
    _, p21, c21 = polar_darmois_terms(x, R, variant)
    return 0.5 * np.log1p((np.asarray(c21) / np.asarray(p21)) ** 2)


def polar_grid(R: float = 1.0, n_r: int = 100, n_theta: int = 100):
    """Midpoint grid in ``(r, theta)``; returns Cartesian points and weights.

    The weights are those of the source density (uniform in r and theta),
    so ``sum(w * h(x))`` is the expectation of ``h`` under the data density.
    The theta midpoints stay off the ``x1 = 0`` line unless ``n_theta`` is
    congruent to 2 modulo 4.
    """
    r = (np.arange(n_r) + 0.5) * R / n_r
    th = (np.arange(n_theta) + 0.5) * 2.0 * np.pi / n_theta
    rr, tt = np.meshgrid(r, th, indexing="ij")
    pts = np.stack([rr * np.cos(tt), rr * np.sin(tt)], axis=-1).reshape(-1, 2)
    w = np.full(pts.shape[0], 1.0 / pts.shape[0])
    return pts, w


def polar_darmois_cima(R: float = 1.0, n_r: int = 100, n_theta: int = 100, variant: str = "simplified") -> float:
    """Quadrature of the Darmois contrast against the data density."""
    pts, w = polar_grid(R, n_r, n_theta)
    return float(np.sum(w * polar_darmois_integrand(pts, R, variant)))


def polar_marginal_mass(R: float = 1.0) -> float:
    """``int p(x1) dx1`` over ``(-R, R)`` by adaptive quadrature."""
    from scipy.integrate import quad

    half, _ = quad(lambda t: np.arccosh(R / t) / (np.pi * R), 0.0, R, limit=200)
    return 2.0 * half


# ---------------------------------------------------------------------------
# rotated-Gaussian measure-preserving automorphism
class MpaMap(DifferentiableMap):
    """``a^R = F^{-1} o Phi o R o Phi^{-1} o F`` for a factorised density ``p``."""

    kind = "mpa"

    def __init__(self, density: FactorizedDensity, R):
        R = as_matrix(R, square=True)
        if R.shape[0] != density.dim:
            raise InvalidDimensionError("rotation and density dimensions differ")
        if np.max(np.abs(R.T @ R - np.eye(R.shape[0]))) > 1e-10:
            raise ValueError("R must be orthogonal")
        self.density = density
        self.R = R
        self.dim = density.dim

    def in_domain(self, s):
        return self.density.in_support(np.atleast_2d(s))

    def _check(self, s):
        if not np.all(self.in_domain(s)):
            raise DomainError("MPA evaluated outside the support of its density")

    def _stages(self, s):
        self._check(s)
        z = ndtri(self.density.cdf(s))
        w = z @ self.R.T
        u = ndtr(w)
        return z, w, u

    def _forward(self, s):
        _, _, u = self._stages(s)
        return self.density.quantile(np.clip(u, 1e-300, 1 - 1e-16))

    def _jacobian(self, s):
        z, w, u = self._stages(s)
        a = self.density.quantile(np.clip(u, 1e-300, 1 - 1e-16))
        left = _phi(w) / self.density.pdf_marginals(a)
        right = self.density.pdf_marginals(s) / _phi(z)
        return left[:, :, None] * self.R[None] * right[:, None, :]

    def _inverse(self, x):
        return MpaMap(self.density, self.R.T)._forward(x)

    def to_dict(self):
        return {"kind": self.kind, "R": self.R.tolist(), "density": self.density.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "MpaMap":
        return cls(FactorizedDensity.from_dict(d["density"]), np.asarray(d["R"]))


def make_mpa(p: FactorizedDensity, R) -> MpaMap:
    return MpaMap(p, R)


def compose(outer: DifferentiableMap, inner: DifferentiableMap) -> ComposedMap:
    """``outer o inner`` with chain-rule Jacobian and composed inverse."""
    if outer.dim != inner.dim:
        raise InvalidDimensionError(f"cannot compose maps of dimension {outer.dim} and {inner.dim}")
    return ComposedMap(outer, inner)
