"""Invertible residual flows, optionally with triangular Jacobian."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..densities import FactorizedDensity, as_array
from ..errors import InvalidDimensionError, InversionError, NumericalOverflowError
from ..mixing import DifferentiableMap, _as_batch
from . import _reference
from ._backend import get_kernels

DEFAULT_BLOCKS = 32
DEFAULT_SUBLAYERS = 2
DEFAULT_COEFF = 0.97
DEFAULT_POWER_ITERS = 5


def default_hidden(n: int) -> int:
    return max(16, 8 * n)


def even_split(h: int, n: int) -> list[int]:
    """Split ``h`` hidden units into ``n`` groups whose sizes differ by <= 1."""
    if h < n:
        raise InvalidDimensionError(f"need at least one hidden unit per coordinate ({h} < {n})")
    base, extra = divmod(h, n)
    return [base + 1 if i < extra else base for i in range(n)]


@dataclass(frozen=True)
class TriangularMaskSpec:
    """Block-triangular zero patterns for every weight matrix of a block.

    Hidden units are split into groups ``h_1..h_n``; group ``i`` only sees
    inputs ``z_1..z_i`` (``lower=True``) or ``z_i..z_n`` (``lower=False``),
    which makes the Jacobian of every block, and so of the whole flow,
    lower (upper) triangular.
    """

    n: int
    hidden: int
    n_sublayers: int = DEFAULT_SUBLAYERS
    lower: bool = True

    @property
    def split(self) -> list[int]:
        return even_split(self.hidden, self.n)

    def _groups(self):
        return np.repeat(np.arange(self.n), self.split)

    def matrices(self) -> list[np.ndarray]:
        """Boolean masks (True = free entry) for ``V_0 .. V_{l-1}``."""
        grp = self._groups()
        coord = np.arange(self.n)
        le = np.less_equal if self.lower else np.greater_equal
        out = []
        for m in range(self.n_sublayers):
            if m == 0:
                out.append(le(coord[None, :], grp[:, None]))
            elif m == self.n_sublayers - 1:
                out.append(le(grp[None, :], coord[:, None]))
            else:
                out.append(le(grp[None, :], grp[:, None]))
        return out

    def flat(self, n_blocks: int) -> np.ndarray:
        """Mask over the flat parameter vector (biases always free)."""
        parts = []
        for Mk in self.matrices():
            parts.append(Mk.ravel())
            parts.append(np.ones(Mk.shape[0], dtype=bool))
        return np.tile(np.concatenate(parts), n_blocks)

    def to_dict(self):
        return {"n": self.n, "hidden": self.hidden, "n_sublayers": self.n_sublayers, "lower": self.lower}


class ResidualFlow(DifferentiableMap):
    """Stack of residual blocks ``z' = z + g(z)`` after a fixed affine layer.

    The flow maps observations ``x`` to reconstructed sources ``y``.
    Parameters live in one flat vector ``theta`` (see ``_reference`` for the
    layout) so optimiser code can treat them as a single array.
    """

    kind = "residual-flow"

    def __init__(
        self,
        n: int,
        n_blocks: int = DEFAULT_BLOCKS,
        hidden: int | None = None,
        n_sublayers: int = DEFAULT_SUBLAYERS,
        triangular: str | None = None,
        theta=None,
        shift=None,
        scale=None,
    ):
        if n < 1:
            raise InvalidDimensionError(f"dimension must be >= 1, got {n}")
        if n_sublayers < 2:
            raise ValueError("each residual block needs at least two sub-layers")
        if triangular not in (None, "lower", "upper"):
            raise ValueError("triangular must be None, 'lower' or 'upper'")
        self.dim = n
        self.n_blocks = n_blocks
        self.hidden = default_hidden(n) if hidden is None else hidden
        self.n_sublayers = n_sublayers
        self.triangular = triangular
        size = n_blocks * _reference.block_size(n, self.hidden, n_sublayers)
        self.theta = np.zeros(size) if theta is None else np.array(theta, dtype=np.float64)
        if self.theta.shape != (size,):
            raise InvalidDimensionError(f"theta must have {size} entries, got {self.theta.shape}")
        self.shift = np.zeros(n) if shift is None else np.array(shift, dtype=np.float64)
        self.scale = np.ones(n) if scale is None else np.array(scale, dtype=np.float64)
        self.mask_spec = (
            TriangularMaskSpec(n, self.hidden, n_sublayers, lower=(triangular == "lower"))
            if triangular
            else None
        )
        self.mask = self.mask_spec.flat(n_blocks) if self.mask_spec else None
        cols = sum(c for _, c in _reference.layer_shapes(n, self.hidden, n_sublayers))
        self.sn_vectors = np.ones(n_blocks * cols)
        if self.mask is not None:
            self.theta[~self.mask] = 0.0

    # -- construction -----------------------------------------------------
    @classmethod
    def init_random(
        cls,
        n: int,
        rng: np.random.Generator,
        n_blocks: int = DEFAULT_BLOCKS,
        hidden: int | None = None,
        n_sublayers: int = DEFAULT_SUBLAYERS,
        triangular: str | None = None,
        init_scale: float = 0.5,
        coeff: float = DEFAULT_COEFF,
    ) -> "ResidualFlow":
        flow = cls(n, n_blocks, hidden, n_sublayers, triangular)
        for layers in flow.layers():
            for V, _ in layers:
                V[...] = rng.standard_normal(V.shape) * init_scale / math.sqrt(V.shape[1])
        flow.sn_vectors[:] = rng.standard_normal(flow.sn_vectors.shape)
        flow.apply_masks()
        flow.spectral_normalize(coeff, power_iters=50)
        return flow

    def set_normalization(self, data) -> None:
        """Freeze the affine layer to the data mean and standard deviation."""
        x = as_array(data)
        self.shift = x.mean(axis=0)
        sd = x.std(axis=0)
        self.scale = np.where(sd > 0, sd, 1.0)

    def copy(self) -> "ResidualFlow":
        other = ResidualFlow(
            self.dim, self.n_blocks, self.hidden, self.n_sublayers, self.triangular,
            self.theta, self.shift, self.scale,
        )
        other.sn_vectors = self.sn_vectors.copy()
        return other

    @property
    def n_params(self) -> int:
        return self.theta.size

    def layers(self):
        """Per-block ``[(V_m, c_m), ...]`` views into ``theta``."""
        return _reference.unpack(self.theta, self.dim, self.hidden, self.n_sublayers, self.n_blocks)

    def _dims(self):
        return self.dim, self.hidden, self.n_sublayers, self.n_blocks

    # -- constraints ------------------------------------------------------
    def apply_masks(self) -> None:
        if self.mask is not None:
            self.theta[~self.mask] = 0.0

    def spectral_normalize(self, coeff: float = DEFAULT_COEFF, power_iters: int = DEFAULT_POWER_ITERS):
        spectral_normalize(self, coeff, power_iters)

    def lipschitz_bounds(self) -> np.ndarray:
        """Upper bound on Lip(g) per block: product of exact spectral norms."""
        out = []
        for layers in self.layers():
            out.append(np.prod([np.linalg.norm(V, 2) for V, _ in layers]))
        return np.array(out)

    # -- evaluation -------------------------------------------------------
    def forward_logdet(self, x, want_jac=False, backend=None):
        X, single = _as_batch(x, self.dim)
        k = get_kernels(backend)
        Y, logdet, P = k.forward(self.theta, self.shift, self.scale, X, *self._dims(), want_jac)
        Y, logdet = np.asarray(Y), np.asarray(logdet)
        if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(logdet))):
            raise NumericalOverflowError("non-finite value in flow forward pass")
        if want_jac:
            P = np.asarray(P)
            return (Y[0], logdet[0], P[0]) if single else (Y, logdet, P)
        return (Y[0], logdet[0]) if single else (Y, logdet)

    def _forward(self, s):
        return self.forward_logdet(s)[0]

    def _jacobian(self, s):
        return self.forward_logdet(s, want_jac=True)[2]

    def _block_g(self, layers, z):
        inp = z
        last = len(layers) - 1
        for m, (V, c) in enumerate(layers):
            a = inp @ V.T + c
            inp = np.tanh(a) if m < last else a
        return inp

    def _inverse(self, y, tol: float = 1e-10, max_iter: int = 200):
        z = np.array(y, dtype=np.float64)
        for layers in reversed(self.layers()):
            x = z.copy()
            for _ in range(max_iter):
                x_new = z - self._block_g(layers, x)
                delta = np.max(np.abs(x_new - x), initial=0.0)
                x = x_new
                if delta <= tol:
                    break
            else:
                residual = float(np.max(np.abs(x + self._block_g(layers, x) - z), initial=0.0))
                raise InversionError(f"fixed-point iteration hit {max_iter} iterations", residual)
            z = x
        return z * self.scale + self.shift

    def inverse(self, y, tol: float = 1e-10, max_iter: int = 200):
        Y, single = _as_batch(y, self.dim)
        out = self._inverse(Y, tol, max_iter)
        return out[0] if single else out

    def architecture(self) -> dict:
        return {
            "n": self.dim,
            "n_blocks": self.n_blocks,
            "hidden": self.hidden,
            "n_sublayers": self.n_sublayers,
            "triangular": self.triangular,
            "nonlinearity": "tanh",
        }


def spectral_normalize(flow: ResidualFlow, coeff: float = DEFAULT_COEFF, power_iters: int = DEFAULT_POWER_ITERS):
    """Rescale every weight matrix whose estimated spectral norm exceeds ``coeff``.

    The estimate is a warm-started power iteration (vectors persist in
    ``flow.sn_vectors``); matrices already below ``coeff`` are left alone.
    Rescaling keeps masked zeros at zero.
    """
    if not 0.0 < coeff < 1.0:
        raise ValueError("coeff must lie in (0, 1)")
    n, h, l, K = flow._dims()
    get_kernels().spectral_normalize(flow.theta, flow.sn_vectors, n, h, l, K, float(coeff), int(power_iters))


def apply_triangular_masks(flow: ResidualFlow, spec: TriangularMaskSpec) -> None:
    if (spec.n, spec.hidden, spec.n_sublayers) != (flow.dim, flow.hidden, flow.n_sublayers):
        raise InvalidDimensionError("mask spec does not match the flow architecture")
    mask = spec.flat(flow.n_blocks)
    flow.theta[~mask] = 0.0


def flow_forward(flow: ResidualFlow, x):
    """``(y, log|det J|)`` for a point or a batch."""
    return flow.forward_logdet(x)


def inverse_budget(coeff: float = DEFAULT_COEFF, tol: float = 1e-10, slack: float = 2.0) -> int:
    """Fixed-point iteration cap for blocks with Lipschitz constant ``coeff``.

    The Banach rate needs ``ceil(log(tol) / log(coeff))`` steps to shrink a
    unit initial error below ``tol``; ``slack`` covers larger initial errors
    and power-iteration underestimates of the spectral norm.  Never below 200.
    """
    if not 0.0 < coeff < 1.0:
        raise ValueError("coeff must lie in (0, 1)")
    return max(200, math.ceil(slack * math.log(tol) / math.log(coeff)))


def flow_inverse(flow: ResidualFlow, y, tol: float = 1e-10, max_iter: int = 200):
    return flow.inverse(y, tol, max_iter)


BASE_KINDS = {"standard-normal": _reference.BASE_NORMAL, "standard-logistic": _reference.BASE_LOGISTIC}


class FlowModel:
    """Flow plus factorised base density: ``log p(x) = log p_base(g(x)) + log|J_g(x)|``."""

    def __init__(self, flow: ResidualFlow, base: str = "standard-normal"):
        if base not in BASE_KINDS:
            raise ValueError(f"base must be one of {sorted(BASE_KINDS)}")
        self.flow = flow
        self.base = base

    @property
    def base_density(self) -> FactorizedDensity:
        if self.base == "standard-normal":
            return FactorizedDensity.standard_normal(self.flow.dim)
        return FactorizedDensity.standard_logistic(self.flow.dim)

    @property
    def base_code(self) -> int:
        return BASE_KINDS[self.base]

    def log_density(self, x) -> np.ndarray:
        y, logdet = self.flow.forward_logdet(np.atleast_2d(x))
        logp, _ = self.base_density.log_pdf_batch(y)
        return logp + logdet

    def sample(self, n_points: int, rng) -> np.ndarray:
        return self.flow.inverse(self.base_density.sample(n_points, rng).data)


# ---------------------------------------------------------------------------
# checkpoints: magic line, JSON header line, little-endian float64 payload
_MAGIC = b"IMAFLOW1\n"


def save_checkpoint(flow: ResidualFlow, path, seed=None, extra: dict | None = None) -> None:
    arrays = [("theta", flow.theta), ("shift", flow.shift), ("scale", flow.scale), ("sn_vectors", flow.sn_vectors)]
    header = {
        "architecture": flow.architecture(),
        "masks": flow.mask_spec.to_dict() if flow.mask_spec else None,
        "seed": seed,
        "arrays": [{"name": k, "size": int(a.size)} for k, a in arrays],
        "extra": extra or {},
    }
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)


def load_checkpoint(path) -> tuple[ResidualFlow, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path} is not a flow checkpoint")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off:off + hlen])
    off += hlen
    arrays = {}
    for entry in header["arrays"]:
        size = entry["size"]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).astype(np.float64)
        off += 8 * size
    arch = header["architecture"]
    flow = ResidualFlow(
        arch["n"], arch["n_blocks"], arch["hidden"], arch["n_sublayers"], arch["triangular"],
        arrays["theta"], arrays["shift"], arrays["scale"],
    )
    flow.sn_vectors = arrays["sn_vectors"]
    return flow, header
