"""Experiment configuration: JSON parsing, defaults and validation.

Validation errors point at the line of the offending key in the config file
(or line 1 for missing keys) so messages read like ``line 7: seeds ...``.
"""
from __future__ import annotations

import copy
import json
import re
from pathlib import Path

from ..errors import ConfigError
from ..training import TrainConfig

KINDS = ("darmois-cima", "mpa-sweep", "mlp-depth", "regularized-mle", "polar-check", "properties")
MIXING_KINDS = ("moebius", "mlp", "linear", "polar")

DESCRIPTIONS = {
    "darmois-cima": "C_IMA of learned Darmois solutions for random mixings (histogram panel)",
    "mpa-sweep": "C_IMA of the true mixing composed with rotated-Gaussian MPAs over an angle grid",
    "mlp-depth": "C_IMA of random leaky-tanh MLP mixings as a function of depth",
    "regularized-mle": "C_IMA-regularised maximum likelihood: KL, C_IMA, MCC, nonlinear Amari per lambda",
    "polar-check": "closed-form Darmois terms and contrasts for the polar-to-Cartesian example",
    "properties": "randomised property suites for contrasts, flows, gradients and MPAs",
}

_FLOW_DEFAULTS = {"n_blocks": 8, "hidden": None, "n_sublayers": 2}
_DEFAULTS = {
    "darmois-cima": {
        "n": 2,
        "mixing": {"kind": "moebius", "eps": 2, "b_scale": 1.0},
        "data": {"n_train": 5000, "n_test": 5000},
        "flow": dict(_FLOW_DEFAULTS),
        "train": {"batch_size": 256},
        "contrast": {"n_samples": 10000},
        "igci": True,
    },
    "mpa-sweep": {
        "n": 2,
        "mixing": {"kind": "moebius", "eps": 2, "b_scale": 1.0},
        "theta_points": 64,
        "contrast": {"n_samples": 10000},
        "include_darmois": False,
        "data": {"n_train": 5000, "n_test": 5000},
        "flow": dict(_FLOW_DEFAULTS),
        "train": {"batch_size": 256},
    },
    "mlp-depth": {
        "n": 5,
        "depths": [2, 4],
        "mixing": {"kind": "mlp", "bias_scale": 0.0, "slope": 0.1},
        "contrast": {"n_samples": 10000},
    },
    "regularized-mle": {
        "n": 2,
        "lambdas": [0.0, 1.0],
        "mixing": {"kind": "moebius", "eps": 2, "b_scale": 1.0},
        "data": {"n_train": 5000, "n_test": 5000},
        "flow": dict(_FLOW_DEFAULTS),
        "train": {"batch_size": 256, "base": "standard-logistic"},
        "contrast": {"n_samples": 10000},
    },
    "polar-check": {
        "n": 2,
        "R": 1.0,
        "grid": 100,
        "contrast": {"n_samples": 10000},
    },
    "properties": {
        "n": 3,
        "n_matrices": 10000,
        "n_points": 100,
    },
}

_REQUIRED = ("kind", "seeds")


def _line_of(text: str | None, key: str) -> int | None:
    if not text:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    if not m:
        return 1
    return text.count("\n", 0, m.start()) + 1


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_config_text(text: str) -> dict:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", line=exc.lineno) from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", line=1)
    return raw


def load_config(path) -> tuple[dict, str]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from exc
    return parse_config_text(text), text


def _err(msg, field, text):
    return ConfigError(f"{field}: {msg}", field=field, line=_line_of(text, field.split(".")[-1]))


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(raw: dict, text: str | None = None) -> dict:
    """Return the resolved config (defaults filled in) or raise ConfigError.

    Pure checking: no numerics run here.
    """
    for key in _REQUIRED:
        if key not in raw:
            raise ConfigError(f"missing required field '{key}'", field=key, line=1 if text else None)
    kind = raw["kind"]
    if kind not in KINDS:
        raise _err(f"unknown experiment kind {kind!r}; expected one of {', '.join(KINDS)}", "kind", text)
    cfg = _merge(_DEFAULTS[kind], raw)
    known = set(_DEFAULTS[kind]) | {"kind", "seeds", "output_dir", "name", "threads"}
    for key in raw:
        if key not in known:
            raise _err("unknown field for this experiment kind", key, text)

    seeds = cfg["seeds"]
    if not isinstance(seeds, list) or not seeds:
        raise _err("must be a non-empty list of integers", "seeds", text)
    if not all(_is_int(s) and s >= 0 for s in seeds):
        raise _err("entries must be non-negative integers", "seeds", text)
    if len(set(seeds)) != len(seeds):
        raise _err("entries must be distinct", "seeds", text)

    n = cfg["n"]
    if not _is_int(n) or n < 1:
        raise _err("must be a positive integer", "n", text)
    if kind in ("mpa-sweep", "polar-check") and n != 2:
        raise _err(f"{kind} is defined for n = 2", "n", text)
    if kind in ("darmois-cima", "regularized-mle") and n < 2:
        raise _err("needs n >= 2", "n", text)

    mixing = cfg.get("mixing")
    if mixing is not None:
        if not isinstance(mixing, dict) or mixing.get("kind") not in MIXING_KINDS:
            raise _err(f"mixing.kind must be one of {', '.join(MIXING_KINDS)}", "mixing", text)
        if mixing["kind"] == "moebius" and mixing.get("eps", 2) not in (0, 2):
            raise _err("must be 0 or 2", "eps", text)
        if mixing["kind"] == "polar" and n != 2:
            raise _err("polar mixing needs n = 2", "mixing", text)
        if "b_scale" in mixing and not (_is_num(mixing["b_scale"]) and mixing["b_scale"] > 0):
            raise _err("must be positive", "b_scale", text)

    if "train" in cfg:
        train = cfg["train"]
        if not isinstance(train, dict):
            raise _err("must be an object", "train", text)
        if "lam" in train and not (_is_num(train["lam"]) and train["lam"] >= 0):
            raise _err(f"range error: lambda must be >= 0, got {train['lam']!r}", "lam", text)
        try:
            TrainConfig.from_dict({k: v for k, v in train.items()})
        except ConfigError as exc:
            raise ConfigError(f"train.{exc.field}: {exc}", field=exc.field, line=_line_of(text, exc.field or "train")) from exc
        except TypeError as exc:
            raise _err(str(exc), "train", text) from exc

    if "lambdas" in cfg:
        lams = cfg["lambdas"]
        if not isinstance(lams, list) or not lams or not all(_is_num(v) for v in lams):
            raise _err("must be a non-empty list of numbers", "lambdas", text)
        if any(v < 0 for v in lams):
            raise _err("range error: every lambda must be >= 0", "lambdas", text)
        if len(set(lams)) != len(lams):
            raise _err("entries must be distinct", "lambdas", text)

    if "depths" in cfg:
        depths = cfg["depths"]
        if not isinstance(depths, list) or not depths or not all(_is_int(d) and d >= 1 for d in depths):
            raise _err("must be a non-empty list of integers >= 1", "depths", text)

    if "flow" in cfg:
        flow = cfg["flow"]
        unknown = set(flow) - set(_FLOW_DEFAULTS)
        if unknown:
            raise _err(f"unknown flow option(s) {sorted(unknown)}", "flow", text)
        if not (_is_int(flow["n_blocks"]) and flow["n_blocks"] >= 1):
            raise _err("must be a positive integer", "n_blocks", text)
        if not (_is_int(flow["n_sublayers"]) and flow["n_sublayers"] >= 2):
            raise _err("must be an integer >= 2", "n_sublayers", text)
        if flow["hidden"] is not None and not (_is_int(flow["hidden"]) and flow["hidden"] >= 1):
            raise _err("must be a positive integer or null", "hidden", text)

    for section, keys in (("data", ("n_train", "n_test")), ("contrast", ("n_samples",))):
        if section in cfg:
            for k in keys:
                v = cfg[section].get(k)
                if not (_is_int(v) and v >= 2):
                    raise _err("must be an integer >= 2", k, text)

    for k in ("theta_points", "grid", "n_matrices", "n_points"):
        if k in cfg and not (_is_int(cfg[k]) and cfg[k] >= 2):
            raise _err("must be an integer >= 2", k, text)
    if "R" in cfg and not (_is_num(cfg["R"]) and cfg["R"] > 0):
        raise _err("must be positive", "R", text)
    return cfg


def list_experiments() -> str:
    return "\n".join(f"{k:<16} {DESCRIPTIONS[k]}" for k in KINDS)
