"""INI run configuration.

Every key has a default (``DEFAULTS``); a file only lists what it changes.
Unknown sections or keys, unparsable values and out-of-range values are all
collected and reported together in one :class:`ConfigError`.

Sections and keys::

    [run]      seed, checkpoint_every, log_trajectories
    [model]    embed_dim, n_layers, n_heads, ff_dim, max_len, init_std
    [task]     family, train_size, eval_size
    [decode]   strategy, k_per_step, threshold, block_size, max_steps (0 = response length),
               sampling, temperature, top_p
    [pretrain] steps, batch_size, lr, normalization
    [train]    G, batch_size, k, N, tau_sample, epsilon, clip_threshold, beta, std_floor, lr,
               max_grad_norm, total_steps, estimator, target, normalization,
               mask_rate (0 = uniform per response), optimizer
    [eval]     step_multipliers (comma-separated)
"""

from __future__ import annotations

import configparser
import copy
from pathlib import Path

from .diffusion import SAMPLING_MODES, STRATEGIES, DecodeConfig
from .errors import ConfigError
from .losses import ESTIMATORS, NORMALIZATIONS, TARGETS
from .model import MLM_NORMALIZATIONS, ModelConfig
from .tasks import FAMILIES, RESPONSE_LENGTH
from .trainer import PretrainConfig, TrainConfig

DEFAULTS: dict[str, dict] = {
    "run": {"seed": 0, "checkpoint_every": 50, "log_trajectories": True},
    "model": {"embed_dim": 64, "n_layers": 2, "n_heads": 4, "ff_dim": 128, "max_len": 128,
              "init_std": 0.02},
    "task": {"family": "addition", "train_size": 5000, "eval_size": 200},
    "decode": {"strategy": "dynamic_threshold", "k_per_step": 1, "threshold": 0.9, "block_size": 32,
               "max_steps": 0, "sampling": "gumbel_argmax", "temperature": 1.0, "top_p": 1.0},
    "pretrain": {"steps": 800, "batch_size": 64, "lr": 1e-3, "normalization": "length"},
    "train": {"G": 4, "batch_size": 8, "k": 16, "N": 1, "tau_sample": 1.0, "epsilon": 0.2,
              "clip_threshold": 0.2, "beta": 0.01, "std_floor": 1e-4, "lr": 1e-5,
              "max_grad_norm": 1.0, "total_steps": 200, "estimator": "rldf", "target": "x0",
              "normalization": "sample", "mask_rate": 0.0, "optimizer": "adam"},
    "eval": {"step_multipliers": (0.5, 1.0, 2.0)},
}


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit_closed(v):
    return 0 <= v <= 1


def _one_of(choices):
    return lambda v: v in choices


CHECKS = {
    ("run", "checkpoint_every"): (_pos, "must be positive"),
    ("model", "embed_dim"): (_pos, "must be positive"),
    ("model", "n_layers"): (_pos, "must be positive"),
    ("model", "n_heads"): (_pos, "must be positive"),
    ("model", "ff_dim"): (_pos, "must be positive"),
    ("model", "max_len"): (_pos, "must be positive"),
    ("model", "init_std"): (_pos, "must be positive"),
    ("task", "family"): (_one_of(FAMILIES), f"must be one of {FAMILIES}"),
    ("task", "train_size"): (_pos, "must be positive"),
    ("task", "eval_size"): (_pos, "must be positive"),
    ("decode", "strategy"): (_one_of(STRATEGIES), f"must be one of {STRATEGIES}"),
    ("decode", "k_per_step"): (_pos, "must be positive"),
    ("decode", "threshold"): (lambda v: 0 < v < 1, "must lie in (0, 1)"),
    ("decode", "block_size"): (_pos, "must be positive"),
    ("decode", "max_steps"): (_nonneg, "must be >= 0"),
    ("decode", "sampling"): (_one_of(SAMPLING_MODES), f"must be one of {SAMPLING_MODES}"),
    ("decode", "temperature"): (_nonneg, "must be >= 0"),
    ("decode", "top_p"): (lambda v: 0 < v <= 1, "must lie in (0, 1]"),
    ("pretrain", "steps"): (_nonneg, "must be >= 0"),
    ("pretrain", "batch_size"): (_pos, "must be positive"),
    ("pretrain", "lr"): (_pos, "must be positive"),
    ("pretrain", "normalization"): (_one_of(MLM_NORMALIZATIONS), f"must be one of {MLM_NORMALIZATIONS}"),
    ("train", "G"): (lambda v: v >= 2, "must be >= 2"),
    ("train", "batch_size"): (_pos, "must be positive"),
    ("train", "k"): (_pos, "must be positive"),
    ("train", "N"): (_pos, "must be positive"),
    ("train", "tau_sample"): (_pos, "must be positive"),
    ("train", "epsilon"): (_nonneg, "must be >= 0"),
    ("train", "clip_threshold"): (_unit_closed, "must lie in [0, 1]"),
    ("train", "beta"): (_nonneg, "must be >= 0"),
    ("train", "std_floor"): (_pos, "must be positive"),
    ("train", "lr"): (_pos, "must be positive"),
    ("train", "max_grad_norm"): (_pos, "must be positive"),
    ("train", "total_steps"): (_nonneg, "must be >= 0"),
    ("train", "estimator"): (_one_of(ESTIMATORS), f"must be one of {ESTIMATORS}"),
    ("train", "target"): (_one_of(TARGETS), f"must be one of {TARGETS}"),
    ("train", "normalization"): (_one_of(NORMALIZATIONS), f"must be one of {NORMALIZATIONS}"),
    ("train", "mask_rate"): (_unit_closed, "must lie in [0, 1]"),
    ("train", "optimizer"): (_one_of(("adam", "sgd")), "must be adam or sgd"),
    ("eval", "step_multipliers"): (lambda v: len(v) > 0 and all(x > 0 for x in v),
                                   "must be a nonempty list of positive numbers"),
}


def _parse(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.split(",") if x.strip())
    return raw


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _violations(cfg: dict) -> list[tuple[str, str]]:
    out = []
    for section, entries in cfg.items():
        if section not in DEFAULTS:
            out.append((section, f"unknown section [{section}]"))
            continue
        for key, val in entries.items():
            name = f"{section}.{key}"
            if key not in DEFAULTS[section]:
                out.append((name, f"unknown key {name}"))
                continue
            check = CHECKS.get((section, key))
            if check and not check[0](val):
                out.append((name, f"{name} {check[1]} (got {val!r})"))
    model = cfg.get("model", {})
    if model.get("embed_dim", 1) % max(model.get("n_heads", 1), 1):
        out.append(("model.embed_dim", "model.embed_dim must be divisible by model.n_heads"))
    return out


def _raise(violations) -> None:
    if violations:
        raise ConfigError("invalid config: " + "; ".join(m for _, m in violations),
                          [k for k, _ in violations])


def validate(cfg: dict) -> dict:
    """Check sections, keys and values; raise one error naming every bad key."""
    _raise(_violations(cfg))
    return cfg


def _merge(overrides: dict | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    for section, entries in (overrides or {}).items():
        cfg.setdefault(section, {}).update(entries)
    return cfg


def from_dict(overrides: dict | None = None) -> dict:
    """Defaults updated with ``overrides`` (section -> key -> typed value), validated."""
    return validate(_merge(overrides))


def parse_ini(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case sensitive (G, N)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}".replace("\n", " ")) from exc
    overrides: dict = {}
    bad = []
    for section in parser.sections():
        known = DEFAULTS.get(section, {})
        for key, raw in parser.items(section):
            if key not in known:
                overrides.setdefault(section, {})[key] = raw  # reported as unknown below
                continue
            try:
                overrides.setdefault(section, {})[key] = _parse(raw, known[key])
            except ValueError as exc:
                bad.append((f"{section}.{key}", f"{section}.{key}: {exc}"))
    cfg = _merge(overrides)
    _raise(bad + _violations(cfg))
    return cfg


def load(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}", ["--config"])
    return parse_ini(p.read_text())


def to_ini(cfg: dict) -> str:
    lines = []
    for section, entries in cfg.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_render(v)}" for k, v in entries.items())
        lines.append("")
    return "\n".join(lines)


def to_json(cfg: dict) -> dict:
    return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in e.items()} for s, e in cfg.items()}


def from_json(data: dict) -> dict:
    return from_dict({s: {k: tuple(v) if isinstance(v, list) else v for k, v in e.items()}
                      for s, e in data.items()})


# -- typed views ---------------------------------------------------------------------

def model_config(cfg: dict, seed: int) -> ModelConfig:
    return ModelConfig(seed=seed, **cfg["model"])


def decode_config(cfg: dict, length: int | None = None) -> DecodeConfig:
    d = dict(cfg["decode"])
    d["max_steps"] = d["max_steps"] or None
    return DecodeConfig(length=length or RESPONSE_LENGTH[cfg["task"]["family"]], **d)


def pretrain_config(cfg: dict) -> PretrainConfig:
    return PretrainConfig(seed=cfg["run"]["seed"], **cfg["pretrain"])


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t["mask_rate"] = t["mask_rate"] or None
    return TrainConfig(seed=cfg["run"]["seed"], decode=decode_config(cfg), **t)


def with_seed(cfg: dict, seed: int) -> dict:
    out = copy.deepcopy(cfg)
    out["run"]["seed"] = int(seed)
    return out

