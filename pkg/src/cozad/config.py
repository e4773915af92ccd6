"""Flat key=value run configuration with strict validation.

One ``key = value`` pair per line, ``#`` starts a comment. Unknown keys are
rejected so typos in ablation sweeps fail loudly. Missing keys take the
defaults below; flag values provided by the CLI override file values, which
override defaults. The environment variable COZAD_CONFIG may point at a
default file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .confident import RegConfig
from .contrastive import ContrastiveConfig
from .errors import ConfigError
from .meta import MetaConfig

ENV_VAR = "COZAD_CONFIG"


@dataclass(frozen=True)
class RunConfig:
    # synthetic-negative noise and margin objective
    sigma: float = 0.015
    th_pos: float = 0.5
    th_neg: float = 0.5
    # confidence weighting / adaptive regularization
    kappa: float = 1.5
    lambda0: float = 1e-5
    gamma: float = 1.0
    window: int = 10
    # contrastive term
    temperature: float = 0.07
    k_nn: int = 5
    sigma_aug: float = 0.01
    chunk_size: int = 256
    lambda_cont: float = 1.0
    # optimization
    alpha: float = 1e-4
    beta_adaptor: float = 1e-4
    beta_disc: float = 2e-4
    inner_steps: int = 1
    n_tasks: int = 4
    epochs: int = 40
    batch_size: int = 16
    support_fraction: float = 0.5
    weight_decay: float = 1e-5
    adapted_dim: int = 0  # 0 = feature dimension
    hidden_dim: int = 0  # 0 = adapted dimension
    # evaluation maps
    smooth_sigma: float = 4.0
    # component toggles
    use_confident: bool = True
    use_meta: bool = True
    use_contrastive: bool = True
    # run plumbing
    seed: int = 0
    threads: int = 1
    data: str = ""
    checkpoint: str = ""
    out_dir: str = ""

    def meta_config(self) -> MetaConfig:
        return MetaConfig(
            alpha=self.alpha,
            beta_adaptor=self.beta_adaptor,
            beta_disc=self.beta_disc,
            inner_steps=self.inner_steps,
            n_tasks=self.n_tasks,
            epochs=self.epochs,
            batch_size=self.batch_size,
            support_fraction=self.support_fraction,
            seed=self.seed,
        )

    def contrastive_config(self) -> ContrastiveConfig:
        return ContrastiveConfig(
            temperature=self.temperature,
            k_nn=self.k_nn,
            sigma_aug=self.sigma_aug,
            chunk_size=self.chunk_size,
            lambda_cont=self.lambda_cont,
        )

    def reg_config(self) -> RegConfig:
        return RegConfig(lambda0=self.lambda0, gamma=self.gamma)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        lines = []
        for name, value in sorted(self.as_dict().items()):
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{name} = {value}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}

# Validation predicates with the bound named in the error message.
_BOUNDS = {
    "sigma": (lambda v: v > 0, "sigma > 0"),
    "kappa": (lambda v: v >= 0, "kappa >= 0"),
    "lambda0": (lambda v: v >= 0, "lambda0 >= 0"),
    "gamma": (lambda v: v >= 0, "gamma >= 0"),
    "window": (lambda v: v >= 2, "window >= 2"),
    "temperature": (lambda v: v > 0, "temperature > 0"),
    "k_nn": (lambda v: v >= 0, "k_nn >= 0"),
    "sigma_aug": (lambda v: v > 0, "sigma_aug > 0"),
    "chunk_size": (lambda v: v >= 2, "chunk_size >= 2"),
    "lambda_cont": (lambda v: v >= 0, "lambda_cont >= 0"),
    "alpha": (lambda v: v > 0, "alpha > 0"),
    "beta_adaptor": (lambda v: v > 0, "beta_adaptor > 0"),
    "beta_disc": (lambda v: v > 0, "beta_disc > 0"),
    "inner_steps": (lambda v: v >= 1, "inner_steps >= 1"),
    "n_tasks": (lambda v: v >= 1, "n_tasks >= 1"),
    "epochs": (lambda v: v >= 1, "epochs >= 1"),
    "batch_size": (lambda v: v >= 1, "batch_size >= 1"),
    "support_fraction": (lambda v: 0 < v < 1, "support_fraction in (0, 1)"),
    "weight_decay": (lambda v: v >= 0, "weight_decay >= 0"),
    "adapted_dim": (lambda v: v >= 0, "adapted_dim >= 0"),
    "hidden_dim": (lambda v: v >= 0, "hidden_dim >= 0"),
    "smooth_sigma": (lambda v: v >= 0, "smooth_sigma >= 0"),
    "seed": (lambda v: v >= 0, "seed >= 0"),
    "threads": (lambda v: v >= 1, "threads >= 1"),
}


def _parse_value(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    raw = raw.strip()
    if ftype == "bool":
        lowered = raw.lower()
        if lowered in ("true", "1"):
            return True
        if lowered in ("false", "0"):
            return False
        raise ConfigError(f"{key} = {raw!r} is not a boolean (true/false/1/0)")
    if ftype == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key} = {raw!r} is not an integer") from None
    if ftype == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key} = {raw!r} is not a number") from None
    return raw


def _check_bounds(key: str, value):
    if key not in _BOUNDS or isinstance(value, (str, bool)):
        return
    check, desc = _BOUNDS[key]
    if not check(value):
        raise ConfigError(f"{key} = {value} out of range ({desc})")


def parse_config_text(text: str) -> dict:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown configuration key: {key!r}")
        if key in values:
            raise ConfigError(f"duplicate configuration key: {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def load_config(path: str | None = None, text: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Resolve a RunConfig from (in decreasing precedence) ``overrides``, a
    config file/text, and the defaults table.

    With no explicit path, COZAD_CONFIG is consulted for a file path.
    """
    values: dict = {}
    if text is not None:
        values.update(parse_config_text(text))
    else:
        if path is None:
            path = os.environ.get(ENV_VAR) or None
        if path:
            with open(path, "r", encoding="utf-8") as fh:
                values.update(parse_config_text(fh.read()))
    for key, value in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown configuration key: {key!r}")
        if value is not None:
            values[key] = value
    for key, value in values.items():
        _check_bounds(key, value)
    return RunConfig(**values)
