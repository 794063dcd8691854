"""Training configuration: defaults, validation, and JSON/TOML loading."""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from .cpg import DEFAULT_MAX_NODES
from .errors import ConfigError
from .featurize import DEFAULT_CONTENT_DIM
from .ggnn import DEFAULT_CONV_LAYERS, DEFAULT_KERNEL_WIDTH, DEFAULT_POOL_WINDOW, DEFAULT_STEPS
from .okd import KdConfig, KernelSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SEED_ENV = "VULGRAPH_SEED"
HOOK_KEYS = ("triplet_weight", "reg_weight", "margin")


@dataclass(frozen=True)
class GgnnConfig:
    steps: int = DEFAULT_STEPS
    conv_layers: int = DEFAULT_CONV_LAYERS
    kernel_width: int = DEFAULT_KERNEL_WIDTH
    pool_window: int = DEFAULT_POOL_WINDOW
    propagator: str = "ggnn"

    def __post_init__(self):
        if self.steps < 1 or self.conv_layers < 1 or self.kernel_width < 1 or self.pool_window < 1:
            raise ConfigError("ggnn.steps, conv_layers, kernel_width and pool_window must all be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.8
    lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0
    kd: KdConfig = KdConfig()
    provider: str = "hashing"
    content_dim: int = DEFAULT_CONTENT_DIM
    state_dim: int | None = None
    max_nodes: int = DEFAULT_MAX_NODES
    ggnn: GgnnConfig = GgnnConfig()
    aux_epochs: int = 200
    aux_lr: float = 0.05
    provider_finetune_epochs: int = 0
    hooks: dict = field(default_factory=lambda: {k: None for k in HOOK_KEYS})

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0 or self.max_nodes < 1:
            raise ConfigError("batch_size and max_nodes must be >= 1, max_epochs >= 0")
        if not self.lr > 0 or not self.aux_lr > 0:
            raise ConfigError("learning rates must be > 0")
        unknown = set(self.hooks) - set(HOOK_KEYS)
        if unknown:
            raise ConfigError(f"unknown hook keys {sorted(unknown)}")

    def to_dict(self) -> dict:
        """Fully resolved, JSON-ready view using the config-file key names."""
        k = self.kd
        return {
            "lambda": self.lam,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "kd": {
                "alpha": k.alpha,
                "kernel": k.kernel.kind,
                "sigma": k.kernel.sigma,
                "poly_c": k.kernel.poly_c,
                "poly_degree": k.kernel.poly_degree,
                "students": k.students,
            },
            "provider": self.provider,
            "content_dim": self.content_dim,
            "state_dim": self.state_dim,
            "max_nodes": self.max_nodes,
            "ggnn": {f.name: getattr(self.ggnn, f.name) for f in fields(GgnnConfig)},
            "aux": {"epochs": self.aux_epochs, "lr": self.aux_lr},
            "provider_finetune_epochs": self.provider_finetune_epochs,
            "hooks": {h: self.hooks.get(h) for h in HOOK_KEYS},
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        top = {"lambda", "lr", "batch_size", "max_epochs", "patience", "seed", "kd", "provider",
               "content_dim", "state_dim", "max_nodes", "ggnn", "aux", "provider_finetune_epochs", "hooks"}
        unknown = set(raw) - top
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kd_raw = dict(raw.pop("kd", {}) or {})
        kd_unknown = set(kd_raw) - {"alpha", "kernel", "sigma", "poly_c", "poly_degree", "students"}
        if kd_unknown:
            raise ConfigError(f"unknown kd keys {sorted(kd_unknown)}")
        kernel = KernelSpec(
            kind=kd_raw.get("kernel", "rbf"),
            poly_c=float(kd_raw.get("poly_c", 1.0)),
            poly_degree=int(kd_raw.get("poly_degree", 2)),
            sigma=float(kd_raw.get("sigma", 1.0)),
        )
        kd = KdConfig(alpha=float(kd_raw.get("alpha", 1.0)), kernel=kernel, students=int(kd_raw.get("students", 2)))
        ggnn_raw = dict(raw.pop("ggnn", {}) or {})
        try:
            ggnn = GgnnConfig(**ggnn_raw)
        except TypeError as exc:
            raise ConfigError(f"bad ggnn section: {exc}") from exc
        aux = dict(raw.pop("aux", {}) or {})
        if set(aux) - {"epochs", "lr"}:
            raise ConfigError(f"unknown aux keys {sorted(set(aux) - {'epochs', 'lr'})}")
        hooks = {h: None for h in HOOK_KEYS}
        hooks.update(raw.pop("hooks", {}) or {})
        kwargs = {
            "kd": kd, "ggnn": ggnn, "hooks": hooks,
            "aux_epochs": int(aux.get("epochs", 200)), "aux_lr": float(aux.get("lr", 0.05)),
        }
        if "lambda" in raw:
            kwargs["lam"] = float(raw.pop("lambda"))
        casts = {"lr": float, "batch_size": int, "max_epochs": int, "patience": int, "seed": int,
                 "provider": str, "content_dim": int, "max_nodes": int, "provider_finetune_epochs": int}
        for key, cast in casts.items():
            if key in raw:
                kwargs[key] = cast(raw[key])
        if raw.get("state_dim") is not None:
            kwargs["state_dim"] = int(raw["state_dim"])
        return cls(**kwargs)

    def with_overrides(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        for dotted, value in changes.items():
            target = d
            *path, leaf = dotted.split(".")
            for part in path:
                target = target[part]
            target[leaf] = value
        return TrainConfig.from_dict(d)


def load_config(path: str | Path | None, env: dict | None = None) -> TrainConfig:
    """Read a JSON or TOML config (``None`` means defaults); ``VULGRAPH_SEED`` overrides the seed."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        try:
            raw = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            raw["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    return TrainConfig.from_dict(raw)
