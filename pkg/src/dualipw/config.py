"""Flat ``key = value`` config files shared by every subcommand.

One namespace covers simulation, training and evaluation keys; unknown
keys are rejected. Command-line flags override file values, and every
run writes the fully resolved snapshot next to its outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .dataset.synthetic import BiasConfig, WorldConfig
from .training import TrainConfig

__all__ = ["ConfigError", "KEYS", "RunConfig", "parse_config_file", "write_snapshot"]


class ConfigError(Exception):
    pass


def _to_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _to_int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _to_float_tuple(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


# key -> (parser, default); None default means "unset"
KEYS: dict[str, tuple[Any, Any]] = {
    # shared
    "seed": (int, 0),
    # simulation
    "queries": (int, 2000),
    "val_queries": (int, 200),
    "test_queries": (int, 500),
    "eta": (float, BiasConfig.eta),
    "lambda_sat": (float, BiasConfig.saturation_rate),
    "rel_scale": (float, WorldConfig.rel_scale),
    "rel_ceiling": (float, WorldConfig.rel_ceiling),
    "query_shift_mean": (float, WorldConfig.query_shift_mean),
    "query_shift_sd": (float, WorldConfig.query_shift_sd),
    "saturated_frac": (float, WorldConfig.saturated_frac),
    "saturated_shift": (float, WorldConfig.saturated_shift),
    "nuisance_flip": (float, WorldConfig.nuisance_flip),
    "rel_hidden_noise": (float, WorldConfig.rel_hidden_noise),
    "feature_noise": (float, WorldConfig.feature_noise),
    "policy_strength": (float, WorldConfig.policy_strength),
    "policy_mix": (float, WorldConfig.policy_mix),
    "policy_noise": (float, WorldConfig.policy_noise),
    # training
    "method": (str, TrainConfig.method),
    "lr": (float, TrainConfig.lr),
    "lr_g": (float, None),
    "lr_h": (float, None),
    "batch_size": (int, TrainConfig.batch_size),
    "epochs": (int, TrainConfig.epochs),
    "tau": (float, TrainConfig.tau),
    "lstm_hidden": (int, TrainConfig.lstm_hidden),
    "lstm_layers": (int, TrainConfig.lstm_layers),
    "wmax": (float, TrainConfig.w_max),
    "validation_cadence": (int, TrainConfig.validation_cadence),
    "oracle_mode": (_to_bool, False),
    "weight_decay": (float, TrainConfig.weight_decay),
    "beta1": (float, TrainConfig.beta1),
    "beta2": (float, TrainConfig.beta2),
    "adam_eps": (float, TrainConfig.adam_eps),
    "surrogate_epochs": (int, TrainConfig.surrogate_epochs),
    "ipw_propensities": (_to_float_tuple, None),
    # evaluation
    "ks": (_to_int_tuple, (1, 3, 5, 10)),
}


@dataclass
class RunConfig:
    """Resolved key/value map used by the command-line pipeline."""

    values: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        resolved = {k: default for k, (_, default) in KEYS.items()}
        resolved.update(self.values)
        self.values = resolved

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def set(self, key: str, raw: str) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        parser = KEYS[key][0]
        try:
            self.values[key] = parser(raw)
        except ValueError as err:
            raise ConfigError(f"bad value for {key}: {err}") from None

    def world_config(self) -> WorldConfig:
        v = self.values
        return WorldConfig(
            num_queries=v["queries"],
            num_val_queries=v["val_queries"],
            num_test_queries=v["test_queries"],
            rel_scale=v["rel_scale"],
            rel_ceiling=v["rel_ceiling"],
            query_shift_mean=v["query_shift_mean"],
            query_shift_sd=v["query_shift_sd"],
            saturated_frac=v["saturated_frac"],
            saturated_shift=v["saturated_shift"],
            nuisance_flip=v["nuisance_flip"],
            rel_hidden_noise=v["rel_hidden_noise"],
            feature_noise=v["feature_noise"],
            policy_strength=v["policy_strength"],
            policy_mix=v["policy_mix"],
            policy_noise=v["policy_noise"],
            bias=self.bias_config(),
        )

    def bias_config(self) -> BiasConfig:
        return BiasConfig(eta=self.values["eta"], saturation_rate=self.values["lambda_sat"])

    def train_config(self, seed: int | None = None) -> TrainConfig:
        v = self.values
        try:
            return TrainConfig(
                method=v["method"],
                lr=v["lr"],
                lr_g=v["lr_g"],
                lr_h=v["lr_h"],
                batch_size=v["batch_size"],
                epochs=v["epochs"],
                tau=v["tau"],
                lstm_hidden=v["lstm_hidden"],
                lstm_layers=v["lstm_layers"],
                w_max=v["wmax"],
                seed=v["seed"] if seed is None else seed,
                validation_cadence=v["validation_cadence"],
                oracle_mode=v["oracle_mode"],
                weight_decay=v["weight_decay"],
                beta1=v["beta1"],
                beta2=v["beta2"],
                adam_eps=v["adam_eps"],
                surrogate_epochs=v["surrogate_epochs"],
                ipw_propensities=v["ipw_propensities"],
            )
        except ValueError as err:
            raise ConfigError(str(err)) from None


def parse_config_file(path) -> RunConfig:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    config = RunConfig()
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config file: {err}") from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            try:
                config.set(key.strip(), value.strip())
            except ConfigError as err:
                raise ConfigError(f"{path}:{lineno}: {err}") from None
    return config


def write_snapshot(path, config: RunConfig) -> None:
    """Persist the resolved configuration, sorted, one key per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(config.values):
            value = config.values[key]
            if value is None:
                continue
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            elif isinstance(value, float):
                value = "%.17g" % value
            fh.write(f"{key} = {value}\n")
