"""Experiment config files: INI-style key=value text with sections
[model], [data], [federation], [pruning], [crypto].  Every key has a
default; [pruning] holds ``rho`` plus ``layer_id = keep_fraction`` entries.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from .federation import ExperimentConfig
from .pruning import SparsityConfig


class ConfigError(ValueError):
    pass


_INT_KEYS = {"num_clients", "clients_per_round", "local_epochs", "batch_size",
             "warmup_rounds", "pruning_rounds", "admm_stage_rounds", "seed",
             "shards_per_client", "shard_size", "eval_examples"}
_FLOAT_KEYS = {"lr", "momentum", "bandwidth_mbps"}
_STR_KEYS = {"mode", "partition"}


def _convert(key: str, raw: str):
    raw = raw.strip()
    if raw == "":
        return None
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def _auto(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    """Parse a config file; keyword overrides (CLI flags) win over the file."""
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    known = {"model", "data", "federation", "pruning", "crypto"}
    stray = set(cp.sections()) - known
    if stray:
        raise ConfigError(f"unknown config sections: {sorted(stray)}")

    kwargs: dict = {}
    if cp.has_section("model"):
        for key, raw in cp.items("model"):
            if key == "arch":
                kwargs["arch"] = raw.strip()
            elif key == "dims":
                kwargs.setdefault("arch_params", {})["dims"] = \
                    tuple(int(v) for v in raw.split(","))
            else:
                kwargs.setdefault("arch_params", {})[key] = _auto(raw)
    if cp.has_section("data"):
        for key, raw in cp.items("data"):
            if key in ("dataset", "data_dir"):
                kwargs[key] = raw.strip()
            elif key in ("partition", "shards_per_client", "shard_size"):
                kwargs[key] = _convert(key, raw)
            else:
                kwargs.setdefault("dataset_params", {})[key] = _auto(raw)
    if cp.has_section("federation"):
        for key, raw in cp.items("federation"):
            if key not in _INT_KEYS | _FLOAT_KEYS | _STR_KEYS:
                raise ConfigError(f"unknown [federation] key: {key}")
            val = _convert(key, raw)
            if val is not None:
                kwargs[key] = val
    rho = 1e-3
    keep: dict[str, float] = {}
    if cp.has_section("pruning"):
        for key, raw in cp.items("pruning"):
            if key == "rho":
                rho = float(raw)
            else:
                try:
                    keep[key] = float(raw)
                except ValueError as exc:
                    raise ConfigError(f"bad keep fraction for {key}: {raw!r}") from exc
    if keep:
        kwargs["sparsity"] = SparsityConfig(keep=keep, rho=rho)
    if cp.has_section("crypto"):
        for key, raw in cp.items("crypto"):
            if key != "scratch_limit_mb":
                raise ConfigError(f"unknown [crypto] key: {key}")
            # consumed by the CLI when building the enclave context
            kwargs["_scratch_limit_mb"] = float(raw)
    scratch = kwargs.pop("_scratch_limit_mb", None)

    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if scratch is not None:
        object.__setattr__(cfg, "scratch_limit_mb", scratch)
    return cfg


def validate_config(cfg: ExperimentConfig) -> list[str]:
    """Static checks without running: arch builds, keep fractions name real
    layers, budgets are feasible.  Returns human-readable notes."""
    notes = []
    arch = cfg.build_arch()
    notes.append(f"arch {cfg.arch}: {arch.param_count()} parameters")
    if cfg.sparsity is not None:
        layer_ids = [l.name for l in arch.param_layers()]
        missing = set(cfg.sparsity.keep) - set(layer_ids)
        if missing:
            raise ConfigError(f"keep fractions name unknown layers: {sorted(missing)}")
        notes.append(f"constrained layers: {sorted(cfg.sparsity.keep)}")
    notes.append(f"{cfg.total_rounds()} rounds "
                 f"({cfg.warmup_rounds} warmup + {cfg.pruning_rounds} pruning), "
                 f"mode {cfg.mode}")
    return notes
