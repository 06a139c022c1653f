"""Run configuration: defaults, config-file parsing, overrides, hashing.

Config files are plain key-value text with bracketed dotted sections::

    [train]
    epochs = 10
    tau_prune = 0.3

Resolution order is defaults < file < ``--set section.key=value`` overrides.
Unknown keys are rejected. Every run writes the fully-resolved config and a
hash of it next to its outputs.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path

from .encoder import PretrainConfig
from .model import ModelConfig
from .pipeline import TrainConfig


class ConfigError(Exception):
    pass


DEFAULTS = {
    "run.seed": 0,
    "data.history_days": 30,
    "data.horizon": 7,
    "data.gap_limit_days": 10,
    "data.train_frac": 0.7,
    "data.val_frac": 0.15,
    "data.stride": 1,
    "graph.k_neighbors": 2,
    "graph.edge_direction": "as_paper",
    "model.n_features": 3,
    "model.dim": 128,
    "model.out_dim": 64,
    "model.gat_heads": 4,
    "model.gat_layers": 2,
    "model.leaky_slope": 0.2,
    "model.tf_heads": 4,
    "model.tf_blocks": 2,
    "model.ff_dim": 256,
    "model.dropout": 0.2,
    "train.epochs": 10,
    "train.batch_size": 4,
    "train.lr": 1e-3,
    "train.lr_decay": 0.5,
    "train.prune_every": 4,
    "train.tau_prune": 0.3,
    "train.no_graph": False,
    "train.static_graph": False,
    "train.no_pretrain": False,
    "train.per_day_prune": False,
    "train.init_from": "",
    "pretrain.epochs": 5,
    "pretrain.batch_per_reservoir": 4,
    "pretrain.tau_c": 0.1,
    "pretrain.sigma_aug": 0.05,
    "pretrain.w_c": 4.0,
    "pretrain.w_s": 1.0,
    "pretrain.momentum": 0.99,
    "pretrain.lr": 1e-3,
    "pretrain.lr_decay": 0.5,
    "generate.n_reservoirs": 8,
    "generate.n_days": 400,
    "generate.lag_days": 1,
    "generate.attenuation": 0.6,
    "generate.local_share": 0.4,
    "ablate.seeds": "0,1,2",
}


def _coerce(key, raw, template):
    if isinstance(template, bool):
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"'{key}': cannot parse '{raw}' as a boolean")
    if isinstance(template, int) and not isinstance(template, bool):
        try:
            return int(str(raw).strip())
        except ValueError as exc:
            raise ConfigError(f"'{key}': cannot parse '{raw}' as an integer") from exc
    if isinstance(template, float):
        try:
            return float(str(raw).strip())
        except ValueError as exc:
            raise ConfigError(f"'{key}': cannot parse '{raw}' as a number") from exc
    return str(raw).strip()


def load_config_file(path):
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file: {path}")
    out = {}
    for section in parser.sections():
        for key, value in parser[section].items():
            out[f"{section}.{key}"] = value
    return out


def resolve(config_path=None, overrides=()):
    """Merge defaults, optional file, and key=value overrides into one dict."""
    resolved = dict(DEFAULTS)
    layers = []
    if config_path:
        layers.append(load_config_file(config_path))
    file_and_cli = dict(layers[0]) if layers else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' must look like section.key=value")
        key, value = item.split("=", 1)
        file_and_cli[key.strip()] = value
    for key, raw in file_and_cli.items():
        if key not in resolved:
            raise ConfigError(f"unknown configuration key '{key}'")
        resolved[key] = _coerce(key, raw, DEFAULTS[key])
    return resolved


def config_hash(resolved):
    blob = json.dumps(resolved, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def write_resolved(resolved, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_config.resolved"
    lines = [f"# config_hash = {config_hash(resolved)}"]
    section = None
    for key in sorted(resolved):
        sec, name = key.split(".", 1)
        if sec != section:
            lines.append(f"[{sec}]")
            section = sec
        lines.append(f"{name} = {resolved[key]}")
    path.write_text("\n".join(lines) + "\n")
    return path


# builders for the typed configs the pipeline consumes


def model_config(resolved) -> ModelConfig:
    return ModelConfig(
        n_features=resolved["model.n_features"],
        dim=resolved["model.dim"],
        out_dim=resolved["model.out_dim"],
        gat_heads=resolved["model.gat_heads"],
        gat_layers=resolved["model.gat_layers"],
        leaky_slope=resolved["model.leaky_slope"],
        tf_heads=resolved["model.tf_heads"],
        tf_blocks=resolved["model.tf_blocks"],
        ff_dim=resolved["model.ff_dim"],
        history_days=resolved["data.history_days"],
        horizon=resolved["data.horizon"],
        dropout=resolved["model.dropout"],
        edge_direction=resolved["graph.edge_direction"],
    )


def train_config(resolved) -> TrainConfig:
    return TrainConfig(
        epochs=resolved["train.epochs"],
        batch_size=resolved["train.batch_size"],
        lr=resolved["train.lr"],
        lr_decay=resolved["train.lr_decay"],
        prune_every=resolved["train.prune_every"],
        tau_prune=resolved["train.tau_prune"],
        k_neighbors=resolved["graph.k_neighbors"],
        seed=resolved["run.seed"],
        no_graph=resolved["train.no_graph"],
        static_graph=resolved["train.static_graph"],
        no_pretrain=resolved["train.no_pretrain"],
        per_day_prune=resolved["train.per_day_prune"],
        init_from=resolved["train.init_from"],
    )


def pretrain_config(resolved) -> PretrainConfig:
    return PretrainConfig(
        epochs=resolved["pretrain.epochs"],
        batch_per_reservoir=resolved["pretrain.batch_per_reservoir"],
        tau_c=resolved["pretrain.tau_c"],
        sigma_aug=resolved["pretrain.sigma_aug"],
        w_c=resolved["pretrain.w_c"],
        w_s=resolved["pretrain.w_s"],
        momentum=resolved["pretrain.momentum"],
        lr=resolved["pretrain.lr"],
        lr_decay=resolved["pretrain.lr_decay"],
        seed=resolved["run.seed"],
    )


def splits(resolved):
    tr, va = resolved["data.train_frac"], resolved["data.val_frac"]
    te = 1.0 - tr - va
    if tr <= 0 or va < 0 or te <= 0:
        raise ConfigError("split fractions must leave room for train and test")
    return (tr, va, te)
