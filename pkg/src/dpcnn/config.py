"""Flat key=value experiment configuration.

Experiments resolve their settings from three layers with precedence
CLI flags > config file > built-in defaults. The resolved mapping is
written next to the run outputs as a snapshot; feeding the snapshot back
through --config reproduces the run exactly.
"""

from __future__ import annotations

from pathlib import Path

from .network import NAMED_ARCHITECTURES, NetworkSpec, parse_architecture
from .neuron import LifParams, NeuronParams
from .trainer import ConfigError, TrainConfig

# Table-driven per-dataset defaults: time steps, input geometry, recipe extras.
DATASET_DEFAULTS = {
    "mnist": {"steps": "4", "input_shape": "1x28x28"},
    "fashion": {"steps": "6", "input_shape": "1x28x28"},
    "cifar10": {
        "steps": "6",
        "input_shape": "3x32x32",
        "arch": "vgg9",
        "epochs": "200",
        "augment": "1",
        "norm_mean": "0.4914,0.4822,0.4465",
        "norm_std": "0.2470,0.2435,0.2616",
    },
    "synthetic": {"steps": "4", "input_shape": "1x28x28"},
}

BASE_DEFAULTS = {
    "dataset": "mnist",
    "data_dir": "data",
    "arch": "mnistnet",
    "steps": "4",
    "input_shape": "1x28x28",
    "coupling": "inter",
    "coupling_kernel": "3x3",
    "arith": "multiplicative",
    "neuron": "pcnn",
    "bn": "rftd",
    "alpha_f": "0.5",
    "alpha_l": "0.5",
    "alpha_e": "0.7",
    "v_e": "1.0",
    "lif_decay": "0.5",
    "lif_threshold": "1.0",
    "lr": "0.001",
    "lr_min": "0.0",
    "batch_size": "50",
    "epochs": "50",
    "seed": "0",
    "precision": "single",
    "augment": "0",
    "norm_mean": "",
    "norm_std": "",
}

_ARITH_ALIASES = {
    "mult": "multiplicative",
    "multiplicative": "multiplicative",
    "add": "additive",
    "additive": "additive",
}


def parse_flat_config(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment, blanks are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"config line {lineno}: expected key = value, got {line!r}")
        key, value = body.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_flat_config(cfg: dict[str, str]) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def read_config_file(path) -> dict[str, str]:
    return parse_flat_config(Path(path).read_text())


def resolve_config(
    cli: dict[str, str | None], file_cfg: dict[str, str], dataset: str | None
) -> dict[str, str]:
    """Merge CLI > file > dataset defaults > base defaults."""
    merged = dict(BASE_DEFAULTS)
    if dataset:
        merged.update(DATASET_DEFAULTS.get(dataset, {}))
        merged["dataset"] = dataset
    merged.update(file_cfg)
    for key, value in cli.items():
        if value is not None:
            merged[key] = str(value)
    if "arith" in merged:
        try:
            merged["arith"] = _ARITH_ALIASES[merged["arith"]]
        except KeyError:
            raise ConfigError(f"unknown coupling arithmetic: {merged['arith']!r}")
    return merged


def _parse_input_shape(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ConfigError(f"input_shape must be CxHxW, got {text!r}")
    c, h, w = (int(p) for p in parts)
    return c, h, w


def validate_switches(cfg: dict[str, str]) -> None:
    if cfg["neuron"] not in ("pcnn", "lif"):
        raise ConfigError(f"unknown neuron kind: {cfg['neuron']!r}")
    if cfg["neuron"] == "lif" and cfg["coupling"] != "none":
        raise ConfigError("lif neurons forbid coupling; pass --coupling none")
    if cfg["bn"] not in ("rftd", "td", "rfd", "none"):
        raise ConfigError(f"unknown bn mode: {cfg['bn']!r}")


def network_spec_from(cfg: dict[str, str]) -> NetworkSpec:
    validate_switches(cfg)
    layers = parse_architecture(
        cfg["arch"],
        coupling=cfg["coupling"],
        coupling_kernel=cfg["coupling_kernel"],
        coupling_arith=cfg["arith"],
        neuron_kind=cfg["neuron"],
    )
    return NetworkSpec(
        layers=layers,
        steps=int(cfg["steps"]),
        neuron=NeuronParams(
            alpha_f=float(cfg["alpha_f"]),
            alpha_l=float(cfg["alpha_l"]),
            alpha_e=float(cfg["alpha_e"]),
            v_e=float(cfg["v_e"]),
        ),
        lif=LifParams(
            decay=float(cfg["lif_decay"]), threshold=float(cfg["lif_threshold"])
        ),
        bn_mode=cfg["bn"],
        input_shape=_parse_input_shape(cfg["input_shape"]),
    )


def train_config_from(cfg: dict[str, str]) -> TrainConfig:
    return TrainConfig(
        learning_rate=float(cfg["lr"]),
        batch_size=int(cfg["batch_size"]),
        epochs=int(cfg["epochs"]),
        steps=int(cfg["steps"]),
        lr_min=float(cfg["lr_min"]),
        seed=int(cfg["seed"]),
        precision=cfg["precision"],
    )


NETWORK_KEYS = (
    "arch",
    "steps",
    "input_shape",
    "coupling",
    "coupling_kernel",
    "arith",
    "neuron",
    "bn",
    "alpha_f",
    "alpha_l",
    "alpha_e",
    "v_e",
    "lif_decay",
    "lif_threshold",
    "precision",
)


def network_keys_of(cfg: dict[str, str]) -> dict[str, str]:
    return {k: cfg[k] for k in NETWORK_KEYS if k in cfg}
