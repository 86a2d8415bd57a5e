"""Pipeline configuration: flat key=value sections, strict unknown-key
rejection, every field defaulted. The config hash covers the semantically
meaningful fields only (output directory and thread count excluded)."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .hashing import HashConfig
from .ssae import TrainConfig


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"ratios must be three comma-separated values: {text!r}")
    vals = tuple(float(p) for p in parts)
    if abs(sum(vals) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1: {text!r}")
    return vals


def _parse_mags(text: str) -> tuple[int, ...]:
    vals = tuple(int(p.strip()) for p in text.split(","))
    for v in vals:
        if v not in (40, 100, 200, 400):
            raise ConfigError(f"bad magnification {v}")
    return vals


def _parse_optional_int(text: str):
    return None if text.strip().lower() in ("auto", "none") else int(text)


def _parse_optional_float(text: str):
    return None if text.strip().lower() in ("none", "off") else float(text)


# section -> key -> (parser, default-as-string)
_SCHEMA: dict[str, dict[str, tuple]] = {
    "dataset": {
        "root": (str, "data"),
        "patch_size": (int, "224"),
        "stride": (int, "112"),
        "seed": (int, "7"),
        "ratios": (_parse_ratios, "0.6,0.2,0.2"),
        "split_by": (str, "image"),
        "min_stratum": (int, "5"),
    },
    "hash": {
        "levels": (int, "3"),
        "out_len": (int, "49"),
        "block": (int, "16"),
        "overlap": (int, "8"),
        "k": (int, "4"),
        "max_points": (int, "16"),
        "sigma": (float, "1.5"),
        "kappa": (float, "0.04"),
        "threshold": (float, "1e-4"),
        "margin": (int, "3"),
    },
    "manifold": {
        "landmarks": (int, "300"),
        "k": (int, "12"),
        "dim": (int, "20"),
        "k_infer": (int, "3"),
        "input_size": (int, "32"),
    },
    "fusion": {
        "rank": (_parse_optional_int, "auto"),
    },
    "train": {
        "hidden1": (int, "500"),
        "hidden2": (int, "300"),
        "max_epochs": (int, "500"),
        "lr": (float, "1e-4"),
        "momentum": (float, "0.6"),
        "lr_drop_period": (int, "5"),
        "lr_drop_factor": (float, "0.9"),
        "l2_pretrain": (float, "0.001"),
        "l2_finetune": (float, "1e-4"),
        "sparsity_weight": (float, "4"),
        "sparsity_target": (float, "0.15"),
        "batch_size": (int, "32"),
        "early_stop_patience": (int, "20"),
        "gradient_decay": (_parse_optional_float, "none"),
    },
    "synth": {
        "images_per_class": (int, "25"),
        "magnifications": (_parse_mags, "40,100,200,400"),
    },
    "run": {
        "out_dir": (str, "out"),
        "threads": (int, "1"),
        "magnification": (str, "all"),
        "task": (str, "all"),
    },
}

# [run] plumbing that must not perturb the config hash.
_HASH_EXCLUDE = {("run", "out_dir"), ("run", "threads")}


@dataclass
class PipelineConfig:
    values: dict[tuple[str, str], object] = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.values[(section, key)]

    def set(self, section: str, key: str, raw: str) -> None:
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        parser = _SCHEMA[section][key][0]
        try:
            self.values[(section, key)] = parser(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc

    # Typed accessors used across the pipeline.
    @property
    def root(self) -> Path:
        return Path(self.get("dataset", "root"))

    @property
    def out_dir(self) -> Path:
        return Path(self.get("run", "out_dir"))

    @property
    def seed(self) -> int:
        return self.get("dataset", "seed")

    @property
    def threads(self) -> int:
        return self.get("run", "threads")

    @property
    def patch_size(self) -> int:
        return self.get("dataset", "patch_size")

    @property
    def stride(self) -> int:
        return self.get("dataset", "stride")

    @property
    def ratios(self) -> tuple[float, float, float]:
        return self.get("dataset", "ratios")

    def hash_config(self) -> HashConfig:
        g = lambda k: self.get("hash", k)
        return HashConfig(
            levels=g("levels"), out_len=g("out_len"), block=g("block"),
            overlap=g("overlap"), k=g("k"), max_points=g("max_points"),
            sigma=g("sigma"), kappa=g("kappa"), threshold=g("threshold"),
            margin=g("margin"),
        )

    def train_config(self) -> TrainConfig:
        g = lambda k: self.get("train", k)
        return TrainConfig(
            max_epochs=g("max_epochs"), lr=g("lr"), momentum=g("momentum"),
            lr_drop_period=g("lr_drop_period"),
            lr_drop_factor=g("lr_drop_factor"),
            l2_pretrain=g("l2_pretrain"), l2_finetune=g("l2_finetune"),
            sparsity_weight=g("sparsity_weight"),
            sparsity_target=g("sparsity_target"), batch_size=g("batch_size"),
            seed=self.seed, early_stop_patience=g("early_stop_patience"),
            gradient_decay=g("gradient_decay"),
        )

    def magnifications(self) -> tuple[int, ...]:
        sel = self.get("run", "magnification")
        return (40, 100, 200, 400) if sel == "all" else (int(sel),)

    def canonical(self) -> str:
        lines = []
        for (section, key) in sorted(self.values):
            if (section, key) in _HASH_EXCLUDE:
                continue
            lines.append(f"{section}.{key}={self.values[(section, key)]!r}")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()


def default_config() -> PipelineConfig:
    cfg = PipelineConfig()
    for section, keys in _SCHEMA.items():
        for key, (_parser, default) in keys.items():
            cfg.set(section, key, default)
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    """Defaults, overlaid with the config file when given."""
    cfg = default_config()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            cfg.set(section, key, raw)
    return cfg
