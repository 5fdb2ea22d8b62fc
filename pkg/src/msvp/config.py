"""Flat ``key = value`` experiment configuration with dotted keys."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .backbones import FAMILIES as BACKBONES, BackboneSpec, ViTSettings
from .checkpoint import config_hash
from .datasets import FAMILIES as DATASETS
from .errors import ConfigError
from .prompt import FUSIONS, SCALE_ORDER, PromptScales
from .trainer import DEFAULT_EPOCHS, TrainConfig


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _auto_int(text):
    return None if str(text).strip() in ("", "auto") else int(text)


def _scales(text):
    parts = [p.strip() for p in str(text).replace("+", ",").split(",") if p.strip()]
    for p in parts:
        if p not in SCALE_ORDER:
            raise ValueError(f"unknown scale {p!r} (use g, m, l)")
    return tuple(s for s in SCALE_ORDER if s in parts)


# key -> (parser, default); None default means "auto"
SCHEMA = {
    "dataset": (str, "mnist"),
    "backbone": (str, "cnn4"),
    "backbone.in_channels": (_auto_int, None),
    "data_dir": (str, ""),
    "output_dir": (str, "runs/default"),
    "stats_dir": (str, ""),
    "subset": (int, 0),
    "data.strict": (_bool, True),
    "msvp.enabled": (_bool, False),
    "msvp.scales": (_scales, SCALE_ORDER),
    "msvp.s_mid": (int, 4),
    "msvp.s_local": (int, 8),
    "msvp.fusion": (str, "addition"),
    "msvp.drift_weight": (float, 0.0),
    "msvp.l2_weight": (float, 0.0),
    "msvp.prompt_lr_scale": (float, 1.0),
    "train.batch_size": (int, 128),
    "train.epochs": (_auto_int, None),
    "train.lr": (float, 1e-3),
    "train.weight_decay": (float, 1e-4),
    "train.seed": (int, 42),
    "train.eta_min": (float, 0.0),
    "train.decoupled_wd": (_bool, False),
    "train.threads": (int, 1),
    "train.augment": (_bool, True),
    "vit.embed_dim": (int, 192),
    "vit.depth": (int, 12),
    "vit.heads": (int, 3),
    "vit.patch": (_auto_int, None),
    "vit.mlp_ratio": (int, 4),
}

PATH_KEYS = ("data_dir", "output_dir", "stats_dir")


def parse_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def format_value(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(v)
    return str(v)


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_flat(cls, raw: dict) -> "ExperimentConfig":
        problems, values = [], {}
        for key in raw:
            if key not in SCHEMA:
                problems.append(f"unknown key {key!r}")
        for key, (parser, default) in SCHEMA.items():
            if key in raw:
                try:
                    values[key] = parser(raw[key]) if isinstance(raw[key], str) else raw[key]
                except (TypeError, ValueError) as exc:
                    problems.append(f"{key}: {exc}")
                    values[key] = default
            else:
                values[key] = default
        if not values["data_dir"]:
            values["data_dir"] = os.environ.get("MSVP_DATA_DIR", "data")
        cfg = cls(values)
        problems += cfg.check()
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "ExperimentConfig":
        raw = parse_text(Path(path).read_text()) if path else {}
        raw.update(overrides or {})
        return cls.from_flat(raw)

    def with_overrides(self, **kv) -> "ExperimentConfig":
        flat = {k: v for k, v in self.values.items()}
        flat.update(kv)
        return ExperimentConfig.from_flat({k: format_value(v) if not isinstance(v, str) else v
                                           for k, v in flat.items()})

    def check(self) -> list:
        v, problems = self.values, []
        ds, bb = v["dataset"], v["backbone"]
        if ds not in DATASETS:
            problems.append(f"dataset must be one of {tuple(DATASETS)}, got {ds!r}")
        if bb not in BACKBONES:
            problems.append(f"backbone must be one of {BACKBONES}, got {bb!r}")
        if ds in DATASETS:
            chans = DATASETS[ds]["channels"]
            if v["backbone.in_channels"] is not None and v["backbone.in_channels"] != chans:
                problems.append(f"backbone.in_channels={v['backbone.in_channels']} but {ds} has {chans} channel(s)")
            if bb in BACKBONES:
                problems += self.backbone_spec().validate()
            res = DATASETS[ds]["resolution"]
            if v["msvp.enabled"]:
                if not v["msvp.scales"]:
                    problems.append("msvp.scales must name at least one of g, m, l")
                if not 1 <= v["msvp.s_mid"] <= v["msvp.s_local"]:
                    problems.append(f"msvp scales need 1 <= s_mid <= s_local, got {v['msvp.s_mid']}, {v['msvp.s_local']}")
                if v["msvp.s_local"] > res:
                    problems.append(f"msvp.s_local={v['msvp.s_local']} exceeds resolution {res}")
        if v["msvp.fusion"] not in FUSIONS:
            problems.append(f"msvp.fusion must be one of {FUSIONS}, got {v['msvp.fusion']!r}")
        for key in ("msvp.drift_weight", "msvp.l2_weight", "msvp.prompt_lr_scale", "train.weight_decay", "train.eta_min"):
            if v[key] < 0:
                problems.append(f"{key} must be >= 0")
        if v["train.lr"] <= 0:
            problems.append("train.lr must be > 0")
        if v["train.epochs"] is not None and v["train.epochs"] < 1:
            problems.append("train.epochs must be >= 1")
        if v["train.batch_size"] < 1:
            problems.append("train.batch_size must be >= 1")
        if v["subset"] < 0:
            problems.append("subset must be >= 0")
        if v["train.threads"] < 1:
            problems.append("train.threads must be >= 1")
        return problems

    # -- derived objects ----------------------------------------------------

    @property
    def channels(self) -> int:
        return DATASETS[self.values["dataset"]]["channels"]

    @property
    def resolution(self) -> int:
        return DATASETS[self.values["dataset"]]["resolution"]

    @property
    def epochs(self) -> int:
        e = self.values["train.epochs"]
        return DEFAULT_EPOCHS[self.values["dataset"]] if e is None else e

    def backbone_spec(self) -> BackboneSpec:
        v = self.values
        vit = ViTSettings(v["vit.embed_dim"], v["vit.depth"], v["vit.heads"], v["vit.patch"], v["vit.mlp_ratio"])
        return BackboneSpec(v["backbone"], self.channels, self.resolution, 10, vit)

    def prompt_scales(self) -> PromptScales:
        v = self.values
        return PromptScales(1, v["msvp.s_mid"], v["msvp.s_local"], v["msvp.scales"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            batch_size=v["train.batch_size"], epochs=self.epochs, lr=v["train.lr"],
            weight_decay=v["train.weight_decay"], seed=v["train.seed"], eta_min=v["train.eta_min"],
            decoupled_wd=v["train.decoupled_wd"], prompt_lr_scale=v["msvp.prompt_lr_scale"],
            drift_weight=v["msvp.drift_weight"] if v["msvp.enabled"] else 0.0,
            l2_weight=v["msvp.l2_weight"] if v["msvp.enabled"] else 0.0,
            threads=v["train.threads"])

    def to_flat(self, include_paths: bool = True) -> dict:
        return {k: format_value(v) for k, v in sorted(self.values.items())
                if include_paths or k not in PATH_KEYS}

    def to_text(self, include_paths: bool = True) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_flat(include_paths).items())

    def hash(self) -> str:
        return config_hash(self.to_text(include_paths=False))

    def run_label(self) -> str:
        v = self.values
        bits = []
        if v["subset"]:
            bits.append(f"subset={v['subset']}")
        if v["train.epochs"] is not None and v["train.epochs"] != DEFAULT_EPOCHS.get(v["dataset"]):
            bits.append(f"epochs={v['train.epochs']}")
        return ", ".join(bits) if bits else "full protocol"
