"""Experiment configuration: INI text checked against a schema, plus a stable digest.

Sections and keys (all optional; defaults shown by ``dpcn gen-config``-style
:func:`default_text`)::

    [data]   dataset, classes, train_per_class, test_per_class, image_size,
             noise, clutter, data_seed, path, test_path, normalize
    [model]  backbone, width_multiplier, depth_blocks, channels, disc_channels,
             disc_sigmoid, tap_point
    [dpcn]   lambda, n_subnets, fusion, targets, phase_epochs
    [optim]  batch_size, lr, disc_lr, extra_lr, momentum, weight_decay,
             lr_milestones, lr_decay, augment, crop_pad, flip
    [run]    seed, subnet_seeds, seeds, baselines, probe_samples, gradcam_samples
"""

from __future__ import annotations

import configparser
import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

from .engine import DpcnConfig


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: Optional[int] = None,
                 section: Optional[str] = None, key: Optional[str] = None):
        where = source if line is None else f"{source}:{line}"
        fieldname = f"[{section}] {key}" if key else (f"[{section}]" if section else "")
        super().__init__(f"{where}: {fieldname}{': ' if fieldname else ''}{message}")
        self.line, self.section, self.key = line, section, key


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _list(kind):
    def parse(text: str):
        parts = [p for p in re.split(r"[,\s]+", text.strip()) if p]
        return tuple(kind(p) for p in parts)
    return parse


def _optional(kind):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none", "auto") else kind(text)
    return parse


def _choice(*options):
    def parse(text: str):
        value = text.strip().lower()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return value
    return parse


# section -> key -> (parser, default)
SCHEMA: Dict[str, Dict[str, Tuple[Any, Any]]] = {
    "data": {
        "dataset": (_choice("synthetic", "cifar10", "cifar100"), "synthetic"),
        "classes": (int, 4),
        "train_per_class": (int, 2000),
        "test_per_class": (int, 500),
        "image_size": (int, 32),
        "noise": (float, 0.12),
        "clutter": (int, 4),
        "data_seed": (int, 0),
        "path": (str, ""),
        "test_path": (str, ""),
        "normalize": (_bool, True),
    },
    "model": {
        "backbone": (_choice("nin", "resnet"), "nin"),
        "width_multiplier": (float, 1.0),
        "depth_blocks": (int, 3),
        "channels": (_optional(_list(int)), None),
        "disc_channels": (_list(int), (64, 128, 256)),
        "disc_sigmoid": (_optional(_bool), None),
        "tap_point": (str, "block3"),
    },
    "dpcn": {
        "lambda": (float, 1.0),
        "n_subnets": (int, 2),
        "fusion": (_choice("concat", "sum"), "concat"),
        "targets": (_optional(_list(float)), None),
        "phase_epochs": (_list(int), (5, 20, 10)),
    },
    "optim": {
        "batch_size": (int, 128),
        "lr": (float, 0.1),
        "disc_lr": (_optional(float), None),
        "extra_lr": (_optional(float), None),
        "momentum": (float, 0.9),
        "weight_decay": (float, 5e-4),
        "lr_milestones": (_list(float), (0.5, 0.75)),
        "lr_decay": (float, 0.1),
        "augment": (_bool, False),
        "crop_pad": (int, 4),
        "flip": (_bool, False),
    },
    "run": {
        "seed": (int, 0),
        "subnet_seeds": (_optional(_list(int)), None),
        "seeds": (_list(int), (0, 1, 2)),
        "baselines": (_list(str), ("single", "ensemble", "wide", "dpcn")),
        "probe_samples": (int, 2000),
        "gradcam_samples": (int, 64),
    },
}

BASELINES = ("single", "ensemble", "wide", "dpcn")


@dataclass
class ExperimentConfig:
    dpcn: DpcnConfig
    data: Dict[str, Any]
    run: Dict[str, Any]
    values: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return config_digest(self.values)

    def override(self, section: str, **updates) -> "ExperimentConfig":
        """A copy with keys of one section replaced (keys must exist in the schema)."""
        values = {s: dict(v) for s, v in self.values.items()}
        for key, value in updates.items():
            if key not in SCHEMA[section]:
                raise ConfigError("unknown key", "<override>", None, section, key)
            values[section][key] = value
        return _build(values, "<override>", {})

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.override("run", seed=seed)


def _canonical(values: Dict[str, Dict[str, Any]]) -> str:
    return json.dumps(values, sort_keys=True, separators=(",", ":"), default=list)


def config_digest(values: Dict[str, Dict[str, Any]]) -> str:
    """SHA-256 of the canonical JSON of the fully resolved values."""
    return hashlib.sha256(_canonical(values).encode("utf-8")).hexdigest()


def _line_index(text: str) -> Dict[Tuple[Optional[str], Optional[str]], int]:
    index, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            index.setdefault((section, None), no)
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
        index.setdefault((section, key), no)
    return index


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    lines = _line_index(text)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside any section", source, exc.lineno) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError("duplicate key", source, exc.lineno, exc.section, exc.option) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError("duplicate section", source, exc.lineno, exc.section) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigError("unparseable line", source, lineno) from None

    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in parser.sections():
        sec = section.lower()
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section (expected one of {', '.join(SCHEMA)})", source,
                              lines.get((sec, None)), sec)
        for key, raw in parser.items(section):
            if key not in SCHEMA[sec]:
                raise ConfigError("unknown key", source, lines.get((sec, key)), sec, key)
            kind, _ = SCHEMA[sec][key]
            try:
                values[sec][key] = kind(raw)
            except ValueError as exc:
                raise ConfigError(str(exc), source, lines.get((sec, key)), sec, key) from None
    return _build(values, source, lines)


def _build(values, source, lines) -> ExperimentConfig:
    d, m, p, o, r = (values[s] for s in ("data", "model", "dpcn", "optim", "run"))
    unknown = [b for b in r["baselines"] if b not in BASELINES]
    if unknown:
        raise ConfigError(f"unknown baseline {unknown[0]!r}", source, lines.get(("run", "baselines")),
                          "run", "baselines")
    try:
        cfg = DpcnConfig(lam=p["lambda"], n_subnets=p["n_subnets"], fusion=p["fusion"],
                         tap_point=m["tap_point"], phase_epochs=p["phase_epochs"],
                         targets=p["targets"], backbone=m["backbone"],
                         width_multiplier=m["width_multiplier"], depth_blocks=m["depth_blocks"],
                         channels=m["channels"], disc_channels=m["disc_channels"],
                         disc_sigmoid=m["disc_sigmoid"], batch_size=o["batch_size"], lr=o["lr"],
                         disc_lr=o["disc_lr"], extra_lr=o["extra_lr"], momentum=o["momentum"],
                         weight_decay=o["weight_decay"], lr_milestones=o["lr_milestones"],
                         lr_decay=o["lr_decay"], augment=o["augment"], crop_pad=o["crop_pad"],
                         flip=o["flip"], seed=r["seed"], seeds=r["subnet_seeds"])
    except ValueError as exc:
        key = _guess_key(str(exc))
        sec = next((s for s in SCHEMA if key in SCHEMA[s]), None)
        raise ConfigError(str(exc), source, lines.get((sec, key)), sec, key) from None
    return ExperimentConfig(cfg, dict(d), dict(r), values)


_ERROR_FIELDS = (("phase_epochs", "phase_epochs"), ("lambda", "lambda"),
                 ("at least two subnetworks", "n_subnets"), ("fusion", "fusion"),
                 ("target", "targets"), ("seed", "subnet_seeds"), ("momentum", "momentum"))


def _guess_key(message: str) -> Optional[str]:
    return next((key for needle, key in _ERROR_FIELDS if needle in message), None)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def default_text(overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> str:
    """Render the full schema with defaults (and optional overrides) as config text."""
    overrides = overrides or {}
    out = []
    for section, keys in SCHEMA.items():
        out.append(f"[{section}]")
        for key, (_, default) in keys.items():
            out.append(f"{key} = {_format(overrides.get(section, {}).get(key, default))}")
        out.append("")
    return "\n".join(out)
