"""Run configuration: a sectioned key = value text file, strictly validated
against a fixed schema. Unknown sections or keys are rejected; a resolved
copy with every default materialized is written next to run outputs so each
run is self-describing.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

import numpy as np

from .data import Dataset, kshot_sample, load_idx, synth_blobs
from .distill import DistillConfig
from .errors import ConfigError
from .network import ConvSpec, LinearSpec, PruneScheme
from .prox import Regularizer
from .tensor import conv_output_extent
from .trainer import TrainConfig

# key -> (type, default[, allowed]); types: int, float, str, bool, int_list, float_list
SCHEMA = {
    "data": {
        "source": ("str", "synth", ("synth", "idx")),
        "classes": ("int", 10),
        "per_class": ("int", 500),
        "holdout_per_class": ("int", 100),
        "channels": ("int", 1),
        "height": ("int", 16),
        "width": ("int", 16),
        "noise": ("float", 0.2),
        "blob_seed": ("int", 1234),
        "images": ("str", ""),
        "labels": ("str", ""),
        "holdout_images": ("str", ""),
        "holdout_labels": ("str", ""),
        "k": ("int", 5),
    },
    "model": {
        "conv_channels": ("int_list", (8, 12, 16, 16)),
        "kernels": ("int_list", (3, 4, 3, 4)),
        "strides": ("int_list", (1, 2, 1, 2)),
        "pads": ("int_list", (1, 1, 1, 1)),
    },
    "teacher": {
        "lr": ("float", 1e-3),
        "epochs": ("int", 30),
        "batch_size": ("int", 256),
        "seed": ("int", 0),
    },
    "distill": {
        "mode": ("str", "nc", ("nc", "cross", "soft")),
        "mu": ("float", 0.6),
        "alpha": ("float", 0.9),
        "beta": ("float", 0.3),
        "cross_layers": ("str", "all"),
        "iters": ("int", 3000),
        "ramp_iters": ("int", 1000),
        "lr": ("float", 1e-3),
        "teacher_model": ("str", ""),
        "finetune_epochs": ("int", 0),
        "finetune_lr": ("float", 1e-4),
        "gauss_noise": ("float", 0.0),
        "mixup": ("bool", False),
        "crop_pad": ("int", 0),
    },
    "prune": {
        "scheme": ("str", "unstructured", ("unstructured", "structured")),
        "sparsity": ("float", 0.0),
        "keep_fractions": ("float_list", ()),
        "skip_layers": ("int_list", ()),
        "regularizer": ("str", "l1", ("l1", "group21", "quant_project", "quant_penalty")),
        "bits": ("int", 2),
        "penalty_weight": ("float", 1.0),
    },
    "run": {
        "seeds": ("int_list", (0, 1, 2, 3, 4)),
    },
    "ablate": {
        "positions": ("int_list", ()),
    },
}


def _parse_value(section, key, kind, raw, allowed=None):
    raw = raw.strip()
    try:
        if kind == "int":
            value = int(raw)
        elif kind == "float":
            value = float(raw)
        elif kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            value = raw.lower() in ("true", "1", "yes")
        elif kind == "str":
            value = raw
        elif kind == "int_list":
            value = tuple(int(p) for p in raw.split(",") if p.strip() != "")
        elif kind == "float_list":
            value = tuple(float(p) for p in raw.split(",") if p.strip() != "")
        else:
            raise AssertionError(kind)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind}") from exc
    if allowed is not None and value not in allowed:
        raise ConfigError(f"[{section}] {key}: {value!r} not one of {allowed}")
    return value


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration; values are typed plain Python objects."""

    sections: dict

    def __getitem__(self, section):
        return self.sections[section]

    # -- dataset ----------------------------------------------------------
    def load_datasets(self) -> tuple[Dataset, Dataset]:
        """(train, holdout) pair per the [data] section."""
        d = self["data"]
        if d["source"] == "synth":
            total = d["per_class"] + d["holdout_per_class"]
            full = synth_blobs(
                d["classes"], total, d["channels"], d["height"], d["width"],
                seed=d["blob_seed"], noise=d["noise"],
            )
            train_idx, hold_idx = [], []
            for cls in range(d["classes"]):
                block = np.flatnonzero(full.labels == cls)
                train_idx.append(block[: d["per_class"]])
                hold_idx.append(block[d["per_class"]:])
            return (
                full.subset(np.concatenate(train_idx)),
                full.subset(np.concatenate(hold_idx)),
            )
        for key in ("images", "labels", "holdout_images", "holdout_labels"):
            if not d[key]:
                raise ConfigError(f"[data] source=idx requires {key}")
        train = load_idx(d["images"], d["labels"], d["classes"])
        holdout = load_idx(d["holdout_images"], d["holdout_labels"], d["classes"])
        return train, holdout

    def sample_kshot(self, train: Dataset, seed: int) -> Dataset:
        return kshot_sample(train, self["data"]["k"], seed)

    # -- model ------------------------------------------------------------
    def layer_specs(self):
        d, m = self["data"], self["model"]
        channels = m["conv_channels"]
        kernels = m["kernels"]
        strides = m["strides"]
        pads = m["pads"] if m["pads"] else tuple(k // 2 for k in kernels)
        if not len(channels) == len(kernels) == len(strides) == len(pads):
            raise ConfigError("[model] conv lists must share their length")
        specs = []
        c, h, w = d["channels"], d["height"], d["width"]
        for co, k, s, p in zip(channels, kernels, strides, pads):
            specs.append(ConvSpec(c, co, k, s, p))
            try:
                h = conv_output_extent(h, k, s, p)
                w = conv_output_extent(w, k, s, p)
            except Exception as exc:
                raise ConfigError(f"[model] invalid conv geometry: {exc}") from exc
            c = co
        specs.append(LinearSpec(c * h * w, d["classes"]))
        return specs

    # -- run pieces -------------------------------------------------------
    def train_config(self, seed=None) -> TrainConfig:
        t = self["teacher"]
        return TrainConfig(
            lr=t["lr"], epochs=t["epochs"], batch_size=t["batch_size"],
            seed=t["seed"] if seed is None else seed,
        )

    def regularizer(self) -> Regularizer:
        p = self["prune"]
        return Regularizer(
            kind=p["regularizer"],
            target_sparsity=p["sparsity"],
            bits=p["bits"],
            penalty_weight=p["penalty_weight"],
        )

    def prune_scheme(self) -> PruneScheme:
        p = self["prune"]
        return PruneScheme(
            kind=p["scheme"],
            sparsity=p["sparsity"],
            keep_fractions=p["keep_fractions"],
            skip_layers=frozenset(p["skip_layers"]),
        )

    def distill_config(self, seed: int, **overrides) -> DistillConfig:
        d = self["distill"]
        raw = d["cross_layers"].strip().lower()
        if raw in ("", "all"):
            cross = None
        else:
            try:
                cross = frozenset(int(p) for p in raw.split(","))
            except ValueError as exc:
                raise ConfigError(f"[distill] cross_layers: bad value {raw!r}") from exc
        kwargs = dict(
            mode=d["mode"], mu=d["mu"], alpha=d["alpha"], beta=d["beta"],
            cross_layers=cross, iters=d["iters"], ramp_iters=d["ramp_iters"],
            lr=d["lr"], regularizer=self.regularizer(), seed=seed,
            finetune_epochs=d["finetune_epochs"], finetune_lr=d["finetune_lr"],
            gauss_noise=d["gauss_noise"],
        )
        kwargs.update(overrides)
        return DistillConfig(**kwargs)

    def seeds(self, override=None) -> tuple[int, ...]:
        if override is not None:
            return (int(override),)
        return tuple(self["run"]["seeds"])

    # -- serialization ----------------------------------------------------
    def resolved_text(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                value = self.sections[section][key]
                if isinstance(value, tuple):
                    rendered = ", ".join(repr(v) if isinstance(v, float) else str(v)
                                         for v in value)
                elif isinstance(value, bool):
                    rendered = "true" if value else "false"
                elif isinstance(value, float):
                    rendered = repr(value)
                else:
                    rendered = str(value)
                lines.append(f"{key} = {rendered}")
            lines.append("")
        return "\n".join(lines)

    def write_resolved(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.resolved_text())


def load_config(path) -> RunConfig:
    """Parse and validate a config file; missing keys take schema defaults."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        read = parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not read:
        raise ConfigError(f"config file not found: {path}")
    sections = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
    for section, keys in SCHEMA.items():
        resolved = {}
        for key, spec in keys.items():
            kind, default = spec[0], spec[1]
            allowed = spec[2] if len(spec) > 2 else None
            if parser.has_option(section, key):
                resolved[key] = _parse_value(section, key, kind,
                                             parser.get(section, key), allowed)
            else:
                resolved[key] = default
        sections[section] = resolved
    cfg = RunConfig(sections)
    cfg.layer_specs()  # validate geometry before any compute
    if cfg["prune"]["scheme"] == "structured":
        fracs = cfg["prune"]["keep_fractions"]
        if len(fracs) != len(cfg["model"]["conv_channels"]):
            raise ConfigError(
                "[prune] keep_fractions must list one fraction per conv layer"
            )
    return cfg
