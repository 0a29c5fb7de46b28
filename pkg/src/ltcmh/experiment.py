"""Experiment configuration and end-to-end pipeline helpers.

Config files are flat ``key = value`` text. Every key has a default below;
unknown keys are rejected so typos fail loudly. The same dict drives
synthesis, training, encoding, and evaluation, and the effective (merged)
config is persisted next to outputs for provenance.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import hash_learn, meta_embed, retrieval
from .dataset import (LongTailSpec, MultiModalDataset, split_query_retrieval,
                      trim_labels)
from .errors import ConfigError
from .hash_learn import HashModel, TrainConfig
from .retrieval import BinaryCodeMatrix

DEFAULTS = {
    # dataset synthesis
    "groups": "4x200,10x20,10x5",
    "d_x": 32,
    "d_y": 24,
    "extra_per_class": 30,
    "mixed_fraction": 0.2,
    "latent_dim": 16,
    "noise_std": 0.5,
    # label trimming and splits
    "min_keep": 2,
    "max_keep": 3,
    "queries_per_class": 10,
    "retrieval_includes_queries": False,
    # training
    "code_length": 16,
    "alpha": 1.0,
    "beta": 1.0,
    "learning_rate": 0.03,
    "momentum": 0.0,
    "epochs": 60,
    "batch_columns": 64,
    "eta_mode": "intent_ratio",
    "eta_max": 2.0,
    "head_threshold": 100,
    "hidden_dim": 64,
    "clip_norm": 1.0,
    "bank_momentum": 0.9,
    "warmup_epochs": 40,
    "attention_init_scale": 3.0,
    "normalize_weights": True,
    # ablations
    "no_memory": False,
    "learned_eta": False,
    # bookkeeping
    "seed": 0,
}


def _parse_value(key, raw, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean for {key!r}, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config(path=None, overrides=()):
    """Merged config: defaults, then file, then key=value overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            cfg[key] = _parse_value(key, raw, DEFAULTS[key])
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _parse_value(key, raw, DEFAULTS[key])
    return cfg


def save_config(cfg, path):
    lines = [f"{k} = {v}" for k, v in sorted(cfg.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_groups(text):
    """'4x2000,10x200,10x50' -> [(4, 2000), (10, 200), (10, 50)]."""
    groups = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        k, _, c = part.partition("x")
        try:
            groups.append((int(k), int(c)))
        except ValueError:
            raise ConfigError(f"bad group {part!r}, expected COUNTxSIZE")
    if not groups:
        raise ConfigError("groups must be non-empty")
    return groups


def longtail_spec(cfg) -> LongTailSpec:
    return LongTailSpec(
        groups=parse_groups(cfg["groups"]),
        d_x=cfg["d_x"], d_y=cfg["d_y"],
        extra_per_class=cfg["extra_per_class"],
        mixed_fraction=cfg["mixed_fraction"],
        latent_dim=cfg["latent_dim"],
        noise_std=cfg["noise_std"],
    )


def train_config(cfg) -> TrainConfig:
    eta_mode = "learned" if cfg["learned_eta"] else cfg["eta_mode"]
    return TrainConfig(
        code_length=cfg["code_length"], alpha=cfg["alpha"], beta=cfg["beta"],
        learning_rate=cfg["learning_rate"], momentum=cfg["momentum"],
        epochs=cfg["epochs"], batch_columns=cfg["batch_columns"],
        seed=cfg["seed"], eta_mode=eta_mode, eta_max=cfg["eta_max"],
        head_threshold=cfg["head_threshold"], hidden_dim=cfg["hidden_dim"],
        no_memory=cfg["no_memory"], clip_norm=cfg["clip_norm"],
        bank_momentum=cfg["bank_momentum"],
        warmup_epochs=cfg["warmup_epochs"],
        attention_init_scale=cfg["attention_init_scale"],
        normalize_weights=cfg["normalize_weights"],
    )


def prepare_splits(dataset: MultiModalDataset, cfg):
    """Trim labels globally, then carve train/query/retrieval index sets."""
    labels = trim_labels(dataset.labels, cfg["min_keep"], cfg["max_keep"],
                         seed=cfg["seed"])
    trimmed = MultiModalDataset(X=dataset.X, Y=dataset.Y, labels=labels,
                                class_names=dataset.class_names)
    spec = longtail_spec(cfg)
    if spec.num_classes != dataset.num_classes:
        raise ConfigError(
            f"config groups give {spec.num_classes} classes but dataset "
            f"has {dataset.num_classes}")
    train_idx, query_idx, retr_idx = split_query_retrieval(
        trimmed, spec.class_counts(),
        queries_per_class=cfg["queries_per_class"], seed=cfg["seed"],
        retrieval_includes_queries=cfg["retrieval_includes_queries"])
    return trimmed, train_idx, query_idx, retr_idx


def run_train(dataset: MultiModalDataset, cfg):
    """Full training pipeline; the returned model carries the split indices."""
    trimmed, train_idx, query_idx, retr_idx = prepare_splits(dataset, cfg)
    model, history = hash_learn.train(trimmed, train_idx, train_config(cfg))
    model.query_indices = query_idx
    model.retrieval_indices = retr_idx
    return trimmed, model, history


def write_loss_csv(path, history):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "nll", "quantization", "balance", "total"])
        for rec in history:
            w.writerow([rec["epoch"], f"{rec['nll']:.10g}",
                        f"{rec['quantization']:.10g}",
                        f"{rec['balance']:.10g}", f"{rec['total']:.10g}"])


def split_indices(model: HashModel, name: str) -> np.ndarray:
    if name == "train":
        return model.train_indices
    if name == "query":
        return model.query_indices
    if name == "retrieval":
        return model.retrieval_indices
    if name == "all":
        n = (model.train_indices.size + model.query_indices.size
             + model.retrieval_indices.size)
        return np.arange(n)
    raise ConfigError(f"unknown split {name!r}")


def encode_split(model: HashModel, dataset: MultiModalDataset,
                 modality: str, split: str) -> BinaryCodeMatrix:
    idx = split_indices(model, split)
    feats = dataset.X[idx] if modality == "image" else dataset.Y[idx]
    V = hash_learn.encode_features(model, feats, modality)
    return retrieval.binarize(V)


def evaluate_direction(model: HashModel, dataset: MultiModalDataset,
                       direction: str, query_split="query",
                       db_split="retrieval"):
    """direction 'i2t': image queries against the text database; 't2i' the
    reverse."""
    if direction == "i2t":
        q_mod, db_mod = "image", "text"
    elif direction == "t2i":
        q_mod, db_mod = "text", "image"
    else:
        raise ConfigError(f"unknown direction {direction!r}")
    q_idx = split_indices(model, query_split)
    db_idx = split_indices(model, db_split)
    q_codes = encode_split(model, dataset, q_mod, query_split)
    db_codes = encode_split(model, dataset, db_mod, db_split)
    return retrieval.evaluate(q_codes, dataset.labels[q_idx],
                              db_codes, dataset.labels[db_idx],
                              model.partition, direction)
