"""Experiment drivers shared by the CLI, the demos and the acceptance tests."""

from __future__ import annotations

import dataclasses
import time
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .config import ExperimentConfig
from .data import (ImageDataset, channel_stats, load_cifar_binary, normalize_channels,
                   synthetic_splits)
from .engine import (DPCN, DpcnConfig, Trainer, accuracy, divergence_probe, ensemble_predict,
                     net_probabilities, predict, train_single)
from .gradcam import grad_cam, heatmap_overlap
from .models import build_network

LogFn = Optional[Callable[[dict], None]]


def load_datasets(exp: ExperimentConfig):
    """Train/test splits described by the ``[data]`` section, normalized with train statistics."""
    d = exp.data
    if d["dataset"] == "synthetic":
        train, test = synthetic_splits(d["train_per_class"], d["test_per_class"], d["classes"],
                                       d["image_size"], d["data_seed"], noise=d["noise"],
                                       clutter=d["clutter"])
    else:
        if not d["path"] or not d["test_path"]:
            raise ValueError("CIFAR datasets need [data] path and test_path")
        train = load_cifar_binary(d["path"].split(","), d["dataset"], "train")
        test = load_cifar_binary(d["test_path"].split(","), d["dataset"], "test")
    if d["normalize"]:
        means, stds = channel_stats(train)
        train = normalize_channels(train, means, stds)
        test = normalize_channels(test, means, stds)
    return train, test


def _tag(record: dict, **extra) -> dict:
    return {**extra, **record}


def train_dpcn(cfg: DpcnConfig, train: ImageDataset, test: Optional[ImageDataset] = None,
               log_fn: LogFn = None, until: int = 3) -> Trainer:
    model = DPCN.build(cfg, train.class_count, train.image_shape)
    trainer = Trainer(model, train, test, log_fn)
    trainer.run(until)
    return trainer


def gradcam_overlap(nets, data: ImageDataset, samples: int = 64, seed: int = 0,
                    target_layer: Optional[str] = None) -> float:
    """Mean overlap of the subnetworks' Grad-CAMs for the true class over random test images.

    Images where every heatmap is zero are skipped.
    """
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(data), size=min(samples, len(data)), replace=False)
    scores = []
    for i in idx:
        maps = [grad_cam(net, data.images[i], int(data.labels[i]), target_layer) for net in nets]
        for a in range(len(maps)):
            for b in range(a + 1, len(maps)):
                if maps[a].values.max() == 0 and maps[b].values.max() == 0:
                    continue
                scores.append(heatmap_overlap(maps[a], maps[b]))
    return float(np.mean(scores)) if scores else float("nan")


def run_directional(exp: ExperimentConfig, seed: int, train: ImageDataset, test: ImageDataset,
                    log_fn: LogFn = None) -> Dict[str, float]:
    """One seed of the single-network vs D-PCN (lambda=1) vs D-PCN (lambda=0) comparison.

    The single network gets e1 + e2 + e3 epochs, which is at least as many
    updates as any D-PCN subnetwork receives.
    """
    exp = exp.with_seed(seed)
    cfg = exp.dpcn
    budget = sum(cfg.phase_epochs)
    out: Dict[str, float] = {"seed": seed}

    t0 = time.time()
    single = build_network(cfg.backbone, train.class_count, cfg.subnet_seeds()[0],
                           cfg.width_multiplier, cfg.depth_blocks, cfg.tap_point,
                           channels=cfg.channels)
    emit = (lambda r: log_fn(_tag(r, run="single", seed=seed))) if log_fn else None
    train_single(single, train, cfg, budget, rng_seed=cfg.seed, log_fn=emit)
    out["single"] = accuracy(net_probabilities(single, test.images), test.labels)
    out["time_single"] = time.time() - t0

    for lam, name in ((cfg.lam, "dpcn"), (0.0, "dpcn_lam0")):
        t0 = time.time()
        run_cfg = dataclasses.replace(cfg, lam=lam)
        emit = (lambda r, n=name: log_fn(_tag(r, run=n, seed=seed))) if log_fn else None
        trainer = train_dpcn(run_cfg, train, None, emit)
        nets = trainer.model.nets
        out[name] = accuracy(predict(trainer.model, test.images), test.labels)
        out[f"{name}_subnets"] = [accuracy(net_probabilities(n, test.images), test.labels)
                                  for n in nets]
        out[f"{name}_probe"] = divergence_probe(nets, test, seed=seed,
                                                max_samples=exp.run["probe_samples"])
        out[f"{name}_overlap"] = gradcam_overlap(nets, test, exp.run["gradcam_samples"], seed)
        out[f"time_{name}"] = time.time() - t0
    return out


def compare(exp: ExperimentConfig, train: ImageDataset, test: ImageDataset,
            seeds: Optional[Sequence[int]] = None, log_fn: LogFn = None) -> List[dict]:
    """Baseline grid: single network, two-network ensemble, doubled width and D-PCN.

    Every baseline is trained for e1 + e2 + e3 epochs and scored on the same
    test split, whose digest is attached to each row.
    """
    seeds = list(exp.run["seeds"] if seeds is None else seeds)
    methods = list(exp.run["baselines"])
    digest = test.digest()
    rows = []
    for seed in seeds:
        cfg = exp.with_seed(seed).dpcn
        budget = sum(cfg.phase_epochs)
        single_nets = []

        def make(i, width):
            return build_network(cfg.backbone, train.class_count, cfg.subnet_seeds()[i],
                                 width, cfg.depth_blocks, cfg.tap_point, channels=cfg.channels)

        def fit(net, name, i):
            emit = (lambda r: log_fn(_tag(r, run=name, seed=seed))) if log_fn else None
            return train_single(net, train, cfg, budget, rng_seed=cfg.seed * 1000 + 500 + i,
                                log_fn=emit)

        results = {}
        if "single" in methods or "ensemble" in methods:
            single_nets.append(fit(make(0, cfg.width_multiplier), "single", 0))
            results["single"] = accuracy(net_probabilities(single_nets[0], test.images), test.labels)
        if "ensemble" in methods:
            single_nets.append(fit(make(1, cfg.width_multiplier), "ensemble_member", 1))
            results["ensemble"] = accuracy(ensemble_predict(single_nets, test.images), test.labels)
        if "wide" in methods:
            wide = fit(make(0, cfg.width_multiplier * 2), "wide", 0)
            results["wide"] = accuracy(net_probabilities(wide, test.images), test.labels)
        if "dpcn" in methods:
            emit = (lambda r: log_fn(_tag(r, run="dpcn", seed=seed))) if log_fn else None
            trainer = train_dpcn(cfg, train, None, emit)
            results["dpcn"] = accuracy(predict(trainer.model, test.images), test.labels)
        for method in BASELINE_ORDER:
            if method in results:
                rows.append({"method": method, "seed": seed, "accuracy": results[method],
                             "eval_digest": digest, "config_digest": exp.digest})
    return rows


BASELINE_ORDER = ("single", "ensemble", "wide", "dpcn")


def ordering(rows: List[dict]) -> List[tuple]:
    """Methods sorted by mean accuracy over seeds, best first."""
    by: Dict[str, List[float]] = {}
    for row in rows:
        by.setdefault(row["method"], []).append(row["accuracy"])
    means = [(m, float(np.mean(v))) for m, v in by.items()]
    return sorted(means, key=lambda t: -t[1])
