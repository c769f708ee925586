"""Command line entry point: ``dpcn {train,eval,gradcam,compare,gen-data}``.

Every file written (metric logs, evaluation reports, heatmap statistics,
summary tables, dataset metadata) carries the config digest and seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import denormalize, to_uint8, write_cifar_binary
from .engine import DPCN, Trainer, TrainingDiverged, accuracy, ensemble_predict, evaluate, predict
from .experiments import compare, load_datasets, ordering
from .gradcam import grad_cam, heatmap_overlap, render_heatmap

log = logging.getLogger("dpcn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config (INI)")
    common.add_argument("--seed", type=int, default=None, help="override [run] seed")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dpcn", description="D-PCN training, evaluation and Grad-CAM")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common], help="run the training phases")
    t.add_argument("--phase", choices=["1", "2", "3", "all"], default="all",
                   help="stop after this phase (default: all)")
    t.add_argument("--checkpoint", help="resume from a phase-boundary checkpoint")
    e = sub.add_parser("eval", parents=[common], help="accuracy of every head of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    g = sub.add_parser("gradcam", parents=[common], help="per-subnetwork Grad-CAM heatmaps")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--layer", default=None, help="stage name or module path (default: tap point)")
    g.add_argument("--class", dest="class_index", type=int, default=None,
                   help="class to explain (default: each image's label)")
    g.add_argument("--indices", default="0,1,2,3", help="comma-separated test image indices")
    sub.add_parser("compare", parents=[common], help="single / ensemble / wide / D-PCN grid")
    sub.add_parser("gen-data", parents=[common], help="write the synthetic benchmark as binary files")
    return p


def _load_exp(args) -> ExperimentConfig:
    try:
        exp = load_config(args.config)
    except FileNotFoundError:
        raise CliError(f"config not found: {args.config}") from None
    except ConfigError as exc:
        raise CliError(f"malformed config: {exc}") from None
    return exp if args.seed is None else exp.with_seed(args.seed)


def _stamp(exp: ExperimentConfig) -> dict:
    return {"config_digest": exp.digest, "seed": exp.dpcn.seed}


class JsonLines:
    def __init__(self, path: str, stamp: dict, append: bool = False):
        self.fh = open(path, "a" if append else "w", encoding="utf-8")
        self.stamp = stamp

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps({**self.stamp, **record}, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _build_model(exp: ExperimentConfig, num_classes: int, image_shape) -> DPCN:
    return DPCN.build(exp.dpcn, num_classes, tuple(image_shape))


def _load_model(exp: ExperimentConfig, path: str):
    if not os.path.exists(path):
        raise CliError(f"checkpoint not found: {path}")
    try:
        ckpt = load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(str(exc)) from None
    if ckpt.config_digest and ckpt.config_digest != exp.digest:
        log.warning("checkpoint was written under config %s, current config is %s",
                    ckpt.config_digest[:12], exp.digest[:12])
    model = _build_model(exp, ckpt.meta["num_classes"], ckpt.meta["image_shape"])
    model.load_state_dict({k[6:]: v for k, v in ckpt.arrays.items() if k.startswith("model.")})
    return model, ckpt


def cmd_train(args) -> int:
    exp = _load_exp(args)
    os.makedirs(args.out, exist_ok=True)
    train, test = load_datasets(exp)
    until = 3 if args.phase == "all" else int(args.phase)
    model = _build_model(exp, train.class_count, train.image_shape)
    metrics = JsonLines(os.path.join(args.out, "metrics.jsonl"), _stamp(exp),
                        append=bool(args.checkpoint))
    trainer = Trainer(model, train, test, metrics)
    if args.checkpoint:
        if not os.path.exists(args.checkpoint):
            raise CliError(f"checkpoint not found: {args.checkpoint}")
        try:
            ckpt = load_checkpoint(args.checkpoint)
        except CheckpointError as exc:
            raise CliError(str(exc)) from None
        trainer.load_state(ckpt.arrays, ckpt.meta)
    meta = {"num_classes": train.class_count, "image_shape": list(train.image_shape),
            "seed": exp.dpcn.seed}
    try:
        while trainer.phases_done < until:
            [trainer.run_phase1, trainer.run_phase2, trainer.run_phase3][trainer.phases_done]()
            path = os.path.join(args.out, f"phase{trainer.phases_done}.ckpt")
            save_checkpoint(path, trainer.state_arrays(), {**trainer.state_meta(), **meta},
                            exp.digest)
            log.info("phase %d done, checkpoint %s", trainer.phases_done, path)
    except TrainingDiverged as exc:
        metrics({"event": "diverged", "snapshot": exc.snapshot})
        metrics.close()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    metrics.close()
    summary = {**_stamp(exp), "phases_done": trainer.phases_done,
               "acc": evaluate(model, test,
                               heads=("subnets", "extra") if trainer.phases_done == 3 else ("subnets",))}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    exp = _load_exp(args)
    model, ckpt = _load_model(exp, args.checkpoint)
    _, test = load_datasets(exp)
    report = {**_stamp(exp), "checkpoint": args.checkpoint, "phases_done": ckpt.phase,
              "eval_digest": test.digest(), "n": len(test)}
    report["acc"] = evaluate(model, test)
    report["acc"]["base"] = report["acc"]["subnet0"]
    report["acc"]["ensemble"] = accuracy(ensemble_predict(model.nets, test.images), test.labels)
    report["acc"]["extra"] = accuracy(predict(model, test.images), test.labels)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "eval.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_gradcam(args) -> int:
    exp = _load_exp(args)
    model, _ = _load_model(exp, args.checkpoint)
    _, test = load_datasets(exp)
    try:
        indices = [int(i) for i in args.indices.split(",") if i.strip()]
    except ValueError:
        raise CliError(f"bad --indices {args.indices!r}") from None
    if any(not 0 <= i < len(test) for i in indices):
        raise CliError(f"--indices must lie in [0, {len(test)})")
    os.makedirs(args.out, exist_ok=True)
    base_images = denormalize(test.subset(indices)).images if test.normalized else test.images[indices]
    stats = []
    for pos, i in enumerate(indices):
        cls = int(test.labels[i]) if args.class_index is None else args.class_index
        try:
            maps = [grad_cam(net, test.images[i], cls, args.layer) for net in model.nets]
        except ValueError as exc:
            raise CliError(str(exc)) from None
        files = []
        for k, hm in enumerate(maps):
            path = os.path.join(args.out, f"img{i:05d}_class{cls}_subnet{k}.png")
            render_heatmap(hm, base_images[pos], path)
            files.append(path)
        pair = None
        if any(m.values.max() > 0 for m in maps[:2]):
            pair = heatmap_overlap(maps[0], maps[1])
        stats.append({"index": i, "class": cls, "layer": maps[0].target_layer, "files": files,
                      "overlap": pair})
    valid = [s["overlap"] for s in stats if s["overlap"] is not None]
    report = {**_stamp(exp), "images": stats,
              "mean_overlap": float(np.mean(valid)) if valid else None}
    with open(os.path.join(args.out, "gradcam.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
    print(json.dumps({k: v for k, v in report.items() if k != "images"}, sort_keys=True))
    return EXIT_OK


def cmd_compare(args) -> int:
    exp = _load_exp(args)
    os.makedirs(args.out, exist_ok=True)
    train, test = load_datasets(exp)
    seeds = [args.seed] if args.seed is not None else list(exp.run["seeds"])
    metrics = JsonLines(os.path.join(args.out, "metrics.jsonl"), {"config_digest": exp.digest})
    rows = compare(exp, train, test, seeds, metrics)
    metrics.close()
    path = os.path.join(args.out, "summary.tsv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, ["method", "seed", "accuracy", "eval_digest", "config_digest"],
                                delimiter="\t")
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "accuracy": f"{row['accuracy']:.6f}"})
    print(f"# config {exp.digest}  eval split {test.digest()[:16]}  seeds {seeds}")
    for method, mean in ordering(rows):
        print(f"{method}\t{mean:.4f}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    exp = _load_exp(args)
    if exp.data["dataset"] != "synthetic":
        raise CliError("gen-data only materializes the synthetic benchmark")
    if exp.data["classes"] > 10:
        raise CliError("the binary format written here holds at most 10 classes")
    if exp.data["image_size"] != 32:
        raise CliError("the binary format written here holds 32x32 images")
    train, test = load_datasets(exp.override("data", normalize=False))
    os.makedirs(args.out, exist_ok=True)
    meta = {**_stamp(exp), "classes": exp.data["classes"], "files": {}}
    for ds in (train, test):
        path = os.path.join(args.out, f"{ds.split}.bin")
        write_cifar_binary(path, to_uint8(ds.images), ds.labels)
        meta["files"][ds.split] = {"path": path, "n": len(ds), "digest": ds.digest()}
    with open(os.path.join(args.out, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
    print(json.dumps(meta, sort_keys=True))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcam": cmd_gradcam, "compare": cmd_compare,
            "gen-data": cmd_gen_data}


def main(argv: Optional[List[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
