"""Command-line entry points: synth, train, eval, robustness.

Exit codes: 0 ok, 1 config error, 2 I/O error, 3 numeric divergence,
4 version mismatch. The default output directory comes from SEADET_OUT_DIR.
Every command writes its resolved config beside its outputs and accepts
dotted-path overrides (`--set section.key=value`).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import yaml

from . import config as configmod
from . import datapipe, evalkit, watermodel
from .config import ConfigError
from .datapipe import GENERATOR_VERSION
from .detkit import (
    CheckpointVersionError,
    DivergenceError,
    load_checkpoint,
    run_training,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_DIVERGED = 3
EXIT_VERSION = 4


class VersionMismatch(RuntimeError):
    pass


def _default_out() -> str:
    return os.environ.get("SEADET_OUT_DIR", os.getcwd())


def _load_raw_config(path: str | None, overrides: list) -> dict:
    raw = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return configmod.apply_dotted_overrides(raw, overrides or [])


def _write_resolved(cfg: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    configmod.save(os.path.join(out_dir, "config.resolved.yaml"), cfg)


def _check_manifest(root: str) -> datapipe.DatasetManifest:
    manifest = datapipe.load_manifest(root)
    if manifest.generator_version != GENERATOR_VERSION:
        raise VersionMismatch(
            f"dataset generator version {manifest.generator_version} "
            f"!= supported {GENERATOR_VERSION}")
    return manifest


def cmd_synth(args) -> int:
    raw = _load_raw_config(args.config, args.set)
    if "domains" not in raw.get("dataset", {}):
        raise ConfigError("missing required key: dataset.domains "
                          "(7 domain specs must be stated explicitly)")
    cfg = configmod.resolve(raw)
    if args.seed is not None:
        cfg["dataset"]["seed"] = args.seed
    out_dir = args.out or _default_out()
    scene = configmod.scene_spec_from(cfg)
    specs = configmod.domain_specs_from(cfg)
    manifest = datapipe.build_multidomain_dataset(
        out_dir, scene, specs,
        images_per_domain=cfg["dataset"]["images_per_domain"],
        val_fraction=cfg["dataset"]["val_fraction"],
        seed=cfg["dataset"]["seed"])
    _write_resolved(cfg, out_dir)
    print(json.dumps(manifest.to_dict(), indent=2))
    return EXIT_OK


def _train_samples(manifest: datapipe.DatasetManifest, root: str):
    samples = []
    for d in manifest.source_domains:
        samples.extend(datapipe.load_split(root, d, "train"))
    return samples


def cmd_train(args) -> int:
    raw = _load_raw_config(args.config, args.set)
    cfg = configmod.resolve(raw)
    if args.seed is not None:
        cfg["training"]["seed"] = args.seed
    out_dir = args.out or _default_out()
    manifest = _check_manifest(args.data)
    samples = _train_samples(manifest, args.data)
    transforms = {
        s.domain_id: watermodel.make_domain_transform(s)
        for s in configmod.domain_specs_from(cfg)
    }
    _write_resolved(cfg, out_dir)

    def _log(record):
        print(json.dumps(record))

    state = run_training(
        cfg, samples, args.mode, out_dir, cfg["training"]["seed"],
        domain_transforms=transforms, source_ids=manifest.source_domains,
        log_fn=_log, resume_from=args.resume)
    summary = {
        "final_step": state.step,
        "final_loss": state.loss_history[-1] if state.loss_history else None,
        "checkpoint": os.path.join(out_dir, "checkpoint.pt"),
    }
    print(json.dumps(summary))
    return EXIT_OK


def _load_checkpoint_checked(path: str):
    try:
        return load_checkpoint(path)
    except CheckpointVersionError as exc:
        raise VersionMismatch(str(exc)) from exc


def _eval_split(model, samples, iou_threshold: float):
    dets = [model.predict(s["image"]) for s in samples]
    gts = [[evalkit.GroundTruth(box=b, label=c) for b, c in s["annotations"]]
           for s in samples]
    map50, per_class = evalkit.dataset_map(dets, gts, iou_threshold)
    coco = evalkit.coco_ap(dets, gts)
    return {"map50": map50, "coco_ap": coco,
            "per_class_ap": {datapipe.CLASS_NAMES[k]: v
                             for k, v in per_class.items()}}


def cmd_eval(args) -> int:
    state = _load_checkpoint_checked(args.checkpoint)
    if state.config.get("version") != configmod.CONFIG_VERSION:
        raise VersionMismatch(
            f"checkpoint config version {state.config.get('version')} "
            f"!= supported {configmod.CONFIG_VERSION}")
    manifest = _check_manifest(args.data)
    out_dir = args.out or _default_out()
    iou_thr = state.config["eval"]["iou_threshold"]
    splits = args.splits.split(",")

    # load everything first so a missing split leaves no partial output
    loaded = {}
    for d in manifest.domains:
        role = "target" if d == manifest.target_domain else "source"
        for split in splits:
            if role == "target" and split != "val":
                continue
            loaded[(d, split)] = datapipe.load_split(args.data, d, split)

    results = {"source": {}, "target": {}}
    for (d, split), samples in loaded.items():
        role = "target" if d == manifest.target_domain else "source"
        results[role][f"domain_{d}/{split}"] = _eval_split(
            state.model, samples, iou_thr)

    src_maps = [v["map50"] for v in results["source"].values()]
    results["summary"] = {
        "source_mean_map50": float(np.mean(src_maps)) if src_maps else None,
        "target_map50": (next(iter(results["target"].values()))["map50"]
                         if results["target"] else None),
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.json"), "w",
              encoding="utf-8") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
    lines = ["== source domains =="]
    for key in sorted(results["source"]):
        lines.append(f"{key}: mAP50={results['source'][key]['map50']:.4f} "
                     f"cocoAP={results['source'][key]['coco_ap']:.4f}")
    lines.append("== held-out target ==")
    for key in sorted(results["target"]):
        lines.append(f"{key}: mAP50={results['target'][key]['map50']:.4f} "
                     f"cocoAP={results['target'][key]['coco_ap']:.4f}")
    table = "\n".join(lines)
    with open(os.path.join(out_dir, "metrics.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(table)
    return EXIT_OK


def cmd_robustness(args) -> int:
    state = _load_checkpoint_checked(args.checkpoint)
    manifest = _check_manifest(args.data)
    out_dir = args.out or _default_out()
    domain = args.domain if args.domain is not None else manifest.target_domain
    samples = datapipe.load_split(args.data, domain, "val")
    images = [s["image"] for s in samples]
    gts = [[evalkit.GroundTruth(box=b, label=c) for b, c in s["annotations"]]
           for s in samples]
    ev = state.config["eval"]
    seed = args.seed if args.seed is not None else 0
    rows = evalkit.robustness_sweep(
        state.model.predict, images, gts, ev["corruptions"],
        severity=args.severity if args.severity is not None
        else ev["corruption_severity"],
        iou_threshold=ev["iou_threshold"], seed=seed)
    table = evalkit.format_robustness_table(rows)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "robustness.json"), "w",
              encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2)
    with open(os.path.join(out_dir, "robustness.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seadet",
        description="Two-stage detection with domain-generalization training")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default=None,
                       help="output directory (default: $SEADET_OUT_DIR)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="dotted-path config override, repeatable")

    p = sub.add_parser("synth", help="generate the multi-domain dataset")
    p.add_argument("--config", required=True)
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--mode", required=True,
                   choices=("deepall", "boosting", "dmc", "dg-adv"))
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", default="val",
                   help="comma-separated splits (default: val)")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("robustness", help="corruption robustness table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", type=int, default=None,
                   help="domain id to sweep (default: held-out target)")
    p.add_argument("--severity", type=int, default=None)
    common(p)
    p.set_defaults(fn=cmd_robustness)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except VersionMismatch as exc:
        print(f"version mismatch: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
