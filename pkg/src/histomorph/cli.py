"""Command-line entry points.

Exit codes: 0 success, 1 user error (bad config, missing file, invalid
input), 2 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import plotting
from .augment import AugmentationPolicy, PolicyError, augment
from .backbone import BackboneConfigError, get_config
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .curriculum import (PlanError, StageContext, TrainingAborted, default_classification_plan,
                         default_segmentation_plan, run_plan)
from .evaluation import EvaluationError, evaluate, export_features, fit_linear_protocol, infer
from .harmonizer import HarmonizationError, ManifestError, harmonize_manifest, load_manifest, read_rgb
from .segnet import ShapeError

log = logging.getLogger("histomorph")

USER_ERRORS = (ConfigError, ManifestError, HarmonizationError, PolicyError, PlanError, CheckpointError,
               EvaluationError, BackboneConfigError, ShapeError, FileNotFoundError, TrainingAborted)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def cmd_harmonize(args):
    manifest = load_manifest(args.manifest)
    target = None if args.target_mag == "native" else args.target_mag
    out = harmonize_manifest(manifest, args.out, target)
    print(f"harmonized {len(out.entries)} samples -> {Path(args.out) / 'manifest.json'}")


def cmd_augment_preview(args):
    image = read_rgb(args.input)
    policy = AugmentationPolicy.from_mode(args.policy)
    rng = np.random.default_rng(args.seed)
    tiles = [augment(image, None, policy, rng).image for _ in range(args.n)]
    out = Path(args.out)
    path = plotting.augmentation_grid(image, tiles, out / "augment_preview.png")
    print(path)


def _prepare_output(out: Path, resume: bool, force: bool):
    if out.exists() and any(out.iterdir()):
        if resume:
            return
        if not force:
            raise ConfigError(f"output_dir {out} is not empty; pass --resume or --force")
        if not (out / "run.json").exists():
            raise ConfigError(f"refusing to clear {out}: it does not look like a histomorph run")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def cmd_train(args):
    cfg = load_config(args.config, overrides={"seed": args.seed, "preset": args.preset,
                                              "output_dir": args.output_dir})
    out = cfg.resolve(cfg.output_dir)
    _prepare_output(out, args.resume, args.force)
    manifests = cfg.manifest_paths()
    t = cfg.training
    ov = dict(seg_batch_size=t.seg_batch_size, cls_batch_size=t.cls_batch_size, crop_size=t.crop_size,
              lr=t.lr, finetune_lr=t.finetune_lr, finetune_epochs=t.finetune_epochs, patience=t.patience,
              min_delta=t.min_delta, max_epochs=t.max_epochs, steps_per_epoch=t.steps_per_epoch, seed=cfg.seed)
    ctx = StageContext(get_config(cfg.preset), manifests, out, policy=cfg.policy(), device=cfg.device,
                       num_workers=t.num_workers)
    plans = []
    if cfg.plan in ("segmentation", "full"):
        plans.append(default_segmentation_plan(manifests, **ov))
    if cfg.plan in ("classification", "full"):
        count = cfg.category_count
        if count is None:
            if "classification" not in manifests:
                raise ConfigError("manifests.classification: required for the classification plan")
            count = len(load_manifest(manifests["classification"]).categories())
        plans.append(default_classification_plan(count, manifests, **ov))
    for p in plans:
        p.validate(manifests)

    run = {"config": {k: (str(v) if isinstance(v, Path) else v) for k, v in asdict(cfg).items()},
           "plans": [p.to_dict() for p in plans]}
    (out / "run.json").write_text(json.dumps(run, indent=1, default=str))

    history, final = [], None
    segnet_ck = cfg.resolve(cfg.segnet_checkpoint)
    for plan in plans:
        plan_ctx = ctx
        if plan.name == "classification":
            plan_ctx = StageContext(**{**ctx.__dict__, "segnet_checkpoint": segnet_ck})
        results = run_plan(plan, plan_ctx, resume=args.resume)
        for r in results:
            history += r.history
        final = results[-1].checkpoint
        if plan.name == "segmentation":
            segnet_ck = final
    run["plans"] = [p.to_dict() for p in plans]
    run["final_checkpoint"] = str(final)
    (out / "run.json").write_text(json.dumps(run, indent=1, default=str))
    shutil.copyfile(final, out / "final.pt")
    with open(out / "metrics.jsonl", "w") as fh:
        for h in history:
            fh.write(json.dumps(h) + "\n")
    plotting.training_curves(history, out / "training_curves.png")
    print(out / "final.pt")


def cmd_evaluate(args):
    manifest = load_manifest(args.manifest)
    report = evaluate(args.checkpoint, manifest, args.task, dataset_id=args.dataset_id or str(args.manifest),
                      seed=args.seed)
    if args.out:
        report.write(args.out)
    sys.stdout.write(report.to_text())


def cmd_infer(args):
    if not args.arbitrary_size:
        from PIL import Image

        for p in args.images:
            try:
                with Image.open(p) as im:
                    w, h = im.size
            except OSError:
                continue  # reported per file by infer()
            if h % 32 or w % 32:
                raise ShapeError(f"{p}: {h}x{w} is not a multiple of 32; pass --arbitrary-size")
    results = infer(args.checkpoint, args.images, args.out, overlays=args.overlays)
    for r in results:
        print(json.dumps(r))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        with open(Path(args.out) / "predictions.jsonl", "w") as fh:
            for r in results:
                fh.write(json.dumps(r) + "\n")
    if any("error" in r for r in results):
        return 1
    return 0


def cmd_extract_features(args):
    table = export_features(args.checkpoint, load_manifest(args.manifest), args.out)
    print(f"{len(table['ids'])} vectors of length {table['features'].shape[1]} -> {args.out}")


def cmd_fit_linear(args):
    def load(path):
        with np.load(path) as z:
            return z["features"], z["labels"]

    x, y = load(args.train)
    tx, ty = load(args.test) if args.test else (None, None)
    res = fit_linear_protocol(x, y, tx, ty, seed=args.seed, C=args.C)
    lines = ["metric\tvalue"] + [f"{k}\t{v}" for k, v in res.items()]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "linear_protocol.txt").write_text(text)
        (Path(args.out) / "linear_protocol.json").write_text(json.dumps(res, indent=1))


def cmd_synth(args):
    from . import synthetic as syn

    out = Path(args.out)
    specs = {
        "pannuke": (syn.write_segmentation_dataset, dict(n=args.n, source_id="pannuke", seed=1)),
        "pannuke_val": (syn.write_segmentation_dataset, dict(n=2, source_id="pannuke", seed=2)),
        "segmentation": (syn.write_segmentation_dataset, dict(n=args.n, seed=3)),
        "segmentation_val": (syn.write_segmentation_dataset, dict(n=2, seed=4)),
        "tcga": (syn.write_classification_dataset, dict(n=args.n, seed=5)),
        "tcga_val": (syn.write_classification_dataset, dict(n=4, seed=6)),
        "classification": (syn.write_classification_dataset, dict(n=args.n, seed=7)),
        "classification_val": (syn.write_classification_dataset, dict(n=4, seed=8)),
    }
    manifests = {}
    for name, (fn, kw) in specs.items():
        fn(out / name, **kw)
        manifests[name] = f"{name}/manifest.json"
    config = {
        "plan": "full", "preset": "tiny", "seed": 0, "output_dir": "run",
        "augmentation": {"mode": "moderate"}, "manifests": manifests,
        "training": {"seg_batch_size": 4, "cls_batch_size": 4, "crop_size": 64, "patience": 1,
                     "max_epochs": 2, "finetune_epochs": 1, "steps_per_epoch": 2},
    }
    import yaml

    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False))
    print(out / "config.yaml")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="histomorph", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("harmonize", help="convert raw samples into 4-channel PNGs")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--target-mag", default="20x", choices=["20x", "native"])
    s.set_defaults(func=cmd_harmonize)

    s = sub.add_parser("augment-preview", help="grid of augmented versions of one image")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--policy", default="extreme", choices=["extreme", "moderate", "off"])
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_augment_preview)

    s = sub.add_parser("train", help="run the training curriculum from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--preset", choices=["reference", "tiny"])
    s.add_argument("--output-dir")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--resume", action="store_true")
    g.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="segmentation or classification report for a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--task", required=True, choices=["segmentation", "classification"])
    s.add_argument("--out")
    s.add_argument("--dataset-id")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("infer", help="category probabilities (and overlays) for images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("images", nargs="+")
    s.add_argument("--arbitrary-size", action="store_true")
    s.add_argument("--overlays", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("extract-features", help="pooled feature vector per manifest entry")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract_features)

    s = sub.add_parser("fit-linear", help="linear SVM on exported features")
    s.add_argument("--train", required=True)
    s.add_argument("--test")
    s.add_argument("--C", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_fit_linear)

    s = sub.add_parser("synth", help="write synthetic manifests and a tiny demo config")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=8)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        log.exception("internal error")
        return 2


if __name__ == "__main__":
    sys.exit(main())
