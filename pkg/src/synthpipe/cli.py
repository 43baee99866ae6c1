"""Command-line entry point: ``synthpipe <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .errors import SynthPipeError
from .fileio import read_toml, write_embeddings

log = logging.getLogger("synthpipe")

CLASS_CODES = {"pos": "positive", "neg": "negative"}


def _crop_for(manifest_path: Path, crop_path: str | None):
    from .dataset import CropSpec

    path = Path(crop_path) if crop_path else manifest_path.parent / "crop_spec.toml"
    if not path.exists():
        if crop_path:
            raise SynthPipeError(f"crop spec {path} not found")
        return None
    d = read_toml(path)
    return CropSpec.from_dict(d.get("crop", d))


def cmd_preprocess(args) -> int:
    from .dataset import load_manifest, preprocess_manifest

    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    crop = _crop_for(manifest_path, args.crop_spec)
    root = Path(args.root) if args.root else manifest_path.parent
    n = preprocess_manifest(manifest, crop, args.mode, args.out, root=root, size=args.size, workers=args.workers)
    print(f"wrote {n} frames to {args.out}")
    return 0


def cmd_surrogate(args) -> int:
    from .surrogate import SurrogateSpec, generate_surrogate

    spec = SurrogateSpec.from_dict(read_toml(args.spec)) if args.spec else SurrogateSpec()
    manifest = generate_surrogate(spec, args.out, workers=args.workers)
    n_frames = sum(1 for _ in manifest.iter_frames())
    print(f"wrote {len(manifest.patients)} patients, {n_frames} frames to {args.out}")
    return 0


def cmd_train_gan(args) -> int:
    from .dataset import load_frame_dir
    from .dcgan import DiscriminatorSpec, GanTrainingConfig, GeneratorSpec, train_gan

    label = CLASS_CODES[args.cls]
    cfg_d = read_toml(args.config) if args.config else {}
    frames = load_frame_dir(args.frames, split=args.split, label=label)
    if len(frames) == 0:
        raise SynthPipeError(f"no {label} frames in {args.frames}")
    frames = frames.renormalized("unit_range")
    size = frames.frames[0].pixels.shape[0]
    g = dict(cfg_d.get("generator", {}))
    g.setdefault("output_size", size)
    gspec = GeneratorSpec.from_dict(g)
    disc = dict(cfg_d.get("discriminator", {}))
    disc.setdefault("n_downsample_stages", gspec.n_upsample_stages)
    dspec = DiscriminatorSpec.from_dict(disc)
    cfg = GanTrainingConfig.from_dict(cfg_d.get("training", {}))

    monitor = None
    if args.monitor:
        from .embedding import load_backbone
        from .gan_metrics import ConvergenceMonitor

        Path(args.out).mkdir(parents=True, exist_ok=True)
        monitor = ConvergenceMonitor(
            frames, load_backbone(args.backbone), None,
            sample_count=min(cfg.eval_sample_count, len(frames)), seed=cfg.seed,
            log_path=Path(args.out) / "convergence.jsonl",
        )
    ckpts = train_gan(frames, gspec, dspec, cfg, monitor, label=label, run_dir=args.out)
    print(f"trained {label} GAN for {cfg.epochs} epochs; {len(ckpts)} checkpoints in {args.out}")
    return 0


def cmd_generate(args) -> int:
    from .dataset import write_frame_dir
    from .dcgan import GanCheckpoint, generate_images

    ckpt = GanCheckpoint.load(args.ckpt)
    images = generate_images(ckpt, args.count, args.seed)
    n = write_frame_dir(images.to_frameset(args.mode), args.out, args.mode)
    print(f"wrote {n} synthetic {ckpt.label} frames to {args.out}")
    return 0


def cmd_embed(args) -> int:
    from .dataset import load_frame_dir
    from .embedding import embed_images, load_backbone

    frames = load_frame_dir(args.images).renormalized("unit_range")
    emb = embed_images(frames.stack(), load_backbone(args.backbone, weights=args.weights))
    write_embeddings(args.out, emb)
    print(f"wrote {emb.shape[0]} x {emb.shape[1]} embeddings to {args.out}")
    return 0


def cmd_eval_gan(args) -> int:
    from .classifier import TrainedClassifier
    from .dataset import load_frame_dir
    from .dcgan import load_run
    from .embedding import load_backbone
    from .gan_metrics import ConvergenceSeries, epoch_convergence_eval, select_best_checkpoint

    checkpoints = load_run(args.run)
    if not checkpoints:
        raise SynthPipeError(f"no checkpoints in {args.run}")
    real = load_frame_dir(args.real, split=args.split, label=checkpoints[0].label).renormalized("unit_range")
    backbone = load_backbone(args.backbone, weights=args.weights)
    clf = TrainedClassifier.load(args.clf) if args.clf else None
    samples = min(args.samples, len(real)) if args.cap_samples else args.samples
    series = ConvergenceSeries()
    for ckpt in checkpoints:
        rec = epoch_convergence_eval(real, ckpt, backbone, clf, samples, args.seed)
        series.append(rec)
        print(json.dumps(rec.to_dict()))
    out = Path(args.out) if args.out else Path(args.run) / "convergence.jsonl"
    series.save(out)
    best = select_best_checkpoint(series, checkpoints)
    (Path(args.run) / "best.json").write_text(json.dumps({"epoch": best.epoch}))
    print(f"best epoch {best.epoch}; series written to {out}")
    return 0


def _load_split(path: str, split: str | None):
    from .dataset import load_frame_dir

    return load_frame_dir(path, split=split)


def cmd_train_clf(args) -> int:
    from .classifier import AugmentationConfig, SearchSpace
    from .dcgan import GanCheckpoint
    from .experiments import ScenarioConfig, SplitData, run_scenario, scenario_code

    search_d = read_toml(args.search) if args.search else {}
    space = SearchSpace.from_dict(search_d.get("search", search_d))
    aug = AugmentationConfig.from_dict(search_d.get("augmentation", {}))
    scenario = ScenarioConfig(
        scenario_code(args.scenario),
        args.count,
        GanCheckpoint.load(args.gan_pos) if args.gan_pos else None,
        GanCheckpoint.load(args.gan_neg) if args.gan_neg else None,
    )
    train = _load_split(args.train, args.train_split)
    val = _load_split(args.val, args.val_split)
    holdout = _load_split(args.holdout, args.holdout_split) if args.holdout else val
    (row,) = run_scenario(scenario, SplitData(train, val, holdout), space, aug=aug, epochs=args.epochs,
                          batch_size=args.batch_size, seed=args.seed, out_dir=args.out)
    print(json.dumps(dataclasses.asdict(row)))
    return 0


def cmd_eval_clf(args) -> int:
    from .classifier import TrainedClassifier, accuracy_at, auc_roc, score_frames

    clf = TrainedClassifier.load(args.clf)
    holdout = _load_split(args.holdout, args.split)
    if any(f.synthetic for f in holdout):
        raise SynthPipeError("holdout must contain only real frames")
    scores = score_frames(clf, holdout)
    labels = holdout.labels()
    roc = auc_roc(scores, labels)
    d = roc.to_dict()
    d["accuracy"] = accuracy_at(scores, labels)
    Path(args.out).write_text(json.dumps(d))
    print(f"auc={roc.auc:.4f} accuracy={d['accuracy']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from .classifier import SearchSpace
    from .dataset import FrameStore, load_manifest
    from .experiments import AblationPlan, run_ablation

    d = dict(read_toml(args.plan))
    search = SearchSpace.from_dict(d.pop("search", {}))
    plan = AblationPlan.from_dict(d)
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    crop = _crop_for(manifest_path, args.crop_spec)
    root = Path(args.root) if args.root else manifest_path.parent
    store = FrameStore(manifest, crop, root=root, size=plan.image_size)
    report = run_ablation(plan, manifest, search, store, args.out)
    for a in report.aggregates:
        print(f"{a.scenario} n={a.patient_count}: auc {a.mean_auc:.4f} +/- {a.std_auc:.4f}")
    return 0


def cmd_report(args) -> int:
    from .experiments import load_grid_report
    from .reporting import render_report

    written = render_report(load_grid_report(args.grid), args.out)
    for kind, paths in written.items():
        for p in paths:
            print(f"{kind}: {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="synthpipe", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="crop, mask, resize and normalize manifest frames")
    s.add_argument("--manifest", required=True)
    s.add_argument("--crop-spec")
    s.add_argument("--mode", choices=("zscore", "unit_range"), default="zscore")
    s.add_argument("--out", required=True)
    s.add_argument("--root", help="image root (default: manifest directory)")
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("surrogate", help="generate the procedural surrogate dataset")
    s.add_argument("--spec")
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_surrogate)

    s = sub.add_parser("train-gan", help="train a per-class DCGAN on a preprocessed frame directory")
    s.add_argument("--frames", required=True)
    s.add_argument("--class", dest="cls", choices=sorted(CLASS_CODES), required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--monitor", action="store_true", help="log per-epoch convergence metrics")
    s.add_argument("--backbone", default="resnet34")
    s.set_defaults(func=cmd_train_gan)

    s = sub.add_parser("generate", help="sample images from a GAN checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("zscore", "unit_range"), default="unit_range")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("embed", help="embed a frame directory with a frozen backbone")
    s.add_argument("--images", required=True)
    s.add_argument("--backbone", default="resnet34")
    s.add_argument("--weights", default="default")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("eval-gan", help="convergence metrics for every checkpoint of a GAN run")
    s.add_argument("--run", required=True)
    s.add_argument("--real", required=True)
    s.add_argument("--backbone", default="resnet34")
    s.add_argument("--weights", default="default")
    s.add_argument("--clf")
    s.add_argument("--samples", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="train")
    s.add_argument("--cap-samples", action="store_true", help="limit samples to the real-set size")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_gan)

    s = sub.add_parser("train-clf", help="random-search a classifier for one scenario")
    s.add_argument("--scenario", choices=("d", "e", "f", "g"), required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--val", required=True)
    s.add_argument("--holdout")
    s.add_argument("--train-split", default="train")
    s.add_argument("--val-split", default="validation")
    s.add_argument("--holdout-split", default="test")
    s.add_argument("--search")
    s.add_argument("--gan-pos")
    s.add_argument("--gan-neg")
    s.add_argument("--count", type=int, default=0, help="synthetic frames per class (0 = scenario default)")
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_clf)

    s = sub.add_parser("eval-clf", help="ROC/AUC of a trained classifier on a real holdout")
    s.add_argument("--clf", required=True)
    s.add_argument("--holdout", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval_clf)

    s = sub.add_parser("ablate", help="run or resume the dataset-size ablation grid")
    s.add_argument("--plan", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--crop-spec")
    s.add_argument("--root")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="render tables and figures for a grid directory")
    s.add_argument("--grid", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SynthPipeError, ValueError, FileNotFoundError) as exc:
        print(f"synthpipe {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
