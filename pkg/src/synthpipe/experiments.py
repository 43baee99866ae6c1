"""Downstream scenarios, dataset-size ablation grid, and result tables.

Scenario codes:

* ``d`` baseline: real positives + real negatives
* ``e`` combined: real positives + synthetic positives + real negatives
* ``f`` positive-synthetic: synthetic positives + real negatives
* ``g`` pure-synthetic: synthetic positives + synthetic negatives

Validation and holdout frames are always real.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .classifier import (
    AugmentationConfig,
    ClassifierSpec,
    SearchSpace,
    TrainedClassifier,
    accuracy_at,
    auc_roc,
    random_search,
    score_frames,
    train_classifier,
)
from .dataset import DatasetManifest, FrameSet, FrameStore, select_ablation_frames
from .dcgan import DiscriminatorSpec, GanCheckpoint, GanTrainingConfig, GeneratorSpec, generate_images, train_gan
from .embedding import Backbone, load_backbone
from .errors import LeakageError, MissingCheckpointError
from .fileio import iter_jsonl, read_toml, write_jsonl
from .gan_metrics import ConvergenceMonitor, ConvergenceSeries, select_best_checkpoint
from .utils import config_hash

log = logging.getLogger(__name__)

SCENARIOS = {
    "d": "d_baseline",
    "e": "e_combined",
    "f": "f_pos_synthetic",
    "g": "g_pure_synthetic",
}
_SHORT = {v: k for k, v in SCENARIOS.items()}
PURE_SYNTHETIC_COUNT = 67_950
RESULT_FIELDS = ("scenario", "patient_count", "replicate", "auc", "accuracy", "seed")


def scenario_code(name: str) -> str:
    if name in SCENARIOS:
        return name
    if name in _SHORT:
        return _SHORT[name]
    raise ValueError(f"unknown scenario {name!r}; expected one of {sorted(SCENARIOS) + sorted(_SHORT)}")


@dataclass
class ScenarioConfig:
    scenario: str
    synthetic_count_per_class: int | None = None
    gan_checkpoint_pos: GanCheckpoint | None = None
    gan_checkpoint_neg: GanCheckpoint | None = None

    def __post_init__(self):
        self.scenario = SCENARIOS[scenario_code(self.scenario)]

    @property
    def code(self) -> str:
        return _SHORT[self.scenario]

    @property
    def needs_positive_gan(self) -> bool:
        return self.code in "efg"

    @property
    def needs_negative_gan(self) -> bool:
        return self.code == "g"

    def check(self) -> None:
        if self.needs_positive_gan and self.gan_checkpoint_pos is None:
            raise MissingCheckpointError(f"scenario {self.scenario} needs a positive-GAN checkpoint")
        if self.needs_negative_gan and self.gan_checkpoint_neg is None:
            raise MissingCheckpointError(f"scenario {self.scenario} needs a negative-GAN checkpoint")


@dataclass
class SplitData:
    train: FrameSet
    val: FrameSet
    holdout: FrameSet


@dataclass(frozen=True)
class ResultRow:
    scenario: str
    patient_count: int
    replicate: int
    auc: float
    accuracy: float
    seed: int


@dataclass(frozen=True)
class Aggregate:
    scenario: str
    patient_count: int
    mean_auc: float
    std_auc: float
    n: int


@dataclass(frozen=True)
class EpochSweepRow:
    epoch: int
    accuracy: float
    auc: float


def _balance(frames: FrameSet, rng: np.random.Generator) -> FrameSet:
    pos = [f for f in frames if f.label == "positive"]
    neg = [f for f in frames if f.label == "negative"]
    k = min(len(pos), len(neg))
    if len(pos) > k:
        pos = [pos[i] for i in sorted(rng.choice(len(pos), k, replace=False))]
    if len(neg) > k:
        neg = [neg[i] for i in sorted(rng.choice(len(neg), k, replace=False))]
    return FrameSet(pos + neg)


def _synthetic(ckpt: GanCheckpoint, count: int, seed: int, label: str, mode: str) -> FrameSet:
    images = generate_images(ckpt, count, seed)
    images.label = label
    return images.to_frameset(mode)


def compose_training_set(scenario: ScenarioConfig, real: FrameSet, seed: int, mode: str = "zscore") -> FrameSet:
    """Build a scenario's training frames from the real subset and GAN output.

    Synthetic counts default to the real positive count for ``e``/``f`` and
    to 67,950 per class for ``g``.  Scenarios d, f and g are class-balanced
    by downsampling; ``e`` keeps every real positive, so its extra positives
    are handled by the classifier's class-weighted loss instead.
    """
    scenario.check()
    rng = np.random.default_rng(seed)
    real_pos, real_neg = real.of_class("positive"), real.of_class("negative")
    code = scenario.code
    if code == "d":
        return _balance(real, rng)
    if code == "g":
        count = scenario.synthetic_count_per_class or PURE_SYNTHETIC_COUNT
        pos = _synthetic(scenario.gan_checkpoint_pos, count, seed, "positive", mode)
        neg = _synthetic(scenario.gan_checkpoint_neg, count, seed + 1, "negative", mode)
        return _balance(pos + neg, rng)
    count = scenario.synthetic_count_per_class or len(real_pos)
    synth_pos = _synthetic(scenario.gan_checkpoint_pos, count, seed, "positive", mode)
    if code == "e":
        return real_pos + synth_pos + real_neg
    return _balance(synth_pos + real_neg, rng)


def run_scenario(
    scenario: ScenarioConfig,
    data: SplitData,
    search: SearchSpace,
    *,
    aug: AugmentationConfig | None = None,
    epochs: int = 10,
    batch_size: int = 32,
    seed: int = 0,
    patient_count: int = 0,
    replicate: int = 0,
    out_dir: str | Path | None = None,
) -> list[ResultRow]:
    """Train the scenario's classifier by random search and score it on the real holdout."""
    if any(f.synthetic for f in data.holdout):
        raise LeakageError("holdout set must contain only real frames")
    if any(f.synthetic for f in data.val):
        raise LeakageError("validation set must contain only real frames")
    aug = aug or AugmentationConfig()
    train = compose_training_set(scenario, data.train, seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = random_search(
        search, train, data.val, aug, epochs=epochs, batch_size=batch_size,
        trials_path=out / "trials.jsonl" if out is not None else None,
    )
    labels = data.holdout.labels()
    scores = score_frames(result.classifier, data.holdout)
    roc = auc_roc(scores, labels)
    row = ResultRow(scenario.code, patient_count, replicate, roc.auc, accuracy_at(scores, labels), seed)
    if out is not None:
        result.classifier.save(out / f"clf_{scenario.code}.ckpt")
        (out / "roc.json").write_text(json.dumps(roc.to_dict()))
    log.info("scenario %s n=%d r=%d: auc=%.4f acc=%.4f", scenario.code, patient_count, replicate, row.auc, row.accuracy)
    return [row]


# --- reports ---------------------------------------------------------------


@dataclass
class EvaluationReport:
    rows: list[ResultRow] = field(default_factory=list)
    convergence: dict[str, ConvergenceSeries] = field(default_factory=dict)
    epoch_sweep: list[EpochSweepRow] = field(default_factory=list)

    @property
    def aggregates(self) -> list[Aggregate]:
        groups: dict[tuple[str, int], list[float]] = {}
        for r in self.rows:
            groups.setdefault((r.scenario, r.patient_count), []).append(r.auc)
        order = sorted(groups, key=lambda k: (k[1], k[0]))
        return [
            Aggregate(s, n, statistics.fmean(groups[s, n]), statistics.pstdev(groups[s, n]), len(groups[s, n]))
            for s, n in order
        ]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULT_FIELDS)
            for r in self.rows:
                w.writerow([r.scenario, r.patient_count, r.replicate, repr(r.auc), repr(r.accuracy), r.seed])

    @staticmethod
    def read_csv(path: str | Path) -> list[ResultRow]:
        with open(path, newline="") as fh:
            return [
                ResultRow(d["scenario"], int(d["patient_count"]), int(d["replicate"]), float(d["auc"]), float(d["accuracy"]), int(d["seed"]))
                for d in csv.DictReader(fh)
            ]

    def to_jsonl(self, path: str | Path) -> None:
        write_jsonl(path, (asdict(r) for r in self.rows))


@dataclass
class AblationPlan:
    """Grid of (patient_count, replicate) cells, each running every scenario."""

    patient_counts: list[int]
    replicates: int = 3
    scenarios: list[ScenarioConfig] = field(default_factory=lambda: [ScenarioConfig(s) for s in "def"])
    base_seed: int = 0
    image_size: int = 256
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    gan: GanTrainingConfig = field(default_factory=GanTrainingConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    classifier_epochs: int = 10
    classifier_batch_size: int = 32
    monitor_samples: int = 2000
    backbone: str = "resnet34"
    share_negative_gan: bool = False
    feature_classifier: bool = False

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if not self.patient_counts or any(b <= a for a, b in zip(self.patient_counts, self.patient_counts[1:])):
            raise ValueError("patient_counts must be nonempty and strictly increasing")
        self.scenarios = [s if isinstance(s, ScenarioConfig) else ScenarioConfig(s) for s in self.scenarios]
        if self.generator.output_size != self.image_size or self.discriminator.input_size != self.image_size:
            raise ValueError(f"GAN resolution does not match image_size={self.image_size}")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> AblationPlan:
        d = dict(d.get("plan", d))
        size = int(d.get("image_size", 256))
        g = dict(d.pop("generator", {}))
        g.setdefault("output_size", size)
        disc = dict(d.pop("discriminator", {}))
        disc.setdefault("n_downsample_stages", GeneratorSpec.from_dict(g).n_upsample_stages)
        scenarios = []
        for s in d.pop("scenarios", ["d", "e", "f"]):
            scenarios.append(ScenarioConfig(**s) if isinstance(s, dict) else ScenarioConfig(s))
        return cls(
            generator=GeneratorSpec.from_dict(g),
            discriminator=DiscriminatorSpec.from_dict(disc),
            gan=GanTrainingConfig.from_dict(d.pop("gan", {})),
            augmentation=AugmentationConfig.from_dict(d.pop("augmentation", {})),
            scenarios=scenarios,
            **d,
        )

    @classmethod
    def from_toml(cls, path: str | Path) -> AblationPlan:
        return cls.from_dict(read_toml(path))

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["scenarios"] = [{"scenario": s.scenario, "synthetic_count_per_class": s.synthetic_count_per_class} for s in self.scenarios]
        d["generator"] = self.generator.to_dict()
        d["discriminator"] = self.discriminator.to_dict()
        d["gan"] = asdict(self.gan)
        d["augmentation"] = asdict(self.augmentation)
        return d


def _manifest_fingerprint(manifest: DatasetManifest) -> str:
    return config_hash([
        manifest.source_name,
        [(p.patient_id, p.split, [(v.video_id, v.video_label, len(v.frames)) for v in p.videos]) for p in manifest.patients],
    ])


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def train_monitored_gan(
    frames: FrameSet,
    plan: AblationPlan,
    seed: int,
    run_dir: Path,
    backbone: Backbone,
    clf: TrainedClassifier | None = None,
) -> tuple[GanCheckpoint, list[GanCheckpoint], ConvergenceSeries]:
    """Train one GAN with per-epoch convergence logging and pick its best checkpoint."""
    run_dir.mkdir(parents=True, exist_ok=True)
    monitor = ConvergenceMonitor(
        frames, backbone, clf,
        sample_count=min(plan.monitor_samples, len(frames)),
        seed=seed,
        log_path=run_dir / "convergence.jsonl",
    )
    cfg = dataclasses.replace(plan.gan, seed=seed)
    checkpoints = train_gan(frames, plan.generator, plan.discriminator, cfg, monitor, run_dir=run_dir)
    best = select_best_checkpoint(monitor.series, checkpoints)
    _write_atomic(run_dir / "best.json", json.dumps({"epoch": best.epoch}))
    return best, checkpoints, monitor.series


def run_ablation(
    plan: AblationPlan,
    manifest: DatasetManifest,
    search: SearchSpace,
    store: FrameStore,
    out_dir: str | Path,
    backbone: Backbone | None = None,
) -> EvaluationReport:
    """Run (or resume) the ablation grid and write ``results.csv``/``results.jsonl``.

    Cells live under ``out_dir/runs/<config-hash>/n<count>_r<rep>/``; a cell
    with a ``rows.jsonl`` is complete and is not recomputed.
    """
    if store.size != plan.image_size:
        raise ValueError(f"frame store size {store.size} != plan image_size {plan.image_size}")
    out = Path(out_dir)
    key = config_hash({
        "plan": plan.to_dict(),
        "search": search.to_dict(),
        "manifest": _manifest_fingerprint(manifest),
        "crop": store.crop.to_dict() if store.crop else None,
    })
    root = out / "runs" / key
    root.mkdir(parents=True, exist_ok=True)
    (root / "plan.json").write_text(json.dumps({"plan": plan.to_dict(), "search": search.to_dict()}, indent=2, default=str))

    val = store.split("validation")
    holdout = store.split("test")
    train_all = store.split("train")
    backbone = backbone or load_backbone(plan.backbone)
    needs_pos = any(s.needs_positive_gan for s in plan.scenarios)
    needs_neg = any(s.needs_negative_gan for s in plan.scenarios)

    feature_clf = None
    if plan.feature_classifier and needs_pos:
        path = root / "feature_clf.ckpt"
        if path.exists():
            feature_clf = TrainedClassifier.load(path)
        else:
            feature_clf, _ = train_classifier(
                train_all, val, ClassifierSpec(), plan.augmentation, plan.base_seed, epochs=plan.classifier_epochs
            )
            feature_clf.save(path)

    shared_neg = None
    if needs_neg and plan.share_negative_gan:
        neg_dir = root / "gan_neg_shared"
        neg_frames = train_all.of_class("negative").renormalized("unit_range")
        shared_neg, _, _ = train_monitored_gan(neg_frames, plan, plan.base_seed, neg_dir, backbone)

    report = EvaluationReport()
    for count in plan.patient_counts:
        for rep in range(plan.replicates):
            seed = plan.base_seed + rep
            cell = root / f"n{count}_r{rep}"
            done = cell / "rows.jsonl"
            if not done.exists():
                _run_cell(plan, manifest, search, store, cell, count, rep, seed, val, holdout, backbone,
                          feature_clf, shared_neg, train_all if plan.share_negative_gan else None)
            report.rows += [ResultRow(**d) for d in iter_jsonl(done)]
            conv = cell / "gan_pos" / "convergence.jsonl"
            if conv.exists():
                report.convergence[f"n{count}_r{rep}_pos"] = ConvergenceSeries.load(conv)

    check_leakage(root)
    report.to_csv(out / "results.csv")
    report.to_jsonl(out / "results.jsonl")
    return report


def _run_cell(plan, manifest, search, store, cell, count, rep, seed, val, holdout, backbone,
              feature_clf, shared_neg, shared_neg_source) -> None:
    cell.mkdir(parents=True, exist_ok=True)
    selection = select_ablation_frames(manifest, count, seed)
    subset = store.frameset(selection.frames)
    gan_frames = subset.renormalized("unit_range")
    gan_patients: set[str] = set()

    ckpt_pos = ckpt_neg = None
    if any(s.needs_positive_gan for s in plan.scenarios):
        pos = gan_frames.of_class("positive")
        ckpt_pos, _, _ = train_monitored_gan(pos, plan, seed, cell / "gan_pos", backbone, feature_clf)
        gan_patients |= pos.patient_ids
    if any(s.needs_negative_gan for s in plan.scenarios):
        if shared_neg is not None:
            ckpt_neg = shared_neg
            gan_patients |= shared_neg_source.of_class("negative").patient_ids
        else:
            neg = gan_frames.of_class("negative")
            ckpt_neg, _, _ = train_monitored_gan(neg, plan, seed, cell / "gan_neg", backbone)
            gan_patients |= neg.patient_ids

    data = SplitData(subset, val, holdout)
    rows: list[ResultRow] = []
    for sc in plan.scenarios:
        config = dataclasses.replace(sc, gan_checkpoint_pos=ckpt_pos, gan_checkpoint_neg=ckpt_neg)
        rows += run_scenario(
            config, data, search,
            aug=plan.augmentation,
            epochs=plan.classifier_epochs,
            batch_size=plan.classifier_batch_size,
            seed=seed,
            patient_count=count,
            replicate=rep,
            out_dir=cell / f"scenario_{config.code}",
        )

    provenance = {
        "patient_count": count,
        "replicate": rep,
        "seed": seed,
        "sampled_patients": selection.patient_ids,
        "gan_training_patients": sorted(gan_patients),
        "classifier_training_patients": sorted(subset.patient_ids),
        "validation_patients": sorted(val.patient_ids),
        "feature_classifier_patients": sorted(store.manifest.patient_ids("train")) if feature_clf is not None else [],
        "holdout_patients": sorted(holdout.patient_ids),
    }
    _write_atomic(cell / "provenance.json", json.dumps(provenance, indent=1))
    _write_atomic(cell / "rows.jsonl", "".join(json.dumps(asdict(r)) + "\n" for r in rows))


_TRAINING_SIDE = (
    "gan_training_patients",
    "classifier_training_patients",
    "validation_patients",
    "feature_classifier_patients",
)


def check_leakage(grid_root: str | Path) -> int:
    """Assert holdout patients never appear in any training-side provenance.

    Scans every ``provenance.json`` below ``grid_root`` and returns how many
    were checked.
    """
    checked = 0
    for path in sorted(Path(grid_root).rglob("provenance.json")):
        prov = json.loads(path.read_text())
        holdout = set(prov["holdout_patients"])
        for key in _TRAINING_SIDE:
            overlap = holdout & set(prov.get(key, []))
            if overlap:
                raise LeakageError(f"{path}: holdout patients {sorted(overlap)} appear in {key}")
        checked += 1
    return checked


def run_epoch_sweep(
    pos_checkpoints: Sequence[GanCheckpoint],
    neg_checkpoints: Sequence[GanCheckpoint],
    data: SplitData,
    search: SearchSpace,
    *,
    count_per_class: int = PURE_SYNTHETIC_COUNT,
    aug: AugmentationConfig | None = None,
    epochs: int = 10,
    batch_size: int = 32,
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> list[EpochSweepRow]:
    """Pure-synthetic scenario at every GAN epoch held by both runs."""
    neg_by_epoch = {c.epoch: c for c in neg_checkpoints}
    rows = []
    for pos in pos_checkpoints:
        neg = neg_by_epoch.get(pos.epoch)
        if neg is None:
            continue
        sc = ScenarioConfig("g", count_per_class, pos, neg)
        sub = Path(out_dir) / f"epoch_{pos.epoch}" if out_dir is not None else None
        (row,) = run_scenario(sc, data, search, aug=aug, epochs=epochs, batch_size=batch_size, seed=seed, out_dir=sub)
        rows.append(EpochSweepRow(pos.epoch, row.accuracy, row.auc))
    if out_dir is not None:
        write_jsonl(Path(out_dir) / "epoch_sweep.jsonl", (asdict(r) for r in rows))
    return rows


def load_grid_report(grid_dir: str | Path) -> EvaluationReport:
    """Rebuild a report from a grid directory written by :func:`run_ablation`."""
    grid = Path(grid_dir)
    report = EvaluationReport([ResultRow(**d) for d in iter_jsonl(grid / "results.jsonl")])
    for conv in sorted(grid.glob("runs/*/n*_r*/gan_pos/convergence.jsonl")):
        report.convergence[f"{conv.parent.parent.name}_pos"] = ConvergenceSeries.load(conv)
    sweep = grid / "epoch_sweep.jsonl"
    if sweep.exists():
        report.epoch_sweep = [EpochSweepRow(**d) for d in iter_jsonl(sweep)]
    return report
