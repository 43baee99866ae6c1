"""Distributional and feature-level quality metrics for GAN output, per-epoch
convergence tracking, and best-checkpoint selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .classifier import TrainedClassifier, score_frames
from .dataset import FrameSet, normalize_pixels
from .dcgan import GanCheckpoint, generate_images
from .embedding import Backbone, embed_images
from .errors import (
    DegenerateFrameError,
    DegenerateSetError,
    DimensionMismatchError,
    EmptySeriesError,
    UntrainedClassifierError,
)
from .fileio import iter_jsonl, write_jsonl

log = logging.getLogger(__name__)

MEDIAN_HEURISTIC = "median_heuristic"


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "gaussian_rbf"
    bandwidth: float | str = MEDIAN_HEURISTIC

    def __post_init__(self):
        if self.kind != "gaussian_rbf":
            raise ValueError(f"unsupported kernel {self.kind!r}")
        if self.bandwidth != MEDIAN_HEURISTIC and not float(self.bandwidth) > 0:
            raise ValueError("explicit bandwidth must be positive")


def _as_matrix(emb) -> np.ndarray:
    x = np.asarray(emb, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise DimensionMismatchError(f"expected (n, dim) embeddings, got shape {x.shape}")
    return x


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both embedding sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(f"embedding dims differ: {a.shape[1]} vs {b.shape[1]}")


def median_heuristic_bandwidth(emb) -> float:
    """sigma with sigma^2 = median(pairwise squared distances) / 2."""
    x = _as_matrix(emb)
    if len(x) < 2:
        raise DegenerateSetError("need at least two vectors")
    med = float(np.median(pdist(x, "sqeuclidean")))
    if med <= 0.0:
        raise DegenerateSetError("median pairwise distance is zero (points identical)")
    return math.sqrt(med / 2.0)


def _mean_exact(x: np.ndarray) -> float:
    return math.fsum(x.ravel().tolist()) / x.size


def kmmd(emb_a, emb_b, cfg: KernelConfig = KernelConfig()) -> float:
    """Gaussian-kernel MMD from the biased V-statistic, clamped at zero before
    the square root."""
    a, b = _as_matrix(emb_a), _as_matrix(emb_b)
    _check_pair(a, b)
    if cfg.bandwidth == MEDIAN_HEURISTIC:
        sigma = median_heuristic_bandwidth(np.vstack([a, b]))
    else:
        sigma = float(cfg.bandwidth)
    gamma = 1.0 / (2.0 * sigma * sigma)
    # fsum is order independent, so swapping the sets gives a bitwise-equal result
    k_aa = _mean_exact(np.exp(-gamma * cdist(a, a, "sqeuclidean")))
    k_bb = _mean_exact(np.exp(-gamma * cdist(b, b, "sqeuclidean")))
    k_ab = _mean_exact(np.exp(-gamma * cdist(a, b, "sqeuclidean")))
    return math.sqrt(max(k_aa + k_bb - 2.0 * k_ab, 0.0))


def one_nn_loo_accuracy(emb_real, emb_synth) -> float:
    """Leave-one-out 1-NN accuracy separating real from synthetic embeddings.

    Neighbours are Euclidean; ties go to the lowest pooled index, with the
    real set placed first.
    """
    a, b = _as_matrix(emb_real), _as_matrix(emb_synth)
    _check_pair(a, b)
    pooled = np.vstack([a, b])
    labels = np.r_[np.zeros(len(a), dtype=np.int8), np.ones(len(b), dtype=np.int8)]
    d = cdist(pooled, pooled, "sqeuclidean")
    np.fill_diagonal(d, np.inf)
    nearest = d.argmin(axis=1)
    return float((labels[nearest] == labels).mean())


def feature_presence_score(synthetic_positives, clf: TrainedClassifier) -> float:
    """Mean classifier confidence over a batch of (already normalized) images."""
    if not isinstance(clf, TrainedClassifier):
        raise UntrainedClassifierError("feature_presence_score needs a trained classifier")
    n = len(synthetic_positives)
    if n == 0:
        raise ValueError("feature_presence_score of an empty batch is undefined")
    return float(np.mean(score_frames(clf, synthetic_positives)))


# --- convergence tracking --------------------------------------------------


@dataclass(frozen=True)
class ConvergenceRecord:
    epoch: int
    kmmd: float
    nn_acc: float
    one_minus_score: float | None = None
    resampled: bool = False

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "kmmd": self.kmmd, "nn_acc": self.nn_acc, "one_minus_score": self.one_minus_score}

    def composite(self) -> float:
        """kmmd + |nn_acc - 0.5| + (1 - mean score, when present)."""
        total = self.kmmd + abs(self.nn_acc - 0.5)
        if self.one_minus_score is not None:
            total += self.one_minus_score
        return total


@dataclass
class ConvergenceSeries:
    records: list[ConvergenceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def append(self, rec: ConvergenceRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        if rec.kmmd < 0 or not 0.0 <= rec.nn_acc <= 1.0:
            raise ValueError(f"record out of range: {rec}")
        self.records.append(rec)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def save(self, path: str | Path) -> None:
        write_jsonl(path, (r.to_dict() for r in self.records))

    @classmethod
    def load(cls, path: str | Path) -> ConvergenceSeries:
        series = cls()
        for d in iter_jsonl(path):
            series.append(ConvergenceRecord(int(d["epoch"]), float(d["kmmd"]), float(d["nn_acc"]), d.get("one_minus_score")))
        return series


def _to_classifier_space(images: np.ndarray, mode: str) -> np.ndarray:
    out = np.empty(images.shape[:3], dtype=np.float32)
    for i, img in enumerate(images[..., 0] if images.ndim == 4 else images):
        try:
            out[i] = normalize_pixels(img, mode)
        except DegenerateFrameError:
            out[i] = 0.0
    return out


def epoch_convergence_eval(
    real_frames: FrameSet,
    ckpt: GanCheckpoint,
    backbone: Backbone,
    clf: TrainedClassifier | None = None,
    sample_count: int = 2000,
    seed: int = 0,
) -> ConvergenceRecord:
    """Metrics for one checkpoint against real (unit-range) frames.

    When fewer real frames than ``sample_count`` exist they are drawn with
    replacement and the record is flagged ``resampled``.
    """
    rng = np.random.default_rng(seed)
    n = len(real_frames)
    resampled = n < sample_count
    idx = rng.choice(n, sample_count, replace=resampled)
    real = np.stack([real_frames.frames[i].pixels for i in idx])
    synth = generate_images(ckpt, sample_count, seed).images

    emb_real = embed_images(real, backbone)
    emb_synth = embed_images(synth, backbone)
    score = None
    if clf is not None:
        score = 1.0 - feature_presence_score(_to_classifier_space(synth, clf.mode), clf)
    return ConvergenceRecord(
        epoch=ckpt.epoch,
        kmmd=kmmd(emb_real, emb_synth),
        nn_acc=one_nn_loo_accuracy(emb_real, emb_synth),
        one_minus_score=score,
        resampled=resampled,
    )


class ConvergenceMonitor:
    """Epoch hook for :func:`synthpipe.dcgan.train_gan` that accumulates a
    :class:`ConvergenceSeries` and optionally appends it to a JSONL log."""

    def __init__(
        self,
        real_frames: FrameSet,
        backbone: Backbone,
        clf: TrainedClassifier | None = None,
        sample_count: int = 2000,
        seed: int = 0,
        log_path: str | Path | None = None,
    ):
        self.real_frames = real_frames
        self.backbone = backbone
        self.clf = clf
        self.sample_count = sample_count
        self.seed = seed
        self.log_path = Path(log_path) if log_path is not None else None
        self.series = ConvergenceSeries()
        if self.log_path is not None:
            self.log_path.write_text("")

    def __call__(self, ckpt: GanCheckpoint) -> ConvergenceRecord:
        rec = epoch_convergence_eval(self.real_frames, ckpt, self.backbone, self.clf, self.sample_count, self.seed)
        self.series.append(rec)
        if self.log_path is not None:
            write_jsonl(self.log_path, [rec.to_dict()], append=True)
        log.info("convergence epoch %d: kmmd=%.4f nn_acc=%.3f 1-score=%s", rec.epoch, rec.kmmd, rec.nn_acc, rec.one_minus_score)
        return rec


def select_best_checkpoint(series: ConvergenceSeries | Iterable[ConvergenceRecord], checkpoints: Sequence[GanCheckpoint]) -> GanCheckpoint:
    """Checkpoint with the smallest composite score among epochs present in
    both the series and ``checkpoints``; later epochs win ties."""
    by_epoch = {c.epoch: c for c in checkpoints}
    candidates = [r for r in series if r.epoch in by_epoch]
    if not candidates:
        raise EmptySeriesError("no convergence record matches a checkpoint")
    best = min(candidates, key=lambda r: (r.composite(), -r.epoch))
    return by_epoch[best.epoch]
