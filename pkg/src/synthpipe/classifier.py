"""Downstream consolidation classifier: reduced VGG, augmentation, random
search with validation-based selection, and ROC analysis."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter
from scipy.stats import rankdata

from .dataset import FrameSet, PreprocessedFrame
from .errors import DivergenceError, EmptyDatasetError, ShapeError, SingleClassError, UntrainedClassifierError
from .fileio import write_jsonl
from .utils import seeded

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassifierSpec:
    channel_multiplier: int = 16
    dropout_rate: float = 0.25
    n_conv_blocks: int = 4
    learning_rate: float = 1e-4
    fc_units: int = 64

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.channel_multiplier < 1 or self.n_conv_blocks < 1 or self.learning_rate <= 0:
            raise ValueError(f"invalid classifier spec {self}")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ClassifierSpec:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class ConsolidationCNN(nn.Module):
    """Blocks of two 3x3 conv + BN + ReLU and a 2x2 max-pool, widths
    ``channel_multiplier * 2**i``, then two fully connected layers.

    Takes ``(B, 1, H, W)`` and returns one logit per image.
    """

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        c_in = 1
        for i in range(spec.n_conv_blocks):
            w = spec.channel_multiplier * 2 ** i
            layers += [
                nn.Conv2d(c_in, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU(True),
                nn.Conv2d(w, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU(True),
                nn.MaxPool2d(2),
            ]
            c_in = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(c_in, spec.fc_units),
            nn.ReLU(True),
            nn.Dropout(spec.dropout_rate),
            nn.Linear(spec.fc_units, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)).flatten()


# --- augmentation ----------------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    horizontal_flip_prob: float = 0.5
    gamma_range: tuple[float, float] = (0.7, 1.3)
    blur_sigma_range: tuple[float, float] = (0.0, 1.5)
    intensity_shift_range: tuple[float, float] = (-0.2, 0.2)

    def __post_init__(self):
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise ValueError("horizontal_flip_prob must be in [0, 1]")
        for name in ("gamma_range", "blur_sigma_range", "intensity_shift_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.gamma_range[0] <= 0 or self.blur_sigma_range[0] < 0:
            raise ValueError("gamma must be positive and blur sigma non-negative")

    @classmethod
    def identity(cls) -> AugmentationConfig:
        return cls(0.0, (1.0, 1.0), (0.0, 0.0), (0.0, 0.0))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> AugmentationConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in known})


def flip_horizontal(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, ::-1]


def augment_pixels(pixels: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    # all four draws happen every call so the rng stream does not depend on outcomes
    flip = rng.random() < cfg.horizontal_flip_prob
    gamma = rng.uniform(*cfg.gamma_range)
    sigma = rng.uniform(*cfg.blur_sigma_range)
    shift = rng.uniform(*cfg.intensity_shift_range)

    x = np.asarray(pixels)
    if flip:
        x = flip_horizontal(x)
    if gamma != 1.0:
        lo, hi = float(x.min()), float(x.max())
        if hi > lo:
            u = (x.astype(np.float64) - lo) / (hi - lo)
            x = u ** gamma * (hi - lo) + lo
    if sigma > 0.0:
        x = gaussian_filter(np.asarray(x, dtype=np.float64), sigma, mode="reflect")
    if shift != 0.0:
        x = x + shift
    return np.ascontiguousarray(x, dtype=np.float32)


def augment_frame(frame: PreprocessedFrame, cfg: AugmentationConfig, rng: np.random.Generator) -> PreprocessedFrame:
    return PreprocessedFrame(
        augment_pixels(frame.pixels, cfg, rng), frame.provenance, frame.label, frame.synthetic, frame.patient_id
    )


# --- training --------------------------------------------------------------


@dataclass
class TrainedClassifier:
    model: ConsolidationCNN
    spec: ClassifierSpec
    best_epoch: int
    val_history: list[float]
    input_size: int
    mode: str = "zscore"

    @property
    def best_val_accuracy(self) -> float:
        return self.val_history[self.best_epoch - 1]

    def save(self, path: str | Path) -> None:
        torch.save({
            "spec": asdict(self.spec),
            "state_dict": self.model.state_dict(),
            "best_epoch": self.best_epoch,
            "val_history": self.val_history,
            "input_size": self.input_size,
            "mode": self.mode,
        }, path)

    @classmethod
    def load(cls, path: str | Path) -> TrainedClassifier:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        spec = ClassifierSpec.from_dict(blob["spec"])
        model = ConsolidationCNN(spec)
        model.load_state_dict(blob["state_dict"])
        return cls(model.eval(), spec, blob["best_epoch"], blob["val_history"], blob["input_size"], blob["mode"])


def _as_batch(frames: FrameSet | np.ndarray) -> np.ndarray:
    x = frames.stack() if isinstance(frames, FrameSet) else np.asarray(frames, dtype=np.float32)
    if x.ndim == 4 and x.shape[-1] == 1:
        x = x[..., 0]
    if x.ndim != 3:
        raise ShapeError(f"expected (N, H, W) frames, got shape {x.shape}")
    return x


def _logits(model: nn.Module, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            out.append(model(torch.from_numpy(np.ascontiguousarray(x[i:i + batch_size])).unsqueeze(1)))
    return torch.cat(out).double().numpy()


def train_classifier(
    train: FrameSet,
    val: FrameSet,
    spec: ClassifierSpec,
    aug: AugmentationConfig,
    seed: int,
    *,
    epochs: int = 10,
    batch_size: int = 32,
    deterministic: bool = True,
) -> tuple[TrainedClassifier, float]:
    """Minimize class-weighted BCE on augmented frames; keep the epoch with the
    best validation accuracy (earliest on ties)."""
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    if len(train) == 0 or len(val) == 0:
        raise EmptyDatasetError("train and validation sets must be nonempty")
    if any(f.synthetic for f in val):
        raise ValueError("validation frames must all be real")

    x_train = _as_batch(train)
    y_train = train.labels().astype(np.float32)
    x_val, y_val = _as_batch(val), val.labels()
    if x_val.shape[1:] != x_train.shape[1:]:
        raise ShapeError("train and validation frames differ in size")
    n_pos = float(y_train.sum())
    n_neg = float(len(y_train) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("training set needs both classes")
    pos_weight = torch.tensor(n_neg / n_pos)

    rng = np.random.default_rng(seed)
    val_history: list[float] = []
    best_state, best_acc, best_epoch = None, -1.0, 0

    with seeded(seed, deterministic=deterministic):
        model = ConsolidationCNN(spec)
        opt = torch.optim.Adam(model.parameters(), lr=spec.learning_rate)
        for epoch in range(1, epochs + 1):
            model.train()
            order = rng.permutation(len(x_train))
            for start in range(0, len(order), batch_size):
                idx = order[start:start + batch_size]
                xb = np.stack([augment_pixels(x_train[i], aug, rng) for i in idx])
                logits = model(torch.from_numpy(xb).unsqueeze(1))
                loss = F.binary_cross_entropy_with_logits(logits, torch.from_numpy(y_train[idx]), pos_weight=pos_weight)
                if not math.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite classifier loss at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()

            acc = float(((_logits(model, x_val) > 0).astype(np.int64) == y_val).mean())
            val_history.append(acc)
            if acc > best_acc:
                best_acc, best_epoch = acc, epoch
                best_state = copy.deepcopy(model.state_dict())
            log.debug("classifier epoch %d: val_acc=%.4f", epoch, acc)

    model.load_state_dict(best_state)
    model.eval()
    return TrainedClassifier(model, spec, best_epoch, val_history, x_train.shape[1]), best_acc


def score_frames(clf: TrainedClassifier, frames: FrameSet | np.ndarray) -> np.ndarray:
    """Confidence scores in (0, 1), one per frame, in input order."""
    if not isinstance(clf, TrainedClassifier) or clf.best_epoch < 1:
        raise UntrainedClassifierError("score_frames needs a classifier returned by train_classifier")
    x = _as_batch(frames)
    if x.shape[0] == 0:
        return np.zeros(0)
    eps = 1e-12
    return np.clip(1.0 / (1.0 + np.exp(-_logits(clf.model, x))), eps, 1.0 - eps)


# --- random search ---------------------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    learning_rate: tuple[float, float] = (1e-5, 1e-3)
    channel_multiplier: tuple[int, ...] = (8, 16, 32)
    dropout_rate: tuple[float, float] = (0.0, 0.5)
    budget: int = 10
    seed: int = 0
    n_conv_blocks: int = 4
    fc_units: int = 64

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        lo, hi = self.learning_rate
        if not 0 < lo <= hi:
            raise ValueError("learning_rate range must be positive and ordered")
        if not self.channel_multiplier:
            raise ValueError("channel_multiplier set is empty")
        object.__setattr__(self, "learning_rate", (float(lo), float(hi)))
        object.__setattr__(self, "channel_multiplier", tuple(int(c) for c in self.channel_multiplier))
        object.__setattr__(self, "dropout_rate", tuple(float(v) for v in self.dropout_rate))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SearchSpace:
        known = {f.name for f in fields(cls)}
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in known})

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def sample_trials(space: SearchSpace) -> list[tuple[ClassifierSpec, int]]:
    """The seeded sequence of (spec, training seed) pairs a search will run."""
    rng = np.random.default_rng(space.seed)
    log_lo, log_hi = math.log(space.learning_rate[0]), math.log(space.learning_rate[1])
    trials = []
    for _ in range(space.budget):
        lr = math.exp(rng.uniform(log_lo, log_hi))
        mult = int(space.channel_multiplier[rng.integers(len(space.channel_multiplier))])
        dropout = float(rng.uniform(*space.dropout_rate))
        seed = int(rng.integers(2**31 - 1))
        spec = ClassifierSpec(mult, dropout, space.n_conv_blocks, lr, space.fc_units)
        trials.append((spec, seed))
    return trials


@dataclass
class SearchResult:
    best_spec: ClassifierSpec
    classifier: TrainedClassifier
    best_val_accuracy: float
    trials: list[dict[str, Any]] = field(default_factory=list)


def random_search(
    space: SearchSpace,
    train: FrameSet,
    val: FrameSet,
    aug: AugmentationConfig,
    *,
    epochs: int = 10,
    batch_size: int = 32,
    trials_path: str | Path | None = None,
) -> SearchResult:
    best: SearchResult | None = None
    log_rows = []
    for i, (spec, seed) in enumerate(sample_trials(space)):
        clf, acc = train_classifier(train, val, spec, aug, seed, epochs=epochs, batch_size=batch_size)
        log_rows.append({"trial": i, "seed": seed, "spec": asdict(spec), "val_accuracy": acc, "best_epoch": clf.best_epoch})
        log.info("search trial %d: %s val_acc=%.4f", i, spec, acc)
        if best is None or acc > best.best_val_accuracy:
            best = SearchResult(spec, clf, acc)
    best.trials = log_rows
    if trials_path is not None:
        write_jsonl(trials_path, log_rows)
    return best


# --- ROC / AUC -------------------------------------------------------------


@dataclass
class RocResult:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "auc": self.auc,
            "thresholds": [t if math.isfinite(t) else None for t in self.thresholds.tolist()],
            "tpr": self.tpr.tolist(),
            "fpr": self.fpr.tolist(),
        }


def auc_roc(scores: Sequence[float], labels: Sequence[int]) -> RocResult:
    """ROC curve and its area via the Mann-Whitney statistic (ties count half).

    The curve starts at (0, 0) with an infinite threshold and steps through
    the distinct scores in decreasing order, so its trapezoidal area equals
    the returned AUC.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and aligned")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary (0/1)")
    y = y.astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUC needs at least one positive and one negative label")

    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    auc = float(u / (n_pos * n_neg))

    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    thresholds = np.r_[np.inf, s_sorted[last]]
    tpr = np.r_[0, tp[last]] / n_pos
    fpr = np.r_[0, fp[last]] / n_neg
    return RocResult(thresholds, tpr, fpr, auc)


def accuracy_at(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> float:
    s = np.asarray(scores)
    y = np.asarray(labels).astype(bool)
    return float(((s > threshold) == y).mean())
