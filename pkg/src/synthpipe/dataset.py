"""Dataset manifests, frame-label rules, preprocessing and ablation sampling.

A manifest is a JSONL file with one object per frame.  Each line carries the
frame's identity plus the fields of its parent video and patient::

    {"patient_id": "p01", "split": "train", "video_id": "p01_v0",
     "video_label": "pos", "frame_id": "p01_v0_f000", "frame_label": "pos",
     "image_path": "images/p01_v0_f000.png"}

A line may omit ``patient_id``, ``split`` and ``video_label`` together, in
which case it attaches to an already-declared video.  An optional first line
``{"_meta": {"split_seed": 7, "source_name": "..."}}`` carries manifest-level
fields.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Literal, Sequence

import numpy as np
from PIL import Image

from .errors import (
    DegenerateFrameError,
    DuplicateIdError,
    HierarchyError,
    InsufficientPatientsError,
    ParseError,
    ShapeError,
)
from .fileio import iter_jsonl, read_spf, write_jsonl, write_spf

log = logging.getLogger(__name__)

Split = Literal["train", "validation", "test"]
Mode = Literal["zscore", "unit_range"]

SPLITS: tuple[str, ...] = ("train", "validation", "test")
MODES: tuple[str, ...] = ("zscore", "unit_range")
DEFAULT_SIZE = 256

_VIDEO_LABELS = {"pos": "positive", "neg": "negative"}
_FRAME_LABELS = {"pos": "positive", "neg": "negative", "none": "unlabeled"}
_VIDEO_CODES = {v: k for k, v in _VIDEO_LABELS.items()}
_FRAME_CODES = {v: k for k, v in _FRAME_LABELS.items()}

_FRAME_KEYS = ("video_id", "frame_id", "frame_label", "image_path")
_PARENT_KEYS = ("patient_id", "split", "video_label")


@dataclass(slots=True)
class FrameRecord:
    frame_id: str
    image_path: str
    frame_label: str  # positive | negative | unlabeled


@dataclass(slots=True)
class VideoRecord:
    video_id: str
    video_label: str  # positive | negative
    frames: list[FrameRecord] = field(default_factory=list)


@dataclass(slots=True)
class PatientRecord:
    patient_id: str
    split: str
    videos: list[VideoRecord] = field(default_factory=list)

    @property
    def label(self) -> str:
        """A patient is positive when any of their videos is positive."""
        if any(v.video_label == "positive" for v in self.videos):
            return "positive"
        return "negative"


@dataclass
class DatasetManifest:
    patients: list[PatientRecord] = field(default_factory=list)
    split_seed: int = 0
    source_name: str = ""

    def iter_frames(self) -> Iterator[tuple[PatientRecord, VideoRecord, FrameRecord]]:
        for p in self.patients:
            for v in p.videos:
                for f in v.frames:
                    yield p, v, f

    def patients_in(self, split: str) -> list[PatientRecord]:
        return [p for p in self.patients if p.split == split]

    def patient_ids(self, split: str | None = None) -> set[str]:
        return {p.patient_id for p in self.patients if split is None or p.split == split}

    def frame_index(self) -> dict[str, tuple[PatientRecord, VideoRecord, FrameRecord]]:
        return {f.frame_id: (p, v, f) for p, v, f in self.iter_frames()}

    def tally(self) -> dict[str, dict[str, dict[str, int]]]:
        """Per split: patient, video and frame counts by class (Table-1 layout).

        Frames are counted under their video's label.
        """
        out = {
            s: {k: {"negative": 0, "positive": 0} for k in ("patients", "videos", "frames")}
            for s in SPLITS
        }
        for p in self.patients:
            t = out[p.split]
            t["patients"][p.label] += 1
            for v in p.videos:
                t["videos"][v.video_label] += 1
                t["frames"][v.video_label] += len(v.frames)
        return out


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    patients: dict[str, PatientRecord] = {}
    videos: dict[str, tuple[str, VideoRecord]] = {}
    frame_ids: set[str] = set()
    meta: dict[str, Any] = {}

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ParseError(f"{path}:{lineno}: expected a JSON object")
            if "_meta" in rec:
                meta.update(rec["_meta"])
                continue
            _add_line(rec, f"{path}:{lineno}", patients, videos, frame_ids)

    return DatasetManifest(
        patients=list(patients.values()),
        split_seed=int(meta.get("split_seed", 0)),
        source_name=str(meta.get("source_name", path.stem)),
    )


def _add_line(rec, where, patients, videos, frame_ids) -> None:
    missing = [k for k in _FRAME_KEYS if k not in rec]
    if missing:
        raise ParseError(f"{where}: missing keys {missing}")
    present = [k for k in _PARENT_KEYS if k in rec]
    if present and len(present) != len(_PARENT_KEYS):
        raise ParseError(f"{where}: keys {_PARENT_KEYS} must appear together")
    if rec["frame_label"] not in _FRAME_LABELS:
        raise ParseError(f"{where}: frame_label must be pos/neg/none, got {rec['frame_label']!r}")

    video_id = rec["video_id"]
    if not video_id:
        raise HierarchyError(f"{where}: frame has no video")

    if present:
        patient_id, split = rec["patient_id"], rec["split"]
        if not patient_id:
            raise HierarchyError(f"{where}: video {video_id!r} has no patient")
        if split not in SPLITS:
            raise ParseError(f"{where}: split must be one of {SPLITS}, got {split!r}")
        if rec["video_label"] not in _VIDEO_LABELS:
            raise ParseError(f"{where}: video_label must be pos/neg, got {rec['video_label']!r}")
        video_label = _VIDEO_LABELS[rec["video_label"]]

        patient = patients.get(patient_id)
        if patient is None:
            patient = patients[patient_id] = PatientRecord(patient_id, split)
        elif patient.split != split:
            raise HierarchyError(
                f"{where}: patient {patient_id!r} assigned to both {patient.split!r} and {split!r}"
            )
        if video_id in videos:
            owner, video = videos[video_id]
            if owner != patient_id:
                raise HierarchyError(
                    f"{where}: video {video_id!r} belongs to both {owner!r} and {patient_id!r}"
                )
            if video.video_label != video_label:
                raise HierarchyError(f"{where}: conflicting labels for video {video_id!r}")
        else:
            video = VideoRecord(video_id, video_label)
            videos[video_id] = (patient_id, video)
            patient.videos.append(video)
    else:
        if video_id not in videos:
            raise HierarchyError(f"{where}: frame refers to unknown video {video_id!r}")
        _, video = videos[video_id]

    frame_id = rec["frame_id"]
    if frame_id in frame_ids:
        raise DuplicateIdError(f"{where}: duplicate frame_id {frame_id!r}")
    frame_label = _FRAME_LABELS[rec["frame_label"]]
    if video.video_label == "negative" and frame_label == "positive":
        raise HierarchyError(f"{where}: positive frame {frame_id!r} inside negative video")
    frame_ids.add(frame_id)
    video.frames.append(FrameRecord(frame_id, str(rec["image_path"]), frame_label))


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    def lines():
        yield {"_meta": {"split_seed": manifest.split_seed, "source_name": manifest.source_name}}
        for p, v, f in manifest.iter_frames():
            yield {
                "patient_id": p.patient_id,
                "split": p.split,
                "video_id": v.video_id,
                "video_label": _VIDEO_CODES[v.video_label],
                "frame_id": f.frame_id,
                "frame_label": _FRAME_CODES[f.frame_label],
                "image_path": f.image_path,
            }

    write_jsonl(path, lines())


def derive_frame_labels(manifest: DatasetManifest) -> dict[str, str]:
    """Map every frame to positive, negative or excluded.

    Positive frames come only from positive videos and must be annotated
    positive; every frame of a negative video is negative; anything else in a
    positive video is excluded.
    """
    labels: dict[str, str] = {}
    for _, v, f in manifest.iter_frames():
        if v.video_label == "negative":
            labels[f.frame_id] = "negative"
        elif f.frame_label == "positive":
            labels[f.frame_id] = "positive"
        else:
            labels[f.frame_id] = "excluded"
    return labels


# --- preprocessing ---------------------------------------------------------


@dataclass(frozen=True)
class CropSpec:
    """Fixed crop rectangle plus mask rectangles given relative to the crop.

    Mask rectangles are ``(top, left, height, width)`` tuples.
    """

    top: int
    left: int
    height: int
    width: int
    mask_regions: tuple[tuple[int, int, int, int], ...] = ()

    def __post_init__(self):
        if self.top < 0 or self.left < 0 or self.height <= 0 or self.width <= 0:
            raise ValueError(f"invalid crop rectangle {self}")
        masks = tuple(tuple(int(x) for x in r) for r in self.mask_regions)
        object.__setattr__(self, "mask_regions", masks)
        for t, l, h, w in masks:
            if t < 0 or l < 0 or h <= 0 or w <= 0 or t + h > self.height or l + w > self.width:
                raise ValueError(f"mask region {(t, l, h, w)} does not fit inside the crop")

    @classmethod
    def central(cls, source_shape: Sequence[int], height: int, width: int, mask_regions=()) -> CropSpec:
        sh, sw = source_shape
        if height > sh or width > sw:
            raise ValueError(f"crop {height}x{width} larger than source {sh}x{sw}")
        return cls((sh - height) // 2, (sw - width) // 2, height, width, tuple(mask_regions))

    @classmethod
    def identity(cls, shape: Sequence[int]) -> CropSpec:
        return cls(0, 0, int(shape[0]), int(shape[1]))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CropSpec:
        return cls(
            int(d["top"]),
            int(d["left"]),
            int(d["height"]),
            int(d["width"]),
            tuple(tuple(r) for r in d.get("mask_regions", ())),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "top": self.top,
            "left": self.left,
            "height": self.height,
            "width": self.width,
            "mask_regions": [list(r) for r in self.mask_regions],
        }

    def fits(self, shape: Sequence[int]) -> bool:
        return self.top + self.height <= shape[0] and self.left + self.width <= shape[1]


@dataclass
class PreprocessedFrame:
    pixels: np.ndarray  # (H, W) float32
    provenance: str  # source frame_id, or a synthetic tag
    label: str  # positive | negative
    synthetic: bool = False
    patient_id: str | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape == (size, size):
        return np.asarray(img, dtype=np.float64).copy()
    pil = Image.fromarray(np.asarray(img, dtype=np.float32), mode="F")
    return np.asarray(pil.resize((size, size), Image.BILINEAR), dtype=np.float64)


def normalize_pixels(pixels: np.ndarray, mode: str) -> np.ndarray:
    """Per-frame normalization.

    ``zscore`` gives zero mean and unit std; ``unit_range`` maps the 1st..99th
    percentile onto [-1, 1] and clips.  Both are invariant to positive affine
    changes of the input, so a frame can be moved between modes without
    going back to the raw image.
    """
    x = np.asarray(pixels, dtype=np.float64)
    if mode == "zscore":
        sd = x.std()
        if sd < 1e-8:
            raise DegenerateFrameError(f"frame has near-zero variance (std={sd:.3g})")
        return ((x - x.mean()) / sd).astype(np.float32)
    if mode == "unit_range":
        lo, hi = np.percentile(x, [1.0, 99.0])
        if hi - lo < 1e-12:
            lo, hi = x.min(), x.max()
        if hi - lo < 1e-12:
            return np.zeros(x.shape, dtype=np.float32)
        y = 2.0 * (x - lo) / (hi - lo) - 1.0
        return np.clip(y, -1.0, 1.0).astype(np.float32)
    raise ValueError(f"unknown normalization mode {mode!r}")


def preprocess_pixels(raw: np.ndarray, spec: CropSpec, mode: str, size: int = DEFAULT_SIZE) -> np.ndarray:
    """Crop, mask, resize (bilinear) and normalize one grayscale frame."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise ShapeError(f"expected a 2-D grayscale frame, got shape {raw.shape}")
    if not spec.fits(raw.shape):
        raise ShapeError(f"crop {spec} does not fit a {raw.shape[0]}x{raw.shape[1]} frame")
    crop = raw[spec.top:spec.top + spec.height, spec.left:spec.left + spec.width].copy()
    if spec.mask_regions:
        fill = crop.min()
        for t, l, h, w in spec.mask_regions:
            crop[t:t + h, l:l + w] = fill
    return normalize_pixels(resize_bilinear(crop, size), mode)


def preprocess_frame(
    raw: np.ndarray,
    spec: CropSpec,
    mode: str,
    *,
    frame_id: str = "",
    label: str = "negative",
    patient_id: str | None = None,
    size: int = DEFAULT_SIZE,
) -> PreprocessedFrame:
    return PreprocessedFrame(preprocess_pixels(raw, spec, mode, size), frame_id, label, patient_id=patient_id)


def read_grayscale(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


# --- frame collections -----------------------------------------------------


@dataclass
class FrameSet:
    frames: list[PreprocessedFrame] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[PreprocessedFrame]:
        return iter(self.frames)

    @property
    def class_counts(self) -> dict[str, int]:
        counts = {"negative": 0, "positive": 0}
        for f in self.frames:
            counts[f.label] += 1
        return counts

    @property
    def ids(self) -> list[str]:
        return [f.provenance for f in self.frames]

    @property
    def patient_ids(self) -> set[str]:
        return {f.patient_id for f in self.frames if f.patient_id is not None}

    def stack(self) -> np.ndarray:
        """Pixels as an (N, H, W) float32 array."""
        if not self.frames:
            raise ValueError("cannot stack an empty FrameSet")
        return np.stack([f.pixels for f in self.frames]).astype(np.float32, copy=False)

    def labels(self) -> np.ndarray:
        return np.array([f.label == "positive" for f in self.frames], dtype=np.int64)

    def of_class(self, label: str) -> FrameSet:
        return FrameSet([f for f in self.frames if f.label == label])

    def renormalized(self, mode: str) -> FrameSet:
        return FrameSet([
            PreprocessedFrame(normalize_pixels(f.pixels, mode), f.provenance, f.label, f.synthetic, f.patient_id)
            for f in self.frames
        ])

    def __add__(self, other: FrameSet) -> FrameSet:
        return FrameSet(self.frames + other.frames)


class FrameStore:
    """Loads and caches preprocessed frames of one manifest."""

    def __init__(
        self,
        manifest: DatasetManifest,
        crop: CropSpec | None = None,
        *,
        root: str | Path = ".",
        mode: str = "zscore",
        size: int = DEFAULT_SIZE,
    ):
        self.manifest = manifest
        self.crop = crop
        self.root = Path(root)
        self.mode = mode
        self.size = size
        self._index = manifest.frame_index()
        self._cache: dict[str, np.ndarray] = {}

    def pixels(self, frame_id: str) -> np.ndarray:
        px = self._cache.get(frame_id)
        if px is None:
            _, _, rec = self._index[frame_id]
            raw = read_grayscale(self.root / rec.image_path)
            crop = self.crop or CropSpec.identity(raw.shape)
            px = self._cache[frame_id] = preprocess_pixels(raw, crop, self.mode, self.size)
        return px

    def frame(self, frame_id: str, label: str) -> PreprocessedFrame:
        patient = self._index[frame_id][0]
        return PreprocessedFrame(self.pixels(frame_id), frame_id, label, patient_id=patient.patient_id)

    def frameset(self, frame_labels: Sequence[tuple[str, str]]) -> FrameSet:
        return FrameSet([self.frame(fid, lab) for fid, lab in frame_labels])

    def split(self, split: str) -> FrameSet:
        """All labelled frames of one split, in manifest order."""
        labels = derive_frame_labels(self.manifest)
        return self.frameset([
            (f.frame_id, labels[f.frame_id])
            for p, _, f in self.manifest.iter_frames()
            if p.split == split and labels[f.frame_id] != "excluded"
        ])


# --- ablation sampling -----------------------------------------------------


@dataclass
class AblationSelection:
    patient_ids: list[str]
    frames: list[tuple[str, str]]  # (frame_id, label), manifest order

    @property
    def class_counts(self) -> dict[str, int]:
        counts = {"negative": 0, "positive": 0}
        for _, lab in self.frames:
            counts[lab] += 1
        return counts


def _allocate(count: int, n_pos: int, n_neg: int) -> tuple[int, int]:
    # proportional allocation by largest remainder, at least one patient per class
    total = n_pos + n_neg
    exact_pos = count * n_pos / total
    k_pos = int(exact_pos)
    k_neg = int(count * n_neg / total)
    if k_pos + k_neg < count:
        if exact_pos - k_pos >= count * n_neg / total - k_neg:
            k_pos += 1
        else:
            k_neg += 1
    if k_pos == 0:
        k_pos, k_neg = 1, k_neg - 1
    elif k_neg == 0:
        k_pos, k_neg = k_pos - 1, 1
    return k_pos, k_neg


def select_ablation_frames(manifest: DatasetManifest, patient_count: int, replicate_seed: int) -> AblationSelection:
    """Choose training patients and a class-balanced frame list.

    Patients are drawn without replacement from the positive-patient and
    negative-patient pools of the training split, in proportion to the pool
    sizes (at least one from each).  The majority frame class is then
    downsampled uniformly at random to the minority count.
    """
    train = sorted(manifest.patients_in("train"), key=lambda p: p.patient_id)
    pos_pool = [p for p in train if p.label == "positive"]
    neg_pool = [p for p in train if p.label == "negative"]
    if not pos_pool or not neg_pool:
        raise InsufficientPatientsError("training split needs both positive and negative patients")
    if patient_count < 2 or patient_count > len(train):
        raise InsufficientPatientsError(
            f"patient_count={patient_count} outside [2, {len(train)}] available training patients"
        )

    k_pos, k_neg = _allocate(patient_count, len(pos_pool), len(neg_pool))
    rng = np.random.default_rng(replicate_seed)
    chosen = [pos_pool[i] for i in sorted(rng.choice(len(pos_pool), k_pos, replace=False))]
    chosen += [neg_pool[i] for i in sorted(rng.choice(len(neg_pool), k_neg, replace=False))]
    chosen_ids = {p.patient_id for p in chosen}

    labels = derive_frame_labels(manifest)
    pos_frames, neg_frames = [], []
    for p, _, f in manifest.iter_frames():
        if p.patient_id in chosen_ids:
            lab = labels[f.frame_id]
            if lab == "positive":
                pos_frames.append(f.frame_id)
            elif lab == "negative":
                neg_frames.append(f.frame_id)
    if not pos_frames or not neg_frames:
        raise InsufficientPatientsError("sampled patients do not provide frames of both classes")

    if len(pos_frames) > len(neg_frames):
        keep = set(rng.choice(len(pos_frames), len(neg_frames), replace=False).tolist())
        pos_frames = [f for i, f in enumerate(pos_frames) if i in keep]
    elif len(neg_frames) > len(pos_frames):
        keep = set(rng.choice(len(neg_frames), len(pos_frames), replace=False).tolist())
        neg_frames = [f for i, f in enumerate(neg_frames) if i in keep]

    keep_label = {fid: "positive" for fid in pos_frames}
    keep_label.update({fid: "negative" for fid in neg_frames})
    ordered = [(f.frame_id, keep_label[f.frame_id]) for _, _, f in manifest.iter_frames() if f.frame_id in keep_label]
    return AblationSelection(sorted(chosen_ids), ordered)


def sample_ablation_subset(
    manifest: DatasetManifest, patient_count: int, replicate_seed: int, store: FrameStore
) -> FrameSet:
    selection = select_ablation_frames(manifest, patient_count, replicate_seed)
    return store.frameset(selection.frames)


# --- preprocessed-frame directories -----------------------------------------


def preprocess_manifest(
    manifest: DatasetManifest,
    crop: CropSpec | None,
    mode: str,
    out_dir: str | Path,
    *,
    root: str | Path = ".",
    size: int = DEFAULT_SIZE,
    splits: Sequence[str] | None = None,
    workers: int = 1,
) -> int:
    """Write every labelled frame as ``<frame_id>.spf`` plus ``index.jsonl``.

    Returns the number of frames written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = Path(root)
    labels = derive_frame_labels(manifest)
    todo = [
        (p, f)
        for p, _, f in manifest.iter_frames()
        if labels[f.frame_id] != "excluded" and (splits is None or p.split in splits)
    ]

    def work(item):
        p, f = item
        raw = read_grayscale(root / f.image_path)
        px = preprocess_pixels(raw, crop or CropSpec.identity(raw.shape), mode, size)
        write_spf(out / f"{f.frame_id}.spf", px)
        return {
            "frame_id": f.frame_id,
            "label": labels[f.frame_id],
            "patient_id": p.patient_id,
            "split": p.split,
            "file": f"{f.frame_id}.spf",
            "mode": mode,
        }

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            index = list(pool.map(work, todo))
    else:
        index = [work(item) for item in todo]
    write_jsonl(out / "index.jsonl", index)
    log.info("wrote %d preprocessed frames to %s", len(index), out)
    return len(index)


def load_frame_dir(path: str | Path, split: str | None = None, label: str | None = None) -> FrameSet:
    """Read a directory written by :func:`preprocess_manifest` (or ``generate``)."""
    path = Path(path)
    frames = []
    for rec in iter_jsonl(path / "index.jsonl"):
        if split is not None and rec.get("split") != split:
            continue
        if label is not None and rec["label"] != label:
            continue
        frames.append(PreprocessedFrame(
            read_spf(path / rec["file"]),
            rec["frame_id"],
            rec["label"],
            synthetic=bool(rec.get("synthetic", False)),
            patient_id=rec.get("patient_id"),
        ))
    return FrameSet(frames)


def write_frame_dir(frames: FrameSet, out_dir: str | Path, mode: str, split: str | None = None) -> int:
    """Write a FrameSet in the layout read by :func:`load_frame_dir`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i, f in enumerate(frames):
        name = f"{i:07d}.spf" if f.synthetic else f"{f.provenance}.spf"
        write_spf(out / name, f.pixels)
        rec = {"frame_id": f.provenance, "label": f.label, "patient_id": f.patient_id, "split": split, "file": name, "mode": mode}
        if f.synthetic:
            rec["synthetic"] = True
        index.append(rec)
    write_jsonl(out / "index.jsonl", index)
    return len(index)
