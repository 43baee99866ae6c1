"""Procedural ultrasound-like dataset with exact consolidation labels.

Each image is a curvilinear fan with a bright pleural arc, fainter
reverberation arcs and rib shadows, all modulated by multiplicative speckle.
Positive frames carry one to three bright elliptical blobs below the pleural
arc.  Raw frames include scanner-style side bars and a burned-in text patch,
and a matching ``crop_spec.toml`` is written next to the manifest.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .dataset import CropSpec, DatasetManifest, FrameRecord, PatientRecord, VideoRecord, write_manifest
from .errors import SynthPipeError
from .fileio import write_toml

log = logging.getLogger(__name__)

_VIDEO_STREAM = 1 << 40


@dataclass(frozen=True)
class SurrogateSpec:
    image_size: int = 64
    n_patients: int = 24
    videos_per_patient: int = 2
    frames_per_video: int = 12
    positive_fraction: float = 0.5
    seed: int = 0
    blob_intensity: float = 0.8
    speckle_grain: float = 1.0
    annotated_fraction: float = 0.85  # share of frames in a positive video that show a blob
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError("positive_fraction must be in [0, 1]")
        if not 0.0 <= self.annotated_fraction <= 1.0:
            raise ValueError("annotated_fraction must be in [0, 1]")
        for name in ("image_size", "n_patients", "videos_per_patient", "frames_per_video"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        fr = tuple(float(x) for x in self.split_fractions)
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError("split_fractions must be three non-negative numbers summing to 1")
        object.__setattr__(self, "split_fractions", fr)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SurrogateSpec:
        d = dict(d.get("surrogate", d))
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        return cls(**d)

    @property
    def padding(self) -> tuple[int, int]:
        return self.image_size // 8, self.image_size // 4

    @property
    def raw_shape(self) -> tuple[int, int]:
        pv, ph = self.padding
        return self.image_size + 2 * pv, self.image_size + 2 * ph

    def crop_spec(self) -> CropSpec:
        s = self.image_size
        text = (0, 0, max(2, s // 10), max(4, s // 4))
        return CropSpec.central(self.raw_shape, s, s, mask_regions=(text,))


@dataclass
class _VideoGeometry:
    apex_x: float
    half_angle: float
    pleura_r: float
    rib_angles: tuple[float, float]
    blobs: list[tuple[float, float, float, float, float]] = field(default_factory=list)


def _video_geometry(rng: np.random.Generator, positive: bool) -> _VideoGeometry:
    pleura_r = rng.uniform(0.38, 0.46)
    geo = _VideoGeometry(
        apex_x=0.5 + rng.uniform(-0.04, 0.04),
        half_angle=rng.uniform(0.55, 0.68),
        pleura_r=pleura_r,
        rib_angles=(-rng.uniform(0.3, 0.45), rng.uniform(0.3, 0.45)),
    )
    if positive:
        for _ in range(int(rng.integers(1, 4))):
            geo.blobs.append((
                pleura_r + rng.uniform(0.12, 0.38),  # radius from apex
                rng.uniform(-0.3, 0.3),  # angle from vertical
                rng.uniform(0.07, 0.12),  # semi-axes
                rng.uniform(0.045, 0.08),
                rng.uniform(0.0, math.pi),
            ))
    return geo


def render_frame(
    spec: SurrogateSpec, geo: _VideoGeometry, rng: np.random.Generator, with_blob: bool
) -> np.ndarray:
    """One raw frame (uint8, ``spec.raw_shape``)."""
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / s
    ax = geo.apex_x + rng.normal(0, 0.005)
    ay = -0.15
    r = np.hypot(xx - ax, yy - ay)
    theta = np.arctan2(xx - ax, yy - ay)

    edge = np.clip((geo.half_angle - np.abs(theta)) / 0.12, 0.0, 1.0)
    fan = edge * (r > 0.18) * (r < 1.2)

    pr = geo.pleura_r + rng.normal(0, 0.006)
    img = 0.28 * np.exp(-0.8 * r)
    img += 0.85 * np.exp(-(((r - pr) / 0.02) ** 2))
    gap = pr - 0.18
    for k in (1, 2):
        img += (0.3 / k) * np.exp(-(((r - pr - k * gap) / 0.018) ** 2))
    for rib in geo.rib_angles:
        shadow = np.exp(-(((theta - rib) / 0.06) ** 2)) * (r > pr - 0.04)
        img *= 1.0 - 0.75 * shadow

    if with_blob:
        for br, bt, a, b, rot in geo.blobs:
            bx = ax + br * math.sin(bt) + rng.normal(0, 0.006)
            by = ay + br * math.cos(bt) + rng.normal(0, 0.006)
            c, sn = math.cos(rot), math.sin(rot)
            u = ((xx - bx) * c + (yy - by) * sn) / a
            v = (-(xx - bx) * sn + (yy - by) * c) / b
            d = np.sqrt(u * u + v * v)
            profile = 1.0 / (1.0 + np.exp((d - 1.0) / 0.12))
            img += spec.blob_intensity * profile * (0.75 + 0.25 * np.cos(3.0 * d))

    noise = gaussian_filter(rng.exponential(1.0, (s, s)), spec.speckle_grain)
    speckle = np.clip(1.0 + 0.5 * (noise - noise.mean()) / max(noise.std(), 1e-12), 0.05, None)
    img = img * fan * speckle * rng.uniform(0.88, 1.12) + 0.02

    pv, ph = spec.padding
    raw = np.full(spec.raw_shape, 0.12)
    raw[pv:pv + s, ph:ph + s] = np.clip(img, 0.0, 1.0)
    raw[:, : ph // 2] = 0.35
    raw[:, -(ph // 2):] = 0.35
    t, l, h, w = spec.crop_spec().mask_regions[0]
    patch = rng.random((h, w)) < 0.45
    raw[pv + t:pv + t + h, ph + l:ph + l + w] = np.where(patch, 0.95, 0.0)
    return np.round(np.clip(raw, 0.0, 1.0) * 255.0).astype(np.uint8)


def _stratified_splits(ids: list[str], fractions, rng: np.random.Generator) -> dict[str, str]:
    order = rng.permutation(len(ids))
    n = len(ids)
    b1 = int(round(fractions[0] * n))
    b2 = int(round((fractions[0] + fractions[1]) * n))
    out = {}
    for rank, i in enumerate(order):
        out[ids[i]] = "train" if rank < b1 else ("validation" if rank < b2 else "test")
    return out


def build_manifest(spec: SurrogateSpec) -> tuple[DatasetManifest, dict[str, tuple[_VideoGeometry, bool, int]]]:
    """Lay out the patient/video/frame hierarchy without rendering pixels.

    Returns the manifest and, per frame id, its video geometry, whether a
    blob is drawn, and its global frame index (the RNG stream key).
    """
    n_pos = int(round(spec.positive_fraction * spec.n_patients))
    ids = [f"p{i:04d}" for i in range(spec.n_patients)]
    pos_ids, neg_ids = ids[:n_pos], ids[n_pos:]
    split_rng = np.random.default_rng([spec.seed, 7])
    splits = _stratified_splits(pos_ids, spec.split_fractions, split_rng)
    splits.update(_stratified_splits(neg_ids, spec.split_fractions, split_rng))

    n_pos_videos = math.ceil(spec.videos_per_patient / 2)
    render: dict[str, tuple[_VideoGeometry, bool, int]] = {}
    patients = []
    frame_index = 0
    video_index = 0
    for pid in ids:
        patient = PatientRecord(pid, splits[pid])
        for v in range(spec.videos_per_patient):
            positive = pid in pos_ids and v < n_pos_videos
            vrng = np.random.default_rng([spec.seed, _VIDEO_STREAM + video_index])
            geo = _video_geometry(vrng, positive)
            video = VideoRecord(f"{pid}_v{v}", "positive" if positive else "negative")
            for f in range(spec.frames_per_video):
                fid = f"{pid}_v{v}_f{f:03d}"
                blob = positive and vrng.random() < spec.annotated_fraction
                label = "positive" if blob else ("unlabeled" if positive else "negative")
                video.frames.append(FrameRecord(fid, f"images/{fid}.png", label))
                render[fid] = (geo, blob, frame_index)
                frame_index += 1
            patient.videos.append(video)
            video_index += 1
        patients.append(patient)
    manifest = DatasetManifest(patients, split_seed=spec.seed, source_name=f"surrogate-{spec.seed}")
    return manifest, render


def generate_surrogate(spec: SurrogateSpec, out_dir: str | Path, workers: int = 1) -> DatasetManifest:
    """Render the dataset to ``out_dir`` (PNGs, ``manifest.jsonl``, ``crop_spec.toml``)."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SynthPipeError(f"cannot create output directory {out}: {exc}") from exc

    manifest, render = build_manifest(spec)

    def work(item):
        fid, (geo, blob, idx) = item
        rng = np.random.default_rng([spec.seed, idx])
        Image.fromarray(render_frame(spec, geo, rng, blob), mode="L").save(out / "images" / f"{fid}.png")

    items = list(render.items())
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(work, items))
    else:
        for item in items:
            work(item)

    write_manifest(manifest, out / "manifest.jsonl")
    write_toml(out / "crop_spec.toml", {"crop": spec.crop_spec().to_dict()})
    meta = asdict(spec)
    meta["split_fractions"] = list(spec.split_fractions)
    write_toml(out / "surrogate_spec.toml", {"surrogate": meta})
    log.info("surrogate: %d frames in %s", len(items), out)
    return manifest


def blob_region_score(pixels: np.ndarray) -> float:
    """Mean intensity of the zone below the pleural arc where blobs are drawn.

    Works on cropped frames at any resolution; used as the threshold-classifier
    oracle for separability checks.
    """
    s = pixels.shape[0]
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / s
    r = np.hypot(xx - 0.5, yy + 0.15)
    theta = np.arctan2(xx - 0.5, yy + 0.15)
    zone = (r > 0.55) & (r < 0.85) & (np.abs(theta) < 0.35)
    return float(pixels[zone].mean())
