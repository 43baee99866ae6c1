"""Deep convolutional GAN for single-channel square images.

Image batches cross the public API channels-last, ``(B, S, S, 1)``, so the
generator's output feeds the discriminator without reshaping.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import FrameSet, PreprocessedFrame, normalize_pixels
from .errors import DegenerateFrameError, DivergenceError, EmptyDatasetError, ShapeError
from .fileio import read_toml, write_jsonl, write_toml
from .utils import seeded

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeneratorSpec:
    latent_dim: int = 100
    base_channels: int = 512
    n_upsample_stages: int = 6

    @property
    def output_size(self) -> int:
        return 4 * 2 ** self.n_upsample_stages

    @classmethod
    def for_size(cls, size: int, **kw) -> GeneratorSpec:
        n = int(round(math.log2(size / 4)))
        if 4 * 2 ** n != size:
            raise ValueError(f"output size {size} is not 4 * 2^n")
        return cls(n_upsample_stages=n, **kw)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> GeneratorSpec:
        d = dict(d)
        size = d.pop("output_size", None)
        if size is not None and "n_upsample_stages" not in d:
            return cls.for_size(size, **d)
        spec = cls(**d)
        if size is not None and size != spec.output_size:
            raise ValueError(f"output_size {size} inconsistent with {spec.n_upsample_stages} stages")
        return spec

    def to_dict(self) -> dict[str, Any]:
        return {**asdict(self), "output_size": self.output_size}


@dataclass(frozen=True)
class DiscriminatorSpec:
    base_channels: int = 512
    n_downsample_stages: int = 6
    dropout_rate: float = 0.25
    leaky_slope: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def input_size(self) -> int:
        return 4 * 2 ** self.n_downsample_stages

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DiscriminatorSpec:
        return cls(**{k: v for k, v in d.items() if k != "input_size"})

    def to_dict(self) -> dict[str, Any]:
        return {**asdict(self), "input_size": self.input_size}


@dataclass(frozen=True)
class GanTrainingConfig:
    batch_size: int = 16
    lr_generator: float = 1e-5
    lr_discriminator: float = 5e-6
    epochs: int = 100
    seed: int = 0
    checkpoint_every: int = 1
    eval_sample_count: int = 2000
    beta1: float = 0.5
    beta2: float = 0.999
    deterministic: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1 or self.checkpoint_every < 1:
            raise ValueError("epochs and checkpoint_every must be at least 1")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> GanTrainingConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(m.weight, 0.0, 0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.BatchNorm2d):
        nn.init.normal_(m.weight, 1.0, 0.02)
        nn.init.zeros_(m.bias)


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        c = spec.base_channels
        layers: list[nn.Module] = [
            nn.ConvTranspose2d(spec.latent_dim, c, 4, 1, 0, bias=False),
            nn.BatchNorm2d(c),
            nn.ReLU(True),
        ]
        for i in range(spec.n_upsample_stages):
            last = i == spec.n_upsample_stages - 1
            out = 1 if last else max(c // 2, 1)
            layers.append(nn.ConvTranspose2d(c, out, 4, 2, 1, bias=last))
            if not last:
                layers += [nn.BatchNorm2d(out), nn.ReLU(True)]
            c = out
        layers.append(nn.Tanh())
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = self.net(z.reshape(z.shape[0], self.spec.latent_dim, 1, 1))
        return x.permute(0, 2, 3, 1)


class Discriminator(nn.Module):
    """Strided-conv classifier returning one logit per image."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        n = spec.n_downsample_stages
        layers: list[nn.Module] = []
        c_in = 1
        for i in range(n):
            out = max(spec.base_channels // 2 ** (n - 1 - i), 1)
            layers.append(nn.Conv2d(c_in, out, 4, 2, 1, bias=False))
            if i > 0:
                layers.append(nn.BatchNorm2d(out))
            layers += [nn.LeakyReLU(spec.leaky_slope, True), nn.Dropout(spec.dropout_rate)]
            c_in = out
        layers.append(nn.Conv2d(c_in, 1, 4, 1, 0))
        self.net = nn.Sequential(*layers)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.net(images.permute(0, 3, 1, 2)).flatten()


def build_models(g: GeneratorSpec, d: DiscriminatorSpec, seed: int = 0) -> tuple[Generator, Discriminator]:
    if g.output_size != d.input_size:
        raise ShapeError(f"generator emits {g.output_size}px but discriminator expects {d.input_size}px")
    with seeded(seed, deterministic=False):
        gen, disc = Generator(g), Discriminator(d)
        gen.apply(_init_weights)
        disc.apply(_init_weights)
    return gen, disc


def generator_forward(z_batch: torch.Tensor | np.ndarray, generator: Generator) -> torch.Tensor:
    """Inference-mode generator pass: ``(B, latent_dim)`` -> ``(B, S, S, 1)`` in [-1, 1]."""
    z = torch.as_tensor(z_batch)
    if z.ndim != 2 or z.shape[1] != generator.spec.latent_dim:
        raise ShapeError(f"expected latent batch (B, {generator.spec.latent_dim}), got {tuple(z.shape)}")
    dtype = next(generator.parameters()).dtype
    generator.eval()
    with torch.no_grad():
        return generator(z.to(dtype))


def discriminator_forward(
    images: torch.Tensor | np.ndarray, discriminator: Discriminator, training: bool = False
) -> torch.Tensor:
    """Real-vs-fake probabilities; dropout is active only when ``training`` is set."""
    x = torch.as_tensor(images)
    s = discriminator.spec.input_size
    if x.ndim != 4 or tuple(x.shape[1:]) != (s, s, 1):
        raise ShapeError(f"expected images (B, {s}, {s}, 1), got {tuple(x.shape)}")
    dtype = next(discriminator.parameters()).dtype
    discriminator.train(training)
    with torch.set_grad_enabled(training):
        logits = discriminator(x.to(dtype))
    eps = torch.finfo(logits.dtype).eps
    return torch.sigmoid(logits).clamp(eps, 1 - eps)


def discriminator_loss(disc: Discriminator, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    lr = disc(real)
    lf = disc(fake)
    return F.binary_cross_entropy_with_logits(lr, torch.ones_like(lr)) + F.binary_cross_entropy_with_logits(
        lf, torch.zeros_like(lf)
    )


def generator_loss(disc: Discriminator, fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating objective: push D(G(z)) towards the 'real' label."""
    lf = disc(fake)
    return F.binary_cross_entropy_with_logits(lf, torch.ones_like(lf))


@dataclass
class GanCheckpoint:
    epoch: int
    generator_params: dict[str, torch.Tensor]
    discriminator_params: dict[str, torch.Tensor]
    config: GanTrainingConfig
    generator_spec: GeneratorSpec
    discriminator_spec: DiscriminatorSpec
    label: str = "positive"
    loss_history: dict[str, list[float]] = field(default_factory=lambda: {"d_loss": [], "g_loss": []})

    def generator(self) -> Generator:
        gen = Generator(self.generator_spec)
        gen.load_state_dict(self.generator_params)
        return gen.eval()

    def discriminator(self) -> Discriminator:
        disc = Discriminator(self.discriminator_spec)
        disc.load_state_dict(self.discriminator_params)
        return disc.eval()

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "epoch": self.epoch,
                "label": self.label,
                "config": asdict(self.config),
                "generator_spec": asdict(self.generator_spec),
                "discriminator_spec": asdict(self.discriminator_spec),
                "generator_params": self.generator_params,
                "discriminator_params": self.discriminator_params,
                "loss_history": self.loss_history,
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> GanCheckpoint:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        return cls(
            epoch=blob["epoch"],
            generator_params=blob["generator_params"],
            discriminator_params=blob["discriminator_params"],
            config=GanTrainingConfig.from_dict(blob["config"]),
            generator_spec=GeneratorSpec.from_dict(blob["generator_spec"]),
            discriminator_spec=DiscriminatorSpec.from_dict(blob["discriminator_spec"]),
            label=blob["label"],
            loss_history=blob["loss_history"],
        )


def _snapshot(module: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _frames_to_tensor(frames: FrameSet, size: int) -> torch.Tensor:
    x = frames.stack()
    if x.shape[1:] != (size, size):
        raise ShapeError(f"frames are {x.shape[1]}x{x.shape[2]} but the GAN works at {size}x{size}")
    if np.abs(x).max() > 1.0 + 1e-6:
        raise ValueError("GAN training frames must be unit_range normalized (values in [-1, 1])")
    return torch.from_numpy(x).unsqueeze(-1)


def checkpoint_epochs(cfg: GanTrainingConfig) -> list[int]:
    """Epochs at which :func:`train_gan` keeps a checkpoint (the last epoch always)."""
    keep = [e for e in range(1, cfg.epochs + 1) if e % cfg.checkpoint_every == 0]
    if not keep or keep[-1] != cfg.epochs:
        keep.append(cfg.epochs)
    return keep


def train_gan(
    frames: FrameSet,
    g: GeneratorSpec,
    d: DiscriminatorSpec,
    cfg: GanTrainingConfig,
    monitor: Callable[[GanCheckpoint], Any] | None = None,
    *,
    label: str | None = None,
    run_dir: str | Path | None = None,
) -> list[GanCheckpoint]:
    """Adversarial training with alternating D and G Adam steps.

    ``monitor`` is called with a snapshot after every epoch.  When
    ``run_dir`` is given, retained checkpoints, ``config.toml`` and
    ``losses.jsonl`` are written there as training proceeds.
    """
    if len(frames) == 0:
        raise EmptyDatasetError("cannot train a GAN on an empty FrameSet")
    if label is None:
        classes = {f.label for f in frames}
        label = classes.pop() if len(classes) == 1 else "mixed"
    data = _frames_to_tensor(frames, g.output_size)
    n = data.shape[0]
    keep = set(checkpoint_epochs(cfg))

    out = Path(run_dir) if run_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_toml(out / "config.toml", {
            "label": label,
            "generator": g.to_dict(),
            "discriminator": d.to_dict(),
            "training": asdict(cfg),
        })
        (out / "losses.jsonl").write_text("")

    gen, disc = build_models(g, d, cfg.seed)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_generator, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_discriminator, betas=(cfg.beta1, cfg.beta2))
    stream = torch.Generator().manual_seed(cfg.seed)
    history: dict[str, list[float]] = {"d_loss": [], "g_loss": []}
    checkpoints: list[GanCheckpoint] = []
    step = 0

    with seeded(cfg.seed + 1, deterministic=cfg.deterministic):
        for epoch in range(1, cfg.epochs + 1):
            gen.train()
            disc.train()
            order = torch.randperm(n, generator=stream)
            step_log = []
            for start in range(0, n, cfg.batch_size):
                real = data[order[start:start + cfg.batch_size]]
                z = torch.randn(real.shape[0], g.latent_dim, generator=stream)

                opt_d.zero_grad()
                fake = gen(z)
                d_loss = discriminator_loss(disc, real, fake.detach())
                d_loss.backward()
                opt_d.step()

                opt_g.zero_grad()
                g_loss = generator_loss(disc, fake)
                g_loss.backward()
                opt_g.step()

                dl, gl = d_loss.item(), g_loss.item()
                if not (math.isfinite(dl) and math.isfinite(gl)):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}: d={dl}, g={gl}")
                history["d_loss"].append(dl)
                history["g_loss"].append(gl)
                step_log.append({"step": step, "epoch": epoch, "d_loss": dl, "g_loss": gl})
                step += 1

            ckpt = GanCheckpoint(
                epoch=epoch,
                generator_params=_snapshot(gen),
                discriminator_params=_snapshot(disc),
                config=cfg,
                generator_spec=g,
                discriminator_spec=d,
                label=label,
                loss_history=copy.deepcopy(history),
            )
            if out is not None:
                write_jsonl(out / "losses.jsonl", step_log, append=True)
            if epoch in keep:
                checkpoints.append(ckpt)
                if out is not None:
                    ckpt.save(out / f"gan_epoch_{epoch}.ckpt")
            log.info("gan[%s] epoch %d: d_loss=%.4f g_loss=%.4f", label, epoch, dl, gl)
            if monitor is not None:
                with torch.random.fork_rng(devices=[]):
                    monitor(ckpt)
    return checkpoints


def load_run(run_dir: str | Path) -> list[GanCheckpoint]:
    """All checkpoints of a run directory, ordered by epoch."""
    paths = sorted(Path(run_dir).glob("gan_epoch_*.ckpt"), key=lambda p: int(p.stem.rsplit("_", 1)[1]))
    return [GanCheckpoint.load(p) for p in paths]


def read_run_config(run_dir: str | Path) -> dict[str, Any]:
    return read_toml(Path(run_dir) / "config.toml")


@dataclass
class SyntheticImageSet:
    images: np.ndarray  # (N, S, S, 1) float32 in [-1, 1]
    label: str
    epoch: int
    seed: int

    def __len__(self) -> int:
        return self.images.shape[0]

    def to_frameset(self, mode: str = "unit_range") -> FrameSet:
        """Tag each image as a synthetic frame, renormalized to ``mode``.

        A collapsed (constant) image maps to all zeros rather than raising.
        """
        frames = []
        for i, img in enumerate(self.images[..., 0]):
            try:
                px = normalize_pixels(img, mode)
            except DegenerateFrameError:
                px = np.zeros(img.shape, dtype=np.float32)
            frames.append(PreprocessedFrame(px, f"synthetic:{self.label}:e{self.epoch}:s{self.seed}:{i}", self.label, True))
        return FrameSet(frames)


def iter_generated(ckpt: GanCheckpoint, count: int, seed: int, batch_size: int = 256) -> Iterator[np.ndarray]:
    """Yield generated batches; the full latent matrix is drawn up front so
    results do not depend on ``batch_size``."""
    if count < 1:
        raise ValueError("count must be at least 1")
    z = torch.randn(count, ckpt.generator_spec.latent_dim, generator=torch.Generator().manual_seed(seed))
    gen = ckpt.generator()
    for start in range(0, count, batch_size):
        yield generator_forward(z[start:start + batch_size], gen).numpy()


def generate_images(ckpt: GanCheckpoint, count: int, seed: int, batch_size: int = 256) -> SyntheticImageSet:
    images = np.concatenate(list(iter_generated(ckpt, count, seed, batch_size)))
    return SyntheticImageSet(images.astype(np.float32, copy=False), ckpt.label, ckpt.epoch, seed)
