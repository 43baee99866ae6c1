import math

import numpy as np
import pytest
import torch

from helpers import finite_difference_check
from synthpipe.dataset import FrameSet, PreprocessedFrame
from synthpipe.dcgan import (
    DiscriminatorSpec,
    GanCheckpoint,
    GanTrainingConfig,
    GeneratorSpec,
    build_models,
    checkpoint_epochs,
    discriminator_forward,
    discriminator_loss,
    generate_images,
    generator_forward,
    generator_loss,
    load_run,
    train_gan,
)
from synthpipe.errors import DivergenceError, EmptyDatasetError, ShapeError

TINY_G = GeneratorSpec(latent_dim=8, base_channels=8, n_upsample_stages=2)
TINY_D = DiscriminatorSpec(base_channels=8, n_downsample_stages=2)


def _frames(n, size=16, seed=0, label="positive"):
    rng = np.random.default_rng(seed)
    return FrameSet([
        PreprocessedFrame(np.tanh(rng.standard_normal((size, size))).astype(np.float32), f"g{i}", label)
        for i in range(n)
    ])


def test_paper_defaults():
    cfg = GanTrainingConfig()
    assert (cfg.batch_size, cfg.lr_generator, cfg.lr_discriminator) == (16, 1e-5, 5e-6)
    assert GeneratorSpec().output_size == 256 and DiscriminatorSpec().input_size == 256
    assert DiscriminatorSpec().dropout_rate == 0.25


def test_dropout_after_each_conv_block():
    _, disc = build_models(GeneratorSpec(), DiscriminatorSpec())
    mods = list(disc.net)
    convs = [i for i, m in enumerate(mods) if isinstance(m, torch.nn.Conv2d)][:-1]
    assert len(convs) == 6
    for i in convs:
        following = mods[i + 1: i + 4]
        assert any(isinstance(m, torch.nn.Dropout) and m.p == 0.25 for m in following)


def test_full_size_generator_shape_and_range():
    gen, disc = build_models(GeneratorSpec(), DiscriminatorSpec(), seed=1)
    z = torch.randn(16, 100)
    out = generator_forward(z, gen)
    assert out.shape == (16, 256, 256, 1)
    assert out.abs().max() <= 1.0
    assert torch.equal(out, generator_forward(z, gen))
    probs = discriminator_forward(out[:4], disc)
    assert probs.shape == (4,) and bool(((probs > 0) & (probs < 1)).all())


def test_shape_errors():
    gen, disc = build_models(TINY_G, TINY_D)
    with pytest.raises(ShapeError):
        generator_forward(torch.randn(2, 9), gen)
    with pytest.raises(ShapeError):
        discriminator_forward(torch.zeros(2, 16, 16), disc)
    with pytest.raises(ShapeError):
        build_models(TINY_G, DiscriminatorSpec(base_channels=8, n_downsample_stages=3))


def test_discriminator_dropout_only_in_training():
    gen, disc = build_models(TINY_G, TINY_D, seed=2)
    x = generator_forward(torch.randn(8, 8), gen)
    assert torch.equal(discriminator_forward(x, disc), discriminator_forward(x, disc))
    torch.manual_seed(0)
    a = discriminator_forward(x, disc, training=True)
    b = discriminator_forward(x, disc, training=True)
    assert not torch.equal(a, b)


def _double_models(seed):
    gen, disc = build_models(TINY_G, DiscriminatorSpec(base_channels=8, n_downsample_stages=2, dropout_rate=0.0), seed)
    return gen.double().train(), disc.double().train()


def test_generator_gradient_matches_finite_differences():
    gen, disc = _double_models(3)
    z = torch.randn(6, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    results = finite_difference_check(lambda: generator_loss(disc, gen(z)), list(gen.parameters()), n_checks=24)
    assert max(r for *_, r in results) < 1e-3


def test_discriminator_gradient_matches_finite_differences():
    gen, disc = _double_models(4)
    g = torch.Generator().manual_seed(1)
    real = torch.rand(6, 16, 16, 1, dtype=torch.float64, generator=g) * 2 - 1
    with torch.no_grad():
        fake = gen(torch.randn(6, 8, dtype=torch.float64, generator=g))
    results = finite_difference_check(lambda: discriminator_loss(disc, real, fake), list(disc.parameters()), n_checks=24)
    assert max(r for *_, r in results) < 1e-3


def test_single_epoch_counting(tmp_path):
    cfg = GanTrainingConfig(epochs=1, batch_size=16, lr_generator=2e-4, lr_discriminator=2e-4)
    ckpts = train_gan(_frames(32), TINY_G, TINY_D, cfg, run_dir=tmp_path)
    assert len(ckpts) == 1
    hist = ckpts[0].loss_history
    assert len(hist["d_loss"]) == len(hist["g_loss"]) == math.ceil(32 / 16)
    assert all(math.isfinite(v) for v in hist["d_loss"] + hist["g_loss"])
    assert (tmp_path / "gan_epoch_1.ckpt").exists() and (tmp_path / "config.toml").exists()
    lines = (tmp_path / "losses.jsonl").read_text().splitlines()
    assert len(lines) == 2 and '"d_loss"' in lines[0]


def test_checkpoint_cadence():
    assert checkpoint_epochs(GanTrainingConfig(epochs=100, checkpoint_every=25)) == [25, 50, 75, 100]
    assert checkpoint_epochs(GanTrainingConfig(epochs=10, checkpoint_every=4)) == [4, 8, 10]


def test_monitor_called_every_epoch_and_determinism(tmp_path):
    cfg = GanTrainingConfig(epochs=3, batch_size=8, lr_generator=2e-4, lr_discriminator=2e-4, checkpoint_every=2, seed=5)
    seen = []
    a = train_gan(_frames(16), TINY_G, TINY_D, cfg, monitor=lambda c: seen.append(c.epoch))
    b = train_gan(_frames(16), TINY_G, TINY_D, cfg)
    assert seen == [1, 2, 3]
    assert [c.epoch for c in a] == [2, 3]
    for k, v in a[-1].generator_params.items():
        assert torch.equal(v, b[-1].generator_params[k])


def test_errors():
    cfg = GanTrainingConfig(epochs=1, lr_generator=1e-3, lr_discriminator=1e-3)
    with pytest.raises(EmptyDatasetError):
        train_gan(FrameSet([]), TINY_G, TINY_D, cfg)
    bad = _frames(4)
    bad.frames[0].pixels[:] = np.nan
    with pytest.raises(DivergenceError):
        train_gan(bad, TINY_G, TINY_D, GanTrainingConfig(epochs=1, batch_size=4))
    with pytest.raises(ValueError):
        train_gan(FrameSet([PreprocessedFrame(np.full((16, 16), 3.0, np.float32), "z", "positive")]), TINY_G, TINY_D, cfg)
    with pytest.raises(ValueError):
        GanTrainingConfig(batch_size=1)


def test_checkpoint_roundtrip_and_generation(tmp_path):
    cfg = GanTrainingConfig(epochs=2, batch_size=8)
    ckpts = train_gan(_frames(16), TINY_G, TINY_D, cfg, label="negative", run_dir=tmp_path)
    loaded = load_run(tmp_path)
    assert [c.epoch for c in loaded] == [1, 2]
    a = generate_images(ckpts[-1], 20, seed=7)
    b = generate_images(loaded[-1], 20, seed=7, batch_size=3)
    assert a.images.shape == (20, 16, 16, 1) and a.label == "negative"
    np.testing.assert_array_equal(a.images, b.images)
    assert np.abs(a.images).max() <= 1.0
    fs = a.to_frameset("zscore")
    assert all(f.synthetic for f in fs) and fs.class_counts["negative"] == 20
    with pytest.raises(ValueError):
        generate_images(ckpts[-1], 0, 0)
    assert isinstance(GanCheckpoint.load(tmp_path / "gan_epoch_2.ckpt"), GanCheckpoint)


def test_positive_and_negative_gans_do_not_share_parameters():
    cfg = GanTrainingConfig(epochs=1, batch_size=8)
    pos = train_gan(_frames(8, seed=1), TINY_G, TINY_D, cfg)[-1]
    neg = train_gan(_frames(8, seed=2, label="negative"), TINY_G, TINY_D, cfg)[-1]
    assert pos.label == "positive" and neg.label == "negative"
    g_pos, g_neg = pos.generator(), neg.generator()
    ptrs = {p.data_ptr() for p in g_pos.parameters()}
    assert not ptrs & {p.data_ptr() for p in g_neg.parameters()}
    assert any(not torch.equal(pos.generator_params[k], neg.generator_params[k]) for k in pos.generator_params)
