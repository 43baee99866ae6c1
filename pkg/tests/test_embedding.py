import numpy as np
import pytest
import torch

from synthpipe.embedding import embed_images, load_backbone
from synthpipe.errors import BackboneLoadError, ShapeError


@pytest.fixture(scope="module")
def backbone():
    return load_backbone("random_conv", seed=0)


def _images(n, size=32, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (n, size, size, 1)).astype(np.float32)


def test_shape_and_finiteness(backbone):
    emb = embed_images(_images(10), backbone)
    assert emb.shape == (10, 512) and np.isfinite(emb).all()


def test_identical_images_identical_vectors(backbone):
    x = _images(1)
    emb = embed_images(np.concatenate([x, x]), backbone)
    np.testing.assert_array_equal(emb[0], emb[1])


def test_permutation_equivariance_and_batch_independence(backbone):
    x = _images(12, seed=1)
    perm = np.random.default_rng(0).permutation(12)
    full = embed_images(x, backbone, batch_size=256)
    np.testing.assert_allclose(embed_images(x[perm], backbone), full[perm], atol=1e-5)
    single = np.concatenate([embed_images(x[i:i + 1], backbone) for i in range(12)])
    np.testing.assert_allclose(single, full, atol=1e-5)


def test_accepts_three_dim_input(backbone):
    x = _images(3)
    np.testing.assert_array_equal(embed_images(x[..., 0], backbone), embed_images(x, backbone))


def test_shape_errors(backbone):
    with pytest.raises(ShapeError):
        embed_images(np.zeros((2, 8, 8, 3), np.float32), backbone)


def test_random_backbone_is_seeded():
    a = load_backbone("random_conv", seed=4)
    b = load_backbone("random_conv", seed=4)
    x = torch.from_numpy(_images(2))
    assert torch.equal(a(x), b(x))


def test_load_errors(tmp_path):
    with pytest.raises(BackboneLoadError):
        load_backbone("vgg99")
    (tmp_path / "bad.pt").write_bytes(b"not a state dict")
    with pytest.raises(BackboneLoadError):
        load_backbone("resnet34", weights=tmp_path / "bad.pt")


def test_resnet34_structure_without_weights():
    bb = load_backbone("resnet34", weights=None)
    emb = embed_images(_images(2, size=64), bb)
    assert emb.shape == (2, 512)
