import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from conftest import random_frameset
from helpers import finite_difference_check, pair_count_auc
from synthpipe.classifier import (
    AugmentationConfig,
    ClassifierSpec,
    ConsolidationCNN,
    SearchSpace,
    TrainedClassifier,
    accuracy_at,
    augment_frame,
    augment_pixels,
    auc_roc,
    flip_horizontal,
    random_search,
    sample_trials,
    score_frames,
    train_classifier,
)
from synthpipe.dataset import FrameStore, PreprocessedFrame, load_manifest
from synthpipe.errors import EmptyDatasetError, SingleClassError, UntrainedClassifierError
from synthpipe.surrogate import SurrogateSpec, generate_surrogate

SMALL = ClassifierSpec(channel_multiplier=4, dropout_rate=0.1, learning_rate=1e-3, fc_units=16)


# --- AUC -------------------------------------------------------------------


def test_auc_hand_examples():
    assert auc_roc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == 1.0
    assert auc_roc([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]).auc == 0.75
    assert auc_roc([0.5] * 6, [1, 0, 1, 0, 1, 0]).auc == 0.5
    with pytest.raises(SingleClassError):
        auc_roc([0.1, 0.2], [1, 1])


def test_auc_matches_pair_counting_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n_pos, n_neg = rng.integers(1, 200, 2)
        scores = rng.integers(0, 20, n_pos + n_neg) / 20.0
        labels = np.r_[np.ones(n_pos, int), np.zeros(n_neg, int)]
        roc = auc_roc(scores, labels)
        assert roc.auc == pytest.approx(pair_count_auc(scores, labels), abs=1e-12)
        assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)
        assert trapezoid(roc.tpr, roc.fpr) == pytest.approx(roc.auc, abs=1e-12)


def test_auc_transform_invariance_and_negation():
    rng = np.random.default_rng(1)
    s = rng.standard_normal(80)
    y = rng.integers(0, 2, 80)
    y[:2] = [0, 1]
    base = auc_roc(s, y).auc
    assert auc_roc(np.exp(3 * s) + 7, y).auc == base
    assert auc_roc(-s, y).auc == pytest.approx(1 - base, abs=1e-12)


def test_accuracy_at():
    assert accuracy_at([0.9, 0.2, 0.6], [1, 0, 0]) == pytest.approx(2 / 3)


# --- augmentation ----------------------------------------------------------


def test_identity_augmentation():
    x = np.random.default_rng(0).standard_normal((16, 16)).astype(np.float32)
    out = augment_pixels(x, AugmentationConfig.identity(), np.random.default_rng(1))
    np.testing.assert_array_equal(out, x)


def test_flip_involution():
    x = np.arange(12, dtype=np.float32).reshape(3, 4)
    np.testing.assert_array_equal(flip_horizontal(flip_horizontal(x)), x)


def test_augmentation_determinism():
    x = np.random.default_rng(0).standard_normal((16, 16)).astype(np.float32)
    frame = PreprocessedFrame(x, "a", "positive")
    a = augment_frame(frame, AugmentationConfig(), np.random.default_rng(5))
    b = augment_frame(frame, AugmentationConfig(), np.random.default_rng(5))
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert a.provenance == "a" and a.label == "positive"


@settings(max_examples=40, deadline=None)
@given(
    p=st.floats(0, 1),
    g=st.tuples(st.floats(0.3, 1.0), st.floats(1.0, 3.0)),
    s=st.tuples(st.floats(0, 1), st.floats(1, 3)),
    sh=st.tuples(st.floats(-1, 0), st.floats(0, 1)),
    seed=st.integers(0, 10_000),
)
def test_augmentation_preserves_shape_and_finiteness(p, g, s, sh, seed):
    x = np.random.default_rng(seed).standard_normal((12, 20)).astype(np.float32)
    out = augment_pixels(x, AugmentationConfig(p, g, s, sh), np.random.default_rng(seed))
    assert out.shape == x.shape and np.isfinite(out).all()


def test_augmentation_config_validation():
    with pytest.raises(ValueError):
        AugmentationConfig(gamma_range=(1.3, 0.7))
    with pytest.raises(ValueError):
        AugmentationConfig(horizontal_flip_prob=1.5)


# --- model -----------------------------------------------------------------


def test_architecture_widths():
    net = ConsolidationCNN(ClassifierSpec(channel_multiplier=8))
    convs = [m for m in net.features if isinstance(m, torch.nn.Conv2d)]
    assert [c.out_channels for c in convs] == [8, 8, 16, 16, 32, 32, 64, 64]
    assert sum(isinstance(m, torch.nn.Linear) for m in net.head) == 2
    assert net(torch.zeros(2, 1, 32, 32)).shape == (2,)


def test_classifier_gradient_matches_finite_differences():
    spec = ClassifierSpec(channel_multiplier=2, dropout_rate=0.0, n_conv_blocks=2, fc_units=4)
    net = ConsolidationCNN(spec).double().train()
    g = torch.Generator().manual_seed(0)
    x = torch.randn(6, 1, 8, 8, dtype=torch.float64, generator=g)
    y = torch.tensor([1.0, 0, 1, 0, 1, 0], dtype=torch.float64)
    loss = lambda: torch.nn.functional.binary_cross_entropy_with_logits(net(x), y)  # noqa: E731
    results = finite_difference_check(loss, list(net.parameters()), n_checks=24)
    assert max(r for *_, r in results) < 1e-3


# --- training --------------------------------------------------------------


def test_training_selection_and_determinism():
    train, val = random_frameset(24, 24, seed=0), random_frameset(10, 10, seed=1)
    clf, acc = train_classifier(train, val, SMALL, AugmentationConfig(), seed=3, epochs=4)
    assert acc == max(clf.val_history) == clf.best_val_accuracy
    assert clf.best_epoch == clf.val_history.index(acc) + 1
    clf2, acc2 = train_classifier(train, val, SMALL, AugmentationConfig(), seed=3, epochs=4)
    assert acc2 == acc
    for k, v in clf.model.state_dict().items():
        assert torch.equal(v, clf2.model.state_dict()[k])


def test_training_errors():
    train, val = random_frameset(4, 4), random_frameset(2, 2)
    with pytest.raises(ValueError):
        train_classifier(train, val, SMALL, AugmentationConfig(), 0, epochs=0)
    with pytest.raises(EmptyDatasetError):
        train_classifier(random_frameset(0, 0), val, SMALL, AugmentationConfig(), 0, epochs=1)
    with pytest.raises(ValueError):
        train_classifier(train, random_frameset(2, 2, synthetic=True), SMALL, AugmentationConfig(), 0, epochs=1)


def test_scoring_contract(tmp_path):
    train, val = random_frameset(8, 8), random_frameset(4, 4, seed=2)
    clf, _ = train_classifier(train, val, SMALL, AugmentationConfig.identity(), 0, epochs=1)
    scores = score_frames(clf, val)
    assert scores.shape == (8,) and np.all((scores > 0) & (scores < 1))
    perm = np.random.default_rng(0).permutation(8)
    np.testing.assert_allclose(score_frames(clf, val.stack()[perm]), scores[perm], rtol=1e-6)
    twice = score_frames(clf, np.stack([val.stack()[0]] * 2))
    assert twice[0] == twice[1]
    clf.save(tmp_path / "c.ckpt")
    np.testing.assert_array_equal(score_frames(TrainedClassifier.load(tmp_path / "c.ckpt"), val), scores)
    with pytest.raises(UntrainedClassifierError):
        score_frames(object(), val)


def test_surrogate_learnable(tmp_path):
    spec = SurrogateSpec(image_size=32, n_patients=24, videos_per_patient=2, frames_per_video=10, seed=8)
    generate_surrogate(spec, tmp_path)
    store = FrameStore(load_manifest(tmp_path / "manifest.jsonl"), spec.crop_spec(), root=tmp_path, size=32)
    train, val, test = store.split("train"), store.split("validation"), store.split("test")
    clf, _ = train_classifier(train, val, ClassifierSpec(learning_rate=1e-3), AugmentationConfig(), 0, epochs=6)
    assert auc_roc(score_frames(clf, test), test.labels()).auc > 0.9


# --- random search ---------------------------------------------------------


def test_search_sampling_is_seeded_and_in_range():
    space = SearchSpace(budget=20, seed=4)
    a, b = sample_trials(space), sample_trials(space)
    assert a == b
    for spec, _ in a:
        assert 1e-5 <= spec.learning_rate <= 1e-3
        assert spec.channel_multiplier in (8, 16, 32)
        assert 0 <= spec.dropout_rate <= 0.5


def test_random_search_argmax_and_singleton(tmp_path):
    train, val = random_frameset(12, 12, seed=4), random_frameset(6, 6, seed=5)
    space = SearchSpace(learning_rate=(1e-4, 1e-2), channel_multiplier=(2, 4), budget=3, seed=1, fc_units=8)
    res = random_search(space, train, val, AugmentationConfig(), epochs=2, trials_path=tmp_path / "trials.jsonl")
    assert len(res.trials) == 3
    assert all(res.best_val_accuracy >= t["val_accuracy"] for t in res.trials)
    assert len((tmp_path / "trials.jsonl").read_text().splitlines()) == 3

    one = SearchSpace(learning_rate=(1e-4, 1e-2), channel_multiplier=(2,), budget=1, seed=2, fc_units=8)
    res1 = random_search(one, train, val, AugmentationConfig(), epochs=2)
    (spec, seed), = sample_trials(one)
    _, acc = train_classifier(train, val, spec, AugmentationConfig(), seed, epochs=2)
    assert res1.best_spec == spec and res1.best_val_accuracy == acc
