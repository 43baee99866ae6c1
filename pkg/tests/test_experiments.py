import json
import statistics

import numpy as np
import pytest

from synthpipe.classifier import AugmentationConfig, SearchSpace
from synthpipe.dataset import FrameSet, PreprocessedFrame
from synthpipe.dcgan import DiscriminatorSpec, GanTrainingConfig, GeneratorSpec, train_gan
from synthpipe.errors import LeakageError, MissingCheckpointError
from synthpipe.experiments import (
    PURE_SYNTHETIC_COUNT,
    AblationPlan,
    EvaluationReport,
    ResultRow,
    ScenarioConfig,
    SplitData,
    check_leakage,
    compose_training_set,
    run_epoch_sweep,
    run_scenario,
)
from synthpipe.reporting import plot_auc_bars, render_report

G32 = GeneratorSpec(latent_dim=16, base_channels=16, n_upsample_stages=3)
D32 = DiscriminatorSpec(base_channels=16, n_downsample_stages=3)
SEARCH = SearchSpace(learning_rate=(5e-4, 2e-3), channel_multiplier=(4,), budget=1, fc_units=16)


@pytest.fixture(scope="module")
def gans(small_store):
    train = small_store.split("train").renormalized("unit_range")
    cfg = GanTrainingConfig(epochs=2, batch_size=8, lr_generator=2e-4, lr_discriminator=2e-4, checkpoint_every=1)
    pos = train_gan(train.of_class("positive"), G32, D32, cfg)
    neg = train_gan(train.of_class("negative"), G32, D32, cfg)
    return pos, neg


def test_scenario_names_and_requirements():
    assert ScenarioConfig("d").scenario == "d_baseline"
    assert ScenarioConfig("g_pure_synthetic").code == "g"
    with pytest.raises(ValueError):
        ScenarioConfig("h")
    for code in "ef":
        with pytest.raises(MissingCheckpointError):
            ScenarioConfig(code).check()
    with pytest.raises(MissingCheckpointError):
        ScenarioConfig("g", gan_checkpoint_pos=object()).check()
    ScenarioConfig("d").check()
    assert PURE_SYNTHETIC_COUNT == 67_950


def test_compose_training_sets(small_store, gans):
    real = small_store.split("train")
    pos, neg = gans[0][-1], gans[1][-1]
    real_pos_ids = set(real.of_class("positive").ids)

    d = compose_training_set(ScenarioConfig("d"), real, 0)
    assert not any(f.synthetic for f in d)
    assert d.class_counts["positive"] == d.class_counts["negative"]

    e = compose_training_set(ScenarioConfig("e", None, pos), real, 0)
    assert real_pos_ids <= set(e.ids)
    n_syn = sum(f.synthetic for f in e)
    assert n_syn == len(real_pos_ids)
    assert all(f.label == "positive" for f in e if f.synthetic)

    f = compose_training_set(ScenarioConfig("f", 30, pos), real, 0)
    assert not any(fr.synthetic and fr.label == "negative" for fr in f)
    assert all(fr.synthetic for fr in f if fr.label == "positive")
    assert f.class_counts["positive"] == f.class_counts["negative"]

    g = compose_training_set(ScenarioConfig("g", 25, pos, neg), real, 0)
    assert all(fr.synthetic for fr in g)
    assert g.class_counts == {"negative": 25, "positive": 25}

    again = compose_training_set(ScenarioConfig("g", 25, pos, neg), real, 0)
    np.testing.assert_array_equal(g.stack(), again.stack())


def test_run_scenario_row_and_artifacts(small_store, tmp_path):
    data = SplitData(small_store.split("train"), small_store.split("validation"), small_store.split("test"))
    (row,) = run_scenario(ScenarioConfig("d"), data, SEARCH, epochs=2, out_dir=tmp_path)
    assert row.scenario == "d" and 0.0 <= row.auc <= 1.0 and np.isfinite(row.auc)
    assert (tmp_path / "clf_d.ckpt").exists()
    assert len((tmp_path / "trials.jsonl").read_text().splitlines()) == 1
    roc = json.loads((tmp_path / "roc.json").read_text())
    assert roc["auc"] == row.auc


def test_run_scenario_rejects_synthetic_holdout(small_store):
    holdout = small_store.split("test")
    fake = FrameSet([PreprocessedFrame(np.zeros((32, 32), np.float32), "s", "positive", True)])
    data = SplitData(small_store.split("train"), small_store.split("validation"), holdout + fake)
    with pytest.raises(LeakageError):
        run_scenario(ScenarioConfig("d"), data, SEARCH, epochs=1)


def test_epoch_sweep(small_store, gans, tmp_path):
    data = SplitData(small_store.split("train"), small_store.split("validation"), small_store.split("test"))
    rows = run_epoch_sweep(gans[0], gans[1], data, SEARCH, count_per_class=20, epochs=1, out_dir=tmp_path)
    assert [r.epoch for r in rows] == [1, 2]
    assert (tmp_path / "epoch_sweep.jsonl").exists()


def test_plan_validation_and_toml(tmp_path):
    with pytest.raises(ValueError):
        AblationPlan(patient_counts=[8, 4])
    with pytest.raises(ValueError):
        AblationPlan(patient_counts=[4], replicates=0)
    (tmp_path / "plan.toml").write_text(
        'patient_counts = [6, 15, 29, 44, 58]\nreplicates = 3\nscenarios = ["d", "e", "f"]\n'
        "image_size = 64\n[gan]\nepochs = 3\n"
    )
    plan = AblationPlan.from_toml(tmp_path / "plan.toml")
    assert plan.generator.output_size == 64 and plan.discriminator.input_size == 64
    assert [s.code for s in plan.scenarios] == ["d", "e", "f"] and plan.gan.epochs == 3
    assert AblationPlan.from_dict(plan.to_dict()).to_dict() == plan.to_dict()


def _fake_report(counts=(6, 15, 29, 44, 58), reps=3, scenarios="def"):
    rng = np.random.default_rng(0)
    rows = [ResultRow(s, c, r, float(rng.uniform(0.8, 1)), float(rng.uniform(0.7, 1)), r)
            for c in counts for r in range(reps) for s in scenarios]
    return EvaluationReport(rows)


def test_aggregates_counting_and_recompute():
    report = _fake_report()
    assert len(report.rows) == 45 and len(report.aggregates) == 15
    for a in report.aggregates:
        aucs = [r.auc for r in report.rows if (r.scenario, r.patient_count) == (a.scenario, a.patient_count)]
        assert abs(a.mean_auc - statistics.fmean(aucs)) <= 1e-12
        assert abs(a.std_auc - statistics.pstdev(aucs)) <= 1e-12
    single = _fake_report(reps=1)
    for a in single.aggregates:
        (row,) = [r for r in single.rows if (r.scenario, r.patient_count) == (a.scenario, a.patient_count)]
        assert a.mean_auc == row.auc and a.std_auc == 0.0


def test_render_report_outputs(tmp_path):
    report = _fake_report()
    written = render_report(report, tmp_path)
    assert EvaluationReport.read_csv(tmp_path / "results.csv") == report.rows
    assert (tmp_path / "auc_by_patient_count.png").exists() and (tmp_path / "auc_by_patient_count.svg").exists()
    assert written["tables"]
    _, n_bars = plot_auc_bars(report, tmp_path / "bars")
    assert n_bars == 15
    with pytest.raises(ValueError):
        render_report(EvaluationReport(), tmp_path / "empty")


def test_check_leakage_detects_overlap(tmp_path):
    cell = tmp_path / "n4_r0"
    cell.mkdir()
    prov = {"holdout_patients": ["p9"], "gan_training_patients": ["p1"], "classifier_training_patients": ["p1"],
            "validation_patients": ["p5"], "feature_classifier_patients": []}
    (cell / "provenance.json").write_text(json.dumps(prov))
    assert check_leakage(tmp_path) == 1
    prov["gan_training_patients"].append("p9")
    (cell / "provenance.json").write_text(json.dumps(prov))
    with pytest.raises(LeakageError):
        check_leakage(tmp_path)


def test_augmentation_defaults():
    aug = AugmentationConfig()
    assert (aug.horizontal_flip_prob, aug.gamma_range, aug.blur_sigma_range, aug.intensity_shift_range) == (
        0.5, (0.7, 1.3), (0.0, 1.5), (-0.2, 0.2))
