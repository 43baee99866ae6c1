from __future__ import annotations

import numpy as np
import pytest

from synthpipe.dataset import CropSpec, FrameSet, FrameStore, PreprocessedFrame, load_manifest
from synthpipe.fileio import read_toml
from synthpipe.surrogate import SurrogateSpec, generate_surrogate


@pytest.fixture(scope="session")
def small_surrogate(tmp_path_factory):
    """A 32px surrogate with 12 patients, rendered once per session."""
    out = tmp_path_factory.mktemp("surrogate")
    spec = SurrogateSpec(image_size=32, n_patients=12, videos_per_patient=2, frames_per_video=6, seed=3)
    generate_surrogate(spec, out)
    return out, spec


@pytest.fixture(scope="session")
def small_store(small_surrogate):
    out, spec = small_surrogate
    manifest = load_manifest(out / "manifest.jsonl")
    crop = CropSpec.from_dict(read_toml(out / "crop_spec.toml")["crop"])
    return FrameStore(manifest, crop, root=out, size=spec.image_size)


def random_frameset(n_pos: int, n_neg: int, size: int = 16, seed: int = 0, synthetic: bool = False) -> FrameSet:
    rng = np.random.default_rng(seed)
    frames = []
    for i in range(n_pos + n_neg):
        label = "positive" if i < n_pos else "negative"
        px = rng.standard_normal((size, size)).astype(np.float32)
        if label == "positive":
            px[size // 4: size // 2, size // 4: size // 2] += 2.0
        px = (px - px.mean()) / px.std()
        frames.append(PreprocessedFrame(px, f"f{i}", label, synthetic, patient_id=f"p{i % 5}"))
    return FrameSet(frames)


_ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        props = dict(report.user_properties)
        status = "PASS" if report.passed else "FAIL"
        _ACCEPTANCE.append((status, props.get("criterion", report.nodeid.split("::")[-1]), props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for status, criterion, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{status}  {criterion}" + (f"  [{detail}]" if detail else ""))
