from __future__ import annotations

import numpy as np
import pytest
import torch

from raresynth.data import NEGATIVE, POSITIVE, REAL, SYNTHETIC, Dataset, DomainParams, LabeledSample
from raresynth.diffusion import UNetSpec, build_noise_schedule, build_unet

torch.set_num_threads(1)

TINY_SPEC = UNetSpec(widths=(4, 4), n_res=1, image_size=8)


@pytest.fixture(scope="session")
def sched():
    return build_noise_schedule(1000)


@pytest.fixture
def tiny_unet():
    return build_unet(TINY_SPEC, seed=3)


@pytest.fixture(scope="session")
def small_params():
    return DomainParams(image_size=16)


def make_dataset(n_neg: int, n_pos: int, size: int = 8, n_synth: int = 0, seed: int = 0, prefix: str = "s") -> Dataset:
    """Random-pixel dataset with distinguishable ids, for bookkeeping tests."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_neg):
        out.append(LabeledSample(rng.random((size, size), dtype=np.float32), NEGATIVE, REAL, f"{prefix}-neg-{i}"))
    for i in range(n_pos):
        out.append(LabeledSample(rng.random((size, size), dtype=np.float32), POSITIVE, REAL, f"{prefix}-pos-{i}"))
    for i in range(n_synth):
        out.append(LabeledSample(rng.random((size, size), dtype=np.float32), POSITIVE, SYNTHETIC, f"synth-{i:08d}"))
    return Dataset(tuple(out), domain="toy")


def blob_dataset(n_neg: int, n_pos: int, size: int = 8, seed: int = 0) -> Dataset:
    """Linearly separable toy images: dark field vs bright centre blob."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    blob = np.exp(-((yy - size / 2) ** 2 + (xx - size / 2) ** 2) / (size / 4) ** 2)
    out = []
    for i in range(n_neg + n_pos):
        pos = i >= n_neg
        img = 0.2 + 0.05 * rng.standard_normal((size, size)) + (0.6 * blob if pos else 0.0)
        out.append(LabeledSample(np.clip(img, 0, 1).astype(np.float32), POSITIVE if pos else NEGATIVE, REAL, f"b{i}"))
    return Dataset(tuple(out), domain="toy")


# -- acceptance summary ------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, float]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = mark.args
    _CRITERIA[number] = (title, "PASS" if rep.passed else "FAIL", rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, secs = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}  ({secs:.1f} s)")
