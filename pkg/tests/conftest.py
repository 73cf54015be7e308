import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
DATA = Path(__file__).parent / "data"

# every test process shares one pretrained-world cache
os.environ.setdefault("CASPL_CACHE", str(ROOT / ".caspl_cache"))

from caspl.vlm import EncoderConfig, MiniClip  # noqa: E402
from caspl.world import WorldConfig, load_world  # noqa: E402

TINY = EncoderConfig(depth=2, width=8, heads=2, max_seq=32, patch_size=4, image_size=8)

ACCEPTANCE_LINES = []


def tiny_model(seed=0, depth=2):
    cfg = TINY if depth == 2 else EncoderConfig(depth=depth, width=8, heads=2, max_seq=32,
                                                patch_size=4, image_size=8)
    return MiniClip(cfg, d_shared=8, seed=seed, name="tiny")


def tiny_images(n, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 8, 8, 3))


@pytest.fixture(scope="session")
def world():
    """Default (student, teacher, target dataset); pretrained once and cached on disk."""
    return load_world(WorldConfig(), os.environ["CASPL_CACHE"])


@pytest.fixture
def frozen_world(world):
    student, teacher, ds = world
    before = (student.snapshot(), teacher.snapshot())
    yield world
    student.freeze()
    teacher.freeze()
    for model, snap in zip((student, teacher), before):
        for k, v in snap.items():
            assert model.params[k].data.tobytes() == v.tobytes(), k


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
