import numpy as np
import pytest
import torch

from hoiwsod.annotations import NUM_JOINTS, BoundingBox, HoiTuple, ImageRecord


def make_tuple(verb="hold", cls="ball", box=(10, 10, 30, 30), kps=None):
    if kps is None:
        kps = [(5.0 + j, 6.0 + j) for j in range(NUM_JOINTS)]
    return HoiTuple(verb, cls, None if box is None else BoundingBox(*map(float, box)), tuple(kps))


def make_record(image_id="a", tuples=(), width=100, height=80, path=None):
    return ImageRecord(image_id, path or f"images/{image_id}.png", width, height, tuple(tuples))


def random_records(rng, n_images=5, classes=("ball", "box", "cone"),
                   verbs=("hold", "ride"), width=120, height=90, max_tuples=3):
    records = []
    for i in range(n_images):
        tuples = []
        for _ in range(int(rng.integers(1, max_tuples + 1))):
            x0, x1 = sorted(rng.uniform(0, width, 2))
            y0, y1 = sorted(rng.uniform(0, height, 2))
            kps = [None if rng.random() < 0.2 else (float(rng.uniform(0, width)), float(rng.uniform(0, height)))
                   for _ in range(NUM_JOINTS)]
            box = None if rng.random() < 0.1 else (x0, y0, x1, y1)
            tuples.append(make_tuple(str(rng.choice(verbs)), str(rng.choice(classes)), box, kps))
        records.append(make_record(f"img{i:03d}", tuples, width, height))
    return records


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts, one line per criterion, after the run."""
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
