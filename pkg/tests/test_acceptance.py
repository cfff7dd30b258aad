"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The end-to-end criteria (7-10) share one pair of desk-scale runs on the
synthetic world: 160 px images on a 20x20 grid, 6 source and 30 target epochs.
"""

import json
import math
import time

import numpy as np
import pytest
import torch
import yaml

from hoiwsod.annotations import NUM_JOINTS, BoundingBox
from hoiwsod.cli import main
from hoiwsod.config import config_from_dict
from hoiwsod.detector import Detector, batch_targets, detection_loss, train_detector
from hoiwsod.features import (EMBED_DIM, Backbone, FeatureGrid, broadcast_verb, fuse,
                              parse_kinds)
from hoiwsod.metrics import (Detection, EvalPair, iou, mean_average_precision, tuple_recall)
from hoiwsod.pipeline import Pipeline, run_pipeline
from hoiwsod.pseudolabel import extract_box
from hoiwsod.rrpn import Rrpn, attention_loss, gaussian_target, target_geometry, train_rrpn_step

from conftest import make_record, make_tuple
from oracles import (_box_iou, brute_ap, brute_hull, brute_largest_component_box, fd_check,
                     random_instance, raster_iou)
from test_detector import final_losses, scenes

RESULTS: dict[int, str] = {}

DESK = {
    "image_size": 160, "grid_size": 20,
    "epochs": {"source": 6, "target": 30},
}

FEATURE_COMBOS = ["I", "P", "V", "I+P", "I+V", "P+V", "I+P+V"]


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def B(*v):
    return BoundingBox(*map(float, v))


# --------------------------------------------------------------------------
# 1. pseudo-box extraction vs brute force


def test_criterion_01_extract_box_oracle():
    rng = np.random.default_rng(0)
    masks = []
    for k in range(10_000):
        density = rng.choice([0.0, 0.002, 0.01, 0.05, 0.2, 0.5, 0.9])
        m = rng.random((40, 40)) < density
        if k % 5 == 0:  # a few solid blobs so components of equal size occur
            m[:] = False
            for _ in range(int(rng.integers(1, 4))):
                r, c = rng.integers(0, 36, 2)
                m[r:r + 3, c:c + 3] = True
        masks.append(m)

    t0 = time.perf_counter()
    hulls = [extract_box(m, "hull") for m in masks]
    comps = [extract_box(m, "largest_component") for m in masks]
    elapsed = time.perf_counter() - t0

    as_tuple = lambda b: None if b is None else tuple(b)  # noqa: E731
    hull_bad = sum(as_tuple(h) != brute_hull(m) for h, m in zip(hulls, masks))
    comp_bad = sum(as_tuple(c) != brute_largest_component_box(m) for c, m in zip(comps, masks))
    verdict(1, hull_bad == 0 and comp_bad == 0 and elapsed < 30.0,
            f"10000 masks, hull mismatches={hull_bad}, component mismatches={comp_bad}, "
            f"library time={elapsed:.2f}s (< 30s)")


# --------------------------------------------------------------------------
# 2. Gaussian attention target


def test_criterion_02_gaussian_target():
    rng = np.random.default_rng(1)
    center_err = sigma_err = sym_err = formula_err = 0.0
    for _ in range(1000):
        grid = int(rng.choice([20, 40]))
        scale = int(rng.choice([4, 8, 16]))
        size = grid * scale
        # center on a cell center, half extents of two whole sigmas (sigma = k cells)
        kx, ky = rng.integers(1, 4, 2)
        c = int(rng.integers(2 * kx, grid - 2 * kx))
        r = int(rng.integers(2 * ky, grid - 2 * ky))
        px, py = (c + 0.5) * scale, (r + 0.5) * scale
        box = B(px - 2 * kx * scale, py - 2 * ky * scale, px + 2 * kx * scale, py + 2 * ky * scale)
        t = gaussian_target(box, (size, size), (grid, grid))
        center_err = max(center_err, abs(t[r, c] - 1.0))
        one_sigma = [t[r, c + kx], t[r, c - kx], t[r + ky, c], t[r - ky, c]]
        sigma_err = max(sigma_err, max(abs(v - math.exp(-0.5)) for v in one_sigma))
        # reflection about the center row and column, wherever both cells exist
        for d in range(1, min(c, grid - 1 - c) + 1):
            sym_err = max(sym_err, np.abs(t[:, c + d] - t[:, c - d]).max())
        for d in range(1, min(r, grid - 1 - r) + 1):
            sym_err = max(sym_err, np.abs(t[r + d] - t[r - d]).max())

        # arbitrary box: every cell against the closed form at cell centers
        x0, x1 = sorted(rng.uniform(0, size, 2))
        y0, y1 = sorted(rng.uniform(0, size, 2))
        if x1 - x0 < 1 or y1 - y0 < 1:
            continue
        box = B(x0, y0, x1, y1)
        t = gaussian_target(box, (size, size), (grid, grid))
        gx = (x0 + x1) / 2 * grid / size - 0.5
        gy = (y0 + y1) / 2 * grid / size - 0.5
        sx, sy = (x1 - x0) * grid / size / 4, (y1 - y0) * grid / size / 4
        cols, rows = np.meshgrid(np.arange(grid), np.arange(grid))
        ref = np.exp(-0.5 * (((cols - gx) / sx) ** 2 + ((rows - gy) / sy) ** 2))
        formula_err = max(formula_err, np.abs(t - ref).max())
        assert np.allclose(target_geometry(box, (size, size), (grid, grid)), (gx, gy, sx, sy))
    ok = center_err <= 1e-9 and sigma_err <= 1e-6 and sym_err <= 1e-9 and formula_err <= 1e-9
    verdict(2, ok, f"1000 boxes, |center-1|={center_err:.1e}, |one sigma-exp(-1/2)|={sigma_err:.1e}, "
                   f"reflection={sym_err:.1e}, closed form={formula_err:.1e}")


# --------------------------------------------------------------------------
# 3. gradient checks


def test_criterion_03_gradients():
    torch.manual_seed(0)
    in_ch = 64 + NUM_JOINTS + EMBED_DIM
    net = Rrpn(in_ch).double()
    x = torch.randn(2, in_ch, 8, 8, dtype=torch.float64)
    t = torch.from_numpy(np.stack([gaussian_target(B(8, 12, 40, 36), (64, 64), (8, 8)),
                                   gaussian_target(B(30, 2, 60, 20), (64, 64), (8, 8))]))
    att_kinks, det_kinks = [], []
    att = fd_check(lambda: attention_loss(net(x), t), list(net.parameters()), 100,
                   np.random.default_rng(0), skipped=att_kinks)

    bb = Backbone(16).double()
    det = Detector(bb, ["a", "b"], hidden=16).double()
    images = torch.randn(2, 3, 32, 32, dtype=torch.float64)
    cls_t, off_t = batch_targets(det, [([B(4, 4, 20, 12)], [1]), ([B(10, 2, 30, 30)], [2])],
                                 (4, 4), [(32, 32)] * 2)

    def det_loss():
        c, o = det(images)
        l_cls, l_loc = detection_loss(c, o, cls_t, off_t.double())
        return l_cls + l_loc

    dl = fd_check(det_loss, list(det.parameters()), 100, np.random.default_rng(1), skipped=det_kinks)
    ok = att.size >= 100 and dl.size >= 100 and att.max() < 1e-4 and dl.max() < 1e-4
    verdict(3, ok, f"attention BCE {att.size} coords max rel err {att.max():.1e}; "
                   f"detection {dl.size} coords max rel err {dl.max():.1e} (< 1e-4); "
                   f"ReLU-kink coordinates replaced: {len(att_kinks)} + {len(det_kinks)}")


# --------------------------------------------------------------------------
# 4. metric oracles


def test_criterion_04_metric_oracles():
    rng = np.random.default_rng(2)
    worst_iou = worst_recall = worst_ap = 0.0
    for _ in range(1000):
        dets, truths = random_instance(rng)
        # iou against a raster count, per detection vs every truth of its image
        pairs = []
        for img, _, box in dets:
            for t in truths.get(img, []):
                worst_iou = max(worst_iou, abs(iou(B(*box), B(*t)) - raster_iou(box, t)))
        # recall: one prediction (or none) per truth
        flat = [t for bs in truths.values() for t in bs]
        preds = [dets[k][2] if k < len(dets) and rng.random() < 0.8 else None
                 for k in range(len(flat))]
        for p, t in zip(preds, flat):
            pairs.append(EvalPair(None if p is None else B(*p), B(*t)))
        expected = sum(p is not None and _box_iou(p, t) > 0.5 for p, t in zip(preds, flat)) / len(flat)
        worst_recall = max(worst_recall, abs(tuple_recall(pairs) - expected))
        recs = [make_record(img, [make_tuple(cls="ball", box=b) for b in bs]) for img, bs in truths.items()]
        got = mean_average_precision([Detection("ball", s, B(*b), img) for img, s, b in dets], recs).mAP
        worst_ap = max(worst_ap, abs(got - brute_ap(dets, truths)))

    truth = B(0, 0, 10, 10)
    recs = [make_record("a", [make_tuple(cls="ball", box=(0, 0, 10, 10))])]
    examples = [
        iou(truth, truth) == 1.0,
        iou(truth, B(20, 20, 30, 30)) == 0.0,
        abs(iou(truth, B(5, 5, 15, 15)) - 25 / 175) < 1e-15,
        tuple_recall([EvalPair(truth, truth)] * 3) == 1.0,
        tuple_recall([EvalPair(truth, truth), EvalPair(B(0, 0, 10, 9), truth),
                      EvalPair(B(5, 5, 15, 15), truth), EvalPair(None, truth)]) == 0.5,
        tuple_recall([EvalPair(None, truth)] * 2) == 0.0,
        mean_average_precision([Detection("ball", 0.9, truth, "a")], recs).mAP == 1.0,
        mean_average_precision([Detection("ball", 0.9, B(20, 20, 30, 30), "a"),
                                Detection("ball", 0.5, truth, "a")], recs).mAP == 0.5,
        mean_average_precision([], recs).mAP == 0.0,
    ]
    ok = worst_iou < 1e-12 and worst_recall == 0.0 and worst_ap < 1e-12 and all(examples)
    verdict(4, ok, f"1000 instances, max |iou diff|={worst_iou:.1e}, |recall diff|={worst_recall:.1e}, "
                   f"|AP diff|={worst_ap:.1e}; examples {sum(examples)}/{len(examples)}")


# --------------------------------------------------------------------------
# 5. verb broadcast and fusion


def test_criterion_05_broadcast_and_fusion():
    rng = np.random.default_rng(3)
    spread = 0.0
    for _ in range(200):
        gh, gw = rng.integers(1, 41, 2)
        g = broadcast_verb(rng.normal(size=EMBED_DIM) * 10, (int(gh), int(gw))).values
        spread = max(spread, float((g.amax(dim=(1, 2)) - g.amin(dim=(1, 2))).max()))

    exact, zeros, shapes = True, True, set()
    gen = torch.Generator().manual_seed(3)
    for label in FEATURE_COMBOS:
        img = FeatureGrid(torch.randn(64, 8, 8, generator=gen), "image")
        pose = FeatureGrid(torch.randn(NUM_JOINTS, 8, 8, generator=gen), "pose")
        verb = broadcast_verb(torch.randn(EMBED_DIM, generator=gen).numpy(), (8, 8))
        active = parse_kinds(label)
        vol = fuse(img, pose, verb, active).values
        bounds = {"image": (img, 0, 64), "pose": (pose, 64, 64 + NUM_JOINTS),
                  "verb": (verb, 64 + NUM_JOINTS, vol.shape[0])}
        for kind, (src, a, b) in bounds.items():
            if kind in active:
                exact &= torch.equal(vol[a:b], src.values)
            else:
                zeros &= bool(vol[a:b].abs().max() == 0)
        torch.manual_seed(0)
        net = Rrpn(vol.shape[0])
        assert net(vol).shape == (8, 8)
        shapes.add(tuple((k, tuple(p.shape)) for k, p in net.state_dict().items()))
    ok = spread == 0.0 and exact and zeros and len(shapes) == 1
    verdict(5, ok, f"broadcast max-min={spread}, slices bit-exact={exact}, zero-fill={zeros}, "
                   f"distinct RRPN shape sets over {len(FEATURE_COMBOS)} feature combinations={len(shapes)}")


# --------------------------------------------------------------------------
# 6. overfit sanity


def test_criterion_06_overfit():
    g = torch.Generator().manual_seed(5)
    x = torch.randn(1, 64 + NUM_JOINTS + EMBED_DIM, 40, 40, generator=g)
    t = torch.from_numpy(gaussian_target(B(96, 128, 176, 192), (320, 320), (40, 40))).float()[None]
    torch.manual_seed(0)
    net = Rrpn(x.shape[1])
    opt = torch.optim.SGD(net.parameters(), lr=1e-3, momentum=0.9, weight_decay=1e-4)
    t0 = time.perf_counter()
    for _ in range(200):
        train_rrpn_step(net, opt, x, t, lam=10.0)
    rrpn_time = time.perf_counter() - t0
    bce = attention_loss(net(x), t).item()

    recs, imgs = scenes(5)
    t0 = time.perf_counter()
    det = train_detector(recs, ["ball", "box", "cone"], lambda r: imgs[r.image_id], grid_size=8,
                         epochs=30, lr=1e-2, batch_size=1, seed=0)
    det_time = time.perf_counter() - t0
    l_cls, l_loc = final_losses(det, recs, imgs, 8)
    ok = bce < 0.05 and l_cls < 0.05 and l_loc < 0.05 and rrpn_time < 120 and det_time < 120
    verdict(6, ok, f"RRPN BCE={bce:.4f} after 200 steps ({rrpn_time:.1f}s); detector "
                   f"l_cls={l_cls:.4f} l_loc={l_loc:.4f} after 30 epochs ({det_time:.1f}s)")


# --------------------------------------------------------------------------
# 7-9. desk-scale runs on the synthetic world


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    runs = {}
    for name, lam in (("lambda10", 10.0), ("lambda0", 0.0)):
        cfg = config_from_dict({**DESK, "seed": 0, "lambda": lam, "out": str(root / name),
                                "data": {"dir": str(root / "data")}})
        t0 = time.perf_counter()
        report = run_pipeline(cfg)
        runs[name] = (cfg, report, time.perf_counter() - t0)
    return runs


def test_criterion_07_transfer_direction(desk):
    _, r10, t10 = desk["lambda10"]
    _, r0, _ = desk["lambda0"]
    rec10 = r10["metrics"]["recall_at_05"]["target_train"]
    rec0 = r0["metrics"]["recall_at_05"]["target_train"]
    pseudo = r10["pseudo"]["tuples_in"]
    verdict(7, rec10 >= 0.70 and rec0 <= 0.25 and t10 <= 600,
            f"target-tuple Recall@0.5 lambda=10: {rec10:.3f} (>= 0.70), lambda=0: {rec0:.3f} (<= 0.25); "
            f"{pseudo} target tuples; lambda=10 run {t10:.0f}s (<= 600s)")


def test_criterion_08_weak_vs_supervised(desk):
    _, r10, t10 = desk["lambda10"]
    _, r0, _ = desk["lambda0"]
    weak = r10["metrics"]["map_at_05"]["target_weak"]["mAP"]
    full = r10["metrics"]["map_at_05"]["target_supervised"]["mAP"]
    control = r0["metrics"]["map_at_05"]["target_weak"]["mAP"]
    ok = full - weak <= 0.15 and weak > control and t10 <= 900
    verdict(8, ok, f"target mAP@0.5 weak={weak:.3f}, supervised={full:.3f} (gap {100 * (full - weak):.1f} "
                   f"pts <= 15), lambda=0 weak={control:.3f}; run {t10:.0f}s (<= 900s)")


def test_criterion_09_delta_sweep(desk):
    cfg, _, _ = desk["lambda10"]
    pipe = Pipeline(cfg)
    pipe.load_data()
    det, rrpn = pipe.load_source()
    deltas = (0.05, 0.1, 0.2)
    sets = {"source_test": pipe.side(pipe.test, "source"),
            "target_train": pipe.side(pipe.train, "target"),
            "target_test": pipe.side(pipe.test, "target")}
    sweep = {name: [pipe.recall(recs, rrpn, det.backbone, delta=d) for d in deltas]
             for name, recs in sets.items()}
    src = sweep["source_test"]
    ok = all(a >= b for a, b in zip(src, src[1:]))
    shown = "; ".join(f"{k} " + "/".join(f"{v:.3f}" for v in vals) for k, vals in sweep.items())
    verdict(9, ok, f"source Recall@0.5 non-increasing over delta {deltas}: {shown}")


# --------------------------------------------------------------------------
# 10. determinism of the run subcommand


def test_criterion_10_determinism(tmp_path, capsys):
    cfg = {"image_size": 64, "grid_size": 8,
           "data": {"synth": {"n_source_train": 45, "n_target_train": 15, "n_source_test": 18,
                              "n_target_test": 15}},
           "epochs": {"source": 2, "target": 2}, "rrpn_widths": [8, 8, 8, 8], "delta": 0.0}
    blocks = []
    for name in ("first", "second"):
        run = tmp_path / name
        run.mkdir()
        path = run / "cfg.yaml"
        path.write_text(yaml.safe_dump({**cfg, "data": {**cfg["data"], "dir": str(run / "data")}}))
        assert main(["run", "--config", str(path), "--seed", "0", "--out", str(run / "out")]) == 0
        report = json.loads((run / "out" / "report.json").read_text())
        blocks.append(json.dumps(report["metrics"], sort_keys=True).encode())
    verdict(10, blocks[0] == blocks[1],
            f"two independent runs, metric blocks byte-identical={blocks[0] == blocks[1]} "
            f"({len(blocks[0])} bytes)")
