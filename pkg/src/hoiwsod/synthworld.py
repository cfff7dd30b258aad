"""Deterministic synthetic HOI world: stick figures interacting with shapes.

Geometry constants are expressed for a 320 px canvas and scaled linearly to
the requested image size.  Joint order follows the 18-point COCO/OpenPose
layout used everywhere else in the package.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .annotations import BoundingBox, HoiTuple, ImageRecord, save_dataset
from .features import EMBED_DIM, EmbeddingTable

log = logging.getLogger(__name__)

(NOSE, NECK, R_SHOULDER, R_ELBOW, R_WRIST, L_SHOULDER, L_ELBOW, L_WRIST, R_HIP, R_KNEE,
 R_ANKLE, L_HIP, L_KNEE, L_ANKLE, R_EYE, L_EYE, R_EAR, L_EAR) = range(18)

LIMBS = [(NECK, R_SHOULDER), (R_SHOULDER, R_ELBOW), (R_ELBOW, R_WRIST),
         (NECK, L_SHOULDER), (L_SHOULDER, L_ELBOW), (L_ELBOW, L_WRIST),
         (NECK, R_HIP), (R_HIP, R_KNEE), (R_KNEE, R_ANKLE),
         (NECK, L_HIP), (L_HIP, L_KNEE), (L_KNEE, L_ANKLE), (R_HIP, L_HIP)]

VERBS = ("hold", "ride", "sit_on", "kick", "wear")
HOLD_RADIUS = 12.0  # px at the 320 px reference size

# name -> (shape, RGB)
SHAPES = {
    "ball": ("ellipse", (220, 40, 40)),
    "box": ("square", (40, 70, 220)),
    "cone": ("triangle", (40, 170, 60)),
    "kite": ("diamond", (240, 140, 20)),
    "plus": ("cross", (150, 50, 190)),
    "ring": ("ring", (20, 190, 200)),
    "star": ("star", (200, 190, 20)),
    "nut": ("hexagon", (130, 80, 30)),
    "flag": ("flag", (240, 100, 180)),
    "arrow": ("arrow", (20, 120, 110)),
    "bell": ("pentagon", (110, 110, 20)),
    "drum": ("octagon", (150, 220, 60)),
}


class PlacementError(RuntimeError):
    pass


@dataclass
class SceneSpec:
    image_size: int = 320
    verbs: tuple[str, ...] = VERBS
    object_classes: tuple[str, ...] = tuple(SHAPES)
    counts: dict[tuple[str, str], int] = field(default_factory=dict)
    seed: int = 0
    max_distractors: int = 2
    distractor_classes: Optional[tuple[str, ...]] = None
    prefix: str = "img"

    def __post_init__(self) -> None:
        unknown_v = set(self.verbs) - set(VERBS)
        if unknown_v:
            raise ValueError(f"no placement rule for verbs {sorted(unknown_v)}")
        unknown_c = set(self.object_classes) - set(SHAPES)
        if unknown_c:
            raise ValueError(f"no shape descriptor for classes {sorted(unknown_c)}")
        if len(self.object_classes) < 2:
            raise ValueError("need at least two object classes")
        for (v, c), n in self.counts.items():
            if v not in self.verbs or c not in self.object_classes:
                raise ValueError(f"count given for unknown pair ({v}, {c})")
            if n < 1:
                raise ValueError(f"count for ({v}, {c}) must be >= 1")

    @property
    def scale(self) -> float:
        return self.image_size / 320.0

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def default_scene_spec(n_source: int = 1500, n_target: int = 150, n_target_classes: int = 3,
                       image_size: int = 320, seed: int = 0, prefix: str = "img") -> SceneSpec:
    """Rare classes are the last ``n_target_classes`` shapes; verbs spread evenly.

    Every verb gets at least one tuple on each side, so the verb-coverage
    requirement of a frequency split holds by construction.
    """
    classes = tuple(SHAPES)
    source, target = classes[:-n_target_classes], classes[-n_target_classes:]
    counts: dict[tuple[str, str], int] = {}

    def spread(side: Sequence[str], total: int, offset: int) -> None:
        cells = [(v, c) for c in side for v in VERBS]
        if total < len(VERBS):
            raise ValueError(f"need at least {len(VERBS)} tuples per side, got {total}")
        # rotate so remainders do not always land on the same verb
        cells = cells[offset % len(cells):] + cells[:offset % len(cells)]
        base, extra = divmod(total, len(cells))
        for i, cell in enumerate(cells):
            n = base + (1 if i < extra else 0)
            if n:
                counts[cell] = n

    spread(source, n_source, 0)
    spread(target, n_target, 0)
    return SceneSpec(image_size=image_size, counts=counts, seed=seed,
                     distractor_classes=source, prefix=prefix)


# --------------------------------------------------------------------------
# Figure and object geometry


def _polar(origin, length, angle):
    return origin[0] + length * math.cos(angle), origin[1] + length * math.sin(angle)


def _pose(rng: np.random.Generator, verb: str, scale: float) -> tuple[np.ndarray, int, int]:
    """Joint positions relative to the neck at the origin, facing (+1 right)
    and the joint the verb acts through."""
    s = scale * rng.uniform(0.9, 1.1)
    facing = 1 if rng.random() < 0.5 else -1
    pts = np.zeros((18, 2))
    pts[NECK] = (0.0, 0.0)
    pts[NOSE] = (4 * facing * s, -20 * s)
    pts[R_EYE] = pts[NOSE] + (-4 * s, -4 * s)
    pts[L_EYE] = pts[NOSE] + (4 * s, -4 * s)
    pts[R_EAR] = pts[NOSE] + (-9 * s, 0)
    pts[L_EAR] = pts[NOSE] + (9 * s, 0)
    pts[R_SHOULDER] = (-20 * s, 2 * s)
    pts[L_SHOULDER] = (20 * s, 2 * s)
    pts[R_HIP] = (-12 * s, 60 * s)
    pts[L_HIP] = (12 * s, 60 * s)
    upper, fore, thigh, shin = 28 * s, 26 * s, 32 * s, 32 * s
    down = math.pi / 2

    # relaxed arms hang down and slightly out
    arm_angles = {R_SHOULDER: down + rng.uniform(0.1, 0.5), L_SHOULDER: down - rng.uniform(0.1, 0.5)}
    fore_bend = {R_SHOULDER: rng.uniform(-0.3, 0.3), L_SHOULDER: rng.uniform(-0.3, 0.3)}
    leg_angles = {R_HIP: down + rng.uniform(0.0, 0.25), L_HIP: down - rng.uniform(0.0, 0.25)}
    shin_bend = {R_HIP: rng.uniform(-0.15, 0.15), L_HIP: rng.uniform(-0.15, 0.15)}

    active = NECK
    if verb == "hold":
        side = R_SHOULDER if rng.random() < 0.5 else L_SHOULDER
        active = R_WRIST if side == R_SHOULDER else L_WRIST
        out = -1 if side == R_SHOULDER else 1
        a = rng.uniform(-0.6, 0.9)  # from roughly horizontal to well below it
        arm_angles[side] = a if out > 0 else math.pi - a
        fore_bend[side] = -out * rng.uniform(0.0, 0.4)
    elif verb == "ride":
        spread = rng.uniform(0.7, 1.0)
        leg_angles = {R_HIP: down + spread, L_HIP: down - spread}
        shin_bend = {R_HIP: -rng.uniform(0.6, 0.9), L_HIP: rng.uniform(0.6, 0.9)}
        arm_angles = {R_SHOULDER: down + rng.uniform(0.5, 0.9), L_SHOULDER: down - rng.uniform(0.5, 0.9)}
    elif verb == "sit_on":
        thigh_dir = 0.0 if facing > 0 else math.pi
        leg_angles = {R_HIP: thigh_dir + rng.uniform(-0.15, 0.15), L_HIP: thigh_dir + rng.uniform(-0.15, 0.15)}
        knee_down = down - facing * rng.uniform(0.0, 0.2)
        shin_bend = {R_HIP: knee_down - leg_angles[R_HIP], L_HIP: knee_down - leg_angles[L_HIP]}
    elif verb == "kick":
        side = R_HIP if facing < 0 else L_HIP
        active = R_ANKLE if facing < 0 else L_ANKLE
        kick_angle = rng.uniform(0.1, 0.7)
        leg_angles[side] = kick_angle if facing > 0 else math.pi - kick_angle
        shin_bend[side] = facing * rng.uniform(-0.3, 0.1)
    elif verb == "wear":
        for sh, out in ((R_SHOULDER, -1), (L_SHOULDER, 1)):
            a = -rng.uniform(0.6, 1.1)
            arm_angles[sh] = a if out > 0 else math.pi - a
            fore_bend[sh] = out * rng.uniform(-1.9, -1.3)
    else:
        raise ValueError(f"no placement rule for verb {verb!r}")

    for sh, el, wr in ((R_SHOULDER, R_ELBOW, R_WRIST), (L_SHOULDER, L_ELBOW, L_WRIST)):
        pts[el] = _polar(pts[sh], upper, arm_angles[sh])
        pts[wr] = _polar(pts[el], fore, arm_angles[sh] + fore_bend[sh])
    for hip, kn, an in ((R_HIP, R_KNEE, R_ANKLE), (L_HIP, L_KNEE, L_ANKLE)):
        pts[kn] = _polar(pts[hip], thigh, leg_angles[hip])
        pts[an] = _polar(pts[kn], shin, leg_angles[hip] + shin_bend[hip])
    return pts, facing, active


def _object_center(rng, verb: str, pts: np.ndarray, facing: int, active: int,
                   w: float, h: float, scale: float):
    if verb == "hold":
        wrist = pts[active]
        r = HOLD_RADIUS * scale * math.sqrt(rng.random()) * 0.95
        a = rng.uniform(0, 2 * math.pi)
        return wrist[0] + r * math.cos(a), wrist[1] + r * math.sin(a)
    hips = (pts[R_HIP] + pts[L_HIP]) / 2
    if verb == "ride":
        return hips[0] + rng.uniform(-3, 3) * scale, hips[1] + h / 2 + 2 * scale
    if verb == "sit_on":
        return hips[0] - facing * w * 0.2, hips[1] + h / 2
    if verb == "kick":
        foot = pts[active]
        return foot[0] + facing * (w / 2 + 2 * scale), foot[1]
    if verb == "wear":
        return pts[NOSE][0], pts[NOSE][1] - 4 * scale
    raise ValueError(f"no placement rule for verb {verb!r}")


def _shape_polygon(shape: str, x0, y0, x1, y1) -> list[tuple[float, float]]:
    """Polygon for ``shape`` whose own bounding box is exactly the given box."""
    pts = _raw_polygon(shape, x0, y0, x1, y1)
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    ax, ay = min(xs), min(ys)
    fx = (x1 - x0) / (max(xs) - ax)
    fy = (y1 - y0) / (max(ys) - ay)
    return [(x0 + (x - ax) * fx, y0 + (y - ay) * fy) for x, y in pts]


def _raw_polygon(shape: str, x0, y0, x1, y1) -> list[tuple[float, float]]:
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    rx, ry = (x1 - x0) / 2, (y1 - y0) / 2

    def regular(n, start):
        return [(cx + rx * math.cos(start + 2 * math.pi * k / n),
                 cy + ry * math.sin(start + 2 * math.pi * k / n)) for k in range(n)]

    if shape == "square":
        return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    if shape == "triangle":
        return [(cx, y0), (x1, y1), (x0, y1)]
    if shape == "diamond":
        return [(cx, y0), (x1, cy), (cx, y1), (x0, cy)]
    if shape == "cross":
        tx, ty = rx / 3, ry / 3
        return [(cx - tx, y0), (cx + tx, y0), (cx + tx, cy - ty), (x1, cy - ty), (x1, cy + ty),
                (cx + tx, cy + ty), (cx + tx, y1), (cx - tx, y1), (cx - tx, cy + ty), (x0, cy + ty),
                (x0, cy - ty), (cx - tx, cy - ty)]
    if shape == "star":
        pts = []
        for k in range(10):
            a = -math.pi / 2 + math.pi * k / 5
            f = 1.0 if k % 2 == 0 else 0.45
            pts.append((cx + f * rx * math.cos(a), cy + f * ry * math.sin(a)))
        return pts
    if shape == "hexagon":
        return regular(6, 0.0)
    if shape == "pentagon":
        return regular(5, -math.pi / 2)
    if shape == "octagon":
        return regular(8, math.pi / 8)
    if shape == "flag":
        return [(x0, y0), (x1, (y0 + cy) / 2), (x0 + rx * 0.5, cy), (x1, y1), (x0, y1)]
    if shape == "arrow":
        return [(x0, cy - ry * 0.35), (cx, cy - ry * 0.35), (cx, y0), (x1, cy), (cx, y1),
                (cx, cy + ry * 0.35), (x0, cy + ry * 0.35)]
    raise ValueError(f"unknown shape {shape!r}")


def _draw_object(draw: ImageDraw.ImageDraw, cls: str, box: tuple[float, float, float, float],
                 scale: float) -> BoundingBox:
    """Draw ``cls`` so that its outline touches all four sides of ``box``."""
    shape, color = SHAPES[cls]
    x0, y0, x1, y1 = box
    if shape == "ellipse":
        draw.ellipse([x0, y0, x1, y1], fill=color)
    elif shape == "ring":
        draw.ellipse([x0, y0, x1, y1], fill=color)
        t = (x1 - x0) * 0.22
        draw.ellipse([x0 + t, y0 + t, x1 - t, y1 - t], fill=(235, 235, 235))
    else:
        draw.polygon(_shape_polygon(shape, x0, y0, x1, y1), fill=color)
    return BoundingBox(float(x0), float(y0), float(x1), float(y1))


def _overlaps(a, b, margin=0.0) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or
                a[3] + margin <= b[1] or b[3] + margin <= a[1])


# --------------------------------------------------------------------------
# Scenes and datasets


def generate_scene(rng: np.random.Generator, verb: str, object_class: str, spec: SceneSpec,
                   max_tries: int = 100):
    """Render one interaction.

    Returns ``(image, keypoints, box)``: an HxWx3 uint8 array, 18 ``(x, y)``
    pairs and the interacted object's tight box.
    """
    if verb not in spec.verbs or object_class not in spec.object_classes:
        raise ValueError(f"({verb}, {object_class}) not in scene spec")
    size = spec.image_size
    s = spec.scale
    for _ in range(max_tries):
        pts, facing, active = _pose(rng, verb, s)
        w = rng.uniform(56, 72) * s
        h = rng.uniform(56, 72) * s
        ocx, ocy = _object_center(rng, verb, pts, facing, active, w, h, s)
        head_r = 12 * s
        body = np.vstack([pts, pts[NOSE] + (-head_r, -head_r), pts[NOSE] + (head_r, head_r)])
        obj = np.array([[ocx - w / 2, ocy - h / 2], [ocx + w / 2, ocy + h / 2]])
        allpts = np.vstack([body, obj])
        lo, hi = allpts.min(axis=0), allpts.max(axis=0)
        margin = 2 * s
        span = hi - lo + 2 * margin
        if span[0] >= size or span[1] >= size:
            continue
        off = np.array([rng.uniform(margin - lo[0], size - margin - hi[0]),
                        rng.uniform(margin - lo[1], size - margin - hi[1])])
        pts = pts + off
        obj_box = tuple((obj + off).ravel())
        break
    else:
        raise PlacementError(f"could not place a {verb}/{object_class} scene in {size}px")

    noise = rng.normal(0, 6, size=(size, size, 1))
    canvas = np.clip(np.full((size, size, 3), 235.0) + noise, 0, 255).astype(np.uint8)
    img = Image.fromarray(canvas)
    draw = ImageDraw.Draw(img)

    human_box = (pts[:, 0].min() - 14 * s, pts[:, 1].min() - 14 * s,
                 pts[:, 0].max() + 14 * s, pts[:, 1].max() + 14 * s)
    pool = [c for c in (spec.distractor_classes or spec.object_classes)
            if c != object_class and c in SHAPES]
    n_distract = int(rng.integers(0, spec.max_distractors + 1)) if pool else 0
    taken = [human_box, obj_box]
    for _ in range(n_distract):
        for _ in range(30):
            dw, dh = rng.uniform(56, 72) * s, rng.uniform(56, 72) * s
            x0 = rng.uniform(0, size - dw - 1)
            y0 = rng.uniform(0, size - dh - 1)
            cand = (x0, y0, x0 + dw, y0 + dh)
            if not any(_overlaps(cand, t, 4 * s) for t in taken):
                _draw_object(draw, pool[int(rng.integers(len(pool)))], cand, s)
                taken.append(cand)
                break

    lw = max(1, int(round(3 * s)))
    ink = (30, 30, 30)
    for a, b in LIMBS:
        draw.line([tuple(pts[a]), tuple(pts[b])], fill=ink, width=lw)
    hx, hy = pts[NOSE]
    draw.ellipse([hx - 11 * s, hy - 11 * s, hx + 11 * s, hy + 11 * s], outline=ink, width=lw)
    for j in range(18):
        x, y = pts[j]
        draw.ellipse([x - lw, y - lw, x + lw, y + lw], fill=(200, 30, 30) if j in (R_WRIST, L_WRIST) else ink)
    box = _draw_object(draw, object_class, obj_box, s)
    keypoints = [(float(x), float(y)) for x, y in pts]
    return np.asarray(img), keypoints, box


def _scene_plan(spec: SceneSpec) -> list[tuple[str, str]]:
    plan = [(v, c) for (v, c), n in sorted(spec.counts.items()) for _ in range(n)]
    order = np.random.default_rng(spec.seed).permutation(len(plan))
    return [plan[i] for i in order]


def generate_records(spec: SceneSpec, out_dir: Optional[str | Path] = None) -> list[ImageRecord]:
    """Build one record per planned interaction; images are saved as PNG when
    ``out_dir`` is given."""
    plan = _scene_plan(spec)
    seeds = np.random.SeedSequence(spec.seed).spawn(len(plan))
    records = []
    if out_dir is not None:
        (Path(out_dir) / "images").mkdir(parents=True, exist_ok=True)
    for i, ((verb, cls), ss) in enumerate(zip(plan, seeds)):
        image, kps, box = generate_scene(np.random.default_rng(ss), verb, cls, spec)
        image_id = f"{spec.prefix}{i:05d}"
        rel = f"images/{image_id}.png"
        if out_dir is not None:
            Image.fromarray(image).save(Path(out_dir) / rel, optimize=False)
        records.append(ImageRecord(image_id, rel, spec.image_size, spec.image_size,
                                   (HoiTuple(verb, cls, box, tuple(kps)),)))
    return records


def synth_embeddings(seed: int = 0, verbs: Sequence[str] = VERBS) -> EmbeddingTable:
    """Random 25-d word vectors for every word of every verb (fixed seed)."""
    rng = np.random.default_rng(seed)
    words = []
    for v in verbs:
        for w in v.split("_"):
            if w not in words:
                words.append(w)
    table = EmbeddingTable()
    for w in words:
        table[w] = np.round(rng.normal(0, 1, EMBED_DIM), 6)
    return table


def generate_dataset(spec: SceneSpec, out_dir: str | Path,
                     annotation_name: str = "annotations.json") -> Path:
    """Write images, the annotation file and ``embeddings.txt`` under ``out_dir``."""
    out_dir = Path(out_dir)
    records = generate_records(spec, out_dir)
    path = out_dir / annotation_name
    save_dataset(records, path)
    synth_embeddings().save(out_dir / "embeddings.txt")
    log.info("wrote %d synthetic tuples to %s", len(records), path)
    return path
