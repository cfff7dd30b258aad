"""Single-stage grid detector sharing the feature backbone.

Each grid cell predicts background/class logits and one box, encoded as the
center offset from the cell center plus log width/height, all in cell units.
"""

from __future__ import annotations

import copy
import logging
import math
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .annotations import BoundingBox, ImageRecord
from .features import Backbone, init_conv
from .metrics import Detection

log = logging.getLogger(__name__)

ImageTargets = tuple[Sequence[BoundingBox], Sequence[int]]


class DetectionHead(nn.Module):
    def __init__(self, in_channels: int, num_classes: int, hidden: int = 64):
        super().__init__()
        self.num_classes = num_classes
        self.trunk = nn.Sequential(nn.Conv2d(in_channels, hidden, 3, 1, 1), nn.ReLU(inplace=True),
                                   nn.Conv2d(hidden, hidden, 3, 1, 1), nn.ReLU(inplace=True))
        self.cls = nn.Conv2d(hidden, num_classes + 1, 1)
        self.box = nn.Conv2d(hidden, 4, 1)
        init_conv(self)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.normal_(self.box.weight, std=0.01)

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.trunk(feats)
        return self.cls(h), self.box(h)


class Detector(nn.Module):
    """Backbone + head over a fixed class list (index 0 is background)."""

    def __init__(self, backbone: Backbone, classes: Sequence[str], hidden: int = 64):
        super().__init__()
        self.backbone = backbone
        self.classes = list(classes)
        self.head = DetectionHead(backbone.channels, len(self.classes), hidden)

    def forward(self, images: torch.Tensor, feats: Optional[torch.Tensor] = None):
        if feats is None:
            feats = self.backbone(images)
        return self.head(feats)

    def class_index(self, name: str) -> int:
        try:
            return self.classes.index(name) + 1
        except ValueError:
            raise KeyError(f"unknown class {name!r}; detector knows {self.classes}") from None


def _cell_geometry(grid_dims, image_dims):
    gh, gw = grid_dims
    ih, iw = image_dims
    cw, ch = iw / gw, ih / gh
    cx = (np.arange(gw) + 0.5) * cw
    cy = (np.arange(gh) + 0.5) * ch
    return cx, cy, cw, ch


def encode_targets(boxes: Sequence[BoundingBox], labels: Sequence[int],
                   grid_dims: tuple[int, int], image_dims: tuple[int, int]):
    """Per-cell class index (0 = background) and box regression targets.

    A cell is positive for a box when its center lies inside the box; a box
    covering no cell center claims the cell containing its own center.  When
    boxes compete for a cell the smallest box wins, ties going to the
    lexicographically smallest (box, label), so the result does not depend
    on box order.
    """
    gh, gw = grid_dims
    cx, cy, cw, ch = _cell_geometry(grid_dims, image_dims)
    cls_t = np.zeros((gh, gw), dtype=np.int64)
    off_t = np.zeros((4, gh, gw), dtype=np.float64)
    order = sorted(range(len(boxes)),
                   key=lambda i: (-boxes[i].area, tuple(-v for v in boxes[i].as_list()), -labels[i]))
    # paint largest first so smaller boxes overwrite
    for i in order:
        b, lab = boxes[i], labels[i]
        if b.width <= 0 or b.height <= 0:
            raise ValueError(f"degenerate target box {b.as_list()}")
        cols = np.flatnonzero((cx >= b.x_min) & (cx <= b.x_max))
        rows = np.flatnonzero((cy >= b.y_min) & (cy <= b.y_max))
        if cols.size == 0 or rows.size == 0:
            bx, by = b.center
            cols = np.array([min(int(bx // cw), gw - 1)])
            rows = np.array([min(int(by // ch), gh - 1)])
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        cls_t[rr, cc] = lab
        bx, by = b.center
        off_t[0, rr, cc] = (bx - cx[cc]) / cw
        off_t[1, rr, cc] = (by - cy[rr]) / ch
        off_t[2, rr, cc] = math.log(b.width / cw)
        off_t[3, rr, cc] = math.log(b.height / ch)
    return cls_t, off_t


def detection_loss(cls_logits: torch.Tensor, box_deltas: torch.Tensor,
                   cls_targets: torch.Tensor, box_targets: torch.Tensor):
    """(l_cls, l_loc): cell cross-entropy mean, smooth-L1 mean over positive cells."""
    l_cls = F.cross_entropy(cls_logits, cls_targets)
    pos = cls_targets > 0
    if not pos.any():
        return l_cls, cls_logits.sum() * 0.0
    pred = box_deltas.permute(0, 2, 3, 1)[pos]
    tgt = box_targets.to(pred.dtype).permute(0, 2, 3, 1)[pos]
    l_loc = F.smooth_l1_loss(pred, tgt, reduction="sum", beta=1.0) / pos.sum()
    return l_cls, l_loc


def batch_targets(detector: Detector, targets: Sequence[ImageTargets], grid_dims,
                  image_dims: Sequence[tuple[int, int]]):
    cls_list, off_list = [], []
    for (boxes, labels), dims in zip(targets, image_dims):
        c, o = encode_targets(boxes, labels, grid_dims, dims)
        cls_list.append(c)
        off_list.append(o)
    return (torch.from_numpy(np.stack(cls_list)),
            torch.from_numpy(np.stack(off_list)).float())


def record_targets(rec: ImageRecord, detector: Detector) -> ImageTargets:
    boxes, labels = [], []
    for t in rec.tuples:
        if t.object_box is None:
            raise ValueError(f"{rec.image_id}: tuple without a box cannot supervise the detector")
        labels.append(detector.class_index(t.object_class))
        boxes.append(t.object_box)
    return boxes, labels


def _nms_arrays(xyxy: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    order = np.argsort(-scores, kind="stable")
    area = (xyxy[:, 2] - xyxy[:, 0]) * (xyxy[:, 3] - xyxy[:, 1])
    keep: list[int] = []
    while order.size:
        i = int(order[0])
        keep.append(i)
        rest = order[1:]
        iw = np.minimum(xyxy[i, 2], xyxy[rest, 2]) - np.maximum(xyxy[i, 0], xyxy[rest, 0])
        ih = np.minimum(xyxy[i, 3], xyxy[rest, 3]) - np.maximum(xyxy[i, 1], xyxy[rest, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        overlap = inter / (area[i] + area[rest] - inter)
        order = rest[overlap <= iou_threshold]
    return keep


def nms(boxes: Sequence[BoundingBox], scores: Sequence[float], iou_threshold: float) -> list[int]:
    """Greedy suppression; indices of kept boxes in descending score order."""
    if not boxes:
        return []
    xyxy = np.array([b.as_list() for b in boxes], dtype=np.float64)
    return _nms_arrays(xyxy, np.asarray(scores, dtype=np.float64), iou_threshold)


def decode(cls_logits: torch.Tensor, box_deltas: torch.Tensor, classes: Sequence[str],
           image_dims: tuple[int, int], score_threshold: float = 0.05,
           nms_iou: float = 0.5, max_dets: int = 100, image_id: str = "") -> list[Detection]:
    """Detections for one image from its (K+1)xHxW logits and 4xHxW deltas."""
    probs = torch.softmax(cls_logits.double(), dim=0).numpy()
    deltas = box_deltas.double().numpy()
    grid_dims = probs.shape[1:]
    cx, cy, cw, ch = _cell_geometry(grid_dims, image_dims)
    ih, iw = image_dims
    bx = cx[None, :] + deltas[0] * cw
    by = cy[:, None] + deltas[1] * ch
    bw = cw * np.exp(np.minimum(deltas[2], 10.0))
    bh = ch * np.exp(np.minimum(deltas[3], 10.0))
    xyxy = np.stack([np.clip(bx - bw / 2, 0, iw), np.clip(by - bh / 2, 0, ih),
                     np.clip(bx + bw / 2, 0, iw), np.clip(by + bh / 2, 0, ih)], axis=-1)
    valid = (xyxy[..., 2] > xyxy[..., 0]) & (xyxy[..., 3] > xyxy[..., 1])
    out: list[Detection] = []
    for k, name in enumerate(classes, start=1):
        sel = (probs[k] > score_threshold) & valid
        if not sel.any():
            continue
        boxes, scores = xyxy[sel], probs[k][sel]
        for i in _nms_arrays(boxes, scores, nms_iou):
            out.append(Detection(name, float(scores[i]), BoundingBox(*map(float, boxes[i])), image_id))
    out.sort(key=lambda d: -d.score)
    return out[:max_dets]


@torch.no_grad()
def detect(image: torch.Tensor, detector: Detector, image_dims: tuple[int, int],
           score_threshold: float = 0.05, nms_iou: float = 0.5, image_id: str = "") -> list[Detection]:
    """Detections on one preprocessed 3xSxS image tensor, in descending score order."""
    detector.eval()
    cls_logits, deltas = detector(image[None])
    if cls_logits.shape[1] != len(detector.classes) + 1:
        raise ValueError("detector head does not match its class list")
    return decode(cls_logits[0], deltas[0], detector.classes, image_dims,
                  score_threshold, nms_iou, image_id=image_id)


def detect_records(records: Sequence[ImageRecord], detector: Detector,
                   load_image: Callable[[ImageRecord], torch.Tensor],
                   score_threshold: float = 0.05, nms_iou: float = 0.5) -> list[Detection]:
    dets = []
    for rec in sorted(records, key=lambda r: r.image_id):
        dets.extend(detect(load_image(rec), detector, (rec.height, rec.width),
                           score_threshold, nms_iou, rec.image_id))
    return dets


def make_optimizer(params, lr: float, momentum: float, weight_decay: float):
    return torch.optim.SGD([p for p in params if p.requires_grad], lr=lr,
                           momentum=momentum, weight_decay=weight_decay)


def train_detector(records: Sequence[ImageRecord], classes: Sequence[str],
                   load_image: Callable[[ImageRecord], torch.Tensor], *, grid_size: int,
                   epochs: int, lr: float = 1e-3, momentum: float = 0.9,
                   weight_decay: float = 1e-4, batch_size: int = 4,
                   backbone: Optional[Backbone] = None, image_channels: int = 64,
                   freeze_backbone: bool = False, seed: int = 0,
                   trace: Optional[list] = None) -> Detector:
    """Train a fresh head (and a copied or new backbone) on boxed records.

    ``backbone`` given means reuse: its weights are deep-copied so the
    source-phase model is never mutated; the head is always re-initialized.
    """
    records = [r for r in records if r.tuples]
    if not records:
        raise ValueError("cannot train a detector on an empty dataset")
    known = set(classes)
    for rec in records:
        for t in rec.tuples:
            if t.object_class not in known:
                raise ValueError(f"{rec.image_id}: class {t.object_class!r} not in detector class set")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    torch.manual_seed(seed)
    bb = copy.deepcopy(backbone) if backbone is not None else Backbone(image_channels)
    det = Detector(bb, classes)
    if freeze_backbone:
        for p in det.backbone.parameters():
            p.requires_grad_(False)
    opt = make_optimizer(det.parameters(), lr, momentum, weight_decay)
    rng = np.random.default_rng(seed)
    grid_dims = (grid_size, grid_size)
    records = sorted(records, key=lambda r: r.image_id)
    targets = [record_targets(r, det) for r in records]
    for epoch in range(epochs):
        det.train()
        if freeze_backbone:
            det.backbone.eval()
        order = rng.permutation(len(records))
        sums = np.zeros(2)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            images = torch.stack([load_image(records[i]) for i in idx])
            cls_t, off_t = batch_targets(det, [targets[i] for i in idx], grid_dims,
                                         [(records[i].height, records[i].width) for i in idx])
            cls_logits, deltas = det(images)
            l_cls, l_loc = detection_loss(cls_logits, deltas, cls_t, off_t)
            loss = l_cls + l_loc
            if not torch.isfinite(loss):
                raise FloatingPointError(f"detection loss diverged at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums += [l_cls.item() * len(idx), l_loc.item() * len(idx)]
        mean = sums / len(records)
        if trace is not None:
            trace.append({"epoch": epoch, "l_cls": mean[0], "l_loc": mean[1]})
        log.info("detector epoch %d: l_cls=%.4f l_loc=%.4f", epoch, mean[0], mean[1])
    det.eval()
    return det
