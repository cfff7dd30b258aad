"""Attention map -> pseudo bounding box, and pseudo-annotated dataset emission."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .annotations import BoundingBox, ImageRecord
from .features import Backbone, Featurizer
from .rrpn import Rrpn

log = logging.getLogger(__name__)

POLICIES = ("hull", "largest_component")
GridBox = tuple[int, int, int, int]  # (col_min, row_min, col_max, row_max), inclusive


@dataclass(frozen=True)
class PseudoBox:
    box: BoundingBox
    source_tuple: tuple[str, int]
    max_activation: float


@dataclass
class PseudoReport:
    tuples_in: int
    tuples_out: int
    skipped_empty_mask: int
    delta: float
    policy: str

    def to_json(self) -> dict:
        return {
            "tuples_in": self.tuples_in,
            "tuples_out": self.tuples_out,
            "skipped_empty_mask": self.skipped_empty_mask,
            "delta": self.delta,
            "policy": self.policy,
        }


def threshold_map(attention: np.ndarray | torch.Tensor, delta: float) -> np.ndarray:
    """Binary mask of cells strictly above ``delta``."""
    if isinstance(attention, torch.Tensor):
        attention = attention.detach().cpu().numpy()
    return (np.asarray(attention) > delta).astype(np.uint8)


_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def extract_box(mask: np.ndarray, policy: str = "hull") -> Optional[GridBox]:
    """Tight grid box around the valid cells of ``mask``, or None when empty.

    ``hull`` encloses every valid cell.  ``largest_component`` encloses the
    largest 4-connected blob; equal-size blobs resolve to the one whose first
    cell comes first in row-major order.
    """
    mask = np.asarray(mask) > 0
    if policy == "largest_component":
        labels, n = ndimage.label(mask, structure=_FOUR_CONNECTED)
        if n == 0:
            return None
        # ndimage numbers components in raster order of their first cell
        sizes = np.bincount(labels.ravel())[1:]
        mask = labels == (int(np.argmax(sizes)) + 1)
    elif policy != "hull":
        raise ValueError(f"unknown box policy {policy!r} (expected one of {POLICIES})")
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def to_image_coords(grid_box: GridBox, grid_dims: tuple[int, int],
                    image_dims: tuple[int, int]) -> BoundingBox:
    """Pixel extent of a grid box; dims are ``(height, width)``."""
    c0, r0, c1, r1 = grid_box
    gh, gw = grid_dims
    ih, iw = image_dims
    if not (0 <= c0 <= c1 < gw and 0 <= r0 <= r1 < gh):
        raise ValueError(f"grid box {grid_box} outside {gw}x{gh} grid")
    sx, sy = iw / gw, ih / gh
    x0 = min(max(_round_half_up(c0 * sx), 0), iw)
    y0 = min(max(_round_half_up(r0 * sy), 0), ih)
    x1 = min(max(_round_half_up((c1 + 1) * sx), 0), iw)
    y1 = min(max(_round_half_up((r1 + 1) * sy), 0), ih)
    return BoundingBox(float(x0), float(y0), float(x1), float(y1))


def attention_to_box(attention: np.ndarray, delta: float, policy: str,
                     image_dims: tuple[int, int]) -> Optional[BoundingBox]:
    grid_box = extract_box(threshold_map(attention, delta), policy)
    if grid_box is None:
        return None
    return to_image_coords(grid_box, attention.shape[-2:], image_dims)


@torch.no_grad()
def predict_attention(records: Sequence[ImageRecord], backbone: Backbone, rrpn: Rrpn,
                      featurizer: Featurizer, load_image: Callable[[ImageRecord], torch.Tensor],
                      ) -> dict[tuple[str, int], np.ndarray]:
    """Attention map for every tuple of ``records``, keyed by (image_id, index)."""
    backbone.eval()
    rrpn.eval()
    maps = {}
    for rec in records:
        if not rec.tuples:
            continue
        feats = backbone(load_image(rec)[None])[0]
        dims = (rec.height, rec.width)
        pose, verb = featurizer.side_channels(rec.tuples, dims)
        image = feats[None].expand(len(rec.tuples), *feats.shape)
        att = rrpn(featurizer.volume(image, pose, verb)).numpy()
        for j in range(len(rec.tuples)):
            maps[(rec.image_id, j)] = att[j]
    return maps


def generate_pseudo_annotations(records: Sequence[ImageRecord], backbone: Backbone, rrpn: Rrpn,
                                featurizer: Featurizer,
                                load_image: Callable[[ImageRecord], torch.Tensor],
                                delta: float = 0.1, policy: str = "hull",
                                maps: Optional[dict] = None,
                                ) -> tuple[list[ImageRecord], PseudoReport]:
    """Replace each tuple's box by the pseudo box from its attention map.

    Tuples whose thresholded map is empty are dropped and counted; images
    left without tuples are dropped.
    """
    if not 0 <= delta < 1:
        raise ValueError(f"delta must lie in [0, 1), got {delta}")
    if rrpn.in_channels != featurizer.in_channels:
        raise ValueError(
            f"checkpoint expects {rrpn.in_channels} input channels, "
            f"featurizer produces {featurizer.in_channels}"
        )
    if maps is None:
        maps = predict_attention(records, backbone, rrpn, featurizer, load_image)
    out = []
    n_in = skipped = 0
    for rec in sorted(records, key=lambda r: r.image_id):
        kept = []
        for j, t in enumerate(rec.tuples):
            n_in += 1
            box = attention_to_box(maps[(rec.image_id, j)], delta, policy, (rec.height, rec.width))
            if box is None:
                skipped += 1
                continue
            kept.append(t.with_box(box))
        if kept:
            out.append(ImageRecord(rec.image_id, rec.image_path, rec.width, rec.height, tuple(kept)))
    report = PseudoReport(n_in, n_in - skipped, skipped, delta, policy)
    log.info("pseudo-labelled %d/%d tuples (%d empty masks)", n_in - skipped, n_in, skipped)
    return out, report


def pseudo_boxes(records: Sequence[ImageRecord], maps: dict, delta: float,
                 policy: str = "hull") -> dict[tuple[str, int], Optional[PseudoBox]]:
    """Pseudo box (or None) per tuple, without building records."""
    out = {}
    for rec in records:
        for j, _ in enumerate(rec.tuples):
            att = maps[(rec.image_id, j)]
            box = attention_to_box(att, delta, policy, (rec.height, rec.width))
            out[(rec.image_id, j)] = None if box is None else PseudoBox(
                box, (rec.image_id, j), float(att.max()))
    return out
