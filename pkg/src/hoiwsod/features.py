"""Per-tuple feature grids (image, pose, verb) and their channel fusion."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .annotations import NUM_JOINTS

EMBED_DIM = 25
KINDS = ("image", "pose", "verb")


class FeatureError(ValueError):
    pass


@dataclass
class FeatureGrid:
    values: torch.Tensor  # C x H x W (or N x C x H x W when batched)
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise FeatureError(f"unknown feature kind {self.kind!r}")

    @property
    def spatial(self) -> tuple[int, int]:
        return tuple(self.values.shape[-2:])


@dataclass
class FeatureVolume:
    values: torch.Tensor
    active: frozenset[str]


# --------------------------------------------------------------------------
# Grid geometry


def to_grid_coords(x: float, y: float, image_dims: tuple[int, int],
                   grid_dims: tuple[int, int]) -> tuple[float, float]:
    """Map a pixel position to continuous grid coordinates.

    Cell ``(r, c)`` covers pixels ``[c*sx, (c+1)*sx)``; its center sits at
    grid coordinate ``(c, r)``.  ``image_dims`` and ``grid_dims`` are
    ``(height, width)``.
    """
    ih, iw = image_dims
    gh, gw = grid_dims
    return x * gw / iw - 0.5, y * gh / ih - 0.5


def gaussian_grid(cx: float, cy: float, sx: float, sy: float,
                  grid_dims: tuple[int, int]) -> np.ndarray:
    """Unnormalized axis-aligned Gaussian with peak 1, sampled at cell centers."""
    gh, gw = grid_dims
    cols = np.arange(gw, dtype=np.float64)
    rows = np.arange(gh, dtype=np.float64)
    gx = np.exp(-((cols - cx) ** 2) / (2.0 * sx * sx))
    gy = np.exp(-((rows - cy) ** 2) / (2.0 * sy * sy))
    return np.outer(gy, gx)


def render_pose_heatmaps(keypoints: Sequence[Optional[tuple[float, float]]],
                         image_dims: tuple[int, int], grid_dims: tuple[int, int],
                         sigma_px: float) -> FeatureGrid:
    """One Gaussian bump per joint; absent joints give all-zero channels."""
    if sigma_px <= 0:
        raise FeatureError(f"sigma_px must be positive, got {sigma_px}")
    if len(keypoints) != NUM_JOINTS:
        raise FeatureError(f"expected {NUM_JOINTS} keypoints, got {len(keypoints)}")
    ih, iw = image_dims
    gh, gw = grid_dims
    sx = sigma_px * gw / iw
    sy = sigma_px * gh / ih
    out = np.zeros((NUM_JOINTS, gh, gw), dtype=np.float64)
    for j, kp in enumerate(keypoints):
        if kp is None:
            continue
        x, y = kp
        if not (0 <= x <= iw and 0 <= y <= ih):
            raise FeatureError(f"keypoint {j} at {kp} outside {iw}x{ih} image")
        cx, cy = to_grid_coords(x, y, image_dims, grid_dims)
        out[j] = gaussian_grid(cx, cy, sx, sy, grid_dims)
    return FeatureGrid(torch.from_numpy(out).float(), "pose")


# --------------------------------------------------------------------------
# Verb embeddings


class EmbeddingTable(dict):
    """Token -> 25-vector mapping read from a whitespace text file."""

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        table = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if not parts or parts == [""]:
                    continue
                token, nums = parts[0], parts[1:]
                if len(nums) != EMBED_DIM:
                    raise FeatureError(
                        f"{path}:{lineno}: token {token!r} has {len(nums)} values, "
                        f"expected {EMBED_DIM}"
                    )
                if token in table:
                    raise FeatureError(f"{path}:{lineno}: duplicate token {token!r}")
                table[token] = np.array([float(v) for v in nums], dtype=np.float64)
        return table

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token, vec in self.items():
                fh.write(token + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def embed_verb(verb: str, table: Mapping[str, np.ndarray]) -> np.ndarray:
    """Look up ``verb``; multiword verbs ("sit_on", "sit on") average their words."""
    if verb in table:
        return np.asarray(table[verb], dtype=np.float64)
    words = [w for w in verb.replace("_", " ").split() if w]
    if len(words) > 1 and all(w in table for w in words):
        return np.mean([table[w] for w in words], axis=0)
    raise KeyError(f"verb {verb!r} not found in embedding table")


def broadcast_verb(vector: np.ndarray | torch.Tensor, grid_dims: tuple[int, int]) -> FeatureGrid:
    vec = torch.as_tensor(np.asarray(vector, dtype=np.float32))
    if vec.shape != (EMBED_DIM,):
        raise FeatureError(f"verb vector must have shape ({EMBED_DIM},), got {tuple(vec.shape)}")
    if not torch.isfinite(vec).all():
        raise FeatureError("verb vector has non-finite entries")
    gh, gw = grid_dims
    return FeatureGrid(vec[:, None, None].expand(EMBED_DIM, gh, gw).contiguous(), "verb")


# --------------------------------------------------------------------------
# Image backbone


def init_conv(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(m.bias)


class Backbone(nn.Module):
    """Five 3x3 conv layers with total stride 8, ``channels`` output maps."""

    stride = 8

    def __init__(self, channels: int = 64):
        super().__init__()
        self.channels = channels
        c1, c2 = max(channels // 4, 8), max(channels // 2, 16)
        self.layers = nn.Sequential(
            nn.Conv2d(3, c1, 3, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, 3, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(c2, channels, 3, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, 1, 1), nn.ReLU(inplace=True),
        )
        init_conv(self)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.layers(images)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """HxWx3 uint8 RGB -> 3xHxW float in [-0.5, 0.5]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise FeatureError(f"expected an HxWx3 RGB array, got shape {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float() / 255.0 - 0.5


def extract_image_features(image: np.ndarray | torch.Tensor, backbone: Backbone,
                           input_size: Optional[int] = None) -> FeatureGrid:
    x = image_to_tensor(image) if isinstance(image, np.ndarray) else image
    if input_size is not None and tuple(x.shape[-2:]) != (input_size, input_size):
        raise FeatureError(
            f"image is {tuple(x.shape[-2:])}, backbone configured for {input_size}x{input_size}"
        )
    if x.shape[-1] % backbone.stride or x.shape[-2] % backbone.stride:
        raise FeatureError(f"image size {tuple(x.shape[-2:])} not divisible by stride {backbone.stride}")
    batched = x.dim() == 4
    out = backbone(x if batched else x[None])
    return FeatureGrid(out if batched else out[0], "image")


# --------------------------------------------------------------------------
# Fusion


def channel_widths(image_channels: int) -> dict[str, int]:
    return {"image": image_channels, "pose": NUM_JOINTS, "verb": EMBED_DIM}


def fuse(image: FeatureGrid, pose: FeatureGrid, verb: FeatureGrid,
         active: Iterable[str]) -> FeatureVolume:
    """Concatenate image, pose and verb channels; inactive kinds are zero-filled.

    Grids may be single (CxHxW) or batched (NxCxHxW), but all must agree.
    """
    active = frozenset(active)
    if not active:
        raise FeatureError("at least one feature kind must be active")
    unknown = active - set(KINDS)
    if unknown:
        raise FeatureError(f"unknown feature kinds {sorted(unknown)}")
    grids = [image, pose, verb]
    dims = {g.spatial for g in grids}
    if len(dims) != 1:
        raise FeatureError(f"spatial mismatch between feature grids: {sorted(dims)}")
    parts = []
    for g in grids:
        parts.append(g.values if g.kind in active else torch.zeros_like(g.values))
    return FeatureVolume(torch.cat(parts, dim=-3), active)


def parse_kinds(spec: str | Iterable[str]) -> frozenset[str]:
    """Accept "I+P+V", "image,verb" or an iterable of kind names."""
    if isinstance(spec, str):
        letters = {"I": "image", "P": "pose", "V": "verb"}
        tokens = [t.strip() for t in spec.replace("+", ",").split(",") if t.strip()]
        spec = [letters.get(t.upper(), t.lower()) for t in tokens]
    kinds = frozenset(spec)
    unknown = kinds - set(KINDS)
    if unknown:
        raise FeatureError(f"unknown feature kinds {sorted(unknown)}")
    return kinds


def kinds_label(kinds: Iterable[str]) -> str:
    return "+".join(k[0].upper() for k in KINDS if k in set(kinds))


def default_pose_sigma(image_size: int, grid_size: int, cells: float = 2.0) -> float:
    return cells * image_size / grid_size


def load_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


class Featurizer:
    """Builds pose and verb grids for tuples and fuses them with image features."""

    def __init__(self, table: Mapping[str, np.ndarray], image_size: int, grid_size: int,
                 active: Iterable[str], image_channels: int, sigma_px: Optional[float] = None):
        self.table = table
        self.image_size = image_size
        self.grid_size = grid_size
        self.active = frozenset(active)
        self.image_channels = image_channels
        self.sigma_px = sigma_px if sigma_px is not None else default_pose_sigma(image_size, grid_size)
        self._verb_cache: dict[str, torch.Tensor] = {}

    @property
    def grid_dims(self) -> tuple[int, int]:
        return self.grid_size, self.grid_size

    @property
    def in_channels(self) -> int:
        return sum(channel_widths(self.image_channels).values())

    def pose(self, tup, image_dims: tuple[int, int]) -> torch.Tensor:
        return render_pose_heatmaps(tup.keypoints, image_dims, self.grid_dims, self.sigma_px).values

    def verb(self, verb: str) -> torch.Tensor:
        if verb not in self._verb_cache:
            vec = embed_verb(verb, self.table)
            self._verb_cache[verb] = broadcast_verb(vec, self.grid_dims).values
        return self._verb_cache[verb]

    def side_channels(self, tuples, image_dims: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
        """Stacked pose (N x 18 x H x W) and verb (N x 25 x H x W) grids."""
        pose = torch.stack([self.pose(t, image_dims) for t in tuples])
        verb = torch.stack([self.verb(t.verb) for t in tuples])
        return pose, verb

    def volume(self, image_feats: torch.Tensor, pose: torch.Tensor,
               verb: torch.Tensor) -> torch.Tensor:
        return fuse(FeatureGrid(image_feats, "image"), FeatureGrid(pose, "pose"),
                    FeatureGrid(verb, "verb"), self.active).values
