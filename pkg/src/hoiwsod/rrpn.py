"""Relational region proposal network: fused features -> object attention map."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .annotations import BoundingBox
from .features import FeatureVolume, gaussian_grid, init_conv, to_grid_coords

BCE_EPS = 1e-7


class TrainingDiverged(RuntimeError):
    pass


def _conv(ci: int, co: int, stride: int = 1) -> list[nn.Module]:
    return [nn.Conv2d(ci, co, 3, stride, 1), nn.ReLU(inplace=True)]


class Rrpn(nn.Module):
    """Encoder with two output scales, two decoders, 1x1 sigmoid head.

    ``encoder_a`` (2 convs) keeps the input resolution; ``encoder_b`` (the
    third conv, stride 2) halves it.  ``decoder_b`` upsamples back before its
    last three convs so both decoder outputs can be concatenated.
    """

    def __init__(self, in_channels: int, widths: Sequence[int] = (64, 64, 96, 32)):
        super().__init__()
        e1, e2, e3, d = widths
        mid = max(d, e1)
        self.in_channels = in_channels
        self.encoder_a = nn.Sequential(*_conv(in_channels, e1), *_conv(e1, e2))
        self.encoder_b = nn.Sequential(*_conv(e2, e3, 2))
        self.decoder_a = nn.Sequential(
            *_conv(e2, mid), *_conv(mid, mid), *_conv(mid, mid), *_conv(mid, d), *_conv(d, d),
        )
        self.decoder_b = nn.Sequential(
            *_conv(e3, mid), *_conv(mid, mid), *_conv(mid, mid),
            nn.Upsample(scale_factor=2, mode="nearest"),
            *_conv(mid, mid), *_conv(mid, d), *_conv(d, d),
        )
        self.attention = nn.Conv2d(2 * d, 1, 1)
        init_conv(self)
        nn.init.xavier_normal_(self.attention.weight)

    blocks = ("encoder_a", "encoder_b", "decoder_a", "decoder_b", "attention")

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.in_channels:
            raise ValueError(
                f"feature volume has {x.shape[-3]} channels, network expects {self.in_channels}"
            )
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ValueError(f"grid {tuple(x.shape[-2:])} must have even sides")
        batched = x.dim() == 4
        x = x if batched else x[None]
        fa = self.encoder_a(x)
        fb = self.encoder_b(fa)
        out = self.attention(torch.cat([self.decoder_a(fa), self.decoder_b(fb)], dim=1))[:, 0]
        return out if batched else out[0]

    def forward(self, x: torch.Tensor | FeatureVolume) -> torch.Tensor:
        if isinstance(x, FeatureVolume):
            x = x.values
        return torch.sigmoid(self.logits(x))


def rrpn_forward(volume: FeatureVolume | torch.Tensor, model: Rrpn) -> torch.Tensor:
    return model(volume)


def target_geometry(box: BoundingBox, image_dims: tuple[int, int],
                    grid_dims: tuple[int, int]) -> tuple[float, float, float, float]:
    """Center and per-axis sigma, all in grid units, of a box's target Gaussian."""
    if box.width <= 0 or box.height <= 0:
        raise ValueError(f"degenerate box {box.as_list()}: zero width or height")
    ih, iw = image_dims
    gh, gw = grid_dims
    if not box.inside(iw, ih):
        raise ValueError(f"box {box.as_list()} outside {iw}x{ih} image")
    cx, cy = to_grid_coords(*box.center, image_dims, grid_dims)
    sx = box.width * gw / iw / 4.0
    sy = box.height * gh / ih / 4.0
    return cx, cy, sx, sy


def gaussian_target(box: BoundingBox, image_dims: tuple[int, int],
                    grid_dims: tuple[int, int]) -> np.ndarray:
    """Peak-1 Gaussian at the box center with sigma = a quarter of the box extent."""
    return gaussian_grid(*target_geometry(box, image_dims, grid_dims), grid_dims)


def attention_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Pixel-mean binary cross entropy with ``pred`` clamped to [eps, 1-eps]."""
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def total_loss(det_loss, att_loss, lam: float):
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    for name, v in (("det_loss", det_loss), ("att_loss", att_loss)):
        if not math.isfinite(float(v)):
            raise ValueError(f"{name} is not finite: {float(v)}")
    return det_loss + lam * att_loss


def train_rrpn_step(model: Rrpn, optimizer: torch.optim.Optimizer, volumes: torch.Tensor,
                    targets: torch.Tensor, lam: float,
                    det_loss: Optional[torch.Tensor] = None) -> float:
    """One optimizer step on ``det_loss + lam * attention_loss``.

    Returns the attention loss measured before the step.  With ``lam == 0``
    the attention loss is computed without gradient so RRPN parameters never
    receive a ``.grad`` and the optimizer leaves them untouched (including
    weight decay).  ``det_loss``, when given, carries the detector's graph
    through the shared backbone.
    """
    if volumes.shape[0] == 0:
        raise ValueError("empty batch")
    optimizer.zero_grad(set_to_none=True)
    if lam > 0:
        att = attention_loss(model(volumes), targets)
    else:
        with torch.no_grad():
            att = attention_loss(model(volumes), targets)
    if not torch.isfinite(att):
        raise TrainingDiverged(f"attention loss became {att.item()}")
    if det_loss is not None and not torch.isfinite(det_loss):
        raise TrainingDiverged(f"detection loss became {det_loss.item()}")
    loss = None
    if lam > 0:
        loss = lam * att
    if det_loss is not None:
        loss = det_loss if loss is None else loss + det_loss
    if loss is not None:
        loss.backward()
        optimizer.step()
    return float(att.detach())
