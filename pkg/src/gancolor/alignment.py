"""Spatial alignment of prior features to the grayscale input.

The grayscale input and the inversion image are projected into one shared
feature space by two extractors with a shared trunk; a dense non-local
correlation over the base grid turns their similarity into a row-stochastic
matrix which warps every pyramid scale onto the input's layout.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .prior_gan import FeaturePyramid


class SharedSpaceProjector(nn.Module):
    """Two modality stems (1-ch and 3-ch) feeding one shared conv trunk.

    Both projections land on the same C_S x H' x W' grid (H' = resolution /
    2^k down to `base_grid`), so their per-position vectors are comparable.
    """

    def __init__(self, resolution: int, base_grid: int | None = None, c_s: int = 128, width: int = 64):
        super().__init__()
        if base_grid is None:
            base_grid = resolution // 4
        if resolution % base_grid != 0 or base_grid > resolution:
            raise ValueError(f"base grid {base_grid} incompatible with resolution {resolution}")
        n_down = int(math.log2(resolution // base_grid))
        if 2**n_down * base_grid != resolution:
            raise ValueError("resolution / base_grid must be a power of two")
        self.resolution = resolution
        self.base_grid = base_grid
        self.c_s = c_s

        def stem(c_in):
            if n_down >= 1:
                return nn.Sequential(nn.Conv2d(c_in, width, 4, 2, 1), nn.LeakyReLU(0.2))
            return nn.Sequential(nn.Conv2d(c_in, width, 3, 1, 1), nn.LeakyReLU(0.2))

        self.gray_stem = stem(1)
        self.rgb_stem = stem(3)
        trunk = []
        c_prev = width
        for i in range(max(0, n_down - 1)):
            c_out = min(4 * width, 2 * c_prev)
            trunk += [nn.Conv2d(c_prev, c_out, 4, 2, 1), nn.LeakyReLU(0.2)]
            c_prev = c_out
        trunk += [nn.Conv2d(c_prev, c_prev, 3, 1, 1), nn.LeakyReLU(0.2)]
        trunk += [nn.Conv2d(c_prev, c_s, 1)]
        self.trunk = nn.Sequential(*trunk)

    def _check(self, x: torch.Tensor, channels: int):
        if x.shape[1] != channels or x.shape[2] != self.resolution or x.shape[3] != self.resolution:
            raise ValueError(
                f"expected Bx{channels}x{self.resolution}x{self.resolution}, got {tuple(x.shape)}"
            )

    def project_gray(self, gray: torch.Tensor) -> torch.Tensor:
        self._check(gray, 1)
        return self.trunk(self.gray_stem(gray))

    def project_rgb(self, rgb: torch.Tensor) -> torch.Tensor:
        self._check(rgb, 3)
        return self.trunk(self.rgb_stem(rgb))


def correlation(f_gray: torch.Tensor, f_rgb: torch.Tensor, tau: float = 0.01) -> torch.Tensor:
    """Row-stochastic correspondence matrix between two base-grid feature maps.

    Per-position channel vectors are centered (mean over positions) and
    L2-normalized, then M(u, v) = softmax_v(<f_gray(u), f_rgb(v)> / tau):
    row u distributes the input position u over the prior's positions v.

    Accepts C x H x W or B x C x H x W; returns (H*W) x (H*W) or batched.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    squeeze = f_gray.ndim == 3
    if squeeze:
        f_gray, f_rgb = f_gray.unsqueeze(0), f_rgb.unsqueeze(0)
    if f_gray.shape != f_rgb.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_gray.shape)} vs {tuple(f_rgb.shape)}")
    b, c = f_gray.shape[0], f_gray.shape[1]
    a = f_gray.reshape(b, c, -1).transpose(1, 2)  # B x N x C
    bq = f_rgb.reshape(b, c, -1).transpose(1, 2)
    a = a - a.mean(dim=1, keepdim=True)
    bq = bq - bq.mean(dim=1, keepdim=True)
    a = a / a.norm(dim=2, keepdim=True).clamp_min(1e-12)
    bq = bq / bq.norm(dim=2, keepdim=True).clamp_min(1e-12)
    m = torch.softmax(torch.bmm(a, bq.transpose(1, 2)) / tau, dim=2)
    return m[0] if squeeze else m


def warp_map(m: torch.Tensor, feat: torch.Tensor, base_grid: int) -> torch.Tensor:
    """Warp one feature map through M on the base grid; output keeps its shape."""
    squeeze = feat.ndim == 3
    if squeeze:
        feat = feat.unsqueeze(0)
    if m.ndim == 2:
        m = m.unsqueeze(0).expand(feat.shape[0], -1, -1)
    n = base_grid * base_grid
    if m.shape[-2:] != (n, n):
        raise ValueError(f"correlation matrix is {tuple(m.shape[-2:])}, base grid implies {(n, n)}")
    size = feat.shape[-2:]
    h = feat
    if size != (base_grid, base_grid):
        h = F.interpolate(h, size=(base_grid, base_grid), mode="bilinear", align_corners=False)
    b, c = h.shape[0], h.shape[1]
    flat = h.reshape(b, c, n).transpose(1, 2)  # B x N x C
    warped = torch.bmm(m, flat).transpose(1, 2).reshape(b, c, base_grid, base_grid)
    if size != (base_grid, base_grid):
        warped = F.interpolate(warped, size=size, mode="bilinear", align_corners=False)
    return warped[0] if squeeze else warped


def warp(m: torch.Tensor, pyramid: FeaturePyramid, base_grid: int) -> FeaturePyramid:
    """Warp every scale of a pyramid through the same base-grid matrix."""
    return FeaturePyramid(levels=[warp_map(m, t, base_grid) for t in pyramid.levels])
