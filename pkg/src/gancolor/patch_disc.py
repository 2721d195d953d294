"""Three-scale patch discriminator over LAB images, spectrally normalized.

Three weight-independent conv bodies score the image pyramid at full, half
and quarter resolution (average-pool factor 2 between scales). Every conv is
spectrally normalized with one power-iteration step per training forward.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm


def _patch_body(in_ch: int, input_size: int, widths=(64, 128, 256, 512)) -> nn.Sequential:
    """Conv stack: stride-2 kernel-4 while the map stays >= 4 px, then stride 1.

    Small inputs get fewer stride-2 stages so the final score map is always
    at least 1 px and strictly smaller than the input.
    """
    layers: list[nn.Module] = []
    c_prev, size = in_ch, input_size
    for c_out in widths:
        if size >= 4:
            layers += [spectral_norm(nn.Conv2d(c_prev, c_out, 4, 2, 1)), nn.LeakyReLU(0.2)]
            size //= 2
        else:
            layers += [spectral_norm(nn.Conv2d(c_prev, c_out, 3, 1, 1)), nn.LeakyReLU(0.2)]
        c_prev = c_out
    layers.append(spectral_norm(nn.Conv2d(c_prev, 1, 3, 1, 1)))
    return nn.Sequential(*layers)


class MultiScalePatchDiscriminator(nn.Module):
    """Scores normalized LAB images (B x 3 x H x W in [-1, 1]) at 3 scales."""

    N_SCALES = 3

    def __init__(self, resolution: int, in_ch: int = 3):
        super().__init__()
        self.resolution = resolution
        self.in_ch = in_ch
        self.bodies = nn.ModuleList(
            _patch_body(in_ch, resolution // 2**i) for i in range(self.N_SCALES)
        )

    def score_map_sizes(self) -> list[int]:
        """Declared spatial size of each scale's score map."""
        sizes = []
        for i in range(self.N_SCALES):
            size = self.resolution // 2**i
            for _ in range(4):
                if size >= 4:
                    size //= 2
            sizes.append(size)
        return sizes

    def forward(self, lab: torch.Tensor) -> list[torch.Tensor]:
        if lab.ndim != 4 or lab.shape[1] != self.in_ch:
            raise ValueError(f"expected B x {self.in_ch} x H x W LAB input, got {tuple(lab.shape)}")
        scores = []
        x = lab
        for body in self.bodies:
            scores.append(body(x))
            x = F.avg_pool2d(x, 2)
        return scores


def build_patch_discriminator(resolution: int, seed: int = 0) -> MultiScalePatchDiscriminator:
    torch.manual_seed(seed)
    return MultiScalePatchDiscriminator(resolution)
