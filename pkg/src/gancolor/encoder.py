"""Feed-forward encoder mapping a grayscale image (plus class) to a latent code.

Mirrors the prior discriminator's down-stack; the class embedding is injected
once, concatenated with the pooled feature before the final projection. Used
frozen at inference and trained in stage 1 against the inversion losses while
the generator and its discriminator stay frozen.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .colorspace import GrayPlane, normalize_l
from .config import EncoderSpec
from .prior_gan import FeaturePyramid, Generator, LatentCode
from .tensorstore import (
    CheckpointError,
    load_arrays_into_module,
    load_checkpoint,
    save_checkpoint,
    state_dict_to_arrays,
)


class LatentEncoder(nn.Module):
    """Conv down-stack over 1-channel input, class embedding at the head."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_channels
        n_blocks = int(np.log2(spec.resolution)) - 1  # down to 2x2
        widths = [min(8 * w, w * 2**i) for i in range(n_blocks)]
        convs = []
        c_prev = 1
        for c_out in widths:
            convs.append(nn.Conv2d(c_prev, c_out, 4, 2, 1))
            c_prev = c_out
        self.convs = nn.ModuleList(convs)
        self.embed = nn.Embedding(spec.n_classes, spec.embed_dim)
        self.fc = nn.Linear(c_prev + spec.embed_dim, spec.d_z)

    def forward(self, gray: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        if gray.shape[-1] != self.spec.resolution or gray.shape[-2] != self.spec.resolution:
            raise ValueError(
                f"encoder expects {self.spec.resolution}x{self.spec.resolution} input, "
                f"got {tuple(gray.shape[-2:])}"
            )
        if labels.min() < 0 or labels.max() >= self.spec.n_classes:
            raise ValueError(f"class label out of range [0, {self.spec.n_classes})")
        h = gray
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        h = h.mean(dim=(2, 3))
        h = torch.cat([h, self.embed(labels)], dim=1)
        return self.fc(h)


def build_encoder(spec: EncoderSpec, seed: int = 0) -> LatentEncoder:
    torch.manual_seed(seed)
    return LatentEncoder(spec)


def gray_to_net(gray: GrayPlane) -> torch.Tensor:
    """GrayPlane -> 1 x 1 x H x W tensor in network range [-1, 1]."""
    return torch.from_numpy(normalize_l(gray.data)).float().unsqueeze(0).unsqueeze(0)


def encode(enc: LatentEncoder, gray: GrayPlane, class_label: int) -> LatentCode:
    """Deterministic latent code for a grayscale plane at encoder resolution."""
    if class_label < 0 or class_label >= enc.spec.n_classes:
        raise ValueError(f"class label {class_label} out of range [0, {enc.spec.n_classes})")
    enc.eval()
    with torch.no_grad():
        z = enc(gray_to_net(gray), torch.tensor([class_label], dtype=torch.long))
    return LatentCode(z=z[0].numpy().astype(np.float64), class_label=class_label)


def invert(
    enc: LatentEncoder, gen: Generator, gray: GrayPlane, class_label: int
) -> tuple[np.ndarray, FeaturePyramid, LatentCode]:
    """encode -> generate; returns the inversion image, pyramid, and code."""
    from .prior_gan import generate

    code = encode(enc, gray, class_label)
    img, pyramid = generate(gen, code)
    return img, pyramid, code


def save_encoder_checkpoint(directory, enc: LatentEncoder, extra_meta=None, extra_tensors=None):
    tensors = state_dict_to_arrays(enc, "encoder.")
    if extra_tensors:
        tensors.update(extra_tensors)
    meta = {
        "kind": "encoder",
        "resolution": enc.spec.resolution,
        "d_z": enc.spec.d_z,
        "n_classes": enc.spec.n_classes,
        "base_channels": enc.spec.base_channels,
        "embed_dim": enc.spec.embed_dim,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(directory, tensors, meta)


def load_encoder_checkpoint(directory) -> tuple[LatentEncoder, dict]:
    tensors, meta = load_checkpoint(directory)
    if meta.get("kind") != "encoder":
        raise CheckpointError(f"not an encoder checkpoint: {directory}")
    spec = EncoderSpec(
        resolution=meta["resolution"],
        d_z=meta["d_z"],
        n_classes=meta["n_classes"],
        base_channels=meta["base_channels"],
        embed_dim=meta["embed_dim"],
    )
    enc = LatentEncoder(spec)
    load_arrays_into_module(enc, tensors, "encoder.")
    enc.eval()
    return enc, meta
