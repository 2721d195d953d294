"""Small fixed conv classifier used as the feature backbone phi.

Five conv blocks; the last three expose taps ("relu3", "relu4", "relu5",
shallow to deep) that feed the perceptual and contextual losses. The pooled
penultimate feature doubles as the desk-scale FID embedding. Weights come
from a quick supervised run on the synthetic set; a random-initialized
instance is also valid wherever only differentiability or shape matters.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

TAP_NAMES = ("relu3", "relu4", "relu5")


def _block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, 1, 1),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, 1, 1),
        nn.ReLU(inplace=True),
    )


class FeatureNet(nn.Module):
    """Conv classifier over RGB in [-1, 1]; exposes intermediate taps."""

    def __init__(self, n_classes: int = 4, width: int = 32):
        super().__init__()
        w = width
        self.block1 = _block(3, w)
        self.block2 = _block(w, 2 * w)
        self.block3 = _block(2 * w, 4 * w)
        self.block4 = _block(4 * w, 4 * w)
        self.block5 = _block(4 * w, 4 * w)
        self.head = nn.Linear(4 * w, n_classes)
        self.feature_dim = 4 * w
        self.n_classes = n_classes

    def features(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """Tap activations for a batch of RGB images in [-1, 1]."""
        h = self.block1(x)
        h = F.avg_pool2d(h, 2)
        h = self.block2(h)
        h = F.avg_pool2d(h, 2)
        h3 = self.block3(h)
        h = F.avg_pool2d(h3, 2)
        h4 = self.block4(h)
        h = F.avg_pool2d(h4, 2)
        h5 = self.block5(h)
        return {"relu3": h3, "relu4": h4, "relu5": h5}

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled penultimate feature (the FID embedding), B x feature_dim."""
        h5 = self.features(x)["relu5"]
        return h5.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(x))


def train_feature_net(
    images: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    steps: int = 300,
    batch: int = 32,
    lr: float = 2e-3,
    seed: int = 0,
    width: int = 32,
) -> FeatureNet:
    """Fit the classifier on (N,3,H,W) images in [-1,1]; returns eval-mode net."""
    torch.manual_seed(seed)
    net = FeatureNet(n_classes=n_classes, width=width)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    x_all = torch.from_numpy(np.ascontiguousarray(images)).float()
    y_all = torch.from_numpy(np.ascontiguousarray(labels)).long()
    n = x_all.shape[0]
    for step in range(steps):
        g = torch.Generator().manual_seed(seed * 1000003 + step)
        idx = torch.randint(0, n, (batch,), generator=g)
        logits = net(x_all[idx])
        loss = F.cross_entropy(logits, y_all[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def save_feature_net(directory, net: FeatureNet, extra_meta=None) -> None:
    from .tensorstore import save_checkpoint, state_dict_to_arrays

    meta = {"kind": "featurenet", "n_classes": net.n_classes, "width": net.feature_dim // 4}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(directory, state_dict_to_arrays(net, "featurenet."), meta)


def load_feature_net(directory) -> FeatureNet:
    from .tensorstore import CheckpointError, load_arrays_into_module, load_checkpoint

    tensors, meta = load_checkpoint(directory)
    if meta.get("kind") != "featurenet":
        raise CheckpointError(f"not a featurenet checkpoint: {directory}")
    net = FeatureNet(n_classes=meta["n_classes"], width=meta["width"])
    load_arrays_into_module(net, tensors, "featurenet.")
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net
