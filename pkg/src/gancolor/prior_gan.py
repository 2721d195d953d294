"""Class-conditional generator and discriminator providing the color prior.

A miniature of the big conditional-GAN family: residual up-blocks with
class-conditional batch normalization, one self-attention block, hinge
objective, spectral-normalized discriminator with projection conditioning.
The generator's forward pass returns both the image and the multi-scale
feature pyramid tapped at each up-block output (scales 8, 16, ..., R).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .config import GeneratorSpec
from .tensorstore import (
    CheckpointError,
    load_arrays_into_module,
    load_checkpoint,
    save_checkpoint,
    state_dict_to_arrays,
)


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the step and last values."""


@dataclass
class LatentCode:
    """Latent vector plus its class condition."""

    z: np.ndarray
    class_label: int

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.z)):
            raise ValueError("latent code must be finite")
        if self.class_label < 0:
            raise ValueError("class_label must be >= 0")


@dataclass
class FeaturePyramid:
    """Ordered multi-scale feature maps, B x C_s x H_s x W_s, doubling scales."""

    levels: list[torch.Tensor]

    def __post_init__(self):
        if len(self.levels) < 3:
            raise ValueError("pyramid needs at least 3 scales")
        prev = None
        for t in self.levels:
            if t.ndim != 4:
                raise ValueError("pyramid levels must be B x C x H x W")
            if not torch.isfinite(t).all():
                raise ValueError("pyramid contains non-finite values")
            if prev is not None and (t.shape[2] != 2 * prev or t.shape[2] != t.shape[3]):
                raise ValueError("pyramid resolutions must double between scales")
            prev = t.shape[2]

    @property
    def scales(self) -> tuple[int, ...]:
        return tuple(t.shape[2] for t in self.levels)

    def by_scale(self) -> dict[int, torch.Tensor]:
        return {t.shape[2]: t for t in self.levels}


def sample_latent(seed: int, d_z: int) -> np.ndarray:
    """Deterministic standard-normal latent draw."""
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(d_z, generator=g, dtype=torch.float64).numpy()


class ConditionalBatchNorm2d(nn.Module):
    """BatchNorm whose per-channel scale/shift come from the conditioning vector."""

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.bn = nn.BatchNorm2d(channels, affine=False)
        self.gain = nn.Linear(cond_dim, channels)
        self.bias = nn.Linear(cond_dim, channels)
        nn.init.zeros_(self.gain.weight)
        nn.init.ones_(self.gain.bias)
        nn.init.zeros_(self.bias.weight)
        nn.init.zeros_(self.bias.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        g = self.gain(cond).unsqueeze(-1).unsqueeze(-1)
        b = self.bias(cond).unsqueeze(-1).unsqueeze(-1)
        return g * self.bn(x) + b


class SelfAttention2d(nn.Module):
    """Single-head non-local attention with a learned, zero-initialized gate."""

    def __init__(self, channels: int):
        super().__init__()
        self.q = nn.Conv2d(channels, channels // 8, 1)
        self.k = nn.Conv2d(channels, channels // 8, 1)
        self.v = nn.Conv2d(channels, channels // 2, 1)
        self.out = nn.Conv2d(channels // 2, channels, 1)
        self.gate = nn.Parameter(torch.zeros(()))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, hgt, wid = x.shape
        q = self.q(x).reshape(b, -1, hgt * wid)
        k = self.k(x).reshape(b, -1, hgt * wid)
        v = self.v(x).reshape(b, -1, hgt * wid)
        attn = torch.softmax(torch.bmm(q.transpose(1, 2), k) / math.sqrt(q.shape[1]), dim=2)
        o = torch.bmm(v, attn.transpose(1, 2)).reshape(b, -1, hgt, wid)
        return x + self.gate * self.out(o)


class GenUpBlock(nn.Module):
    """Residual block that doubles resolution; both convs are class-modulated."""

    def __init__(self, c_in: int, c_out: int, cond_dim: int):
        super().__init__()
        self.cbn1 = ConditionalBatchNorm2d(c_in, cond_dim)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, 1, 1)
        self.cbn2 = ConditionalBatchNorm2d(c_out, cond_dim)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1)
        self.skip = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.cbn1(x, cond))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = F.relu(self.cbn2(h, cond))
        h = self.conv2(h)
        s = self.skip(F.interpolate(x, scale_factor=2, mode="nearest"))
        return h + s


class Generator(nn.Module):
    """Maps (z, class) to an RGB image in [-1, 1] and its feature pyramid."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        cond_dim = spec.d_z + spec.embed_dim
        self.embed = nn.Embedding(spec.n_classes, spec.embed_dim)
        self.input_linear = nn.Linear(spec.d_z, 4 * 4 * spec.channels[0], bias=False)
        blocks = []
        c_prev = spec.channels[0]
        for c_out in spec.channels:
            blocks.append(GenUpBlock(c_prev, c_out, cond_dim))
            c_prev = c_out
        self.blocks = nn.ModuleList(blocks)
        attn_at = max(8, min(spec.attn_scale, spec.resolution // 2))
        self.attn_scale = attn_at
        self.attn = SelfAttention2d(dict(zip(self.spec.scales, spec.channels))[attn_at])
        self.out_bn = nn.BatchNorm2d(spec.channels[-1])
        self.out_conv = nn.Conv2d(spec.channels[-1], 3, 3, 1, 1)

    def forward(self, z: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if labels.min() < 0 or labels.max() >= self.spec.n_classes:
            raise ValueError(
                f"class label out of range [0, {self.spec.n_classes}): "
                f"{int(labels.min())}..{int(labels.max())}"
            )
        cond = torch.cat([z, self.embed(labels)], dim=1)
        h = self.input_linear(z).reshape(-1, self.spec.channels[0], 4, 4)
        pyramid = []
        for block in self.blocks:
            h = block(h, cond)
            if h.shape[2] == self.attn_scale:
                h = self.attn(h)
            pyramid.append(h)
        img = torch.tanh(self.out_conv(F.relu(self.out_bn(h))))
        return img, pyramid


class PriorDiscriminator(nn.Module):
    """Spectral-normalized conv stack with projection class conditioning.

    `features(x, k)` exposes the last k pre-logit feature maps in shallow-to-
    deep order (strictly decreasing spatial size), which the inversion
    feature loss consumes.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        w = spec.base_channels
        n_blocks = int(math.log2(spec.resolution)) - 1  # down to 2x2
        widths = [min(8 * w, w * 2**i) for i in range(n_blocks)]
        convs = []
        c_prev = 3
        for c_out in widths:
            convs.append(spectral_norm(nn.Conv2d(c_prev, c_out, 4, 2, 1)))
            c_prev = c_out
        self.convs = nn.ModuleList(convs)
        self.linear = spectral_norm(nn.Linear(c_prev, 1))
        self.embed = nn.Embedding(spec.n_classes, c_prev)
        self.depth = len(convs)

    def _stack(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats

    def features(self, x: torch.Tensor, k: int) -> list[torch.Tensor]:
        if k > self.depth:
            raise ValueError(f"requested {k} feature layers, discriminator has {self.depth}")
        return self._stack(x)[-k:]

    def forward(self, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        h = self._stack(x)[-1].sum(dim=(2, 3))
        out = self.linear(h)
        out = out + (self.embed(labels) * h).sum(dim=1, keepdim=True)
        return out.squeeze(1)


def build_models(spec: GeneratorSpec) -> tuple[Generator, PriorDiscriminator]:
    """Construct G and D from the spec's seed so inits are reproducible."""
    torch.manual_seed(spec.seed)
    gen = Generator(spec)
    disc = PriorDiscriminator(spec)
    return gen, disc


def generate(gen: Generator, code: LatentCode) -> tuple[np.ndarray, FeaturePyramid]:
    """Run the generator for one latent code.

    Returns the image as H x W x 3 float in [0, 1] plus the feature pyramid
    from the same forward pass. Deterministic given the code and weights.
    """
    if code.class_label >= gen.spec.n_classes:
        raise ValueError(
            f"class label {code.class_label} out of range [0, {gen.spec.n_classes})"
        )
    if code.z.shape[0] != gen.spec.d_z:
        raise ValueError(f"latent has dim {code.z.shape[0]}, expected {gen.spec.d_z}")
    gen.eval()
    with torch.no_grad():
        z = torch.from_numpy(code.z).float().unsqueeze(0)
        labels = torch.tensor([code.class_label], dtype=torch.long)
        img_net, pyramid = gen(z, labels)
    img = ((img_net[0] + 1.0) / 2.0).clamp(0, 1).permute(1, 2, 0).numpy().astype(np.float64)
    return img, FeaturePyramid(levels=pyramid)


def _spec_meta(spec: GeneratorSpec) -> dict:
    meta = {
        "d_z": spec.d_z,
        "n_classes": spec.n_classes,
        "resolution": spec.resolution,
        "base_channels": spec.base_channels,
        "embed_dim": spec.embed_dim,
        "attn_scale": spec.attn_scale,
        "seed": spec.seed,
        "channels": list(spec.channels),
    }
    return meta


def spec_from_meta(meta: dict) -> GeneratorSpec:
    ch = meta["channels"]
    return GeneratorSpec(
        d_z=meta["d_z"],
        n_classes=meta["n_classes"],
        resolution=meta["resolution"],
        base_channels=meta["base_channels"],
        embed_dim=meta["embed_dim"],
        attn_scale=meta["attn_scale"],
        seed=meta["seed"],
        channels=tuple(ch) if isinstance(ch, list) else (ch,),
    )


def save_prior_checkpoint(directory, gen, disc, spec, extra_meta=None, extra_tensors=None):
    tensors = {}
    tensors.update(state_dict_to_arrays(gen, "generator."))
    tensors.update(state_dict_to_arrays(disc, "discriminator."))
    if extra_tensors:
        tensors.update(extra_tensors)
    meta = {"kind": "prior_gan", **_spec_meta(spec)}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(directory, tensors, meta)


def load_prior_checkpoint(directory) -> tuple[Generator, PriorDiscriminator, GeneratorSpec, dict]:
    tensors, meta = load_checkpoint(directory)
    if meta.get("kind") != "prior_gan":
        raise CheckpointError(f"not a prior_gan checkpoint: {directory}")
    spec = spec_from_meta(meta)
    gen, disc = build_models(spec)
    load_arrays_into_module(gen, tensors, "generator.")
    load_arrays_into_module(disc, tensors, "discriminator.")
    gen.eval()
    disc.eval()
    return gen, disc, spec, meta


def train_prior_gan(
    dataset,
    spec: GeneratorSpec,
    steps: int,
    out_dir,
    batch: int = 16,
    lr_g: float = 2e-4,
    lr_d: float = 2e-4,
    seed: int = 0,
    log_every: int = 50,
) -> Path:
    """Hinge-loss GAN training on a labeled color image dataset.

    `dataset` must expose `n_images` and `batch_arrays(indices)` returning
    (rgb_net, labels) arrays. Writes the checkpoint plus a loss-curve CSV to
    `out_dir` and returns the checkpoint path. Aborts with TrainingDiverged
    if any loss goes non-finite.
    """
    if dataset.n_images < 500:
        raise ValueError(f"prior GAN training needs >= 500 images, got {dataset.n_images}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gen, disc = build_models(spec)
    opt_g = torch.optim.Adam(gen.parameters(), lr=lr_g, betas=(0.0, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=lr_d, betas=(0.0, 0.999))

    log_rows = ["step,d_loss,g_loss,seconds"]
    t0 = time.time()
    d_loss_v = g_loss_v = float("nan")
    for step in range(steps):
        g_rng = torch.Generator().manual_seed(seed * 1000003 + step)
        idx = torch.randint(0, dataset.n_images, (batch,), generator=g_rng).numpy()
        rgb_net, labels = dataset.batch_arrays(idx)
        real = torch.from_numpy(rgb_net).float()
        y = torch.from_numpy(labels).long()

        z = torch.randn(batch, spec.d_z, generator=g_rng)
        with torch.no_grad():
            fake, _ = gen(z, y)
        d_real = disc(real, y)
        d_fake = disc(fake, y)
        d_loss = F.relu(1.0 - d_real).mean() + F.relu(1.0 + d_fake).mean()
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        z = torch.randn(batch, spec.d_z, generator=g_rng)
        fake, _ = gen(z, y)
        g_loss = -disc(fake, y).mean()
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        d_loss_v, g_loss_v = float(d_loss.detach()), float(g_loss.detach())
        if not (math.isfinite(d_loss_v) and math.isfinite(g_loss_v)):
            report = f"diverged at step {step}: d_loss={d_loss_v}, g_loss={g_loss_v}"
            (out_dir / "train_log.csv").write_text("\n".join(log_rows) + "\n")
            raise TrainingDiverged(report)
        if step % log_every == 0 or step == steps - 1:
            log_rows.append(f"{step},{d_loss_v:.6f},{g_loss_v:.6f},{time.time() - t0:.1f}")

    (out_dir / "train_log.csv").write_text("\n".join(log_rows) + "\n")
    ckpt_dir = out_dir / "checkpoint"
    save_prior_checkpoint(
        ckpt_dir,
        gen,
        disc,
        spec,
        extra_meta={
            "train_steps": steps,
            "train_seed": seed,
            "batch": batch,
            "lr_g": lr_g,
            "lr_d": lr_d,
            "final_d_loss": round(d_loss_v, 6) if math.isfinite(d_loss_v) else 0.0,
            "final_g_loss": round(g_loss_v, 6) if math.isfinite(g_loss_v) else 0.0,
        },
    )
    return ckpt_dir
