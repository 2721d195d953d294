"""Colorization network: encoder-resnet-decoder trunk modulated by warped
prior features through spatially-adaptive denormalization (SPADE).

The trunk reads only the grayscale plane; all color information enters via
the guidance pyramid. Six residual blocks at the bottleneck are guided by the
matching pyramid scale (R/4), the two up-blocks by scales R/2 and R. Output
is the two chroma planes in [-1, 1] (tanh); the luminance channel is copied
from the input, never predicted.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import colorspace as cs
from .alignment import SharedSpaceProjector, correlation, warp
from .colorspace import ChromaPlanes, GrayPlane, LabImage, RgbImage
from .config import EncoderSpec, GeneratorSpec
from .encoder import LatentEncoder, encode, gray_to_net
from .prior_gan import FeaturePyramid, Generator, LatentCode
from .tensorstore import (
    CheckpointError,
    load_arrays_into_module,
    load_checkpoint,
    save_checkpoint,
    state_dict_to_arrays,
)


class GuidanceScaleError(KeyError):
    """A SPADE stage asked for a pyramid scale the guidance does not provide."""


def batch_feature_norm(feature: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Parameter-free per-channel normalization over batch and spatial dims."""
    mean = feature.mean(dim=(0, 2, 3), keepdim=True)
    var = feature.var(dim=(0, 2, 3), unbiased=False, keepdim=True)
    return (feature - mean) / torch.sqrt(var + eps)


class SpadeNorm(nn.Module):
    """gamma(guidance) * norm(feature) + beta(guidance), per spatial site.

    Guidance is resized to the feature's spatial size; gamma/beta come from
    two conv heads on a shared conv stem. The gamma head's bias starts at 1
    so an untrained layer passes the normalized feature through.
    """

    def __init__(self, channels: int, guidance_channels: int, hidden: int = 128):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(guidance_channels, hidden, 3, 1, 1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, 1, 1)
        self.beta = nn.Conv2d(hidden, channels, 3, 1, 1)
        nn.init.ones_(self.gamma.bias)

    def forward(self, feature: torch.Tensor, guidance: torch.Tensor) -> torch.Tensor:
        if guidance.shape[-2:] != feature.shape[-2:]:
            guidance = F.interpolate(
                guidance, size=feature.shape[-2:], mode="bilinear", align_corners=False
            )
        h = self.stem(guidance)
        return self.gamma(h) * batch_feature_norm(feature) + self.beta(h)


class SpadeResBlock(nn.Module):
    """Residual block with SPADE before each conv; channel-preserving."""

    def __init__(self, channels: int, guidance_channels: int):
        super().__init__()
        self.spade1 = SpadeNorm(channels, guidance_channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.spade2 = SpadeNorm(channels, guidance_channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)

    def forward(self, x: torch.Tensor, guidance: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.relu(self.spade1(x, guidance)))
        h = self.conv2(F.relu(self.spade2(h, guidance)))
        return x + h


class SpadeUpBlock(nn.Module):
    """Upsample x2, then SPADE-modulated conv."""

    def __init__(self, c_in: int, c_out: int, guidance_channels: int):
        super().__init__()
        self.spade = SpadeNorm(c_in, guidance_channels)
        self.conv = nn.Conv2d(c_in, c_out, 3, 1, 1)

    def forward(self, x: torch.Tensor, guidance: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.conv(F.relu(self.spade(x, guidance)))


class ColorizationNet(nn.Module):
    """Two down blocks, six SPADE residual blocks, two SPADE up blocks.

    `guidance_channels` maps pyramid scale -> channel width; the net needs
    scales R/4, R/2 and R. Forward takes the normalized gray plane plus a
    {scale: tensor} guidance dict and returns chroma in [-1, 1].
    """

    N_RES_BLOCKS = 6

    def __init__(self, resolution: int, guidance_channels: dict[int, int], width: int = 64):
        super().__init__()
        self.resolution = resolution
        need = (resolution // 4, resolution // 2, resolution)
        for scale in need:
            if scale not in guidance_channels:
                raise GuidanceScaleError(
                    f"guidance pyramid lacks scale {scale} (needs {need})"
                )
        self.guidance_scales = need
        g4, g2, g1 = (guidance_channels[s] for s in need)
        w = width
        self.stem = nn.Sequential(nn.Conv2d(1, w, 7, 1, 3), nn.ReLU())
        self.down1 = nn.Sequential(nn.Conv2d(w, 2 * w, 4, 2, 1), nn.ReLU())
        self.down2 = nn.Sequential(nn.Conv2d(2 * w, 4 * w, 4, 2, 1), nn.ReLU())
        self.res_blocks = nn.ModuleList(
            SpadeResBlock(4 * w, g4) for _ in range(self.N_RES_BLOCKS)
        )
        self.up1 = SpadeUpBlock(4 * w, 2 * w, g2)
        self.up2 = SpadeUpBlock(2 * w, w, g1)
        self.out_conv = nn.Conv2d(w, 2, 3, 1, 1)

    def forward(self, gray: torch.Tensor, guidance: dict[int, torch.Tensor]) -> torch.Tensor:
        if gray.shape[-1] != self.resolution or gray.shape[-2] != self.resolution:
            raise ValueError(
                f"expected {self.resolution}x{self.resolution} input, got {tuple(gray.shape[-2:])}"
            )
        for scale in self.guidance_scales:
            if scale not in guidance:
                raise GuidanceScaleError(f"guidance pyramid lacks scale {scale}")
        s4, s2, s1 = self.guidance_scales
        h = self.down2(self.down1(self.stem(gray)))
        for block in self.res_blocks:
            h = block(h, guidance[s4])
        h = self.up1(h, guidance[s2])
        h = self.up2(h, guidance[s1])
        return torch.tanh(self.out_conv(h))


def build_colorizer(spec: GeneratorSpec, width: int = 64, seed: int = 0) -> ColorizationNet:
    torch.manual_seed(seed)
    widths = dict(zip(spec.scales, spec.channels))
    return ColorizationNet(spec.resolution, widths, width=width)


class ColorizationPipeline:
    """Frozen inference bundle: encoder -> generator -> align -> colorize.

    All members are eval-mode modules with immutable weights; calls are
    read-only and safe to run concurrently.
    """

    def __init__(
        self,
        gen: Generator,
        enc: LatentEncoder,
        projector: SharedSpaceProjector,
        net: ColorizationNet,
        tau: float = 0.01,
        guidance_mode: str = "warped",  # warped | identity | zero | image
    ):
        self.gen = gen
        self.enc = enc
        self.projector = projector
        self.net = net
        self.tau = tau
        if guidance_mode not in ("warped", "identity", "zero", "image"):
            raise ValueError(f"unknown guidance mode {guidance_mode!r}")
        self.guidance_mode = guidance_mode
        for m in (gen, enc, projector, net):
            m.eval()

    @property
    def resolution(self) -> int:
        return self.gen.spec.resolution

    @property
    def n_classes(self) -> int:
        return self.gen.spec.n_classes

    def guidance_for(
        self, gray_net: torch.Tensor, z: torch.Tensor, labels: torch.Tensor
    ) -> tuple[dict[int, torch.Tensor], torch.Tensor]:
        """Build the {scale: tensor} guidance dict plus the inversion image."""
        img_net, pyramid_levels = self.gen(z, labels)
        pyramid = FeaturePyramid(levels=pyramid_levels)
        base = self.projector.base_grid
        if self.guidance_mode == "warped":
            f_gray = self.projector.project_gray(gray_net)
            f_rgb = self.projector.project_rgb(img_net)
            m = correlation(f_gray, f_rgb, tau=self.tau)
            warped = warp(m, pyramid, base)
        elif self.guidance_mode == "identity":
            n = base * base
            eye = torch.eye(n, device=gray_net.device).expand(gray_net.shape[0], n, n)
            warped = warp(eye, pyramid, base)
        elif self.guidance_mode == "zero":
            warped = FeaturePyramid(levels=[torch.zeros_like(t) for t in pyramid.levels])
        else:  # image guidance: the inversion image resized to every scale
            levels = [
                F.interpolate(img_net, size=t.shape[-2:], mode="bilinear", align_corners=False)
                for t in pyramid.levels
            ]
            warped = FeaturePyramid(levels=levels)
        return warped.by_scale(), img_net

    def chroma_net(
        self, gray_net: torch.Tensor, z: torch.Tensor, labels: torch.Tensor
    ) -> torch.Tensor:
        guidance, _ = self.guidance_for(gray_net, z, labels)
        return self.net(gray_net, guidance)

    def colorize_gray(
        self, gray: GrayPlane, class_label: int, z_override: np.ndarray | None = None
    ) -> tuple[RgbImage, LatentCode]:
        """Full pipeline for one grayscale plane; returns image and the code used."""
        if z_override is not None:
            code = LatentCode(z=np.asarray(z_override, dtype=np.float64), class_label=class_label)
            if code.z.shape[0] != self.gen.spec.d_z:
                raise ValueError(
                    f"z override has dim {code.z.shape[0]}, expected {self.gen.spec.d_z}"
                )
        else:
            code = encode(self.enc, gray, class_label)
        with torch.no_grad():
            gray_net = gray_to_net(gray)
            z = torch.from_numpy(code.z).float().unsqueeze(0)
            labels = torch.tensor([code.class_label], dtype=torch.long)
            ab_net = self.chroma_net(gray_net, z, labels)
        ab = cs.denormalize_ab(ab_net[0].permute(1, 2, 0).numpy().astype(np.float64))
        lab = cs.merge(gray, ChromaPlanes(data=ab))
        return cs.lab_to_rgb(lab), code

    def colorize_rgbfile(self, img: RgbImage, class_label: int, **kw) -> tuple[RgbImage, LatentCode]:
        """Convenience: treat file content as grayscale via its luminance."""
        gray = cs.gray_from_rgb(img)
        return self.colorize_gray(gray, class_label, **kw)


def forward_chroma(net: ColorizationNet, gray: GrayPlane, warped: FeaturePyramid) -> ChromaPlanes:
    """Single-image chroma prediction from a prepared guidance pyramid."""
    net.eval()
    with torch.no_grad():
        ab_net = net(gray_to_net(gray), warped.by_scale())
    return ChromaPlanes(
        data=cs.denormalize_ab(ab_net[0].permute(1, 2, 0).numpy().astype(np.float64))
    )


def save_colorizer_checkpoint(
    directory, net: ColorizationNet, projector: SharedSpaceProjector, patch_disc=None,
    extra_meta=None, extra_tensors=None,
):
    tensors = {}
    tensors.update(state_dict_to_arrays(net, "colorizer."))
    tensors.update(state_dict_to_arrays(projector, "projector."))
    if patch_disc is not None:
        tensors.update(state_dict_to_arrays(patch_disc, "patch_disc."))
    if extra_tensors:
        tensors.update(extra_tensors)
    g_channels = [net.res_blocks[0].spade1.stem[0].in_channels,
                  net.up1.spade.stem[0].in_channels,
                  net.up2.spade.stem[0].in_channels]
    meta = {
        "kind": "colorizer",
        "resolution": net.resolution,
        "width": net.stem[0].out_channels,
        "base_grid": projector.base_grid,
        "c_s": projector.c_s,
        "projector_width": projector.gray_stem[0].out_channels,
        "guidance_scales": list(net.guidance_scales),
        "guidance_widths": g_channels,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(directory, tensors, meta)


def load_colorizer_checkpoint(directory):
    tensors, meta = load_checkpoint(directory)
    if meta.get("kind") != "colorizer":
        raise CheckpointError(f"not a colorizer checkpoint: {directory}")
    scales = meta["guidance_scales"]
    scales = scales if isinstance(scales, list) else [scales]
    g_widths = meta["guidance_widths"]
    g_widths = g_widths if isinstance(g_widths, list) else [g_widths]
    widths = dict(zip(scales, g_widths))
    net = ColorizationNet(meta["resolution"], widths, width=meta["width"])
    projector = SharedSpaceProjector(
        meta["resolution"], meta["base_grid"], meta["c_s"],
        width=meta.get("projector_width", 64),
    )
    load_arrays_into_module(net, tensors, "colorizer.")
    load_arrays_into_module(projector, tensors, "projector.")
    net.eval()
    projector.eval()
    return net, projector, meta
