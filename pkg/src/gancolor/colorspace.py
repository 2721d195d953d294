"""RGB <-> CIELAB conversions and the gray/chroma split the pipeline trains on.

All conversions use the D65 white point, sRGB primaries and the standard
piecewise sRGB transfer function. Arithmetic is float64 and purely pixelwise,
so every function here is safe for concurrent use.

Value ranges are part of the contract:
  RgbImage      H x W x 3 in [0, 1]
  LabImage.l    H x W     in [0, 100]
  LabImage.ab   H x W x 2 in [-128, 128]
Network-range planes live in [-1, 1] (see `normalize_l` / `normalize_ab`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

# D65 reference white
_WHITE = np.array([0.95047, 1.0, 1.08883])

# sRGB (linear) -> XYZ, rows sum to the white point
_RGB2XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ2RGB = np.array(
    [
        [3.2404542, -1.5371385, -0.4985314],
        [-0.9692660, 1.8760108, 0.0415560],
        [0.0556434, -0.2040259, 1.0572252],
    ]
)

_DELTA = 6.0 / 29.0


class ColorspaceError(ValueError):
    """Raised when an image violates its declared value range or shape."""


@dataclass
class RgbImage:
    """sRGB-encoded image, H x W x 3, values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ColorspaceError(f"RgbImage expects HxWx3, got {self.data.shape}")
        if self.data.shape[0] < 8 or self.data.shape[1] < 8:
            raise ColorspaceError(f"RgbImage needs H,W >= 8, got {self.data.shape[:2]}")
        if self.data.min() < -1e-9 or self.data.max() > 1 + 1e-9:
            raise ColorspaceError(
                f"RgbImage values must lie in [0,1], got "
                f"[{self.data.min():.4g}, {self.data.max():.4g}]"
            )

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class LabImage:
    """CIELAB image: l is H x W in [0, 100], ab is H x W x 2 in [-128, 128]."""

    l: np.ndarray
    ab: np.ndarray

    def __post_init__(self):
        self.l = np.asarray(self.l, dtype=np.float64)
        self.ab = np.asarray(self.ab, dtype=np.float64)
        if self.l.ndim != 2:
            raise ColorspaceError(f"LabImage.l expects HxW, got {self.l.shape}")
        if self.ab.shape != self.l.shape + (2,):
            raise ColorspaceError(
                f"LabImage.ab expects {self.l.shape + (2,)}, got {self.ab.shape}"
            )
        if self.l.min() < -1e-6 or self.l.max() > 100 + 1e-6:
            raise ColorspaceError("LabImage.l must lie in [0, 100]")
        if np.abs(self.ab).max() > 128 + 1e-6:
            raise ColorspaceError("LabImage.ab must lie in [-128, 128]")


@dataclass
class GrayPlane:
    """Luminance plane (the CIELAB L channel), H x W in [0, 100]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ColorspaceError(f"GrayPlane expects HxW, got {self.data.shape}")
        if self.data.min() < -1e-6 or self.data.max() > 100 + 1e-6:
            raise ColorspaceError("GrayPlane values must lie in [0, 100]")


@dataclass
class ChromaPlanes:
    """Chrominance planes (CIELAB a,b), H x W x 2 in [-128, 128]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ColorspaceError(f"ChromaPlanes expects HxWx2, got {self.data.shape}")
        if np.abs(self.data).max() > 128 + 1e-6:
            raise ColorspaceError("ChromaPlanes values must lie in [-128, 128]")


def _srgb_to_linear(s: np.ndarray) -> np.ndarray:
    return np.where(s <= 0.04045, s / 12.92, ((s + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(lin: np.ndarray) -> np.ndarray:
    lin = np.clip(lin, 0.0, None)
    return np.where(lin <= 0.0031308, 12.92 * lin, 1.055 * lin ** (1 / 2.4) - 0.055)


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _lab_f_inv(f: np.ndarray) -> np.ndarray:
    return np.where(f > _DELTA, f**3, 3 * _DELTA**2 * (f - 4.0 / 29.0))


def rgb_to_lab(img: RgbImage) -> LabImage:
    """Convert sRGB in [0,1] to CIELAB (D65)."""
    xyz = _srgb_to_linear(img.data) @ _RGB2XYZ.T
    f = _lab_f(xyz / _WHITE)
    l = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    # conversion noise can leave L a hair outside [0,100]
    l = np.clip(l, 0.0, 100.0)
    ab = np.clip(np.stack([a, b], axis=-1), -128.0, 128.0)
    return LabImage(l=l, ab=ab)


def lab_to_rgb(img: LabImage) -> RgbImage:
    """Convert CIELAB back to sRGB; out-of-gamut values are clamped to [0,1]."""
    fy = (img.l + 16.0) / 116.0
    fx = fy + img.ab[..., 0] / 500.0
    fz = fy - img.ab[..., 1] / 200.0
    xyz = np.stack([_lab_f_inv(fx), _lab_f_inv(fy), _lab_f_inv(fz)], axis=-1) * _WHITE
    rgb = _linear_to_srgb(xyz @ _XYZ2RGB.T)
    return RgbImage(data=np.clip(rgb, 0.0, 1.0))


def split(img: LabImage) -> tuple[GrayPlane, ChromaPlanes]:
    """Lossless split of a LAB image into its luminance and chroma planes."""
    return GrayPlane(data=img.l.copy()), ChromaPlanes(data=img.ab.copy())


def merge(l: GrayPlane, ab: ChromaPlanes) -> LabImage:
    """Exact concatenation of luminance and chroma planes."""
    if ab.data.shape[:2] != l.data.shape:
        raise ColorspaceError(
            f"merge: shape mismatch, L is {l.data.shape}, ab is {ab.data.shape[:2]}"
        )
    return LabImage(l=l.data.copy(), ab=ab.data.copy())


# -- network value range -------------------------------------------------
# L in [0,100] <-> [-1,1], ab in [-128,128] <-> [-1,1]; exact inverses.


def normalize_l(l: np.ndarray) -> np.ndarray:
    return np.asarray(l, dtype=np.float64) / 50.0 - 1.0


def denormalize_l(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) * 50.0


def normalize_ab(ab: np.ndarray) -> np.ndarray:
    return np.asarray(ab, dtype=np.float64) / 128.0


def denormalize_ab(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * 128.0


def normalize_rgb(rgb: np.ndarray) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64) * 2.0 - 1.0


def denormalize_rgb(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


# -- PNG I/O --------------------------------------------------------------


def read_png(path) -> RgbImage:
    """Read an 8-bit PNG as RGB in [0,1]; grayscale files are replicated to RGB."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return RgbImage(data=arr)


def write_png(img: RgbImage, path) -> None:
    """Write an RGB image as 8-bit PNG (values rounded half-up to the byte grid)."""
    arr = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def png_bytes(img: RgbImage) -> bytes:
    """Encode an RGB image to PNG bytes (deterministic for identical pixels)."""
    import io

    arr = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def gray_from_rgb(img: RgbImage) -> GrayPlane:
    """Luminance of an RGB image (the L channel of its LAB conversion)."""
    return split(rgb_to_lab(img))[0]


# -- differentiable twin ----------------------------------------------------


def lab_net_to_rgb_net(l_net, ab_net):
    """Differentiable normalized-LAB -> normalized-RGB (torch tensors).

    Training losses that read RGB (feature/adversarial terms) need gradients
    through the color conversion, so this mirrors `lab_to_rgb` with the same
    D65 constants on B x 1 x H x W luminance and B x 2 x H x W chroma in
    network range. Out-of-gamut values are clamped, which (as with any
    saturation) zeroes their gradient.
    """
    import torch

    l = (l_net + 1.0) * 50.0
    ab = ab_net * 128.0
    fy = (l + 16.0) / 116.0
    fx = fy + ab[:, :1] / 500.0
    fz = fy - ab[:, 1:] / 200.0
    f = torch.cat([fx, fy, fz], dim=1)
    f_inv = torch.where(f > _DELTA, f.clamp_min(1e-8) ** 3, 3 * _DELTA**2 * (f - 4.0 / 29.0))
    white = torch.as_tensor(_WHITE, dtype=l_net.dtype).reshape(1, 3, 1, 1)
    xyz = f_inv * white
    m = torch.as_tensor(_XYZ2RGB, dtype=l_net.dtype)
    lin = torch.einsum("ij,bjhw->bihw", m, xyz).clamp_min(0.0)
    srgb = torch.where(
        lin <= 0.0031308,
        12.92 * lin,
        1.055 * lin.clamp_min(1e-8) ** (1.0 / 2.4) - 0.055,
    )
    return srgb.clamp(0.0, 1.0) * 2.0 - 1.0
