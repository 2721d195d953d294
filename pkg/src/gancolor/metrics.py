"""Evaluation metrics: distribution distance, colorfulness, PSNR, SSIM.

All metrics are pure functions of their inputs. The distribution distance is
parameterized by a pluggable feature extractor whose identity is recorded in
every report, since absolute values are only comparable under one extractor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import correlate2d

from . import colorspace as cs
from .colorspace import RgbImage


class MetricError(ValueError):
    """Invalid metric input (shape/dimension mismatch, too few samples)."""


# -- colorfulness -----------------------------------------------------------


def colorfulness(img: RgbImage) -> float:
    """Opponent-channel chroma statistic on the 0-255 scale.

    rg = R - G, yb = (R + G)/2 - B; score is the joint spread plus 0.3x the
    joint magnitude of the two channels. Achromatic images score 0.
    """
    rgb = img.data * 255.0
    rg = rgb[..., 0] - rgb[..., 1]
    yb = 0.5 * (rgb[..., 0] + rgb[..., 1]) - rgb[..., 2]
    sigma = math.hypot(rg.std(), yb.std())
    mu = math.hypot(rg.mean(), yb.mean())
    return float(sigma + 0.3 * mu)


# -- distribution distance ---------------------------------------------------


@dataclass
class FeatureStats:
    """Gaussian moments of an embedded image set."""

    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        d = self.mu.shape[0]
        if self.sigma.shape != (d, d):
            raise MetricError(f"sigma must be {d}x{d}, got {self.sigma.shape}")
        if self.n < 2:
            raise MetricError("feature stats need at least 2 samples")
        if np.abs(self.sigma - self.sigma.T).max() > 1e-6:
            raise MetricError("sigma must be symmetric within 1e-6")
        evals = np.linalg.eigvalsh((self.sigma + self.sigma.T) / 2)
        if evals.min() < -1e-6:
            raise MetricError(f"sigma not PSD: min eigenvalue {evals.min():.3g}")


def feature_stats(features: np.ndarray) -> FeatureStats:
    """Mean and covariance of an N x D feature matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise MetricError(f"need an NxD matrix with N >= 2, got {features.shape}")
    mu = features.mean(axis=0)
    sigma = np.cov(features, rowvar=False)
    sigma = np.atleast_2d(sigma)
    return FeatureStats(mu=mu, sigma=sigma, n=features.shape[0])


def _psd_sqrt(mat: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    evals, evecs = np.linalg.eigh((mat + mat.T) / 2)
    if evals.min() < -tol:
        raise MetricError(f"matrix not PSD beyond tolerance: {evals.min():.3g}")
    evals = np.clip(evals, 0.0, None)
    return (evecs * np.sqrt(evals)) @ evecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})."""
    if a.mu.shape != b.mu.shape:
        raise MetricError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    mean_term = float(((a.mu - b.mu) ** 2).sum())
    root_a = _psd_sqrt(a.sigma)
    inner = root_a @ b.sigma @ root_a
    evals = np.linalg.eigvalsh((inner + inner.T) / 2)
    if evals.min() < -1e-6:
        raise MetricError(f"covariance product not PSD: {evals.min():.3g}")
    tr_sqrt = float(np.sqrt(np.clip(evals, 0.0, None)).sum())
    value = mean_term + float(np.trace(a.sigma) + np.trace(b.sigma)) - 2.0 * tr_sqrt
    return max(value, 0.0) if value > -1e-6 else value


class FeatureNetExtractor:
    """Embeds images with the repo's small classifier (penultimate pooling)."""

    def __init__(self, featnet, name: str = "featurenet-penultimate"):
        self.featnet = featnet
        self.name = name

    def __call__(self, images: list[RgbImage]) -> np.ndarray:
        import torch

        batch = np.stack(
            [cs.normalize_rgb(im.data).transpose(2, 0, 1) for im in images]
        ).astype(np.float32)
        self.featnet.eval()
        with torch.no_grad():
            emb = self.featnet.embed(torch.from_numpy(batch))
        return emb.numpy().astype(np.float64)


def _load_dir(directory) -> list[RgbImage]:
    paths = sorted(Path(directory).glob("*.png"))
    return [cs.read_png(p) for p in paths]


def fid(dir_a, dir_b, extractor) -> float:
    """Frechet distance between the embedded image sets of two directories."""
    imgs_a, imgs_b = _load_dir(dir_a), _load_dir(dir_b)
    if len(imgs_a) < 2 or len(imgs_b) < 2:
        raise MetricError(
            f"need >= 2 images per directory, got {len(imgs_a)} and {len(imgs_b)}"
        )
    return frechet_distance(feature_stats(extractor(imgs_a)), feature_stats(extractor(imgs_b)))


# -- pixel metrics ------------------------------------------------------------


def psnr(a: RgbImage, b: RgbImage) -> float:
    """10*log10(1/MSE) on the [0,1] range; +inf when the images are identical."""
    if a.data.shape != b.data.shape:
        raise MetricError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    mse = float(((a.data - b.data) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: RgbImage, b: RgbImage, k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity on luminance (L/100), 11x11 Gaussian window.

    Windowed means/variances use sigma=1.5 Gaussian weights over valid
    windows only; the result is the mean over windows.
    """
    if a.data.shape != b.data.shape:
        raise MetricError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    x = cs.rgb_to_lab(a).l / 100.0
    y = cs.rgb_to_lab(b).l / 100.0
    win = _gaussian_kernel()
    c1, c2 = k1**2, k2**2
    mu_x = correlate2d(x, win, mode="valid")
    mu_y = correlate2d(y, win, mode="valid")
    xx = correlate2d(x * x, win, mode="valid") - mu_x**2
    yy = correlate2d(y * y, win, mode="valid") - mu_y**2
    xy = correlate2d(x * y, win, mode="valid") - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float((num / den).mean())


# -- directory evaluation ------------------------------------------------------


@dataclass
class MetricReport:
    fid: float
    colorful: float
    delta_colorful: float
    psnr: float
    ssim: float
    n_images: int
    extractor: str = "unknown"

    def __post_init__(self):
        if self.fid < -1e-9:
            raise MetricError("fid must be >= 0")
        if not -1.0 - 1e-9 <= self.ssim <= 1.0 + 1e-9:
            raise MetricError("ssim must lie in [-1, 1]")

    def to_text(self) -> str:
        lines = [
            f"n_images = {self.n_images}",
            f"extractor = {self.extractor}",
            f"fid = {self.fid:.6f}",
            f"colorful = {self.colorful:.6f}",
            f"delta_colorful = {self.delta_colorful:.6f}",
            f"psnr = {'inf' if math.isinf(self.psnr) else f'{self.psnr:.6f}'}",
            f"ssim = {self.ssim:.6f}",
        ]
        return "\n".join(lines) + "\n"

    def csv_row(self) -> str:
        p = "inf" if math.isinf(self.psnr) else f"{self.psnr:.6f}"
        return (
            f"{self.fid:.6f},{self.colorful:.6f},{self.delta_colorful:.6f},"
            f"{p},{self.ssim:.6f},{self.n_images}"
        )

    @staticmethod
    def csv_header() -> str:
        return "fid,colorful,delta_colorful,psnr,ssim,n_images"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        fields: dict = {}
        for line in text.splitlines():
            if "=" not in line:
                continue
            k, v = (s.strip() for s in line.split("=", 1))
            fields[k] = v
        return cls(
            fid=float(fields["fid"]),
            colorful=float(fields["colorful"]),
            delta_colorful=float(fields["delta_colorful"]),
            psnr=float(fields["psnr"]),
            ssim=float(fields["ssim"]),
            n_images=int(fields["n_images"]),
            extractor=fields.get("extractor", "unknown"),
        )


def evaluate_pairs(pred_dir, gt_dir, extractor) -> MetricReport:
    """All metrics over two directories with matching PNG filenames."""
    pred_paths = sorted(p.name for p in Path(pred_dir).glob("*.png"))
    gt_paths = sorted(p.name for p in Path(gt_dir).glob("*.png"))
    if pred_paths != gt_paths:
        only_p = set(pred_paths) - set(gt_paths)
        only_g = set(gt_paths) - set(pred_paths)
        raise MetricError(
            f"filename sets differ (only in pred: {sorted(only_p)[:3]}, "
            f"only in gt: {sorted(only_g)[:3]})"
        )
    if len(pred_paths) < 2:
        raise MetricError("need at least 2 image pairs")
    preds = [cs.read_png(Path(pred_dir) / n) for n in pred_paths]
    gts = [cs.read_png(Path(gt_dir) / n) for n in pred_paths]
    colorful_pred = float(np.mean([colorfulness(im) for im in preds]))
    colorful_gt = float(np.mean([colorfulness(im) for im in gts]))
    psnr_vals = [psnr(p, g) for p, g in zip(preds, gts)]
    mean_psnr = math.inf if any(math.isinf(v) for v in psnr_vals) else float(np.mean(psnr_vals))
    report = MetricReport(
        fid=frechet_distance(feature_stats(extractor(preds)), feature_stats(extractor(gts))),
        colorful=colorful_pred,
        delta_colorful=abs(colorful_pred - colorful_gt),
        psnr=mean_psnr,
        ssim=float(np.mean([ssim(p, g) for p, g in zip(preds, gts)])),
        n_images=len(preds),
        extractor=getattr(extractor, "name", type(extractor).__name__),
    )
    return report
