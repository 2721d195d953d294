"""Latent-space control: stochastic diversity and interpretable walks.

A colorization is a deterministic function of (gray input, class, z). Varying
z while holding the gray plane fixed changes only chrominance, so resampling
or steering z yields diverse colorizations of one photograph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .colorspace import GrayPlane, RgbImage
from .prior_gan import LatentCode


class LatentControlError(ValueError):
    """Invalid latent-control request."""


def perturb(z: np.ndarray, sigma: float, n: int, seed: int) -> list[np.ndarray]:
    """n jittered copies z + sigma * eps_i, eps_i ~ N(0, I), fixed by seed.

    sigma = 0 returns exact copies; the draw is deterministic per seed.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if sigma < 0:
        raise LatentControlError(f"sigma must be >= 0, got {sigma}")
    if n < 1:
        raise LatentControlError(f"n must be >= 1, got {n}")
    eps = np.random.default_rng(seed).standard_normal((n, z.shape[0]))
    return [z + sigma * eps[i] for i in range(n)]


@dataclass
class DirectionSet:
    """Orthonormal latent directions ordered by descending singular value."""

    vectors: np.ndarray  # m x d_z, unit rows
    singular_values: np.ndarray  # m, descending

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.singular_values = np.asarray(self.singular_values, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise LatentControlError("vectors must be m x d_z")
        m = self.vectors.shape[0]
        if self.singular_values.shape != (m,):
            raise LatentControlError("need one singular value per direction")
        if np.any(np.diff(self.singular_values) > 1e-9):
            raise LatentControlError("singular values must be descending")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise LatentControlError("direction vectors must be unit norm")
        gram = self.vectors @ self.vectors.T
        off = gram - np.diag(np.diag(gram))
        if np.abs(off).max() > 1e-5:
            raise LatentControlError("direction vectors must be pairwise orthogonal")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __getitem__(self, i: int) -> tuple[int, np.ndarray, float]:
        return i, self.vectors[i], float(self.singular_values[i])


def directions_from_weight(weight: torch.Tensor, m: int | None = None) -> DirectionSet:
    """Right singular vectors of a latent projection matrix, top-m."""
    _, s, vh = torch.linalg.svd(weight.detach().double(), full_matrices=False)
    vecs = vh.numpy()
    vals = s.numpy()
    if m is not None:
        if not 1 <= m <= vecs.shape[0]:
            raise LatentControlError(f"m must be in [1, {vecs.shape[0]}], got {m}")
        vecs, vals = vecs[:m], vals[:m]
    return DirectionSet(vectors=vecs, singular_values=vals)


def discover_directions(generator_checkpoint, m: int | None = None) -> DirectionSet:
    """Latent axes the generator's first layer responds to most strongly.

    The first latent projection (restricted to its z columns) is factored by
    SVD; its right singular vectors, ordered by singular value, give the
    direction set. Deterministic per checkpoint.
    """
    from .prior_gan import load_prior_checkpoint

    gen, _, spec, _ = load_prior_checkpoint(generator_checkpoint)
    if m is not None and m > spec.d_z:
        raise LatentControlError(f"m={m} exceeds latent dimension {spec.d_z}")
    return directions_from_weight(gen.input_linear.weight[:, : spec.d_z], m)


def save_directions(directory, ds: DirectionSet) -> None:
    from .tensorstore import save_checkpoint

    save_checkpoint(
        directory,
        {"vectors": ds.vectors, "singular_values": ds.singular_values},
        {"kind": "directions", "m": len(ds), "d_z": ds.vectors.shape[1]},
    )


def load_directions(directory) -> DirectionSet:
    from .tensorstore import CheckpointError, load_checkpoint

    tensors, meta = load_checkpoint(directory)
    if meta.get("kind") != "directions":
        raise CheckpointError(f"not a directions checkpoint: {directory}")
    return DirectionSet(tensors["vectors"], tensors["singular_values"])


def walk(z: np.ndarray, direction: np.ndarray, alphas) -> list[np.ndarray]:
    """Latent line z + alpha_i * d; exact linear arithmetic, no rescaling."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    d = np.asarray(direction, dtype=np.float64).reshape(-1)
    if d.shape != z.shape:
        raise LatentControlError(f"direction dim {d.shape[0]} != latent dim {z.shape[0]}")
    return [z + float(a) * d for a in alphas]


def diversify_detailed(
    pipeline,
    gray: GrayPlane,
    class_label: int,
    sigma: float = 0.5,
    n: int = 8,
    seed: int = 0,
) -> list[tuple[RgbImage, LatentCode]]:
    """Encode once, jitter the code n times, colorize each jittered code."""
    _, base_code = pipeline.colorize_gray(gray, class_label)
    out = []
    for z in perturb(base_code.z, sigma, n, seed):
        img, code = pipeline.colorize_gray(gray, class_label, z_override=z)
        out.append((img, code))
    return out


def diversify(
    pipeline,
    gray: GrayPlane,
    class_label: int,
    sigma: float = 0.5,
    n: int = 8,
    seed: int = 0,
) -> list[RgbImage]:
    """n diverse colorizations of one gray plane; luminance is preserved."""
    return [img for img, _ in diversify_detailed(pipeline, gray, class_label, sigma, n, seed)]


def walk_images(
    pipeline,
    gray: GrayPlane,
    class_label: int,
    direction: np.ndarray,
    alphas,
    z_base: np.ndarray | None = None,
) -> list[tuple[RgbImage, LatentCode]]:
    """Colorizations along z + alpha * d; z comes from the encoder unless given."""
    if z_base is None:
        _, base_code = pipeline.colorize_gray(gray, class_label)
        z_base = base_code.z
    out = []
    for z in walk(z_base, direction, alphas):
        img, code = pipeline.colorize_gray(gray, class_label, z_override=z)
        out.append((img, code))
    return out
