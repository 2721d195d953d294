"""Training objectives for the inversion, colorization and adversarial parts.

Every loss is a differentiable scalar with explicit reductions (means over
elements unless stated), so the weighting constants stay comparable across
input sizes. Composition helpers return both the weighted total and a
per-term breakdown for logging.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    """Relative weights of the loss terms; all must be >= 0."""

    lambda_inv_ftr: float = 1.0
    lambda_inv_reg: float = 0.0125
    lambda_perc: float = 1e-3
    lambda_adv: float = 1.0
    lambda_dom: float = 10.0
    lambda_ctx: float = 0.1
    # the latent penalty is (1/2)||z||_2 by default; set True for (1/2)||z||_2^2
    inv_reg_squared: bool = False

    def __post_init__(self):
        for name in (
            "lambda_inv_ftr",
            "lambda_inv_reg",
            "lambda_perc",
            "lambda_adv",
            "lambda_dom",
            "lambda_ctx",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def feature_l1_sum(feats_a: list[torch.Tensor], feats_b: list[torch.Tensor]) -> torch.Tensor:
    """Sum over layers of the per-layer mean absolute feature difference."""
    if len(feats_a) != len(feats_b):
        raise ValueError("feature lists differ in length")
    total = feats_a[0].new_zeros(())
    for fa, fb in zip(feats_a, feats_b):
        total = total + (fa - fb).abs().mean()
    return total


def inversion_feature_loss(disc, x_inv: torch.Tensor, x: torch.Tensor, k: int = 3) -> torch.Tensor:
    """Mean-L1 distance between the last `k` discriminator feature maps, summed.

    `disc` is the frozen discriminator of the color prior; inputs are RGB
    batches in network range [-1, 1].
    """
    return feature_l1_sum(disc.features(x_inv, k), disc.features(x, k))


def inversion_reg_loss(z: torch.Tensor, squared: bool = False) -> torch.Tensor:
    """Latent magnitude penalty, (1/2)||z||_2 per sample, averaged over the batch."""
    if z.ndim == 1:
        z = z.unsqueeze(0)
    norms = z.norm(p=2, dim=1)
    if squared:
        norms = norms**2
    return 0.5 * norms.mean()


def _flat_scores(scores) -> torch.Tensor:
    if torch.is_tensor(scores):
        scores = [scores]
    return torch.cat([s.reshape(-1) for s in scores])


def lsgan_d(real_scores, fake_scores) -> torch.Tensor:
    """Least-squares discriminator loss: E[(D(real)-1)^2] + E[D(fake)^2].

    Expectations are means over all score elements across however many
    patch-score maps are supplied.
    """
    real = _flat_scores(real_scores)
    fake = _flat_scores(fake_scores)
    return ((real - 1.0) ** 2).mean() + (fake**2).mean()


def lsgan_g(fake_scores) -> torch.Tensor:
    """Least-squares generator loss: E[(D(fake)-1)^2]."""
    fake = _flat_scores(fake_scores)
    return ((fake - 1.0) ** 2).mean()


def perceptual_loss(featnet, a: torch.Tensor, b: torch.Tensor, layer: str = "relu5") -> torch.Tensor:
    """Root-mean-square distance between deep features at the deepest tap."""
    fa = featnet.features(a)[layer]
    fb = featnet.features(b)[layer]
    return torch.sqrt(((fa - fb) ** 2).mean())


def domain_loss(projector, gray: torch.Tensor, rgb: torch.Tensor) -> torch.Tensor:
    """Mean-L1 gap between the two shared-space projections.

    The RGB argument is the ground-truth color image (not the inversion), so
    the projectors learn the modality gap rather than inversion error.
    """
    return (projector.project_gray(gray) - projector.project_rgb(rgb)).abs().mean()


def contextual_similarity(
    x: torch.Tensor, y: torch.Tensor, h: float = 0.5, eps: float = 1e-5
) -> torch.Tensor:
    """Set-level similarity CX in (0, 1] between two feature maps.

    Positions of each C x H x W map are treated as channel vectors; both sets
    are centered by the reference (y) mean. For positions i of x and j of y:
    cosine distance d_ij, row-min normalized d~_ij = d_ij / (min_k d_ik + eps),
    affinity w_ij = exp((1 - d~_ij)/h) normalized over i, and
    CX = mean_j max_i A_ij.
    """
    if x.shape != y.shape:
        raise ValueError(f"feature shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim == 3:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    b, c = x.shape[0], x.shape[1]
    xv = x.reshape(b, c, -1).transpose(1, 2)  # B x N x C
    yv = y.reshape(b, c, -1).transpose(1, 2)
    mu = yv.mean(dim=1, keepdim=True)
    xv = xv - mu
    yv = yv - mu
    xn = xv / xv.norm(dim=2, keepdim=True).clamp_min(eps)
    yn = yv / yv.norm(dim=2, keepdim=True).clamp_min(eps)
    d = 1.0 - torch.bmm(xn, yn.transpose(1, 2))  # B x N x N, rows index x
    d_tilde = d / (d.min(dim=2, keepdim=True).values + eps)
    w = torch.exp((1.0 - d_tilde) / h)
    a = w / w.sum(dim=1, keepdim=True)  # normalize over x positions
    cx = a.max(dim=1).values.mean(dim=1)  # best x match per y position
    return cx.mean()


def contextual_loss(
    featnet,
    pred: torch.Tensor,
    ref: torch.Tensor,
    layers: tuple[str, ...] = ("relu3", "relu4", "relu5"),
    omegas: tuple[float, ...] = (2.0, 4.0, 8.0),
    h: float = 0.5,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Weighted sum over taps of -log CX between prediction and reference."""
    feats_p = featnet.features(pred)
    feats_r = featnet.features(ref)
    total = pred.new_zeros(())
    for layer, omega in zip(layers, omegas):
        cx = contextual_similarity(feats_p[layer], feats_r[layer], h=h, eps=eps)
        total = total + omega * (-torch.log(cx.clamp_min(1e-12)))
    return total


def _weighted_total(components: dict, weights: dict) -> tuple[torch.Tensor, dict]:
    terms = {}
    total = None
    for name, value in components.items():
        term = weights[name] * value
        terms[name] = float(term.detach()) if torch.is_tensor(term) else float(term)
        total = term if total is None else total + term
    return total, terms


def total_encoder_loss(components: dict, w: LossWeights) -> tuple[torch.Tensor, dict]:
    """lambda_inv_ftr * L_inv_ftr + lambda_inv_reg * L_inv_reg."""
    return _weighted_total(
        {"inv_ftr": components["inv_ftr"], "inv_reg": components["inv_reg"]},
        {"inv_ftr": w.lambda_inv_ftr, "inv_reg": w.lambda_inv_reg},
    )


def total_colorizer_loss(components: dict, w: LossWeights) -> tuple[torch.Tensor, dict]:
    """lambda_dom*L_dom + lambda_perc*L_perc + lambda_ctx*L_ctx + lambda_adv*L_adv_g."""
    return _weighted_total(
        {
            "dom": components["dom"],
            "perc": components["perc"],
            "ctx": components["ctx"],
            "adv_g": components["adv_g"],
        },
        {
            "dom": w.lambda_dom,
            "perc": w.lambda_perc,
            "ctx": w.lambda_ctx,
            "adv_g": w.lambda_adv,
        },
    )


def total_disc_loss(components: dict, w: LossWeights) -> tuple[torch.Tensor, dict]:
    """lambda_adv * L_adv_d."""
    return _weighted_total({"adv_d": components["adv_d"]}, {"adv_d": w.lambda_adv})
