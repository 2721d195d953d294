"""Two-stage training orchestration, evaluation driver, guidance ablations.

Stage 1 fits the latent encoder against the frozen color prior (generator +
its discriminator stay untouched, verified by content digests). Stage 2
freezes the encoder too and trains the colorization trunk, the shared-space
projectors and the patch discriminator end-to-end, alternating one
colorizer step and one discriminator step per batch.

Both stages share the same determinism scheme: a fresh torch.Generator
seeded with `seed * 1000003 + step` drives each step's batch selection, so a
resumed run replays the exact step sequence of an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import math
import time
from pathlib import Path

import numpy as np
import torch

from . import colorspace as cs
from .alignment import SharedSpaceProjector
from .colorizer import (
    ColorizationNet,
    ColorizationPipeline,
    load_colorizer_checkpoint,
    save_colorizer_checkpoint,
)
from .config import EncoderSpec, StageConfig, TrainConfig
from .encoder import build_encoder, load_encoder_checkpoint, save_encoder_checkpoint
from .losses import (
    LossWeights,
    contextual_loss,
    domain_loss,
    inversion_feature_loss,
    inversion_reg_loss,
    lsgan_d,
    lsgan_g,
    perceptual_loss,
    total_colorizer_loss,
    total_disc_loss,
    total_encoder_loss,
)
from .metrics import FeatureNetExtractor, MetricReport, evaluate_pairs
from .patch_disc import MultiScalePatchDiscriminator
from .prior_gan import TrainingDiverged, load_prior_checkpoint
from .tensorstore import (
    CheckpointError,
    load_arrays_into_module,
    load_checkpoint,
    load_optimizer_state,
    optimizer_state_to_arrays,
)

ABLATION_VARIANTS = {
    "full": "warped",
    "no_prior": "zero",
    "no_alignment": "identity",
    "image_guidance": "image",
}


# -- shared plumbing -----------------------------------------------------------


def module_digest(module: torch.nn.Module) -> str:
    """Content hash of a module's state dict; used for frozen-weight audits."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def _freeze(module: torch.nn.Module) -> None:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


def dataset_lab_net(dataset) -> np.ndarray:
    """Normalized LAB planes of the whole dataset, N x 3 x H x W float32."""
    n, r = dataset.n_images, dataset.resolution
    out = np.empty((n, 3, r, r), dtype=np.float32)
    for i in range(n):
        lab = cs.rgb_to_lab(dataset.image(i))
        out[i, 0] = cs.normalize_l(lab.l)
        out[i, 1:] = cs.normalize_ab(lab.ab).transpose(2, 0, 1)
    return out


def _steps_budget(stage: StageConfig, n_images: int) -> int:
    if stage.steps > 0:
        return stage.steps
    return stage.epochs * math.ceil(n_images / stage.batch)


def _lr_at(lr0: float, step: int, total: int, linear_decay: bool) -> float:
    if not linear_decay or total <= 0:
        return lr0
    return lr0 * max(0.0, 1.0 - step / total)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _batch_indices(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    g = torch.Generator().manual_seed(seed * 1000003 + step)
    return torch.randint(0, n, (batch,), generator=g).numpy()


def _append_log(path: Path, header: str, rows: list[str], fresh: bool) -> None:
    if fresh or not path.exists():
        path.write_text("\n".join([header] + rows) + ("\n" if rows else "\n"))
    elif rows:
        with open(path, "a") as fh:
            fh.write("\n".join(rows) + "\n")


def _check_finite(value: float, step: int, log_path: Path, header: str, rows: list[str], fresh: bool):
    if not math.isfinite(value):
        _append_log(log_path, header, rows, fresh)
        raise TrainingDiverged(f"loss became non-finite at step {step}: {value}")


# -- stage 1: encoder ----------------------------------------------------------


def stage1_step(enc, gen, disc, gray_net, rgb_net, labels, w: LossWeights):
    """One encoder loss evaluation; returns (total, weighted breakdown)."""
    z = enc(gray_net, labels)
    x_inv, _ = gen(z, labels)
    components = {
        "inv_ftr": inversion_feature_loss(disc, x_inv, rgb_net),
        "inv_reg": inversion_reg_loss(z, squared=w.inv_reg_squared),
    }
    return total_encoder_loss(components, w)


def stage1_train(
    cfg: TrainConfig,
    dataset,
    prior_checkpoint,
    out_dir,
    stop_after: int | None = None,
    resume_from=None,
    log_every: int = 10,
) -> Path:
    """Train the encoder against the frozen prior; returns the checkpoint dir.

    `stop_after` ends the run early (for later resume) without changing the
    schedule horizon. The generator and prior discriminator are digest-audited
    before and after; any drift raises.
    """
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gen, disc, spec, _ = load_prior_checkpoint(prior_checkpoint)
    _freeze(gen)
    _freeze(disc)

    total = _steps_budget(cfg.stage1, dataset.n_images)
    if resume_from is not None:
        enc, prev_meta = load_encoder_checkpoint(resume_from)
        start = int(prev_meta.get("steps_done", 0))
        if int(prev_meta.get("total_steps", total)) != total:
            raise CheckpointError(
                f"resume horizon mismatch: checkpoint trained towards "
                f"{prev_meta.get('total_steps')}, current config implies {total}"
            )
    else:
        enc = build_encoder(EncoderSpec.for_generator(spec), seed=cfg.seed)
        start = 0
    enc.train()
    opt = torch.optim.Adam(
        enc.parameters(), lr=cfg.stage1.lr, betas=(cfg.adam_beta1, cfg.adam_beta2)
    )
    if resume_from is not None:
        prev_tensors, _ = load_checkpoint(resume_from)
        load_optimizer_state(opt, prev_tensors, "opt_enc.")

    lab = dataset_lab_net(dataset)
    digest_gen, digest_disc = module_digest(gen), module_digest(disc)
    end = min(total, stop_after) if stop_after is not None else total

    header = "step,lr,inv_ftr,inv_reg,total,seconds"
    log_path = out_dir / "train_log.csv"
    rows: list[str] = []
    fresh_log = start == 0
    t0 = time.time()
    for step in range(start, end):
        lr = _lr_at(cfg.stage1.lr, step, total, cfg.linear_decay)
        _set_lr(opt, lr)
        idx = _batch_indices(cfg.seed, step, dataset.n_images, cfg.stage1.batch)
        rgb_np, label_np = dataset.batch_arrays(idx)
        rgb_net = torch.from_numpy(rgb_np)
        gray_net = torch.from_numpy(lab[idx, :1])
        labels = torch.from_numpy(label_np)

        loss, breakdown = stage1_step(enc, gen, disc, gray_net, rgb_net, labels, cfg.weights)
        _check_finite(float(loss.detach()), step, log_path, header, rows, fresh_log)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == end - 1:
            rows.append(
                f"{step},{lr:.10g},{breakdown['inv_ftr']:.10g},"
                f"{breakdown['inv_reg']:.10g},{float(loss.detach()):.10g},"
                f"{time.time() - t0:.1f}"
            )
    _append_log(log_path, header, rows, fresh_log)

    if module_digest(gen) != digest_gen or module_digest(disc) != digest_disc:
        raise RuntimeError("frozen-weight audit failed: prior weights changed in stage 1")

    ckpt_dir = out_dir / "checkpoint"
    save_encoder_checkpoint(
        ckpt_dir,
        enc,
        extra_meta={
            "stage": 1,
            "steps_done": end,
            "total_steps": total,
            "seed": cfg.seed,
            "lr0": cfg.stage1.lr,
            "batch": cfg.stage1.batch,
            "linear_decay": cfg.linear_decay,
        },
        extra_tensors=optimizer_state_to_arrays(opt, "opt_enc."),
    )
    return ckpt_dir


# -- stage 2: colorizer --------------------------------------------------------


def stage2_step(pipeline: ColorizationPipeline, patch_disc, featnet, gray_net, rgb_net, lab_net, labels, w: LossWeights):
    """One alternating step's losses: (colorizer total, disc total, breakdown)."""
    with torch.no_grad():
        z = pipeline.enc(gray_net, labels)
    ab_pred = pipeline.chroma_net(gray_net, z, labels)
    pred_lab = torch.cat([gray_net, ab_pred], dim=1)
    pred_rgb = cs.lab_net_to_rgb_net(gray_net, ab_pred)

    g_components = {
        "dom": domain_loss(pipeline.projector, gray_net, rgb_net),
        "perc": perceptual_loss(featnet, pred_rgb, rgb_net),
        "ctx": contextual_loss(featnet, pred_rgb, rgb_net),
        "adv_g": lsgan_g(patch_disc(pred_lab)),
    }
    g_total, g_break = total_colorizer_loss(g_components, w)
    d_total, d_break = total_disc_loss(
        {"adv_d": lsgan_d(patch_disc(lab_net), patch_disc(pred_lab.detach()))}, w
    )
    return g_total, d_total, {**g_break, **d_break}


def stage2_train(
    cfg: TrainConfig,
    dataset,
    prior_checkpoint,
    encoder_checkpoint,
    out_dir,
    featnet,
    guidance_mode: str = "warped",
    width: int = 64,
    base_grid: int | None = None,
    c_s: int = 128,
    projector_width: int = 64,
    tau: float = 0.01,
    stop_after: int | None = None,
    resume_from=None,
    log_every: int = 10,
) -> Path:
    """Train colorizer + projectors + patch discriminator; prior/encoder frozen."""
    if guidance_mode not in ("warped", "identity", "zero", "image"):
        raise ValueError(f"unknown guidance mode {guidance_mode!r}")
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gen, _, spec, _ = load_prior_checkpoint(prior_checkpoint)
    enc, _ = load_encoder_checkpoint(encoder_checkpoint)
    if enc.spec.resolution != spec.resolution:
        raise CheckpointError(
            f"encoder resolution {enc.spec.resolution} != generator {spec.resolution}"
        )
    _freeze(gen)
    _freeze(enc)
    featnet.eval()

    total = _steps_budget(cfg.stage2, dataset.n_images)
    if resume_from is not None:
        net, projector, prev_meta = load_colorizer_checkpoint(resume_from)
        if prev_meta.get("guidance_mode", "warped") != guidance_mode:
            raise CheckpointError(
                f"resume guidance mode mismatch: {prev_meta.get('guidance_mode')} vs {guidance_mode}"
            )
        if int(prev_meta.get("total_steps", total)) != total:
            raise CheckpointError(
                f"resume horizon mismatch: checkpoint trained towards "
                f"{prev_meta.get('total_steps')}, current config implies {total}"
            )
        prev_tensors, _ = load_checkpoint(resume_from)
        pdisc = MultiScalePatchDiscriminator(spec.resolution)
        load_arrays_into_module(pdisc, prev_tensors, "patch_disc.")
        start = int(prev_meta.get("steps_done", 0))
    else:
        torch.manual_seed(cfg.seed)
        if guidance_mode == "image":
            g_widths = {s: 3 for s in spec.scales}
        else:
            g_widths = dict(zip(spec.scales, spec.channels))
        net = ColorizationNet(spec.resolution, g_widths, width=width)
        projector = SharedSpaceProjector(
            spec.resolution, base_grid, c_s=c_s, width=projector_width
        )
        pdisc = MultiScalePatchDiscriminator(spec.resolution)
        start = 0
    net.train()
    projector.train()
    pdisc.train()

    pipeline = ColorizationPipeline(gen, enc, projector, net, tau=tau, guidance_mode=guidance_mode)
    opt_g = torch.optim.Adam(
        list(net.parameters()) + list(projector.parameters()),
        lr=cfg.stage2.lr,
        betas=(cfg.adam_beta1_gan, cfg.adam_beta2),
    )
    opt_d = torch.optim.Adam(
        pdisc.parameters(), lr=cfg.stage2.lr, betas=(cfg.adam_beta1_gan, cfg.adam_beta2)
    )
    if resume_from is not None:
        load_optimizer_state(opt_g, prev_tensors, "opt_g.")
        load_optimizer_state(opt_d, prev_tensors, "opt_d.")

    lab = dataset_lab_net(dataset)
    digest_gen, digest_enc, digest_feat = (
        module_digest(gen),
        module_digest(enc),
        module_digest(featnet),
    )
    end = min(total, stop_after) if stop_after is not None else total

    header = "step,lr,dom,perc,ctx,adv_g,g_total,adv_d,d_total,seconds"
    log_path = out_dir / "train_log.csv"
    rows: list[str] = []
    fresh_log = start == 0
    t0 = time.time()
    for step in range(start, end):
        lr = _lr_at(cfg.stage2.lr, step, total, cfg.linear_decay)
        _set_lr(opt_g, lr)
        _set_lr(opt_d, lr)
        idx = _batch_indices(cfg.seed, step, dataset.n_images, cfg.stage2.batch)
        rgb_np, label_np = dataset.batch_arrays(idx)
        rgb_net = torch.from_numpy(rgb_np)
        lab_net = torch.from_numpy(lab[idx])
        gray_net = lab_net[:, :1]
        labels = torch.from_numpy(label_np)

        g_total, d_total, br = stage2_step(
            pipeline, pdisc, featnet, gray_net, rgb_net, lab_net, labels, cfg.weights
        )
        _check_finite(float(g_total.detach()) + float(d_total.detach()), step, log_path, header, rows, fresh_log)
        opt_g.zero_grad()
        g_total.backward()
        opt_g.step()
        opt_d.zero_grad()
        d_total.backward()
        opt_d.step()
        if step % log_every == 0 or step == end - 1:
            rows.append(
                f"{step},{lr:.10g},{br['dom']:.10g},{br['perc']:.10g},{br['ctx']:.10g},"
                f"{br['adv_g']:.10g},{float(g_total.detach()):.10g},{br['adv_d']:.10g},"
                f"{float(d_total.detach()):.10g},{time.time() - t0:.1f}"
            )
    _append_log(log_path, header, rows, fresh_log)

    if (
        module_digest(gen) != digest_gen
        or module_digest(enc) != digest_enc
        or module_digest(featnet) != digest_feat
    ):
        raise RuntimeError("frozen-weight audit failed: frozen weights changed in stage 2")

    ckpt_dir = out_dir / "checkpoint"
    save_colorizer_checkpoint(
        ckpt_dir,
        net,
        projector,
        patch_disc=pdisc,
        extra_meta={
            "stage": 2,
            "steps_done": end,
            "total_steps": total,
            "seed": cfg.seed,
            "lr0": cfg.stage2.lr,
            "batch": cfg.stage2.batch,
            "linear_decay": cfg.linear_decay,
            "guidance_mode": guidance_mode,
            "tau": tau,
        },
        extra_tensors={
            **optimizer_state_to_arrays(opt_g, "opt_g."),
            **optimizer_state_to_arrays(opt_d, "opt_d."),
        },
    )
    return ckpt_dir


# -- assembly and evaluation ---------------------------------------------------


def load_pipeline(
    prior_checkpoint,
    encoder_checkpoint,
    colorizer_checkpoint,
    tau: float | None = None,
    guidance_mode: str | None = None,
) -> ColorizationPipeline:
    """Assemble the frozen inference pipeline from its three checkpoints."""
    gen, _, spec, _ = load_prior_checkpoint(prior_checkpoint)
    enc, _ = load_encoder_checkpoint(encoder_checkpoint)
    net, projector, meta = load_colorizer_checkpoint(colorizer_checkpoint)
    for name, res in (("encoder", enc.spec.resolution), ("colorizer", net.resolution)):
        if res != spec.resolution:
            raise CheckpointError(
                f"{name} resolution {res} does not match generator {spec.resolution}"
            )
    for m in (gen, enc, net, projector):
        _freeze(m)
    return ColorizationPipeline(
        gen,
        enc,
        projector,
        net,
        tau=float(meta.get("tau", 0.01)) if tau is None else tau,
        guidance_mode=meta.get("guidance_mode", "warped") if guidance_mode is None else guidance_mode,
    )


def evaluate(pipeline: ColorizationPipeline, dataset, indices, out_dir, featnet) -> MetricReport:
    """Colorize the listed images, write pred/gt PNGs, compute all metrics."""
    out_dir = Path(out_dir)
    pred_dir, gt_dir = out_dir / "pred", out_dir / "gt"
    pred_dir.mkdir(parents=True, exist_ok=True)
    gt_dir.mkdir(parents=True, exist_ok=True)
    for i in indices:
        name = f"val_{int(i):05d}.png"
        gt = dataset.image(int(i))
        pred, _ = pipeline.colorize_gray(dataset.gray(int(i)), dataset.label(int(i)))
        cs.write_png(pred, pred_dir / name)
        cs.write_png(gt, gt_dir / name)
    report = evaluate_pairs(pred_dir, gt_dir, FeatureNetExtractor(featnet))
    (out_dir / "report.txt").write_text(report.to_text())
    (out_dir / "metrics.csv").write_text(
        MetricReport.csv_header() + "\n" + report.csv_row() + "\n"
    )
    return report


def evaluate_checkpoints(
    prior_checkpoint, encoder_checkpoint, colorizer_checkpoint, dataset, indices, out_dir, featnet
) -> MetricReport:
    pipeline = load_pipeline(prior_checkpoint, encoder_checkpoint, colorizer_checkpoint)
    return evaluate(pipeline, dataset, indices, out_dir, featnet)


def ablate(
    variant: str,
    cfg: TrainConfig,
    train_dataset,
    eval_dataset,
    eval_indices,
    prior_checkpoint,
    encoder_checkpoint,
    out_dir,
    featnet,
    **stage2_kwargs,
) -> MetricReport:
    """Train and evaluate one guidance variant under the shared config/seed."""
    if variant not in ABLATION_VARIANTS:
        raise ValueError(
            f"unknown ablation variant {variant!r}; expected one of {sorted(ABLATION_VARIANTS)}"
        )
    out_dir = Path(out_dir)
    ckpt = stage2_train(
        cfg,
        train_dataset,
        prior_checkpoint,
        encoder_checkpoint,
        out_dir,
        featnet,
        guidance_mode=ABLATION_VARIANTS[variant],
        **stage2_kwargs,
    )
    pipeline = load_pipeline(prior_checkpoint, encoder_checkpoint, ckpt)
    return evaluate(pipeline, eval_dataset, eval_indices, out_dir / "eval", featnet)


# -- acceptance-facing measurements --------------------------------------------


def stage1_eval_loss(enc, gen, disc, dataset, indices, w: LossWeights, batch: int = 16) -> float:
    """Mean encoder objective over a fixed image set (no gradients)."""
    enc.eval()
    lab = dataset_lab_net(dataset.subset(indices))
    rgb_np, label_np = dataset.batch_arrays(indices)
    vals = []
    with torch.no_grad():
        for lo in range(0, len(indices), batch):
            sl = slice(lo, lo + batch)
            total, _ = stage1_step(
                enc,
                gen,
                disc,
                torch.from_numpy(lab[sl, :1]),
                torch.from_numpy(rgb_np[sl]),
                torch.from_numpy(label_np[sl]),
                w,
            )
            vals.append(float(total) * (min(sl.stop, len(indices)) - lo))
    return float(np.sum(vals) / len(indices))


def inv_ftr_means(enc, gen, disc, dataset, indices, seed: int = 0, batch: int = 16) -> tuple[float, float]:
    """Mean inversion feature loss with encoder codes vs random codes."""
    enc.eval()
    lab = dataset_lab_net(dataset.subset(indices))
    rgb_np, label_np = dataset.batch_arrays(indices)
    enc_vals, rand_vals = [], []
    with torch.no_grad():
        for lo in range(0, len(indices), batch):
            sl = slice(lo, lo + batch)
            gray_net = torch.from_numpy(lab[sl, :1])
            rgb_net = torch.from_numpy(rgb_np[sl])
            labels = torch.from_numpy(label_np[sl])
            z_enc = enc(gray_net, labels)
            g = torch.Generator().manual_seed(seed * 1000003 + lo)
            z_rand = torch.randn(z_enc.shape, generator=g)
            for z, sink in ((z_enc, enc_vals), (z_rand, rand_vals)):
                x_inv, _ = gen(z, labels)
                v = float(inversion_feature_loss(disc, x_inv, rgb_net))
                sink.append(v * (min(sl.stop, len(indices)) - lo))
    n = len(indices)
    return float(np.sum(enc_vals) / n), float(np.sum(rand_vals) / n)


def perceptual_mean(pipeline: ColorizationPipeline, featnet, dataset, indices, batch: int = 16) -> float:
    """Mean (unweighted) perceptual term of the colorizer over an image set."""
    lab = dataset_lab_net(dataset.subset(indices))
    rgb_np, label_np = dataset.batch_arrays(indices)
    vals = []
    with torch.no_grad():
        for lo in range(0, len(indices), batch):
            sl = slice(lo, lo + batch)
            gray_net = torch.from_numpy(lab[sl, :1])
            labels = torch.from_numpy(label_np[sl])
            z = pipeline.enc(gray_net, labels)
            ab_pred = pipeline.chroma_net(gray_net, z, labels)
            pred_rgb = cs.lab_net_to_rgb_net(gray_net, ab_pred)
            v = float(perceptual_loss(featnet, pred_rgb, torch.from_numpy(rgb_np[sl])))
            vals.append(v * (min(sl.stop, len(indices)) - lo))
    return float(np.sum(vals) / len(indices))


def ab_mae(pipeline: ColorizationPipeline, dataset, indices) -> tuple[float, float]:
    """(model, zero-chroma baseline) mean absolute ab error in LAB units."""
    model_err, zero_err, count = 0.0, 0.0, 0
    for i in indices:
        gt_lab = cs.rgb_to_lab(dataset.image(int(i)))
        pred, _ = pipeline.colorize_gray(dataset.gray(int(i)), dataset.label(int(i)))
        pred_lab = cs.rgb_to_lab(pred)
        model_err += float(np.abs(pred_lab.ab - gt_lab.ab).sum())
        zero_err += float(np.abs(gt_lab.ab).sum())
        count += gt_lab.ab.size
    return model_err / count, zero_err / count
