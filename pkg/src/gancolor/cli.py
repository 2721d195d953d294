"""Command-line interface: dataset generation, training, inference, evaluation.

Every subcommand maps to one pipeline/module operation. Exit code is 0 on
success; failures print a single machine-parsable line `error: <kind>: <msg>`
on stderr and exit nonzero. `--config` points at a flat key=value file whose
keys mirror the TrainConfig schema; explicit flags override file values.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import colorspace as cs
from . import data as data_mod
from . import latent_control as lc
from . import pipeline as pl
from .config import GeneratorSpec, TrainConfig, load_config
from .featurenet import load_feature_net, save_feature_net, train_feature_net
from .metrics import MetricReport
from .prior_gan import train_prior_gan
from .tensorstore import CheckpointError, read_meta


class CliError(ValueError):
    """User-facing CLI failure with a one-line message."""


def _parse_alphas(text: str) -> list[float]:
    """Either a comma list ('-1,0,1') or an inclusive range ('-2:2:0.5')."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise CliError(f"alpha range must be start:stop:step, got {text!r}")
        start, stop, step = (float(p) for p in parts)
        if step == 0:
            raise CliError("alpha step must be nonzero")
        count = int(round((stop - start) / step)) + 1
        if count < 1:
            raise CliError(f"alpha range {text!r} is empty")
        return [start + i * step for i in range(count)]
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as e:
        raise CliError(f"cannot parse alphas {text!r}: {e}") from e


def _train_config(args) -> TrainConfig:
    overrides: dict = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for stage, names in (("stage1", ("lr", "steps", "batch")), ("stage2", ("lr", "steps", "batch"))):
        for name in names:
            value = getattr(args, name, None)
            if value is not None:
                overrides[f"{stage}.{name}"] = value
    cfg = load_config(TrainConfig, getattr(args, "config", None), overrides)
    return cfg


def _dataset(args) -> data_mod.ArrayDataset:
    return data_mod.load_image_folder(args.data)


def _featnet_for(args, dataset, out_dir: Path):
    """Load --featnet if given, otherwise fit one on the dataset and save it."""
    if getattr(args, "featnet", None):
        return load_feature_net(args.featnet), Path(args.featnet)
    rgb_np, label_np = dataset.batch_arrays(np.arange(dataset.n_images))
    net = train_feature_net(
        rgb_np, label_np, dataset.n_classes, seed=getattr(args, "seed", 0) or 0
    )
    ckpt = out_dir / "featnet"
    save_feature_net(ckpt, net)
    print(f"featnet saved to {ckpt}")
    return net, ckpt


def _eval_indices(dataset, n: int) -> list[int]:
    """Last n images: the deterministic held-out tail of the folder order."""
    n = min(n, dataset.n_images)
    return list(range(dataset.n_images - n, dataset.n_images))


# -- subcommand bodies --------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = data_mod.make_synthetic_dataset(args.out, args.n, args.resolution, args.seed or 0)
    print(f"wrote {args.n} images to {out}")
    return 0


def cmd_train_gan(args) -> int:
    dataset = _dataset(args)
    overrides = {"resolution": dataset.resolution, "n_classes": dataset.n_classes}
    if args.seed is not None:
        overrides["seed"] = args.seed
    spec = load_config(GeneratorSpec, args.config, overrides)
    ckpt = train_prior_gan(
        dataset,
        spec,
        steps=args.steps,
        out_dir=args.out,
        batch=args.batch,
        lr_g=args.lr_g,
        lr_d=args.lr_d,
        seed=args.seed or 0,
    )
    names = [data_mod.CLASS_NAMES[i] if i < len(data_mod.CLASS_NAMES) else f"class_{i}"
             for i in range(dataset.n_classes)]
    meta = read_meta(Path(ckpt) / "meta.txt")
    meta["class_names"] = names
    from .tensorstore import write_meta

    write_meta(Path(ckpt) / "meta.txt", meta)
    print(f"prior checkpoint at {ckpt}")
    return 0


def cmd_train_encoder(args) -> int:
    cfg = _train_config(args)
    ckpt = pl.stage1_train(
        cfg,
        _dataset(args),
        args.prior,
        args.out,
        stop_after=args.stop_after,
        resume_from=args.resume,
    )
    print(f"encoder checkpoint at {ckpt}")
    return 0


def cmd_train_colorizer(args) -> int:
    cfg = _train_config(args)
    dataset = _dataset(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    featnet, _ = _featnet_for(args, dataset, out)
    if args.guidance not in ("warped", "identity", "zero", "image"):
        raise CliError(f"unknown guidance mode {args.guidance!r}")
    ckpt = pl.stage2_train(
        cfg,
        dataset,
        args.prior,
        args.encoder,
        out,
        featnet,
        guidance_mode=args.guidance,
        width=args.width,
        tau=args.tau,
        stop_after=args.stop_after,
        resume_from=args.resume,
    )
    print(f"colorizer checkpoint at {ckpt}")
    return 0


def _pipeline(args):
    return pl.load_pipeline(args.prior, args.encoder, args.colorizer)


def cmd_colorize(args) -> int:
    pipeline = _pipeline(args)
    img = cs.read_png(getattr(args, "in"))
    label = args.class_label
    result, code = pipeline.colorize_rgbfile(img, label)
    cs.write_png(result, args.out)
    print(f"wrote {args.out} (z[0:3] = {np.round(code.z[:3], 4).tolist()})")
    return 0


def cmd_diversify(args) -> int:
    pipeline = _pipeline(args)
    gray = cs.gray_from_rgb(cs.read_png(getattr(args, "in")))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = lc.diversify_detailed(
        pipeline, gray, args.class_label, sigma=args.sigma, n=args.n, seed=args.seed or 0
    )
    rows = []
    for i, (img, code) in enumerate(results):
        cs.write_png(img, out / f"diverse_{i:02d}.png")
        rows.append(f"diverse_{i:02d}.png\t" + ",".join(f"{v:.17g}" for v in code.z))
    (out / "codes.tsv").write_text("\n".join(rows) + "\n")
    print(f"wrote {len(results)} images to {out}")
    return 0


def cmd_walk(args) -> int:
    pipeline = _pipeline(args)
    gray = cs.gray_from_rgb(cs.read_png(getattr(args, "in")))
    alphas = _parse_alphas(args.alpha)
    ds = lc.discover_directions(args.prior)
    if not 0 <= args.direction < len(ds):
        raise CliError(f"direction index {args.direction} out of range [0, {len(ds)})")
    _, vec, _ = ds[args.direction]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = lc.walk_images(pipeline, gray, args.class_label, vec, alphas)
    for i, (img, _) in enumerate(results):
        cs.write_png(img, out / f"walk_{i:02d}.png")
    print(f"wrote {len(results)} images to {out}")
    return 0


def cmd_evaluate(args) -> int:
    dataset = _dataset(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    featnet, _ = _featnet_for(args, dataset, out)
    pipeline = _pipeline(args)
    report = pl.evaluate(pipeline, dataset, _eval_indices(dataset, args.n), out, featnet)
    print(MetricReport.csv_header())
    print(report.csv_row())
    return 0


def cmd_ablate(args) -> int:
    if args.variant not in pl.ABLATION_VARIANTS:
        raise CliError(
            f"unknown ablation variant {args.variant!r}; "
            f"expected one of {sorted(pl.ABLATION_VARIANTS)}"
        )
    cfg = _train_config(args)
    dataset = _dataset(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    featnet, _ = _featnet_for(args, dataset, out)
    report = pl.ablate(
        args.variant,
        cfg,
        dataset,
        dataset,
        _eval_indices(dataset, args.n),
        args.prior,
        args.encoder,
        out,
        featnet,
        tau=args.tau,
        width=args.width,
    )
    print("variant," + MetricReport.csv_header())
    print(f"{args.variant}," + report.csv_row())
    return 0


def cmd_directions(args) -> int:
    ds = lc.discover_directions(args.prior, m=args.m)
    lc.save_directions(args.out, ds)
    values = ", ".join(f"{v:.4f}" for v in ds.singular_values[:8])
    print(f"wrote {len(ds)} directions to {args.out} (singular values: {values} ...)")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(
        args.prior,
        args.encoder,
        args.colorizer,
        max_workers=args.workers,
        static_dir=args.static,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gancolor",
        description="Colorization by inverting a class-conditional generative color prior.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, out=True, config=False):
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override config seed")
        if out:
            p.add_argument("--out", required=True, help="output path/directory")
        if config:
            p.add_argument("--config", default=None, help="flat key=value config file")

    p = sub.add_parser("gen-data", help="render the synthetic shape dataset")
    common(p)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--resolution", type=int, default=32)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-gan", help="train the class-conditional color prior")
    common(p, config=True)
    p.add_argument("--data", required=True, help="dataset directory (PNGs + labels.tsv)")
    p.add_argument("--steps", type=int, default=800)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr-g", type=float, default=2e-4)
    p.add_argument("--lr-d", type=float, default=2e-4)
    p.set_defaults(fn=cmd_train_gan)

    p = sub.add_parser("train-encoder", help="stage 1: fit the inversion encoder")
    common(p, config=True)
    p.add_argument("--data", required=True)
    p.add_argument("--prior", required=True, help="prior GAN checkpoint directory")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--stop-after", type=int, default=None)
    p.add_argument("--resume", default=None, help="resume from this stage-1 checkpoint")
    p.set_defaults(fn=cmd_train_encoder, stage="stage1")

    p = sub.add_parser("train-colorizer", help="stage 2: fit colorizer + projectors")
    common(p, config=True)
    p.add_argument("--data", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--featnet", default=None, help="feature net checkpoint (fits one if absent)")
    p.add_argument("--guidance", default="warped", help="warped | identity | zero | image")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--stop-after", type=int, default=None)
    p.add_argument("--resume", default=None)
    p.set_defaults(fn=cmd_train_colorizer, stage="stage2")

    p = sub.add_parser("colorize", help="colorize one grayscale PNG")
    common(p)
    p.add_argument("--in", required=True, help="input PNG (luminance is used)")
    p.add_argument("--class", dest="class_label", type=int, required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--colorizer", required=True)
    p.set_defaults(fn=cmd_colorize)

    p = sub.add_parser("diversify", help="n diverse colorizations via latent jitter")
    common(p)
    p.add_argument("--in", required=True)
    p.add_argument("--class", dest="class_label", type=int, required=True)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--prior", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--colorizer", required=True)
    p.set_defaults(fn=cmd_diversify)

    p = sub.add_parser("walk", help="colorizations along a latent direction")
    common(p)
    p.add_argument("--in", required=True)
    p.add_argument("--class", dest="class_label", type=int, required=True)
    p.add_argument("--direction", type=int, default=0)
    p.add_argument("--alpha", default="-2:2:0.5", help="comma list or start:stop:step")
    p.add_argument("--prior", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--colorizer", required=True)
    p.set_defaults(fn=cmd_walk)

    p = sub.add_parser("evaluate", help="colorize a held-out tail and report metrics")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=64, help="evaluate the last n images")
    p.add_argument("--prior", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--colorizer", required=True)
    p.add_argument("--featnet", default=None)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="train + evaluate a guidance variant")
    common(p, config=True)
    p.add_argument("--variant", required=True, help="|".join(sorted(pl.ABLATION_VARIANTS)))
    p.add_argument("--data", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--featnet", default=None)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.set_defaults(fn=cmd_ablate, stage="stage2")

    p = sub.add_parser("directions", help="closed-form latent direction discovery")
    common(p)
    p.add_argument("--prior", required=True)
    p.add_argument("--m", type=int, default=None, help="keep the top m directions")
    p.set_defaults(fn=cmd_directions)

    p = sub.add_parser("serve", help="run the HTTP colorization service")
    common(p, out=False)
    p.add_argument("--prior", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--colorizer", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--workers", type=int, default=2, help="bounded inference slots")
    p.add_argument("--static", default=None, help="static asset dir to serve at /")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (
        CliError,
        CheckpointError,
        cs.ColorspaceError,
        data_mod.DatasetError,
        lc.LatentControlError,
        ValueError,
        FileNotFoundError,
    ) as e:
        msg = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
