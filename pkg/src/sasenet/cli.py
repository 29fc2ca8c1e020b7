"""Command-line harness: gradcheck, count, bench-scaling, train, gen-forward.

Every command is a pure function of (config, seed): identical invocations
write byte-identical artifacts. Exit codes: 0 success, 2 usage/config error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, figures
from . import tensor as T
from .arch import (BLOCK_VARIANTS, BlockSpec, TinyClassifier, build_bottleneck,
                   build_generator, build_resnet, generator_spec, resnet50_spec)
from .attention import (MHSA, MHSAConfig, SASERecogConfig, SASERecognition,
                        SASESynthConfig, SASESynthesis, SEConfig, SLEConfig,
                        SkipLayerExcite, SqueezeExcite)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, ConfigError
from .tensor import NumericError, ShapeError
from .train import (TrainDivergence, make_blob_dataset, make_optimizer,
                    train_classifier)

USAGE_ERROR = 2
NUMERIC_ERROR = 3


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, rows) -> None:
    text = "\n".join(",".join(_fmt(v) for v in row) for row in rows) + "\n"
    path.write_text(text, encoding="utf-8", newline="\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> Config:
    return Config.load(getattr(args, "config", None))


def _require_seed(args, cfg: Config) -> int:
    seed = args.seed if args.seed is not None else cfg.get_int("run.seed")
    if seed is None:
        raise ConfigError("this command is stochastic: provide --seed or run.seed")
    return int(seed)


def _resolve_dtype(cfg: Config):
    name = cfg.get_str("run.dtype", "f64")
    if name == "f64":
        return np.float64
    if name == "f32":
        return np.float32
    raise ConfigError(f"run.dtype must be f64 or f32, got {name!r}")


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

GRADCHECK_MODULES = ("se", "sle", "sase_synth", "sase_recog", "mhsa",
                     "bottleneck_vanilla", "bottleneck_se", "bottleneck_mhsa",
                     "bottleneck_sase")


def build_named_module(name: str, seed: int):
    """Small, gradcheck-sized instance of each mechanism; returns
    (module, input_shapes). Modules containing batchnorm get batched inputs."""
    rng = np.random.default_rng(seed)
    if name == "se":
        return SqueezeExcite(SEConfig(8, 4), rng=rng), [(8, 5, 5)]
    if name == "sle":
        return SkipLayerExcite(SLEConfig(6, 5), rng=rng), [(6, 6, 6), (5, 7, 7)]
    if name == "sase_synth":
        cfg = SASESynthConfig(source_channels=8, target_shape=(6, 6, 6), heads=4)
        return SASESynthesis(cfg, rng=rng), [(8, 5, 5), (6, 6, 6)]
    if name == "sase_recog":
        cfg = SASERecogConfig(channels=8, heads=2)
        return SASERecognition(cfg, rng=rng), [(2, 8, 5, 5)]
    if name == "mhsa":
        return MHSA(MHSAConfig(8, 2), rng=rng), [(8, 3, 3)]
    if name.startswith("bottleneck_"):
        variant = name.split("_", 1)[1]
        if variant in BLOCK_VARIANTS:
            spec = BlockSpec(variant=variant, in_channels=16, channels=16,
                             bottleneck_ratio=2, heads=2)
            return build_bottleneck(spec, seed=seed), [(2, 16, 6, 6)]
    raise KeyError(name)


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    cfg.override("run.dtype", args.dtype)
    dtype = cfg.get_str("run.dtype", "f64")
    if dtype != "f64":
        print("gradcheck requires f64 (finite differences are meaningless in f32)",
              file=sys.stderr)
        return USAGE_ERROR
    if args.module not in GRADCHECK_MODULES:
        print(f"unknown module {args.module!r}; choose from {', '.join(GRADCHECK_MODULES)}",
              file=sys.stderr)
        return USAGE_ERROR
    seed = _require_seed(args, cfg)
    module, shapes = build_named_module(args.module, seed)
    report = analysis.gradcheck(module, shapes, seed=seed)
    out = _out_dir(args)
    _write_json(out / f"gradcheck_{args.module}.json",
                {"module": args.module, "seed": seed, **report.to_dict()})
    print(f"gradcheck {args.module}: max_rel_err={report.max_rel_err:.3e} "
          f"tol={report.tolerance:g} -> {'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else NUMERIC_ERROR


# ---------------------------------------------------------------------------
# count
# ---------------------------------------------------------------------------

def _build_counted_model(args, cfg: Config):
    arch = args.arch or cfg.get_str("model.arch")
    if arch == "resnet50":
        variant = args.variant or cfg.get_str("model.variant", "vanilla")
        if variant not in BLOCK_VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        model = build_resnet(resnet50_spec(variant), seed=0)
        size = args.input_size or cfg.get_int("model.input_size", 224)
        return model, (3, size, size), f"resnet50-{variant}"
    if arch == "generator":
        skips = args.skips or cfg.get_str("model.skips", "sase")
        target = args.target or cfg.get_int("model.target", 256)
        model = build_generator(generator_spec(target=target, skips=skips), seed=0)
        return model, None, f"generator-{skips}-{target}"
    raise ConfigError(f"unknown arch {arch!r} (expected resnet50 or generator)")


def cmd_count(args) -> int:
    cfg = _load_config(args)
    model, in_shape, label = _build_counted_model(args, cfg)
    params = analysis.count_params(model)
    flops = analysis.count_flops(model, in_shape)
    payload = {
        "model": label,
        "input_shape": list(in_shape) if in_shape else None,
        "total_params": params.total_params,
        "total_flops": flops.total_flops,
        "per_layer": flops.to_dict()["entries"],
    }
    if label.startswith("generator"):
        # skip-module vs trunk decomposition
        skip_flops = sum(e.flops for e in flops.entries if e.name.startswith("skip"))
        skip_params = sum(e.params for e in flops.entries if e.name.startswith("skip"))
        payload["skip_flops"] = skip_flops
        payload["trunk_flops"] = flops.total_flops - skip_flops
        payload["skip_params"] = skip_params
        payload["trunk_params"] = params.total_params - skip_params
    out = _out_dir(args)
    _write_json(out / f"count_{label}.json", payload)
    _write_csv(out / f"count_{label}.csv", flops.csv_rows())
    figures.layer_bar_figure(flops, out / f"count_{label}.png")
    print(f"{label}: params={params.total_params:,} flops={flops.total_flops:,}")
    return 0


# ---------------------------------------------------------------------------
# bench-scaling
# ---------------------------------------------------------------------------

def cmd_bench_scaling(args) -> int:
    cfg = _load_config(args)
    cfg.override("bench.channels", args.channels)
    cfg.override("bench.sizes", args.sizes)
    cfg.override("bench.mechanisms", args.mechanisms)
    channels = cfg.get_int("bench.channels", 32)
    sizes_raw = cfg.get_str("bench.sizes", "4,8,16,32,64")
    mechanisms = cfg.get_str("bench.mechanisms", "mhsa,sase_recog,se").split(",")
    try:
        sides = [int(s) for s in sizes_raw.split(",")]
    except ValueError:
        raise ConfigError(f"bench.sizes must be comma-separated side lengths, got {sizes_raw!r}")
    if len(sides) < 3:
        print("need at least 3 sizes for a slope fit", file=sys.stderr)
        return USAGE_ERROR
    sizes = [(s, s) for s in sides]
    out = _out_dir(args)
    curves = []
    summary = {}
    for mech in mechanisms:
        mech = mech.strip()
        curve = analysis.scaling_bench(mech, channels, sizes)
        curves.append(curve)
        summary[mech] = curve.to_dict()
        _write_csv(out / f"scaling_{mech}.csv",
                   [["N", "flops"]] + [[n, f] for n, f in curve.points])
        print(f"{mech}: slope={curve.slope:.3f} residual={curve.residual:.4f}"
              + (f" core_slope={curve.core_slope:.3f}" if curve.core_slope else ""))
    _write_json(out / "scaling.json", summary)
    figures.scaling_figure(curves, out / "scaling.png")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args)
    for key, val in (("train.steps", args.steps), ("train.batch_size", args.batch_size),
                     ("train.variant", args.variant), ("train.dataset_size", args.dataset_size),
                     ("optimizer.kind", args.optimizer), ("optimizer.lr", args.lr),
                     ("optimizer.beta1", args.beta1), ("optimizer.momentum", args.momentum)):
        cfg.override(key, val)
    cfg.override("run.dtype", args.dtype)
    seed = _require_seed(args, cfg)
    dtype = _resolve_dtype(cfg)
    steps = cfg.get_int("train.steps", 500)
    batch_size = cfg.get_int("train.batch_size", 32)
    variant = cfg.get_str("train.variant", "sase")
    n = cfg.get_int("train.dataset_size", 256)
    opt_kind = cfg.get_str("optimizer.kind", "adam")
    lr = cfg.get_float("optimizer.lr", 1e-3)
    beta1 = cfg.get_float("optimizer.beta1", 0.9)
    momentum = cfg.get_float("optimizer.momentum", 0.0)
    if variant not in BLOCK_VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")

    images, labels = make_blob_dataset(seed, n)
    images = images.astype(dtype)
    model = TinyClassifier(variant=variant, seed=seed + 1, dtype=dtype)
    optimizer = make_optimizer(opt_kind, model.parameters(), lr=lr,
                               momentum=momentum, beta1=beta1)
    out = _out_dir(args)
    header = ["step", "loss", "acc", "grad_norm", "wall_ms"]
    try:
        records, summary = train_classifier(model, images, labels, optimizer,
                                            steps=steps, batch_size=batch_size,
                                            seed=seed, record_wall=args.wall_clock)
    except TrainDivergence as div:
        rows = [header] + [[r.step, r.loss, r.acc, r.grad_norm, r.wall_ms]
                           for r in div.records]
        _write_csv(out / "metrics.csv", rows)
        print(str(div), file=sys.stderr)
        return NUMERIC_ERROR
    rows = [header] + [[r.step, r.loss, r.acc, r.grad_norm, r.wall_ms] for r in records]
    _write_csv(out / "metrics.csv", rows)
    _write_json(out / "summary.json", {"seed": seed, "variant": variant, **summary})
    save_checkpoint(out / "final.ckpt", model.state_arrays())
    figures.training_figure(records, out / "training.png")
    print(f"trained {steps} steps: loss {summary['initial_loss']:.4f} -> "
          f"{summary['final_loss']:.4f}, train acc {summary['final_train_accuracy']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# gen-forward
# ---------------------------------------------------------------------------

def cmd_gen_forward(args) -> int:
    cfg = _load_config(args)
    cfg.override("model.skips", args.skips)
    cfg.override("model.target", args.target)
    cfg.override("run.dtype", args.dtype)
    seed = _require_seed(args, cfg)
    dtype = _resolve_dtype(cfg)
    skips = cfg.get_str("model.skips", "sase")
    target = cfg.get_int("model.target", 256)
    spec = generator_spec(target=target, skips=skips)
    model = build_generator(spec, seed=seed, dtype=dtype)
    model.set_training(False)
    z = T.randn((spec.latent_dim,), seed=seed, dtype=dtype)
    with T.no_grad():
        img = model(z, seed=seed)
    out = _out_dir(args)
    arrays = {"image": img.data}
    masks = model.mask_arrays()
    for name, mask in masks.items():
        arrays[f"mask.{name}"] = mask
    save_checkpoint(out / "gen_forward.ckpt", arrays)
    figures.image_figure(img.data, out / "image.png")
    if masks:
        figures.masks_figure(masks, out / "masks.png")
    _write_json(out / "gen_forward.json", {
        "seed": seed, "skips": skips, "target": target,
        "image_shape": list(img.shape),
        "image_min": float(img.data.min()), "image_max": float(img.data.max()),
        "masks": {k: list(v.shape) for k, v in masks.items()},
    })
    print(f"generated image {img.shape}, range [{img.data.min():.3f}, {img.data.max():.3f}], "
          f"{len(masks)} masks dumped")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sasenet",
                                     description="attention blocks, cost accounting, verification")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file; flags override it")
        p.add_argument("--seed", type=int, help="PRNG seed")
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("gradcheck", help="finite-difference check of one module")
    common(p)
    p.add_argument("--module", required=True)
    p.add_argument("--dtype", choices=("f64", "f32"))
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("count", help="parameter/FLOP accounting")
    common(p)
    p.add_argument("--arch", choices=("resnet50", "generator"))
    p.add_argument("--variant", choices=BLOCK_VARIANTS)
    p.add_argument("--skips", choices=("sle", "sase"))
    p.add_argument("--target", type=int)
    p.add_argument("--input-size", type=int, dest="input_size")
    p.set_defaults(fn=cmd_count)

    p = sub.add_parser("bench-scaling", help="linear-vs-quadratic complexity curves")
    common(p)
    p.add_argument("--channels", type=int)
    p.add_argument("--sizes", help="comma-separated square side lengths, e.g. 4,8,16,32,64")
    p.add_argument("--mechanisms", help="comma-separated subset of mhsa,sase_recog,se")
    p.set_defaults(fn=cmd_bench_scaling)

    p = sub.add_parser("train", help="seeded training on the blob-quadrant task")
    common(p)
    p.add_argument("--dtype", choices=("f64", "f32"))
    p.add_argument("--variant", choices=BLOCK_VARIANTS)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--dataset-size", type=int, dest="dataset_size")
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--lr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--wall-clock", action="store_true",
                   help="record real wall time in metrics.csv (breaks byte determinism)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("gen-forward", help="generator forward pass + mask dump")
    common(p)
    p.add_argument("--dtype", choices=("f64", "f32"))
    p.add_argument("--skips", choices=("sle", "sase"))
    p.add_argument("--target", type=int)
    p.set_defaults(fn=cmd_gen_forward)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ShapeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return NUMERIC_ERROR


if __name__ == "__main__":
    sys.exit(main())
