"""``plainseg`` command line: train, eval, count, bench, dump-features, gen-data.

Exit codes: 0 success, 2 configuration error, 1 any other failure.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from .config import ConfigError, RunConfig, load_config, serialize_config


def _run_config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _data_spec(cfg: RunConfig, split: str):
    from .data import SyntheticShapesSpec

    d = cfg.data
    n = d.train_images if split == "train" else d.val_images
    return SyntheticShapesSpec(image_size=d.image_size, num_classes=d.num_classes, num_images=n,
                               shapes_min=d.shapes_min, shapes_max=d.shapes_max, noise=d.noise, seed=d.seed)


def _check_data_matches_model(cfg: RunConfig) -> None:
    if cfg.data.num_classes != cfg.model.num_classes:
        raise ConfigError(f"data.num_classes={cfg.data.num_classes} but model.num_classes={cfg.model.num_classes}")


def cmd_gen_data(args) -> int:
    from .data import generate_synthetic

    cfg = _run_config(args)
    if args.seed is not None:
        cfg.data.seed = args.seed
    out = Path(args.out or cfg.data.root)
    generate_synthetic(_data_spec(cfg, "train"), out, "train", start=0)
    generate_synthetic(_data_spec(cfg, "val"), out, "val", start=cfg.data.train_images)
    print(f"wrote {cfg.data.train_images} train / {cfg.data.val_images} val pairs to {out}")
    return 0


def _load_model(cfg: RunConfig, checkpoint: str | None):
    from .checkpoint import load_checkpoint
    from .model import build_model

    model = build_model(cfg.model, seed=cfg.train.seed)
    if checkpoint:
        load_checkpoint(checkpoint, model, strict=True)
    return model


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import has_split, load_split
    from .evaluation import evaluate_dataset
    from .model import build_model
    from .training import fit

    cfg = _run_config(args)
    _check_data_matches_model(cfg)
    if args.iters is not None:
        cfg.train.total_iters = args.iters
        cfg.train.warmup_iters = min(cfg.train.warmup_iters, args.iters)
    root = Path(args.data or cfg.data.root)
    X, Y = load_split(root, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize_config(cfg))
    model = build_model(cfg.model, seed=cfg.train.seed)
    t = cfg.train
    t0 = time.perf_counter()
    with open(out / "metrics.tsv", "w") as log:
        opt = fit(model, X, Y, lr=t.learning_rate, layer_decay=t.layer_decay, head_scale=t.head_scale,
                  batch_size=t.batch_size, total_iters=t.total_iters, warmup_iters=t.warmup_iters,
                  weight_decay=t.weight_decay, grad_clip=t.grad_clip or None, literal_llrd=t.literal_llrd,
                  seed=t.seed, log=log, log_every=t.log_every)
    save_checkpoint(out / "model.pseg", model, opt, extra={"iters": t.total_iters})
    print(f"trained {t.total_iters} iters in {time.perf_counter() - t0:.1f}s -> {out / 'model.pseg'}")
    if has_split(root, "val"):
        Xv, Yv = load_split(root, "val")
        _, m = evaluate_dataset(model, Xv, Yv, cfg.eval.crop, cfg.eval.stride, cfg.eval.batch_size)
        print(f"val_miou\t{m:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_split
    from .evaluation import evaluate_dataset

    cfg = _run_config(args)
    _check_data_matches_model(cfg)
    model = _load_model(cfg, args.checkpoint)
    X, Y = load_split(Path(args.data or cfg.data.root), args.split)
    iou, m = evaluate_dataset(model, X, Y, cfg.eval.crop, cfg.eval.stride, cfg.eval.batch_size)
    for c, v in enumerate(iou):
        print(f"iou_class_{c}\t{v:.4f}")
    print(f"miou\t{m:.4f}")
    return 0


def cmd_count(args) -> int:
    from .cost import count_macs
    from .model import preset

    model_cfg = preset(args.preset) if args.preset else _run_config(args).model
    hw = tuple(args.input) if args.input else None
    rep = count_macs(model_cfg, hw)
    sys.stdout.write(rep.to_keyvalue() if args.format == "kv" else rep.to_text())
    return 0


def cmd_bench(args) -> int:
    from .evaluation import benchmark_model

    cfg = _run_config(args)
    model = _load_model(cfg, args.checkpoint)
    s = cfg.model.img_size
    res = benchmark_model(model, (1, 3, s, s), args.warmup, args.repeats)
    print(f"median_ms\t{res['median_ms']:.3f}")
    print(f"repeats\t{args.repeats}")
    print(f"hardware\t{res['hardware']}")
    return 0


def cmd_dump_features(args) -> int:
    from .data import normalize_images, read_pnm
    from .features import dump_features, stage_names

    cfg = _run_config(args)
    model = _load_model(cfg, args.checkpoint)
    img = read_pnm(args.image)
    if img.ndim != 3:
        raise ValueError("dump-features needs a colour P6 image")
    x = normalize_images(img[None])[0]
    stages = args.stage or stage_names(model)
    for p in dump_features(model, x, stages, args.out):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="plainseg", description="Plain-ViT semantic segmentation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="run configuration file")
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "write the synthetic shapes dataset")
    p.add_argument("--out", help="output directory (default: data.root)")
    p.add_argument("--seed", type=int)

    p = add("train", cmd_train, "train a model; writes model.pseg and metrics.tsv")
    p.add_argument("--out", default="run")
    p.add_argument("--data", help="dataset directory (default: data.root)")
    p.add_argument("--iters", type=int, help="override train.total_iters")

    p = add("eval", cmd_eval, "mIoU of a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="val")

    p = add("count", cmd_count, "analytic parameter and GMAC report")
    p.add_argument("--preset", help="named model configuration instead of --config")
    p.add_argument("--input", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--format", choices=("text", "kv"), default="text")

    p = add("bench", cmd_bench, "median forward latency")
    p.add_argument("--checkpoint")
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--repeats", type=int, default=10)

    p = add("dump-features", cmd_dump_features, "write channel-mean feature maps as PGM")
    p.add_argument("--checkpoint")
    p.add_argument("--image", required=True, help="P6 input image")
    p.add_argument("--stage", action="append", help="pre-refine, post-refine or group-i (repeatable)")
    p.add_argument("--out", default="features")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
