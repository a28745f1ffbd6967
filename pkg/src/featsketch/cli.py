"""``featsketch`` command line.

Every command takes ``--config``, ``--seed`` and ``--out`` and prints one
JSON summary line on success. Exit codes: 0 success, 2 validation error,
3 adapter error, 4 data error.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, config_from_dict, load_config
from .errors import AdapterError, ConfigError, DataError, DimensionError, IntegrityError, ScheduleError

EXIT_OK, EXIT_VALIDATION, EXIT_ADAPTER, EXIT_DATA = 0, 2, 3, 4


def _seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def _config(args):
    return load_config(args.config) if args.config else ExperimentConfig().validate()


def _summary(command, **fields):
    print(json.dumps({"command": command, "status": "ok", **fields}, sort_keys=True))


def _sketch_net(cfg, args):
    from .trainer import load_sketch_generator

    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    return load_sketch_generator(args.checkpoint, cfg.schedule)


def _load_latent(path):
    from .generator_tap import LatentCode

    return LatentCode.load(path)


# -- commands ----------------------------------------------------------------


def cmd_validate_config(args):
    cfg = _config(args)
    if args.out:
        cfg.dump(args.out)
    _summary("validate-config", schedule_entries=len(cfg.schedule), total_iters=cfg.train.total_iters,
             stage1_iters=cfg.train.stage1_iters, lr=cfg.train.lr, out=args.out)


def cmd_toygen(args):
    from .data import make_toy_pairs, save_image
    from .trainer import toy_model_config, toy_train_config

    out = Path(args.out or "toy")
    seed = 0 if args.seed is None else args.seed
    cfg = _config(args) if args.config else config_from_dict({"schedule": "toy"})
    cfg = replace(cfg, adapters=replace(cfg.adapters, generator="toy", generator_seed=seed))
    if not args.config:
        cfg = replace(cfg, train=toy_train_config(seed=seed), model=toy_model_config())
    handle = cfg.build_generator_handle()
    data = make_toy_pairs(handle, args.pairs, seed=seed + 1)
    for sub in ("photo", "sketch", "latent"):
        (out / "dataset" / sub).mkdir(parents=True, exist_ok=True)
    from .generator_tap import LatentCode

    for i in range(len(data)):
        stem = f"{i:05d}"
        save_image(data.photos[i], out / "dataset" / "photo" / f"{stem}.png")
        save_image(data.sketches[i], out / "dataset" / "sketch" / f"{stem}.png")
        LatentCode(data.latents[i]).save(out / "dataset" / "latent" / f"{stem}.npy")
    fixture = {"kind": "toy", "seed": seed, "style_dim": cfg.adapters.style_dim, "schedule": cfg.schedule.to_dict()}
    (out / "generator.json").write_text(json.dumps(fixture, indent=1))
    cfg = replace(cfg, paths=replace(cfg.paths, dataset=str(out / "dataset"), checkpoints=str(out / "checkpoints")))
    cfg.dump(out / "config.yaml")
    _summary("toygen", out=str(out), pairs=len(data), resolution=cfg.schedule.output_resolution,
             config=str(out / "config.yaml"))


def cmd_train(args):
    from .data import dataset_ingest
    from .trainer import train

    cfg = _config(args)
    tcfg = cfg.train if args.seed is None else replace(cfg.train, seed=args.seed)
    dataset_dir = args.dataset or cfg.paths.dataset
    if not dataset_dir:
        raise ConfigError("no dataset: pass --dataset or set paths.dataset")
    ds = dataset_ingest(dataset_dir, cfg.schedule.output_resolution)
    handle = cfg.build_generator_handle()
    adapters = cfg.build_adapters()
    out = args.out or cfg.paths.checkpoints
    result = train(tcfg, ds, handle, adapters, cfg.model, cfg.regions, tuple(cfg.parts), out_dir=out,
                   resume=args.resume, stop_at=args.stop_at, allow_config_change=args.allow_config_change,
                   inverter=cfg.build_inverter(adapters.featnet))
    last = result.checkpoints[-1] if result.checkpoints else None
    _summary("train", pairs=len(ds), iteration=result.trainer.iteration, checkpoint=str(last) if last else None,
             log=str(result.log_path) if result.log_path else None)


def cmd_invert(args):
    from .data import load_image
    from .generator_tap import invert_image

    cfg = _config(args)
    if not args.image:
        raise ConfigError("--image is required")
    handle = cfg.build_generator_handle()
    inv = cfg.build_inverter(cfg.build_adapters().featnet)
    trace = []
    latent = invert_image(load_image(args.image).to(handle.dtype), handle, inv, trace=trace)
    out = Path(args.out or "latent.npy")
    latent.save(out)
    _summary("invert", out=str(out), objective=trace[-1] if trace else None, shape=list(latent.vectors.shape))


def cmd_extract(args):
    from .apps import extract_sketch, sketch_from_latent
    from .data import load_image, save_image

    cfg = _config(args)
    if bool(args.image) == bool(args.latent):
        raise ConfigError("extract takes exactly one of --image or --latent")
    handle = cfg.build_generator_handle()
    net = _sketch_net(cfg, args)
    if args.image:
        inv = cfg.build_inverter(cfg.build_adapters().featnet)
        sketch, latent = extract_sketch(load_image(args.image).to(handle.dtype), handle, net, inv)
    else:
        latent = _load_latent(args.latent)
        _, sketch = sketch_from_latent(latent, handle, net)
    out = Path(args.out or "sketch.png")
    save_image(sketch[0] if sketch.ndim == 4 else sketch, out)
    _summary("extract", out=str(out), source=args.image or args.latent)


def _layer_range(text):
    if text is None:
        return None
    rows = []
    for part in text.split(","):
        lo, _, hi = part.partition("-")
        rows.extend(range(int(lo), int(hi) + 1) if hi else [int(lo)])
    return rows


def cmd_edit(args):
    from .apps import EditDirection, semantic_edit
    from .data import save_image

    cfg = _config(args)
    if not (args.latent and args.direction):
        raise ConfigError("edit requires --latent and --direction")
    handle = cfg.build_generator_handle()
    net = _sketch_net(cfg, args)
    direction = EditDirection.load(args.direction, layer_range=_layer_range(args.layers))
    sketch = semantic_edit(_load_latent(args.latent), direction, args.alpha, handle, net)
    out = Path(args.out or "edit.png")
    save_image(sketch[0] if sketch.ndim == 4 else sketch, out)
    _summary("edit", out=str(out), alpha=args.alpha, direction=direction.name)


def cmd_synth_pairs(args):
    from .apps import synthesize_pairs, write_pairs

    cfg = _config(args)
    seed = 0 if args.seed is None else args.seed
    handle = cfg.build_generator_handle()
    net = _sketch_net(cfg, args)
    samples = synthesize_pairs(args.n, seed, handle, net, args.style_tag)
    out = Path(args.out or "pairs")
    write_pairs(samples, out, seed)
    _summary("synth-pairs", out=str(out / args.style_tag), n=len(samples), seed=seed)


def cmd_eval(args):
    from .metrics import eval_metrics, load_metric

    cfg = _config(args)
    if not (args.pred and args.gt):
        raise ConfigError("eval requires --pred and --gt")
    adapters = {}
    for name, spec in cfg.adapters.metrics.items():
        try:
            adapters[name] = None if spec is None else load_metric(spec)
        except AdapterError:
            adapters[name] = None
    out = Path(args.out or "report.csv")
    report = eval_metrics(args.pred, args.gt, adapters, out)
    _summary("eval", out=str(out), aggregate=report.aggregate, unavailable=sorted(report.unavailable))


# -- parser ------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="featsketch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment YAML (defaults to full-scale settings)")
        p.add_argument("--seed", type=int, default=None, help="RNG seed")
        p.add_argument("--out", help="output path")
        p.set_defaults(func=func)
        return p

    add("validate-config", cmd_validate_config, "load, validate and optionally re-dump a config")

    p = add("toygen", cmd_toygen, "write a toy generator fixture, dataset and config")
    p.add_argument("--pairs", type=int, default=4)

    p = add("train", cmd_train, "train the sketch generator")
    p.add_argument("--dataset")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--stop-at", type=int, default=None, help="stop after this many iterations")
    p.add_argument("--allow-config-change", action="store_true")

    p = add("invert", cmd_invert, "invert an image to a w+ latent (.npy)")
    p.add_argument("--image")

    p = add("extract", cmd_extract, "render the sketch of an image or latent")
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--latent")

    p = add("edit", cmd_edit, "render the sketch of an edited latent")
    p.add_argument("--checkpoint")
    p.add_argument("--latent")
    p.add_argument("--direction", help=".npy of shape (style_dim,) or (n_layers, style_dim)")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--layers", help="rows to edit, e.g. '0-5' or '0,2,4'")

    p = add("synth-pairs", cmd_synth_pairs, "synthesize photo/sketch pairs from random latents")
    p.add_argument("--checkpoint")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--style-tag", default="style")

    p = add("eval", cmd_eval, "score predicted sketches against references")
    p.add_argument("--pred")
    p.add_argument("--gt")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    _seed_everything(0 if args.seed is None else args.seed)
    try:
        args.func(args)
        return EXIT_OK
    except (DataError, IntegrityError, FileNotFoundError) as exc:
        return _fail(args, exc, EXIT_DATA)
    except AdapterError as exc:
        return _fail(args, exc, EXIT_ADAPTER)
    except (ConfigError, ScheduleError, DimensionError) as exc:
        return _fail(args, exc, EXIT_VALIDATION)


def _fail(args, exc, code):
    print(json.dumps({"command": args.command, "status": "error", "error": type(exc).__name__,
                      "message": str(exc)}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
