"""Command-line entry point.

Relative output paths are resolved under ``$STEERCLONE_OUTPUT_ROOT`` when it
is set. Exit codes: 0 success, 1 pipeline failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import METHODS, ConfigError, load_config
from .datasetio import read_dataset
from .evalsuite import closed_loop_eval, emit_report, offline_eval, read_predictions
from .models import ModelBundle
from .pipeline import (
    ablate_augment,
    collect_eval_dirs,
    generate_dataset,
    method_name,
    pretrain_encoder,
    reproduce,
    split_frames,
    train_encoder,
    write_manifest,
)
from .simworld import TRACK_KINDS, VehicleParams, build_track
from .trainer import finetune_vit, train_autobc, train_autoencoder, train_spatial

OUTPUT_ROOT_ENV = "STEERCLONE_OUTPUT_ROOT"
ARCH_CHOICES = ("autoencoder", "autobc", "autobc_spatial", "vit")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or ".")


def out_path(p: str | Path) -> Path:
    p = Path(p)
    return p if p.is_absolute() else output_root() / p


def in_path(p: str | Path) -> Path:
    """Inputs resolve like outputs unless they exist relative to the cwd."""
    p = Path(p)
    if p.is_absolute() or p.exists():
        return p
    return output_root() / p


# --------------------------------------------------------------------------


def cmd_gen_data(args, config) -> int:
    seed = config.seed if args.seed is None else args.seed
    out = out_path(args.out)
    m = generate_dataset(config, args.track, args.frames, seed, out, record_masks=not args.no_masks)
    print(f"wrote {len(m)} frames to {out}")
    return 0


def cmd_train(args, config) -> int:
    if args.seed is not None:
        config.data["seed"] = args.seed
    out = out_path(args.out or f"runs/{args.arch}")
    out.mkdir(parents=True, exist_ok=True)
    manifest = read_dataset(in_path(args.data))
    train, val = split_frames(config, manifest, config.seed)
    overrides = {"epochs": args.epochs, "batch_size": args.batch_size, "learning_rate": args.lr}
    tc = config.train_config(args.arch, **overrides)
    if args.arch == "autoencoder":
        bundle, tlog = train_autoencoder(train, val, tc)
    elif args.arch == "autobc":
        if args.encoder:
            ae = ModelBundle.load(in_path(args.encoder))
        else:
            ae, ae_log = train_encoder(config, train, val)
            ae.save(out / "autoencoder.safetensors")
            ae_log.to_csv(out / "autoencoder_log.csv")
        bundle, tlog = train_autobc(train, val, tc, ae)
    elif args.arch == "autobc_spatial":
        bundle, tlog = train_spatial(train, val, tc)
    else:
        model = dict(tc.model)
        if args.head_variant:
            model["head_variant"] = args.head_variant
        tc = replace(tc, model=model)
        init = None
        if args.init:
            init = ModelBundle.load(in_path(args.init))
        elif args.pretrained:
            init, pre_log = pretrain_encoder(config, train)
            init.save(out / "vit_pretrain.safetensors")
            pre_log.to_csv(out / "vit_pretrain_log.csv")
        bundle, tlog = finetune_vit(train, val, tc, init)
    bundle.save(out / "model.safetensors")
    tlog.to_csv(out / "training_log.csv")
    print(f"saved {bundle.arch} checkpoint to {out / 'model.safetensors'}")
    return 0


def cmd_eval(args, config) -> int:
    bundle = ModelBundle.load(in_path(args.model))
    manifest = read_dataset(in_path(args.data))
    out = out_path(args.out or f"eval/{Path(args.model).stem}_{manifest.meta.get('track_kind', 'data')}")
    method = args.method or method_name(bundle)
    report, path = offline_eval(bundle, manifest, out, method=method, thresholds=config["eval"]["margins"])
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _, y, y_hat = read_predictions(path)
    emit_report([report], out, predictions={(report.method, report.map_kind): (y, y_hat)})
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_drive(args, config) -> int:
    policy = "expert" if args.model in (None, "expert") else ModelBundle.load(in_path(args.model))
    w, ev = config["world"], config["eval"]
    result = closed_loop_eval(
        policy,
        build_track(args.track, ds=w["track_resolution"]),
        args.steps or ev["closed_loop_steps"],
        w["dt"],
        throttle=args.throttle or ev["closed_loop_throttle"],
        vehicle=VehicleParams(w["wheelbase"], w["v_max"]),
    )
    body = json.dumps(result.to_dict(), sort_keys=True)
    if args.out:
        dest = out_path(args.out)
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(body + "\n")
    print(body)
    return 0


def cmd_report(args, config) -> int:
    reports, predictions = collect_eval_dirs([in_path(d) for d in args.inputs])
    out = emit_report(reports, out_path(args.out), predictions=predictions)
    print(f"report written to {out}")
    return 0


def cmd_reproduce(args, config) -> int:
    if args.seed is not None:
        config.data["seed"] = args.seed
    out = reproduce(config, out_path(args.out), methods=args.methods)
    print(f"reproduce finished; manifest at {out / 'manifest.json'}")
    return 0


def cmd_ablate(args, config) -> int:
    if args.seed is not None:
        config.data["seed"] = args.seed
    manifest = read_dataset(in_path(args.data)) if args.data else None
    out = ablate_augment(config, manifest, out_path(args.out))
    write_manifest(out, config.seed)
    print((out / "ablation.md").read_text(), end="")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="steerclone", description="Behaviour-cloning steering experiments in a toy simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="TOML config file (defaults apply when omitted)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "record expert demonstrations on one track")
    sp.add_argument("--track", required=True, choices=TRACK_KINDS)
    sp.add_argument("--frames", required=True, type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-masks", action="store_true", help="skip lane-mask images")

    sp = add("train", cmd_train, "train one architecture on a dataset")
    sp.add_argument("--arch", required=True, choices=ARCH_CHOICES)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--encoder", help="autoencoder checkpoint for autobc (trained on the fly otherwise)")
    sp.add_argument("--init", help="vit checkpoint to fine-tune from")
    sp.add_argument("--pretrained", action="store_true", help="vit: run masked pretraining first")
    sp.add_argument("--head-variant", choices=("mlp", "linear"))

    sp = add("eval", cmd_eval, "offline metrics and predictions.csv for a checkpoint")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out")
    sp.add_argument("--method", help="name used in reports (derived from the checkpoint otherwise)")

    sp = add("drive", cmd_drive, "closed-loop lap with a checkpoint or the expert")
    sp.add_argument("--model", help="checkpoint path, or 'expert' (default)")
    sp.add_argument("--track", required=True, choices=TRACK_KINDS)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--throttle", type=float)
    sp.add_argument("--out", help="write the result as JSON here")

    sp = add("report", cmd_report, "tables and plots from eval output directories")
    sp.add_argument("inputs", nargs="+", help="directories searched for metrics.json")
    sp.add_argument("--out", required=True)

    sp = add("reproduce", cmd_reproduce, "full protocol: data, training, evaluation, report")
    sp.add_argument("--out", default="reproduce")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--methods", nargs="+", choices=sorted(METHODS))

    sp = add("ablate-augment", cmd_ablate, "AutoBC with augmentation on vs off at equal budget")
    sp.add_argument("--data", help="training dataset (generated from the config when omitted)")
    sp.add_argument("--out", default="ablation")
    sp.add_argument("--seed", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        config = load_config(in_path(args.config) if args.config else None)
        if getattr(args, "steps", None) is not None and args.steps < 1:
            parser.error("--steps must be >= 1")
        if getattr(args, "frames", None) is not None and args.frames < 1:
            parser.error("--frames must be >= 1")
        return args.func(args, config)
    except ConfigError as exc:
        print(f"steerclone: config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"steerclone: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
