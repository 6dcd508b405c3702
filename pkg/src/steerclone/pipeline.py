"""End-to-end experiment steps shared by the CLI subcommands."""
from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import METHODS, Config
from .datasetio import DatasetManifest, FrameArrays, split_train_val
from .evalsuite import MetricsReport, closed_loop_eval, emit_report, offline_eval, read_predictions
from .expert import drive_and_record
from .models import ModelBundle
from .simworld import VehicleParams, build_track
from .trainer import (
    finetune_vit,
    pretrain_vit,
    train_autobc,
    train_autoencoder,
    train_spatial,
)

log = logging.getLogger("steerclone")


def derive_seed(root: int, *labels) -> int:
    """Stable child seed for a named pipeline step."""
    keys = [int(root)] + [zlib.crc32(str(x).encode()) for x in labels]
    return int(np.random.SeedSequence(keys).generate_state(1)[0])


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(root: Path, seed: int, extra: dict | None = None, name: str = "manifest.json") -> Path:
    files = {
        p.relative_to(root).as_posix(): sha256_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != name
    }
    body = {"seed": seed, "files": files, **(extra or {})}
    path = root / name
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# Data


def generate_dataset(config: Config, kind: str, n_frames: int, seed: int, out_dir: Path, record_masks=None) -> DatasetManifest:
    e, w = config["expert"], config["world"]
    track = build_track(kind, ds=w["track_resolution"])
    masks = config["dataset"]["record_masks"] if record_masks is None else record_masks
    return drive_and_record(
        track,
        n_frames,
        e["throttle"],
        e["steer_noise_std"],
        seed,
        out_dir,
        lookahead=e["lookahead"],
        dt=w["dt"],
        vehicle=VehicleParams(w["wheelbase"], w["v_max"]),
        record_masks=masks,
    )


def _cap(frames: FrameArrays, n: int | None) -> FrameArrays:
    if n is None or n >= len(frames):
        return frames
    return frames.subset(np.arange(n))


def split_frames(config: Config, manifest: DatasetManifest, seed: int) -> tuple[FrameArrays, FrameArrays]:
    train, val = split_train_val(manifest, config["dataset"]["val_fraction"], seed)
    return train.load_arrays(), val.load_arrays()


# --------------------------------------------------------------------------
# Training


def train_encoder(config: Config, train: FrameArrays, val: FrameArrays):
    cap = config.max_frames("autoencoder")
    vcap = None if cap is None else max(1, round(cap * config["dataset"]["val_fraction"]))
    return train_autoencoder(_cap(train, cap), _cap(val, vcap), config.train_config("autoencoder"))


def method_config(config: Config, method: str):
    arch, opts = METHODS[method]
    tc = config.train_config(arch)
    if arch == "vit":
        model = dict(tc.model)
        model["head_variant"] = opts["head_variant"]
        tc = replace(tc, model=model)
    return tc


def pretrain_encoder(config: Config, train: FrameArrays):
    tc = config.train_config("vit_pretrain")
    return pretrain_vit(_cap(train, config["train"]["pretrain_frames"]), tc, tc.mask_ratio)


def train_methods(config: Config, train: FrameArrays, val: FrameArrays, methods, out_dir: Path):
    """Train every requested method; checkpoints and logs land in ``out_dir``."""
    models_dir, logs_dir = out_dir / "models", out_dir / "logs"
    models_dir.mkdir(parents=True, exist_ok=True)
    logs_dir.mkdir(parents=True, exist_ok=True)
    bundles, logs = {}, {}

    def keep(name, bundle, tlog):
        bundle.save(models_dir / f"{name}.safetensors")
        tlog.to_csv(logs_dir / f"{name}.csv")
        logs[name] = tlog

    ae = pre = None
    for method in methods:
        arch, opts = METHODS[method]
        log.info("training %s", method)
        tc = method_config(config, method)
        cap = config.max_frames(arch)
        tr = _cap(train, cap)
        if arch == "autobc":
            if ae is None:
                ae, tlog = train_encoder(config, train, val)
                keep("autoencoder", ae, tlog)
            bundle, tlog = train_autobc(tr, val, tc, ae)
        elif arch == "autobc_spatial":
            bundle, tlog = train_spatial(tr, val, tc)
        else:
            init = None
            if opts["pretrained"]:
                if pre is None:
                    pre, tlog = pretrain_encoder(config, train)
                    keep("vit_pretrain", pre, tlog)
                init = pre
            bundle, tlog = finetune_vit(tr, val, tc, init)
        keep(method, bundle, tlog)
        bundles[method] = bundle
    return bundles, logs


# --------------------------------------------------------------------------
# Evaluation


def evaluate_offline(bundles: dict, datasets: dict, out_dir: Path, thresholds):
    reports, predictions = [], {}
    for method, bundle in bundles.items():
        for kind, manifest in datasets.items():
            dest = out_dir / method / kind
            report, path = offline_eval(bundle, manifest, dest, method=method, map_kind=kind, thresholds=thresholds)
            (dest / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
            _, y, y_hat = read_predictions(path)
            reports.append(report)
            predictions[(method, kind)] = (y, y_hat)
    return reports, predictions


def evaluate_closed_loop(config: Config, policies: dict, tracks) -> dict:
    w, ev = config["world"], config["eval"]
    vehicle = VehicleParams(w["wheelbase"], w["v_max"])
    results = {}
    for kind in tracks:
        track = build_track(kind, ds=w["track_resolution"])
        for name, policy in policies.items():
            results[(name, kind)] = closed_loop_eval(
                policy, track, ev["closed_loop_steps"], w["dt"], throttle=ev["closed_loop_throttle"], vehicle=vehicle
            )
    return results


def collect_eval_dirs(dirs) -> tuple[list[MetricsReport], dict]:
    reports, predictions = [], {}
    for d in dirs:
        for mpath in sorted(Path(d).rglob("metrics.json")):
            r = MetricsReport.from_dict(json.loads(mpath.read_text()))
            reports.append(r)
            pred = mpath.parent / "predictions.csv"
            if pred.exists():
                _, y, y_hat = read_predictions(pred)
                predictions[(r.method, r.map_kind)] = (y, y_hat)
    if not reports:
        raise FileNotFoundError(f"no metrics.json found under {', '.join(map(str, dirs))}")
    return reports, predictions


# --------------------------------------------------------------------------
# Full protocol


def reproduce(config: Config, out_dir: Path, methods=None) -> Path:
    """Generate data, train on the training track only, evaluate everywhere, report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = config.seed
    ds = config["dataset"]
    methods = list(methods or config["eval"]["methods"])

    train_kind = ds["train_track"]
    log.info("generating %s training data", train_kind)
    train_manifest = generate_dataset(
        config, train_kind, ds["train_frames"], derive_seed(root, "data", train_kind, "train"), out_dir / "data" / f"{train_kind}_train"
    )
    eval_sets = {}
    for kind in ds["eval_tracks"]:
        log.info("generating %s evaluation data", kind)
        eval_sets[kind] = generate_dataset(
            config, kind, ds["eval_frames"], derive_seed(root, "data", kind, "eval"), out_dir / "data" / f"{kind}_eval",
            record_masks=False,
        )

    train, val = split_frames(config, train_manifest, derive_seed(root, "split"))
    bundles, logs = train_methods(config, train, val, methods, out_dir)
    reports, predictions = evaluate_offline(bundles, eval_sets, out_dir / "eval", config["eval"]["margins"])
    closed = evaluate_closed_loop(config, {"expert": "expert", **bundles}, ds["eval_tracks"])
    emit_report(reports, out_dir / "report", logs, predictions, closed)
    write_manifest(out_dir, root, {"config": config.source, "methods": methods})
    return out_dir


def ablate_augment(config: Config, manifest: DatasetManifest | None, out_dir: Path) -> Path:
    """AutoBC with augmentation on vs off at an identical budget."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = config.seed
    if manifest is None:
        kind = config["dataset"]["train_track"]
        manifest = generate_dataset(
            config, kind, config["dataset"]["train_frames"], derive_seed(root, "data", kind, "train"),
            out_dir / "data" / f"{kind}_train", record_masks=False,
        )
    train, val = split_frames(config, manifest, derive_seed(root, "split"))
    ae, ae_log = train_encoder(config, train, val)
    ae.save(out_dir / "autoencoder.safetensors")
    rows, reports, predictions, logs = [], [], {}, {}
    cap = config.max_frames("autobc")
    for enabled in (False, True):
        name = f"autobc_augment_{'on' if enabled else 'off'}"
        tc = replace(config.train_config("autobc"), augment_enabled=enabled)
        bundle, tlog = train_autobc(_cap(train, cap), val, tc, ae)
        bundle.save(out_dir / f"{name}.safetensors")
        tlog.to_csv(out_dir / f"{name}_log.csv")
        report, path = offline_eval(bundle, val, out_dir / name, method=name, map_kind="held-out")
        _, y, y_hat = read_predictions(path)
        reports.append(report)
        predictions[(name, "held-out")] = (y, y_hat)
        logs[name] = tlog
        best = tlog.best_epoch
        rows.append({
            "augment": enabled,
            "epochs_run": len(tlog),
            "best_epoch": None if best is None else best + 1,
            "best_val_mse": None if best is None else tlog.val_losses[best],
            "final_train_loss": tlog.train_losses[-1] if len(tlog) else None,
            "mae": report.mae,
            "rmse": report.rmse,
            "margins": [[t, p] for t, p in sorted(report.margins.items())],
        })
    lines = [
        "| Augmentation | Epochs | Best epoch | Best val MSE | Final train loss | Held-out MAE | Held-out RMSE |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            f"| {'on' if r['augment'] else 'off'} | {r['epochs_run']} | {r['best_epoch']} | {r['best_val_mse']:.5f} | "
            f"{r['final_train_loss']:.5f} | {r['mae']:.4f} | {r['rmse']:.4f} |"
        )
    (out_dir / "ablation.md").write_text("\n".join(lines) + "\n")
    (out_dir / "ablation.json").write_text(json.dumps({"seed": root, "rows": rows}, indent=2, sort_keys=True) + "\n")
    emit_report(reports, out_dir / "report", logs, predictions)
    return out_dir


def method_name(bundle: ModelBundle) -> str:
    if bundle.arch != "vit":
        return bundle.arch
    tail = "sit" if bundle.config.get("pretrained") else "scratch"
    return f"vit_{bundle.config['head_variant']}_{tail}"

