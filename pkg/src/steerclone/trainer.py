"""Training loops with validation tracking and early stopping.

Every loop returns the weights of the epoch with the lowest validation loss.
Validation loss is the reconstruction loss for the reconstruction models and
the steering MSE for the steering models.
"""
from __future__ import annotations

import copy
import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentConfig, iterate_batches
from .datasetio import FrameArrays, as_frames
from .models import (
    ModelBundle,
    ae_loss,
    resolve_config,
    sit_recon_loss,
    spatial_loss,
    steering_loss,
)

ARCH_DEFAULTS = {
    "autoencoder": {"epochs": 80, "batch_size": 256, "learning_rate": 1e-3},
    "autobc": {"epochs": 50, "batch_size": 64, "learning_rate": 1e-3},
    "autobc_spatial": {"epochs": 50, "batch_size": 64, "learning_rate": 1e-3},
    "vit": {"epochs": 50, "batch_size": 64, "learning_rate": 3e-4},
    "vit_pretrain": {"epochs": 30, "batch_size": 64, "learning_rate": 1e-3},
}
_CONV_ARCHS = ("autoencoder", "autobc", "autobc_spatial")


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss ({value}) at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    arch: str
    epochs: int | None = None
    batch_size: int | None = None
    learning_rate: float | None = None
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    augment_enabled: bool = False
    seed: int = 0
    early_stop_patience: int = 10
    freeze_encoder: bool = False
    val_fraction: float = 0.2
    mask_ratio: float = 0.5
    eval_batch_size: int = 64
    model: dict = field(default_factory=dict)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        key = self.arch
        if key not in ARCH_DEFAULTS:
            raise ValueError(f"unknown arch {self.arch!r}")
        for name, value in ARCH_DEFAULTS[key].items():
            if getattr(self, name) is None:
                setattr(self, name, value)
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    initial_val_loss: float | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    @property
    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.records]

    @property
    def best_epoch(self) -> int | None:
        """Zero-based index of the lowest validation loss (first on ties)."""
        if not self.records:
            return None
        return int(np.argmin(self.val_losses))

    def losses(self) -> list[tuple[float, float]]:
        return [(r.train_loss, r.val_loss) for r in self.records]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
            if self.initial_val_loss is not None:
                # epoch 0: the untrained network, no training loss yet
                w.writerow([0, "", repr(self.initial_val_loss), "0.000"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), f"{r.seconds:.3f}"])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> TrainingLog:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        initial = None
        if rows and int(rows[0]["epoch"]) == 0:
            initial = float(rows.pop(0)["val_loss"])
        records = [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]), float(r["seconds"])) for r in rows]
        return cls(records, initial)


def early_stop_check(log: TrainingLog | list[float], patience: int) -> bool:
    """True once ``patience`` or more epochs have passed since the best one."""
    val = log.val_losses if isinstance(log, TrainingLog) else list(log)
    if not val:
        raise ValueError("early_stop_check needs at least one epoch")
    return (len(val) - 1 - int(np.argmin(val))) >= patience


# --------------------------------------------------------------------------
# Loss plumbing shared by the loops and the gradient checks.


def batch_loss(arch: str, module: torch.nn.Module, batch, config: dict | None = None) -> torch.Tensor:
    """Training loss of one (images, steering[, masks]) batch of tensors."""
    x, y = batch[0], batch[1]
    if arch == "autoencoder":
        return ae_loss(x + 0.5, module(x))
    if arch == "autobc":
        return steering_loss(module(x), y)
    if arch == "autobc_spatial":
        cfg = config or {}
        steer, mask, recon = module(x)
        return spatial_loss(
            steer, mask, recon, y, batch[2], x + 0.5,
            mask_weight=cfg.get("mask_weight", 1.0), recon_weight=cfg.get("recon_weight", 1.0),
        )
    if arch == "vit":
        return steering_loss(module(x), y)
    raise ValueError(f"unknown arch {arch!r}")


def _to_tensors(batch, dtype, channels_last):
    out = []
    for i, a in enumerate(batch):
        t = torch.from_numpy(np.asarray(a)).to(dtype)
        if i == 0 and channels_last:
            t = t.contiguous(memory_format=torch.channels_last)
        out.append(t)
    return tuple(out)


def _require_nonempty(*sets):
    frames = [as_frames(s) for s in sets]
    for f in frames:
        if len(f) == 0:
            raise ValueError("training and validation sets must be non-empty")
    return frames


def _fit(
    bundle: ModelBundle,
    train: FrameArrays,
    val: FrameArrays,
    cfg: TrainConfig,
    train_loss_fn,
    val_loss_fn,
    params=None,
    with_masks: bool = False,
    on_epoch_start=None,
) -> tuple[ModelBundle, TrainingLog]:
    net = bundle.module
    channels_last = bundle.arch in _CONV_ARCHS
    if channels_last:
        net.to(memory_format=torch.channels_last)
    dtype = next(net.parameters()).dtype
    torch.manual_seed(cfg.seed)
    trainable = [p for p in (params if params is not None else net.parameters()) if p.requires_grad]
    opt = torch.optim.Adam(trainable, lr=cfg.learning_rate, betas=tuple(cfg.betas), eps=cfg.eps)
    log = TrainingLog()
    best_state, best_val = None, math.inf
    if cfg.epochs > 0:
        net.eval()
        log.initial_val_loss = _evaluate(net, val, cfg, val_loss_fn, dtype, channels_last, with_masks)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        net.train()
        if on_epoch_start is not None:
            on_epoch_start(net)
        total, count = 0.0, 0
        for batch in iterate_batches(
            train,
            cfg.batch_size,
            enabled=cfg.augment_enabled,
            seed=cfg.seed,
            epoch=epoch,
            with_masks=with_masks,
            cfg=cfg.augment,
        ):
            tb = _to_tensors(batch, dtype, channels_last)
            loss = train_loss_fn(net, tb, epoch)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise DivergenceError(epoch + 1, value)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += value * len(tb[0])
            count += len(tb[0])
        train_loss = total / count
        net.eval()
        val_loss = _evaluate(net, val, cfg, val_loss_fn, dtype, channels_last, with_masks)
        if not math.isfinite(val_loss):
            raise DivergenceError(epoch + 1, val_loss)
        log.records.append(EpochRecord(epoch + 1, train_loss, val_loss, time.perf_counter() - t0))
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(net.state_dict())
        if early_stop_check(log, cfg.early_stop_patience):
            break
    if best_state is not None:
        net.load_state_dict(best_state)
    if channels_last:
        net.to(memory_format=torch.contiguous_format)
    net.eval()
    return bundle, log


@torch.no_grad()
def _evaluate(net, val, cfg, loss_fn, dtype, channels_last, with_masks) -> float:
    total, count = 0.0, 0
    for i, batch in enumerate(iterate_batches(val, cfg.eval_batch_size, shuffle=False, with_masks=with_masks)):
        tb = _to_tensors(batch, dtype, channels_last)
        total += float(loss_fn(net, tb, i)) * len(tb[0])
        count += len(tb[0])
    return total / count


# --------------------------------------------------------------------------
# Public loops


def train_autoencoder(train_set, val_set, config: TrainConfig) -> tuple[ModelBundle, TrainingLog]:
    if config.arch != "autoencoder":
        raise ValueError("config.arch must be 'autoencoder'")
    train, val = _require_nonempty(train_set, val_set)
    bundle = ModelBundle.create("autoencoder", config.model, seed=config.seed)

    def loss(net, b, _):
        return ae_loss(b[0] + 0.5, net(b[0]))

    return _fit(bundle, train, val, config, loss, loss)


def train_autobc(train_set, val_set, config: TrainConfig, encoder_init: ModelBundle) -> tuple[ModelBundle, TrainingLog]:
    if config.arch != "autobc":
        raise ValueError("config.arch must be 'autobc'")
    if encoder_init is None or encoder_init.arch != "autoencoder":
        raise ValueError("encoder_init must be a trained autoencoder bundle")
    train, val = _require_nonempty(train_set, val_set)
    model_cfg = dict(config.model)
    model_cfg["widths"] = list(encoder_init.config["widths"])
    bundle = ModelBundle.create("autobc", model_cfg, seed=config.seed)
    bundle.module.encoder.load_state_dict(encoder_init.module.encoder.state_dict())
    net = bundle.module
    on_epoch_start = None
    if config.freeze_encoder:
        for p in net.encoder.parameters():
            p.requires_grad_(False)
        on_epoch_start = lambda m: m.encoder.eval()  # noqa: E731

    def loss(net, b, _):
        return steering_loss(net(b[0]), b[1])

    bundle, log = _fit(bundle, train, val, config, loss, loss, on_epoch_start=on_epoch_start)
    for p in net.parameters():
        p.requires_grad_(True)
    return bundle, log


def train_spatial(train_set, val_set, config: TrainConfig) -> tuple[ModelBundle, TrainingLog]:
    """Joint steering / lane-mask / reconstruction training; needs lane masks."""
    if config.arch != "autobc_spatial":
        raise ValueError("config.arch must be 'autobc_spatial'")
    train, val = _require_nonempty(train_set, val_set)
    if train.masks is None:
        raise ValueError("spatial attention training needs lane masks")
    bundle = ModelBundle.create("autobc_spatial", config.model, seed=config.seed)
    weights = bundle.config

    def train_loss(net, b, _):
        return batch_loss("autobc_spatial", net, b, weights)

    def val_loss(net, b, _):
        return steering_loss(net(b[0])[0], b[1])

    return _fit(bundle, train, val, config, train_loss, val_loss, with_masks=True)


def pretrain_vit(image_set, config: TrainConfig, mask_ratio: float | None = None, val_set=None):
    """Grouped-mask L1 reconstruction pretraining.

    Without ``val_set`` a ``config.val_fraction`` share of ``image_set`` is
    held out. The returned bundle keeps its reconstruction head, which the
    steering forward pass never touches.
    """
    if config.arch not in ("vit", "vit_pretrain"):
        raise ValueError("config.arch must be 'vit' or 'vit_pretrain'")
    ratio = config.mask_ratio if mask_ratio is None else mask_ratio
    frames = as_frames(image_set)
    if len(frames) == 0:
        raise ValueError("image set must be non-empty")
    if val_set is None:
        if len(frames) < 2:
            raise ValueError("need at least 2 images to hold out a validation split")
        order = np.random.default_rng(config.seed).permutation(len(frames))
        n_val = max(1, int(round(len(frames) * config.val_fraction)))
        train, val = frames.subset(np.sort(order[n_val:])), frames.subset(np.sort(order[:n_val]))
    else:
        train, val = frames, as_frames(val_set)
    model_cfg = dict(config.model)
    model_cfg["with_reconstruction"] = True
    model_cfg["pretrained"] = True
    bundle = ModelBundle.create("vit", model_cfg, seed=config.seed)

    # Training masks come from one generator per epoch; validation replays a
    # fixed mask sequence so its losses stay comparable across epochs.
    rngs = {}

    def train_loss(net, b, epoch):
        if epoch not in rngs:
            rngs.clear()
            rngs[epoch] = np.random.default_rng(np.random.SeedSequence([config.seed, epoch, 1]))
        recon, _ = net.reconstruct(b[0], ratio, rngs[epoch])
        return sit_recon_loss(b[0] + 0.5, recon)

    val_rng = {}

    def val_loss(net, b, i):
        if i == 0:
            val_rng["g"] = np.random.default_rng(np.random.SeedSequence([config.seed, 10**6]))
        recon, _ = net.reconstruct(b[0], ratio, val_rng["g"])
        return sit_recon_loss(b[0] + 0.5, recon)

    return _fit(bundle, train, val, config, train_loss, val_loss)


_ENCODER_KEYS = ("width", "depth", "heads", "mlp_ratio", "embed_dim")


def finetune_vit(train_set, val_set, config: TrainConfig, init: ModelBundle | None = None):
    """Steering regression on a ViT, from a pretrained bundle or from scratch."""
    if config.arch != "vit":
        raise ValueError("config.arch must be 'vit'")
    if init is not None:
        init.require("vit")
        if config.epochs == 0:
            return init, TrainingLog()
    model_cfg = resolve_config("vit", config.model)
    model_cfg["with_reconstruction"] = False
    model_cfg["pretrained"] = bool(init is not None and init.config.get("pretrained", False))
    if init is not None:
        for k in _ENCODER_KEYS:
            model_cfg[k] = init.config[k]
    bundle = ModelBundle.create("vit", model_cfg, seed=config.seed)
    if init is not None:
        src = init.module.state_dict()
        keep = {k: v for k, v in src.items() if not k.startswith(("head.", "recon_head."))}
        bundle.module.load_state_dict(keep, strict=False)
    if config.epochs == 0:
        return bundle, TrainingLog()
    train, val = _require_nonempty(train_set, val_set)

    def loss(net, b, _):
        return steering_loss(net(b[0]), b[1])

    return _fit(bundle, train, val, config, loss, loss)
