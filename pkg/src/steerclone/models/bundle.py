"""Architecture registry, checkpoints and the per-architecture forward functions.

Checkpoint layout (safetensors): one tensor per ``state_dict`` entry, plus
string metadata ``format = steerclone.checkpoint``, ``version = 1``,
``arch``, ``seed`` and ``config`` (JSON object, sorted keys).
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from safetensors.torch import load_file, save
from safetensors import safe_open

from ..augment import normalize_image
from .autoencoder import AutoBCNet, ConvAutoencoderNet
from .common import ShapeError, as_batch
from .spatial import SpatialAttentionNet
from .vit import ViTNet

ARCHS = ("autoencoder", "autobc", "autobc_spatial", "vit")
CHECKPOINT_FORMAT = "steerclone.checkpoint"
CHECKPOINT_VERSION = "1"

DEFAULT_CONFIGS = {
    "autoencoder": {"widths": [32, 64, 128]},
    "autobc": {"widths": [32, 64, 128], "hidden": 128, "dropout": 0.3},
    "autobc_spatial": {
        "stem_width": 64,
        "blocks": 2,
        "feature_channels": 256,
        "head_width": 32,
        "mask_weight": 1.0,
        "recon_weight": 1.0,
    },
    "vit": {
        "width": 384,
        "depth": 6,
        "heads": 6,
        "mlp_ratio": 4.0,
        "embed_dim": 1000,
        "head_variant": "mlp",
        "head_hidden": 256,
        "pretrained": False,
        "with_reconstruction": False,
    },
}

# Keys that shape the network; the rest are training knobs carried along.
_NET_KEYS = {
    "autoencoder": ("widths",),
    "autobc": ("widths", "hidden", "dropout"),
    "autobc_spatial": ("stem_width", "blocks", "feature_channels", "head_width"),
    "vit": ("width", "depth", "heads", "mlp_ratio", "embed_dim", "head_variant", "head_hidden", "with_reconstruction"),
}
_NETS = {
    "autoencoder": ConvAutoencoderNet,
    "autobc": AutoBCNet,
    "autobc_spatial": SpatialAttentionNet,
    "vit": ViTNet,
}


def resolve_config(arch: str, config: dict | None = None) -> dict:
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    merged = copy.deepcopy(DEFAULT_CONFIGS[arch])
    for k, v in (config or {}).items():
        if k not in merged:
            raise ValueError(f"unknown {arch} config key {k!r}")
        merged[k] = list(v) if isinstance(v, tuple) else v
    return merged


def build_module(arch: str, config: dict) -> torch.nn.Module:
    kwargs = {k: config[k] for k in _NET_KEYS[arch]}
    return _NETS[arch](**kwargs)


@dataclass
class ModelBundle:
    arch: str
    config: dict
    module: torch.nn.Module
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, arch: str, config: dict | None = None, seed: int = 0) -> ModelBundle:
        cfg = resolve_config(arch, config)
        torch.manual_seed(seed)
        module = build_module(arch, cfg)
        module.eval()
        return cls(arch, cfg, module, seed)

    @property
    def params(self) -> dict[str, torch.Tensor]:
        return self.module.state_dict()

    def require(self, arch: str) -> None:
        if self.arch != arch:
            raise ValueError(f"expected a {arch} bundle, got {self.arch}")

    def copy(self) -> ModelBundle:
        return ModelBundle(self.arch, copy.deepcopy(self.config), copy.deepcopy(self.module), self.seed, dict(self.extra))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors = {k: v.detach().cpu().contiguous().clone() for k, v in self.module.state_dict().items()}
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "arch": self.arch,
            "seed": str(self.seed),
            "config": json.dumps(self.config, sort_keys=True),
        }
        path.write_bytes(_canonical_header(save(tensors, metadata=meta)))
        return path

    @classmethod
    def load(cls, path: str | Path) -> ModelBundle:
        with safe_open(str(path), framework="pt") as fh:
            meta = fh.metadata() or {}
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a steerclone checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        arch = meta["arch"]
        cfg = resolve_config(arch, json.loads(meta["config"]))
        module = build_module(arch, cfg)
        state = load_file(str(path))
        dtypes = {v.dtype for v in state.values() if v.is_floating_point()}
        if dtypes:
            module = module.to(dtypes.pop())
        module.load_state_dict(state, strict=True)
        module.eval()
        return cls(arch, cfg, module, int(meta.get("seed", 0)))


def _canonical_header(raw: bytes) -> bytes:
    # The writer emits metadata in hash-map order, which varies between
    # processes; sort it so identical weights give identical bytes.
    n = struct.unpack("<Q", raw[:8])[0]
    header = json.loads(raw[8:8 + n])
    header["__metadata__"] = dict(sorted(header.get("__metadata__", {}).items()))
    text = json.dumps(header, separators=(",", ":")).encode()
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + raw[8 + n:]


# --------------------------------------------------------------------------
# Forward functions. They run in whatever mode the module is in.


def ae_encode(image, bundle: ModelBundle):
    x, single = as_batch(image)
    net = bundle.module
    if bundle.arch not in ("autoencoder", "autobc"):
        raise ValueError(f"{bundle.arch} bundle has no convolutional encoder")
    if x.ndim != 4 or tuple(x.shape[1:]) != (3, 224, 224):
        raise ShapeError(f"expected (3, 224, 224) input, got {tuple(x.shape[1:])}")
    z = net.encoder(x)
    return z[0] if single else z


def ae_decode(latent, bundle: ModelBundle):
    bundle.require("autoencoder")
    z, single = as_batch(latent)
    enc = bundle.module.encoder
    side = 224 // 8
    if z.ndim != 4 or tuple(z.shape[1:]) != (enc.out_channels, side, side):
        raise ShapeError(f"latent must be ({enc.out_channels}, {side}, {side}), got {tuple(z.shape[1:])}")
    out = bundle.module.decoder(z)
    return out[0] if single else out


def autobc_forward(image, bundle: ModelBundle):
    bundle.require("autobc")
    x, single = as_batch(image)
    y = bundle.module(x)
    return y[0] if single else y


def spattn_forward(image, bundle: ModelBundle):
    """(steering, mask, reconstruction) in training mode, (steering, mask) in eval mode."""
    bundle.require("autobc_spatial")
    x, single = as_batch(image)
    out = bundle.module(x)
    return tuple(o[0] for o in out) if single else out


def vit_forward(image, bundle: ModelBundle):
    bundle.require("vit")
    x, single = as_batch(image)
    y = bundle.module(x)
    return y[0] if single else y


def to_model_input(images, dtype=torch.float32) -> torch.Tensor:
    """uint8 NHWC frames -> normalised NCHW tensor; float NCHW passes through."""
    arr = np.asarray(images) if not isinstance(images, torch.Tensor) else images
    if isinstance(arr, np.ndarray) and arr.dtype == np.uint8:
        arr = normalize_image(arr)
    t = torch.as_tensor(arr)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t.to(dtype)


@torch.no_grad()
def predict_steering(bundle: ModelBundle, images, batch_size: int = 64) -> np.ndarray:
    """Eval-mode steering for uint8 NHWC frames (or normalised NCHW floats)."""
    if bundle.arch == "autoencoder":
        raise ValueError("an autoencoder bundle does not predict steering")
    net = bundle.module
    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    out = []
    try:
        for start in range(0, len(images), batch_size):
            x = to_model_input(images[start:start + batch_size], dtype)
            y = net(x)
            if isinstance(y, tuple):
                y = y[0]
            out.append(y.reshape(-1).double().numpy())
    finally:
        net.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)
