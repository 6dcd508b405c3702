"""Experiment configuration: one TOML file, documented defaults, strict keys.

Sections: ``world``, ``expert``, ``dataset``, ``augment``, ``model.<arch>``,
``train`` (with optional ``train.<arch>`` tables) and ``eval``, plus a
top-level root ``seed``. Unknown keys and out-of-range values are rejected
with the dotted key path and, when it can be located, the line number.
"""
from __future__ import annotations

import copy
import re
import sys
from pathlib import Path

from .augment import AugmentConfig
from .models import DEFAULT_CONFIGS
from .trainer import ARCH_DEFAULTS, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

_TRAIN_ARCH = {"epochs": None, "batch_size": None, "learning_rate": None, "max_frames": None}

DEFAULTS = {
    "seed": 0,
    "world": {"dt": 0.02, "wheelbase": 0.26, "v_max": 1.0, "track_resolution": 0.004},
    "expert": {"lookahead": 0.3, "throttle": 0.3, "steer_noise_std": 0.02},
    "dataset": {
        "train_track": "ellipse",
        "train_frames": 5000,
        "eval_tracks": ["ellipse", "o", "s"],
        "eval_frames": 1000,
        "val_fraction": 0.2,
        "record_masks": True,
    },
    "augment": {
        "enabled": False,
        "flip_prob": 0.5,
        "shift_prob": 0.5,
        "darken_prob": 0.5,
        "max_shift": 0.2,
        "darken_area": [0.1, 0.5],
        "darken_factor": 0.5,
    },
    "model": copy.deepcopy(DEFAULT_CONFIGS),
    "train": {
        "epochs": None,
        "batch_size": None,
        "learning_rate": None,
        "early_stop_patience": 10,
        "freeze_encoder": False,
        "mask_ratio": 0.5,
        "pretrain_frames": 2000,
        **{arch: dict(_TRAIN_ARCH) for arch in ARCH_DEFAULTS},
    },
    "eval": {
        "margins": [0.1, 0.2, 0.3],
        "closed_loop_steps": 3000,
        "closed_loop_throttle": 0.3,
        "methods": ["autobc", "autobc_spatial", "vit_mlp_sit", "vit_linear_sit", "vit_mlp_scratch", "vit_linear_scratch"],
    },
}

METHODS = {
    "autobc": ("autobc", {}),
    "autobc_spatial": ("autobc_spatial", {}),
    "vit_mlp_sit": ("vit", {"head_variant": "mlp", "pretrained": True}),
    "vit_linear_sit": ("vit", {"head_variant": "linear", "pretrained": True}),
    "vit_mlp_scratch": ("vit", {"head_variant": "mlp", "pretrained": False}),
    "vit_linear_scratch": ("vit", {"head_variant": "linear", "pretrained": False}),
}

# Keys whose default is None accept these types.
_OPTIONAL_TYPES = {
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "max_frames": int,
}


class ConfigError(ValueError):
    def __init__(self, message: str, key: str = "", line: int | None = None):
        where = f" (line {line})" if line else ""
        super().__init__(f"{key}{where}: {message}" if key else message)
        self.key = key
        self.line = line


def _locate(text: str, path: tuple[str, ...]) -> int | None:
    """Best-effort line number of a dotted key in TOML source."""
    table: tuple[str, ...] = ()
    header = re.compile(r"^\s*\[\s*([^\]]+?)\s*\]\s*(#.*)?$")
    assign = re.compile(r"^\s*([A-Za-z0-9_.\"' -]+?)\s*=")
    best = None
    for no, line in enumerate(text.splitlines(), 1):
        m = header.match(line)
        if m:
            table = tuple(p.strip().strip("\"'") for p in m.group(1).split("."))
            if table == path:
                best = best or no
            continue
        m = assign.match(line)
        if m:
            key = table + tuple(p.strip().strip("\"'") for p in m.group(1).split("."))
            if key == path:
                return no
            if key[: len(path)] == path or path[: len(key)] == key:
                best = best or no
    return best


def _check_type(value, default, key, text):
    path = tuple(key.split("."))
    expect = type(default) if default is not None else _OPTIONAL_TYPES.get(path[-1])
    if expect is None:
        return value
    if expect is bool:
        ok = isinstance(value, bool)
    elif expect is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expect is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif expect is list:
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, expect)
    if not ok:
        raise ConfigError(f"expected {expect.__name__}, got {type(value).__name__}", key, _locate(text, path))
    return value


def _merge(defaults: dict, user: dict, prefix: str, text: str) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in user.items():
        key = f"{prefix}{k}"
        if k not in defaults:
            raise ConfigError("unknown key", key, _locate(text, tuple(key.split("."))))
        if isinstance(defaults[k], dict):
            if not isinstance(v, dict):
                raise ConfigError("expected a table", key, _locate(text, tuple(key.split("."))))
            out[k] = _merge(defaults[k], v, key + ".", text)
        else:
            out[k] = _check_type(v, defaults[k], key, text)
    return out


class Config:
    """Validated configuration; ``data`` holds the fully resolved tree."""

    def __init__(self, data: dict, source: str = "", path: Path | None = None):
        self.data = data
        self.source = source
        self.path = path
        self._validate()

    @classmethod
    def from_text(cls, text: str, path: Path | None = None) -> Config:
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path or '<config>'}: {exc}") from None
        return cls(_merge(DEFAULTS, raw, "", text), text, path)

    @classmethod
    def default(cls) -> Config:
        return cls.from_text("")

    def __getitem__(self, section: str):
        return self.data[section]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def _fail(self, key: str, message: str):
        raise ConfigError(message, key, _locate(self.source, tuple(key.split("."))))

    def _validate(self):
        d = self.data
        positive = [
            ("world.dt", d["world"]["dt"]),
            ("world.wheelbase", d["world"]["wheelbase"]),
            ("world.v_max", d["world"]["v_max"]),
            ("world.track_resolution", d["world"]["track_resolution"]),
            ("expert.lookahead", d["expert"]["lookahead"]),
            ("dataset.train_frames", d["dataset"]["train_frames"]),
            ("dataset.eval_frames", d["dataset"]["eval_frames"]),
            ("train.pretrain_frames", d["train"]["pretrain_frames"]),
            ("eval.closed_loop_steps", d["eval"]["closed_loop_steps"]),
        ]
        for key, v in positive:
            if not v > 0:
                self._fail(key, f"must be > 0, got {v}")
        if not 0 < d["expert"]["throttle"] <= 1:
            self._fail("expert.throttle", "must be in (0, 1]")
        if not 0 < d["eval"]["closed_loop_throttle"] <= 1:
            self._fail("eval.closed_loop_throttle", "must be in (0, 1]")
        if d["expert"]["steer_noise_std"] < 0:
            self._fail("expert.steer_noise_std", "must be >= 0")
        if not 0 < d["dataset"]["val_fraction"] < 1:
            self._fail("dataset.val_fraction", "must be in (0, 1)")
        for key in ("flip_prob", "shift_prob", "darken_prob"):
            if not 0 <= d["augment"][key] <= 1:
                self._fail(f"augment.{key}", "must be in [0, 1]")
        area = d["augment"]["darken_area"]
        if len(area) != 2 or not 0 < area[0] <= area[1] <= 1:
            self._fail("augment.darken_area", "must be [lo, hi] with 0 < lo <= hi <= 1")
        if not 0 < d["train"]["mask_ratio"] < 1:
            self._fail("train.mask_ratio", "must be in (0, 1)")
        if d["train"]["early_stop_patience"] < 0:
            self._fail("train.early_stop_patience", "must be >= 0")
        tables = [("train", d["train"])] + [(f"train.{a}", d["train"][a]) for a in ARCH_DEFAULTS]
        for prefix, t in tables:
            if t["epochs"] is not None and t["epochs"] < 0:
                self._fail(f"{prefix}.epochs", "must be >= 0")
            if t["batch_size"] is not None and t["batch_size"] < 1:
                self._fail(f"{prefix}.batch_size", f"must be >= 1, got {t['batch_size']}")
            if t["learning_rate"] is not None and t["learning_rate"] < 0:
                self._fail(f"{prefix}.learning_rate", "must be >= 0")
            if t.get("max_frames") is not None and t["max_frames"] < 2:
                self._fail(f"{prefix}.max_frames", "must be >= 2")
        m = sorted(d["eval"]["margins"])
        if m != d["eval"]["margins"] or not m:
            self._fail("eval.margins", "must be a non-empty ascending list")
        for name in d["eval"]["methods"]:
            if name not in METHODS:
                self._fail("eval.methods", f"unknown method {name!r}; choose from {sorted(METHODS)}")
        for kind in d["dataset"]["eval_tracks"] + [d["dataset"]["train_track"]]:
            if kind not in ("ellipse", "o", "s"):
                self._fail("dataset.eval_tracks", f"unknown track {kind!r}")

    # ---- views used by the CLI

    def train_config(self, arch: str, **overrides) -> TrainConfig:
        """Per-arch table wins over the shared ``train`` values, which win over defaults."""
        t = self.data["train"]
        per = t[arch]
        kw = {}
        for key in ("epochs", "batch_size", "learning_rate"):
            value = per[key] if per[key] is not None else t[key]
            if value is not None:
                kw[key] = value
        model_arch = "vit" if arch == "vit_pretrain" else arch
        kw.update(
            seed=self.seed,
            early_stop_patience=t["early_stop_patience"],
            freeze_encoder=t["freeze_encoder"],
            augment_enabled=self.data["augment"]["enabled"],
            val_fraction=self.data["dataset"]["val_fraction"],
            mask_ratio=t["mask_ratio"],
            model=copy.deepcopy(self.data["model"][model_arch]),
            augment=self.augment_config(),
        )
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig(arch, **kw)

    def max_frames(self, arch: str) -> int | None:
        return self.data["train"][arch]["max_frames"]

    def augment_config(self) -> AugmentConfig:
        a = self.data["augment"]
        return AugmentConfig(
            a["flip_prob"], a["shift_prob"], a["darken_prob"], a["max_shift"], tuple(a["darken_area"]), a["darken_factor"]
        )


def load_config(path: str | Path | None = None) -> Config:
    if path is None:
        return Config.default()
    path = Path(path)
    return Config.from_text(path.read_text(), path)
