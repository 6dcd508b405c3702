"""scikit-learn style wrappers around the training loops.

``X`` is always a uint8 array of frames shaped (n, 224, 224, 3) and ``y`` the
steering labels in radians. A seeded ``val_fraction`` share of the rows is
held out for early stopping.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .datasetio import IMAGE_SIZE, STEER_LIMIT, FrameArrays
from .models import ModelBundle, ae_decode, ae_encode, predict_steering, to_model_input
from .trainer import TrainConfig, finetune_vit, pretrain_vit, train_autobc, train_autoencoder, train_spatial


def check_frames(X) -> np.ndarray:
    X = np.asarray(X)
    if X.dtype != np.uint8:
        raise ValueError(f"frames must be uint8, got {X.dtype}")
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ValueError(f"frames must be (n, {IMAGE_SIZE}, {IMAGE_SIZE}, 3), got {X.shape}")
    if len(X) == 0:
        raise ValueError("no frames given")
    return X


def check_steering(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f"{n} frames but {y.shape[0]} steering labels")
    if not np.all(np.isfinite(y)) or np.any(np.abs(y) > STEER_LIMIT):
        raise ValueError(f"steering labels must be finite and within [-{STEER_LIMIT}, {STEER_LIMIT}]")
    return y


def check_masks(masks, n: int) -> np.ndarray:
    m = np.asarray(masks)
    if m.ndim == 4 and m.shape[1] == 1:
        m = m[:, 0]
    if m.shape != (n, IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"masks must be ({n}, {IMAGE_SIZE}, {IMAGE_SIZE}), got {m.shape}")
    if m.dtype != np.uint8:
        m = np.round(np.clip(m, 0.0, 1.0) * 255).astype(np.uint8)
    return m


def _split(frames: FrameArrays, val_fraction: float, seed: int) -> tuple[FrameArrays, FrameArrays]:
    n = len(frames)
    if n < 2:
        raise ValueError("need at least 2 frames to hold out a validation split")
    order = np.random.default_rng(seed).permutation(n)
    n_val = min(n - 1, max(1, int(round(n * val_fraction))))
    return frames.subset(np.sort(order[n_val:])), frames.subset(np.sort(order[:n_val]))


class _Trained(BaseEstimator):
    def _train_config(self, arch, model, **kw):
        return TrainConfig(
            arch,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            early_stop_patience=self.early_stop_patience,
            model=model,
            **kw,
        )

    def _frames(self, X, y=None, masks=None) -> FrameArrays:
        X = check_frames(X)
        y = np.zeros(len(X)) if y is None else check_steering(y, len(X))
        m = None if masks is None else check_masks(masks, len(X))
        return FrameArrays(X, y, [], m)


class ConvAutoencoder(TransformerMixin, _Trained):
    """Reconstruction autoencoder; ``transform`` gives the (C, 28, 28) latent maps."""

    def __init__(self, widths=(32, 64, 128), epochs=80, batch_size=256, learning_rate=1e-3,
                 early_stop_patience=10, val_fraction=0.2, seed=0):
        self.widths = widths
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.early_stop_patience = early_stop_patience
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y=None):
        train, val = _split(self._frames(X), self.val_fraction, self.seed)
        cfg = self._train_config("autoencoder", {"widths": list(self.widths)})
        self.bundle_, self.log_ = train_autoencoder(train, val, cfg)
        return self

    @torch.no_grad()
    def transform(self, X):
        check_is_fitted(self, "bundle_")
        x = to_model_input(check_frames(X))
        return ae_encode(x, self.bundle_).numpy()

    @torch.no_grad()
    def inverse_transform(self, Z):
        """Latents back to [0, 1] images shaped (n, 3, 224, 224)."""
        check_is_fitted(self, "bundle_")
        return ae_decode(torch.as_tensor(np.asarray(Z, dtype=np.float32)), self.bundle_).numpy()


class _SteeringRegressor(RegressorMixin, _Trained):
    def predict(self, X):
        check_is_fitted(self, "bundle_")
        return predict_steering(self.bundle_, check_frames(X))


class AutoBCRegressor(_SteeringRegressor):
    """Autoencoder encoder plus dense steering head.

    ``encoder`` may be a fitted ConvAutoencoder or an autoencoder ModelBundle;
    without one, an autoencoder with ``widths`` is fitted on ``X`` first.
    """

    def __init__(self, encoder=None, widths=(32, 64, 128), hidden=128, dropout=0.3, epochs=50, batch_size=64,
                 learning_rate=1e-3, freeze_encoder=False, augment=False, early_stop_patience=10,
                 val_fraction=0.2, seed=0):
        self.encoder = encoder
        self.widths = widths
        self.hidden = hidden
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.freeze_encoder = freeze_encoder
        self.augment = augment
        self.early_stop_patience = early_stop_patience
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y):
        frames = self._frames(X, y)
        enc = self.encoder
        if enc is None:
            enc = ConvAutoencoder(widths=self.widths, val_fraction=self.val_fraction, seed=self.seed).fit(X)
        if isinstance(enc, ConvAutoencoder):
            check_is_fitted(enc, "bundle_")
            enc = enc.bundle_
        if not isinstance(enc, ModelBundle):
            raise TypeError("encoder must be a ConvAutoencoder, an autoencoder ModelBundle or None")
        train, val = _split(frames, self.val_fraction, self.seed)
        cfg = self._train_config(
            "autobc",
            {"hidden": self.hidden, "dropout": self.dropout},
            freeze_encoder=self.freeze_encoder,
            augment_enabled=self.augment,
        )
        self.encoder_ = enc
        self.bundle_, self.log_ = train_autobc(train, val, cfg, enc)
        return self


class SpatialAttentionRegressor(_SteeringRegressor):
    """Steering with a lane-mask attention head; ``fit`` needs per-frame lane masks."""

    def __init__(self, stem_width=64, blocks=2, feature_channels=256, head_width=32, mask_weight=1.0,
                 recon_weight=1.0, epochs=50, batch_size=64, learning_rate=1e-3, augment=False,
                 early_stop_patience=10, val_fraction=0.2, seed=0):
        self.stem_width = stem_width
        self.blocks = blocks
        self.feature_channels = feature_channels
        self.head_width = head_width
        self.mask_weight = mask_weight
        self.recon_weight = recon_weight
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.augment = augment
        self.early_stop_patience = early_stop_patience
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y, masks=None):
        if masks is None:
            raise ValueError("SpatialAttentionRegressor.fit needs lane masks")
        train, val = _split(self._frames(X, y, masks), self.val_fraction, self.seed)
        model = {k: getattr(self, k) for k in
                 ("stem_width", "blocks", "feature_channels", "head_width", "mask_weight", "recon_weight")}
        cfg = self._train_config("autobc_spatial", model, augment_enabled=self.augment)
        self.bundle_, self.log_ = train_spatial(train, val, cfg)
        return self

    @torch.no_grad()
    def predict_mask(self, X):
        """Eval-mode attention maps shaped (n, 1, 224, 224)."""
        check_is_fitted(self, "bundle_")
        net = self.bundle_.module.eval()
        return net(to_model_input(check_frames(X)))[1].numpy()


class ViTRegressor(_SteeringRegressor):
    """Patch transformer; ``pretrained=True`` runs masked reconstruction on ``X`` first."""

    def __init__(self, width=384, depth=6, heads=6, mlp_ratio=4.0, embed_dim=1000, head_variant="mlp",
                 head_hidden=256, pretrained=False, pretrain_epochs=30, mask_ratio=0.5, epochs=50,
                 batch_size=64, learning_rate=3e-4, augment=False, early_stop_patience=10,
                 val_fraction=0.2, seed=0):
        self.width = width
        self.depth = depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.embed_dim = embed_dim
        self.head_variant = head_variant
        self.head_hidden = head_hidden
        self.pretrained = pretrained
        self.pretrain_epochs = pretrain_epochs
        self.mask_ratio = mask_ratio
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.augment = augment
        self.early_stop_patience = early_stop_patience
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y):
        frames = self._frames(X, y)
        train, val = _split(frames, self.val_fraction, self.seed)
        model = {k: getattr(self, k) for k in
                 ("width", "depth", "heads", "mlp_ratio", "embed_dim", "head_variant", "head_hidden")}
        init = None
        if self.pretrained:
            pre_cfg = TrainConfig(
                "vit_pretrain", epochs=self.pretrain_epochs, batch_size=self.batch_size, seed=self.seed,
                early_stop_patience=self.early_stop_patience, model=dict(model),
            )
            init, self.pretrain_log_ = pretrain_vit(train, pre_cfg, self.mask_ratio, val_set=val)
        cfg = self._train_config("vit", model, augment_enabled=self.augment)
        self.bundle_, self.log_ = finetune_vit(train, val, cfg, init)
        return self
