import numpy as np
import pytest
from sklearn.base import clone

from steerclone.estimators import (
    AutoBCRegressor,
    ConvAutoencoder,
    SpatialAttentionRegressor,
    ViTRegressor,
    check_frames,
)

SMALL = {
    ConvAutoencoder: {"widths": (2, 2, 4)},
    AutoBCRegressor: {"widths": (2, 2, 4), "hidden": 4},
    SpatialAttentionRegressor: {"stem_width": 4, "blocks": 1, "feature_channels": 8, "head_width": 4},
    ViTRegressor: {"width": 16, "depth": 1, "heads": 2, "embed_dim": 16, "head_hidden": 8},
}
FIT = {"epochs": 1, "batch_size": 8}


@pytest.fixture(scope="module")
def data(small_frames):
    return small_frames.images[:20], small_frames.steering[:20], small_frames.masks[:20]


@pytest.mark.parametrize("cls", list(SMALL))
def test_params_roundtrip_and_clone(cls):
    est = cls(**SMALL[cls], seed=3)
    params = est.get_params()
    assert params["seed"] == 3
    other = clone(est)
    assert other is not est and other.get_params() == params
    est.set_params(epochs=123)
    assert est.get_params()["epochs"] == 123 and other.get_params()["epochs"] != 123


def test_published_defaults():
    assert (ConvAutoencoder().epochs, ConvAutoencoder().batch_size) == (80, 256)
    assert (AutoBCRegressor().epochs, AutoBCRegressor().batch_size) == (50, 64)


def test_autoencoder_transform_shapes(data):
    X, _, _ = data
    ae = ConvAutoencoder(**SMALL[ConvAutoencoder], **FIT).fit(X)
    z = ae.transform(X[:3])
    assert z.shape == (3, 4, 28, 28)
    rec = ae.inverse_transform(z)
    assert rec.shape == (3, 3, 224, 224) and 0.0 <= rec.min() and rec.max() <= 1.0
    assert np.allclose(ae.transform(X[0]), z[:1], atol=1e-6)


def test_autobc_fit_predict_and_reuse_encoder(data):
    X, y, _ = data
    ae = ConvAutoencoder(**SMALL[ConvAutoencoder], **FIT).fit(X)
    reg = AutoBCRegressor(encoder=ae, hidden=4, **FIT).fit(X, y)
    pred = reg.predict(X)
    assert pred.shape == (20,) and np.all(np.abs(pred) <= 0.5)
    assert reg.encoder_ is ae.bundle_
    assert np.isfinite(reg.score(X, y))
    again = AutoBCRegressor(encoder=ae, hidden=4, **FIT).fit(X, y)
    assert np.array_equal(again.predict(X), pred)
    with pytest.raises(TypeError):
        AutoBCRegressor(encoder="ae.ckpt", **FIT).fit(X, y)


def test_spatial_requires_masks(data):
    X, y, m = data
    est = SpatialAttentionRegressor(**SMALL[SpatialAttentionRegressor], **FIT)
    with pytest.raises(ValueError, match="masks"):
        est.fit(X, y)
    est.fit(X, y, masks=m)
    assert est.predict(X[:2]).shape == (2,)
    mask = est.predict_mask(X[:2])
    assert mask.shape == (2, 1, 224, 224) and 0.0 <= mask.min() and mask.max() <= 1.0


def test_vit_with_pretraining(data):
    X, y, _ = data
    est = ViTRegressor(**SMALL[ViTRegressor], head_variant="linear", pretrained=True, pretrain_epochs=1, **FIT)
    est.fit(X, y)
    assert len(est.pretrain_log_) == 1 and est.bundle_.config["pretrained"]
    assert est.predict(X[:3]).shape == (3,)


def test_input_validation(data):
    X, y, _ = data
    with pytest.raises(ValueError, match="uint8"):
        check_frames(X.astype(np.float32))
    with pytest.raises(ValueError):
        check_frames(X[:, :100])
    with pytest.raises(ValueError):
        AutoBCRegressor(**FIT).fit(X, y[:5])
    with pytest.raises(ValueError):
        AutoBCRegressor(**FIT).fit(X, np.full(20, 0.9))
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        AutoBCRegressor().predict(X)
