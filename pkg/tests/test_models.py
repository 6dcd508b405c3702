import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import TINY, gradient_check
from gradcheck import images as _images
from oracles import fuse_loop, l1_batch_loop
from steerclone.models import (
    ModelBundle,
    ShapeError,
    ae_decode,
    ae_encode,
    ae_loss,
    autobc_forward,
    group_mask,
    group_mask_indicator,
    patchify,
    predict_steering,
    resolve_config,
    sit_recon_loss,
    spatial_fuse,
    spattn_forward,
    to_model_input,
    unpatchify,
    vit_forward,
)


@pytest.fixture(scope="module")
def default_bundles():
    return {arch: ModelBundle.create(arch, seed=0) for arch in ("autoencoder", "autobc", "autobc_spatial", "vit")}


# ---- shape contracts


@pytest.mark.parametrize("n", [1, 2, 7])
def test_shapes_for_batch_sizes(default_bundles, n):
    x = _images(n, n)
    b = default_bundles
    with torch.no_grad():
        z = ae_encode(x, b["autoencoder"])
        assert z.shape == (n, 128, 28, 28)
        rec = ae_decode(z, b["autoencoder"])
        assert rec.shape == (n, 3, 224, 224)
        assert rec.min() >= 0.0 and rec.max() <= 1.0
        assert autobc_forward(x, b["autobc"]).shape == (n,)
        net = b["autobc_spatial"].module
        assert net.features(x).shape == (n, 256, 56, 56)
        steer, mask = spattn_forward(x, b["autobc_spatial"])
        assert steer.shape == (n,) and mask.shape == (n, 1, 224, 224)
        assert mask.min() >= 0.0 and mask.max() <= 1.0
        net.train()
        try:
            steer, mask, recon = spattn_forward(x, b["autobc_spatial"])
        finally:
            net.eval()
        assert recon.shape == (n, 3, 224, 224)
        assert vit_forward(x, b["vit"]).shape == (n,)
        assert b["vit"].module.embedding(x).shape == (n, 1000)


def test_single_image_forwards(default_bundles):
    x = _images(1)[0]
    with torch.no_grad():
        assert ae_encode(x, default_bundles["autoencoder"]).shape == (128, 28, 28)
        assert autobc_forward(x, default_bundles["autobc"]).shape == ()
        assert vit_forward(x, default_bundles["vit"]).shape == ()


def test_wrong_shapes_and_arch(default_bundles):
    with pytest.raises(ShapeError):
        ae_encode(torch.zeros(1, 3, 200, 200), default_bundles["autoencoder"])
    with pytest.raises(ShapeError):
        ae_decode(torch.zeros(1, 64, 28, 28), default_bundles["autoencoder"])
    with pytest.raises(ShapeError):
        default_bundles["autobc"].module(torch.zeros(1, 1, 224, 224))
    with pytest.raises(ValueError):
        autobc_forward(_images(1), default_bundles["vit"])
    with pytest.raises(ValueError):
        vit_forward(_images(1), default_bundles["autobc"])
    with pytest.raises(ValueError):
        spattn_forward(_images(1), default_bundles["autobc"])
    with pytest.raises(ValueError):
        resolve_config("autobc", {"nope": 1})
    with pytest.raises(ValueError):
        ModelBundle.create("resnet")


# ---- autoencoder


def test_encode_is_deterministic_and_batch_consistent(default_bundles):
    b = default_bundles["autoencoder"]
    x = _images(4, 3)
    with torch.no_grad():
        full = ae_encode(x, b)
        assert torch.equal(full, ae_encode(x, b))
        singles = torch.stack([ae_encode(x[i], b) for i in range(4)])
        dec = ae_decode(full, b)
        assert torch.equal(dec, ae_decode(full, b))
    assert torch.allclose(full, singles, atol=1e-6, rtol=0)


def test_ae_loss_examples(rng):
    x = torch.zeros(2, 3, 4, 4, dtype=torch.float64)
    assert ae_loss(x, x).item() == 0.0
    assert ae_loss(x, x + 0.5).item() == 0.25
    a = torch.from_numpy(rng.random((3, 3, 5, 5)))
    b = torch.from_numpy(rng.random((3, 3, 5, 5)))
    brute = sum((float(p) - float(q)) ** 2 for p, q in zip(a.ravel(), b.ravel())) / a.numel()
    assert ae_loss(a, b).item() == pytest.approx(brute, abs=1e-12)
    with pytest.raises(ShapeError):
        ae_loss(a, b[:2])


# ---- AutoBC


def test_autobc_dropout_behaviour(default_bundles):
    b = default_bundles["autobc"]
    x = _images(2, 8)
    with torch.no_grad():
        assert torch.equal(autobc_forward(x, b), autobc_forward(x, b))
        assert torch.isfinite(autobc_forward(torch.zeros(1, 3, 224, 224), b)).all()
        b.module.train()
        try:
            torch.manual_seed(1)
            a1 = autobc_forward(x, b)
            a2 = autobc_forward(x, b)
        finally:
            b.module.eval()
    assert not torch.equal(a1, a2)


# ---- spatial attention


def test_fuse_identities():
    z = torch.randn(2, 256, 56, 56, dtype=torch.float64)
    assert torch.equal(spatial_fuse(z, torch.zeros(2, 1, 56, 56, dtype=torch.float64)), z)
    assert torch.equal(spatial_fuse(z, torch.ones(2, 1, 224, 224, dtype=torch.float64)), 2 * z)
    single = z[0]
    assert torch.equal(spatial_fuse(single, torch.ones(1, 56, 56, dtype=torch.float64)), 2 * single)


def test_fuse_matches_loop_oracle(rng):
    z = rng.standard_normal((4, 7, 6))
    m = rng.random((7, 6))
    got = spatial_fuse(torch.from_numpy(z), torch.from_numpy(m)[None]).numpy()
    assert np.allclose(got, fuse_loop(z, m), atol=1e-12, rtol=0)
    # full-size mask is average-pooled 4x4 onto the 56-grid
    big = rng.random((224, 224))
    zz = rng.standard_normal((3, 56, 56))
    pooled = big.reshape(56, 4, 56, 4).mean(axis=(1, 3))
    got = spatial_fuse(torch.from_numpy(zz), torch.from_numpy(big)[None]).numpy()
    assert np.allclose(got, fuse_loop(zz, pooled), atol=1e-12, rtol=0)


def test_fuse_shape_errors():
    with pytest.raises(ShapeError):
        spatial_fuse(torch.zeros(2, 8, 56, 56), torch.zeros(2, 1, 50, 50))
    with pytest.raises(ShapeError):
        spatial_fuse(torch.zeros(2, 8, 56, 56), torch.zeros(3, 1, 56, 56))
    with pytest.raises(ShapeError):
        spatial_fuse(torch.zeros(2, 8, 56, 56), torch.zeros(2, 2, 56, 56))


def test_silenced_mask_head_reduces_to_plain_path():
    b = ModelBundle.create("autobc_spatial", TINY["autobc_spatial"], seed=2)
    net = b.module
    with torch.no_grad():
        for p in net.mask_head.parameters():
            p.zero_()
        net.mask_head[-2].bias.fill_(-50.0)  # sigmoid(-50) is about 2e-22
        x = _images(3, 4)
        steer, mask = spattn_forward(x, b)
        plain = net.steer_from_features(net.features(x))
    assert mask.max() < 1e-20
    assert torch.allclose(steer, plain, atol=1e-6, rtol=0)


# ---- ViT


def test_patchify_roundtrip_and_order():
    x = torch.randn(2, 3, 224, 224)
    tok = patchify(x)
    assert tok.shape == (2, 196, 768)
    assert torch.equal(unpatchify(tok), x)
    assert torch.equal(tok[:, 0], x[:, :, :16, :16].reshape(2, -1))
    # 14 tokens per row, so token 15 is row 1, column 1
    assert torch.equal(tok[:, 15], x[:, :, 16:32, 16:32].reshape(2, -1))
    with pytest.raises(ShapeError):
        patchify(torch.zeros(1, 3, 220, 224))


def test_group_mask_counts_over_seeds():
    counts = [group_mask_indicator(14, 0.5, np.random.default_rng(s)).sum() for s in range(1000)]
    assert min(counts) >= 98 and max(counts) <= 118


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 0.9))
def test_group_mask_is_made_of_groups(seed, ratio):
    m = group_mask_indicator(14, ratio, np.random.default_rng(seed)).reshape(14, 14)
    assert m.sum() >= np.ceil(ratio * 196)
    padded = np.pad(m, 1)
    neighbours = padded[:-2, 1:-1] | padded[2:, 1:-1] | padded[1:-1, :-2] | padded[1:-1, 2:]
    assert np.all(neighbours[m])


def test_group_mask_replaces_exactly_the_indicated_tokens():
    tok = torch.randn(3, 196, 8)
    mask_tok = torch.full((1, 1, 8), 7.0)
    out, ind = group_mask(tok, 0.4, np.random.default_rng(0), mask_tok)
    replaced = (out == 7.0).all(dim=-1)
    assert torch.equal(replaced, ind)
    assert torch.equal(out[~ind], tok[~ind])
    with pytest.raises(ValueError):
        group_mask_indicator(14, 1.0, np.random.default_rng(0))


def test_sit_loss_examples(rng):
    x = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    assert sit_recon_loss(x, x).item() == 0.0
    y = x.clone()
    y[0, 1, 2, 3] = 0.3
    assert sit_recon_loss(x, y).item() == pytest.approx(0.3, abs=1e-15)
    a, b = rng.random((5, 3, 6, 6)), rng.random((5, 3, 6, 6))
    got = sit_recon_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
    assert got == pytest.approx(l1_batch_loop(a, b), abs=1e-10)


def test_linear_head_is_affine():
    b = ModelBundle.create("vit", {**TINY["vit"], "embed_dim": 1000, "head_variant": "linear"}, seed=0)
    f = b.module.head
    g = torch.Generator().manual_seed(0)
    e1, e2 = torch.randn(4, 1000, generator=g), torch.randn(4, 1000, generator=g)
    with torch.no_grad():
        assert torch.allclose(f(e1) + f(e2) - f(torch.zeros(4, 1000)), f(e1 + e2), atol=1e-5)


def test_mlp_head_variant_has_hidden_layer():
    net = ModelBundle.create("vit", TINY["vit"]).module
    assert isinstance(net.head, torch.nn.Sequential) and len(net.head) == 3


def test_swapping_patches_changes_output():
    b = ModelBundle.create("vit", TINY["vit"], seed=1)
    x = _images(1, 5)
    y = x.clone()
    y[:, :, :16, :16], y[:, :, 96:112, 160:176] = x[:, :, 96:112, 160:176], x[:, :, :16, :16]
    with torch.no_grad():
        assert not torch.allclose(vit_forward(x, b), vit_forward(y, b), atol=1e-7, rtol=0)


def test_reconstruction_requires_head():
    net = ModelBundle.create("vit", TINY["vit"]).module
    with pytest.raises(RuntimeError):
        net.reconstruct(_images(1), 0.5, np.random.default_rng(0))
    net2 = ModelBundle.create("vit", {**TINY["vit"], "with_reconstruction": True}).module
    rec, ind = net2.reconstruct(_images(2), 0.5, np.random.default_rng(0))
    assert rec.shape == (2, 3, 224, 224) and ind.shape == (2, 196)


# ---- serialisation


@pytest.mark.parametrize("arch", ["autoencoder", "autobc", "autobc_spatial", "vit"])
def test_save_load_is_bit_exact(tmp_path, arch):
    b = ModelBundle.create(arch, TINY[arch], seed=3)
    x = _images(2, 6)
    with torch.no_grad():
        for p in b.module.parameters():
            p.add_(0.01 * torch.randn_like(p))
    path = b.save(tmp_path / "m.safetensors")
    back = ModelBundle.load(path)
    assert back.arch == arch and back.config == b.config and back.seed == 3
    with torch.no_grad():
        before = b.module(x)
        after = back.module(x)
    if isinstance(before, tuple):
        before, after = before[0], after[0]
    assert torch.equal(before, after)
    assert b.save(tmp_path / "again.safetensors").read_bytes() == path.read_bytes()


def test_load_rejects_foreign_files(tmp_path):
    from safetensors.torch import save_file

    save_file({"w": torch.zeros(2)}, str(tmp_path / "x.safetensors"))
    with pytest.raises(ValueError):
        ModelBundle.load(tmp_path / "x.safetensors")


def test_predict_steering_accepts_uint8(default_bundles):
    frames = np.random.default_rng(0).integers(0, 256, (3, 224, 224, 3), dtype=np.uint8)
    out = predict_steering(default_bundles["autobc"], frames, batch_size=2)
    with torch.no_grad():
        ref = autobc_forward(to_model_input(frames), default_bundles["autobc"]).double().numpy()
    assert out.shape == (3,) and np.allclose(out, ref, atol=1e-6)
    with pytest.raises(ValueError):
        predict_steering(default_bundles["autoencoder"], frames)


# ---- gradients


@pytest.mark.parametrize("arch", ["autoencoder", "autobc", "autobc_spatial", "vit", "vit_pretrain"])
def test_gradients_match_finite_differences(arch):
    worst, details = gradient_check(arch)
    assert len(details) == 20
    assert worst < 1e-3, max(details, key=lambda d: d[3])
