import numpy as np
import pytest
import torch

from dualcond._torch import FrozenError, TrainingError, freeze, param_hash
from dualcond.autoencoder import (
    Autoencoder, decode, encode, load_autoencoder, save_autoencoder, train_autoencoder,
)
from dualcond.classifier import (
    Classifier, features, load_classifier, predict, save_classifier, train_classifier,
)
from dualcond.config import AutoencoderConfig, ClassifierConfig, DiffusionConfig
from dualcond.schedule import build_schedule, forward_diffuse
from dualcond.training import (
    LatentSet, check_converged, diffusion_loss, encode_training_set, train_dcdm, training_step,
)

from conftest import make_tiny_denoiser


@pytest.fixture(scope="module")
def blobs():
    """Five easy classes of 16x16 images: a bright square in one of five places."""
    rng = np.random.default_rng(0)
    xs, ys = [], []
    spots = [(2, 2), (2, 9), (9, 2), (9, 9), (5, 5)]
    for k, (r, c) in enumerate(spots):
        for _ in range(16):
            img = np.full((1, 16, 16), -0.8, np.float32)
            img[0, r:r + 5, c:c + 5] = 0.8
            img += rng.normal(0, 0.05, img.shape).astype(np.float32)
            xs.append(np.clip(img, -1, 1))
            ys.append(k)
    return np.stack(xs), np.array(ys)


AE_CFG = AutoencoderConfig(widths=(4, 8, 8), epochs=2, batch_size=16, lr=3e-3, ssim_floor=0.0)
CF_CFG = ClassifierConfig(widths=(8, 8, 8), feature_dim=16, epochs=2, batch_size=16, accuracy_floor=0.0)


def test_autoencoder_shapes_and_range(tiny_ae):
    x = torch.rand(3, 1, 16, 16) * 2 - 1
    z = encode(tiny_ae, x)
    assert z.shape == (3, 8, 2, 2)
    assert encode(tiny_ae, x[0]).shape == (8, 2, 2)
    y = decode(tiny_ae, z)
    assert y.shape == x.shape and y.abs().max() <= 1
    with pytest.raises(ValueError):
        encode(tiny_ae, torch.zeros(1, 12, 12))


def test_autoencoder_rejects_indivisible_size():
    with pytest.raises(ValueError):
        Autoencoder((1, 20, 20), (4, 8, 8))


def test_autoencoder_training_deterministic(blobs, tmp_path):
    x, _ = blobs
    m1, h1 = train_autoencoder(x, AE_CFG, seed=3)
    m2, h2 = train_autoencoder(x, AE_CFG, seed=3)
    assert h1["step_loss"] == h2["step_loss"]
    assert save_autoencoder(m1, tmp_path / "a.ckpt") == save_autoencoder(m2, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert m1.frozen and not any(p.requires_grad for p in m1.parameters())
    assert h1["step_loss"][-1] < h1["step_loss"][0]


def test_autoencoder_ssim_floor(blobs):
    x, _ = blobs
    with pytest.raises(TrainingError, match="SSIM"):
        train_autoencoder(x, AutoencoderConfig(widths=(4, 8, 8), epochs=1, ssim_floor=0.999))


def test_autoencoder_roundtrip(tmp_path, tiny_ae):
    d = save_autoencoder(tiny_ae, tmp_path / "a.ckpt")
    ae, _, d2 = load_autoencoder(tmp_path / "a.ckpt")
    assert d == d2 and ae.frozen
    x = torch.rand(2, 1, 16, 16)
    assert torch.equal(encode(ae, x), encode(tiny_ae, x))


def test_classifier_training(blobs, tmp_path):
    x, y = blobs
    m, hist = train_classifier(x, y, 5, CF_CFG, seed=0)
    m2, _ = train_classifier(x, y, 5, CF_CFG, seed=0)
    assert param_hash(m) == param_hash(m2)
    assert hist["epoch_loss"][-1] < hist["epoch_loss"][0]
    f = features(m, x)
    assert f.shape == (len(x), 16) and (f >= 0).all()
    ids, probs = predict(m, x)
    assert ids.shape == (len(x),) and np.allclose(probs.sum(1), 1)
    single, p1 = predict(m, x[0])
    assert isinstance(single, int) and p1.shape == (5,)
    d = save_classifier(m, tmp_path / "c.ckpt")
    m3, _, d3 = load_classifier(tmp_path / "c.ckpt")
    assert d == d3 and np.array_equal(features(m3, x), f)


def test_classifier_missing_class(blobs):
    x, y = blobs
    keep = y != 4
    with pytest.raises(ValueError, match="cover"):
        train_classifier(x[keep], y[keep], 5, CF_CFG)


def test_classifier_accuracy_floor(blobs):
    x, y = blobs
    cfg = ClassifierConfig(widths=(8, 8, 8), feature_dim=16, epochs=1, accuracy_floor=1.01)
    with pytest.raises(TrainingError, match="accuracy"):
        train_classifier(x, y, 5, cfg)


def test_classifier_needs_eval_mode():
    m = Classifier(5, (1, 16, 16), (8, 8, 8), 16)
    with pytest.raises(RuntimeError):
        features(m, np.zeros((1, 1, 16, 16), np.float32))


def test_diffusion_loss_matches_manual(tiny_schedule):
    den = make_tiny_denoiser()
    z0 = torch.randn(4, 8, 2, 2)
    pooled = torch.randn(4, 8)
    labels = torch.tensor([0, 1, 2, 3])
    t = torch.tensor([1, 10, 30, 50])
    noise = torch.randn(4, 8, 2, 2)
    with torch.no_grad():
        got = diffusion_loss(den, tiny_schedule, z0, pooled, labels, t, noise)
        eps = den(forward_diffuse(tiny_schedule, z0, t, noise), t, den.cond(pooled, labels).d0)
    assert got.item() == pytest.approx(((eps - noise) ** 2).mean().item(), rel=1e-6)


def test_training_step_updates_every_trainable_part(tiny_schedule):
    den = make_tiny_denoiser()
    data = LatentSet(torch.randn(8, 8, 2, 2), torch.randn(8, 8), torch.arange(8) % 5)
    before = {n: p.clone() for n, p in den.named_parameters()}
    opt = torch.optim.Adam(den.parameters(), lr=1e-2)
    rec = training_step(den, opt, tiny_schedule, data, torch.arange(8), torch.Generator().manual_seed(0), 7)
    assert rec.step == 7 and np.isfinite(rec.loss)
    changed = {n for n, p in den.named_parameters() if not torch.equal(p, before[n])}
    assert "cond.label_table.weight" in changed
    assert any(n.startswith("unet.") for n in changed)
    # dead halves are not touched in dual mode
    assert "cond.null_img" not in changed and "cond.null_cls" not in changed


def _latents(n=40):
    g = torch.Generator().manual_seed(0)
    z = torch.randn(n, 8, 2, 2, generator=g) * 0.3
    labels = torch.arange(n) % 5
    z[:, 0] += labels.float()[:, None, None]  # class-dependent mean, so there is something to learn
    return LatentSet(z, z.mean(dim=(2, 3)), labels)


def test_train_dcdm_deterministic_and_modes(tiny_schedule):
    cfg = DiffusionConfig(widths=(8, 8), time_dim=8, attn_dim=8, cond_dim=8, epochs=2, batch_size=8,
                          require_convergence=False)
    data = _latents()
    a = train_dcdm(data, tiny_schedule, cfg, "dual", 5, seed=1)
    b = train_dcdm(data, tiny_schedule, cfg, "dual", 5, seed=1)
    assert np.array_equal(a.loss_array(), b.loss_array())
    assert param_hash(a.model) == param_hash(b.model)
    assert a.model.frozen and len(a.losses) == 10
    assert float(a.model.latent_scale) == pytest.approx(1 / float(data.z0.std()))
    c = train_dcdm(data, tiny_schedule, cfg, "unconditional", 5, seed=1)
    assert c.model.mode == "unconditional"
    assert {n: p.shape for n, p in c.model.named_parameters()} == {n: p.shape for n, p in a.model.named_parameters()}


def test_train_dcdm_validation(tiny_schedule):
    cfg = DiffusionConfig(widths=(8, 8), time_dim=8, attn_dim=8, cond_dim=8, epochs=1)
    with pytest.raises(ValueError):
        train_dcdm(_latents(), tiny_schedule, cfg, "both")
    empty = LatentSet(torch.zeros(0, 8, 2, 2), torch.zeros(0, 8), torch.zeros(0, dtype=torch.int64))
    with pytest.raises(ValueError):
        train_dcdm(empty, tiny_schedule, cfg)


def test_check_converged():
    check_converged(np.r_[np.ones(100), np.full(100, 0.1)])
    with pytest.raises(TrainingError):
        check_converged(np.ones(300))
    with pytest.raises(TrainingError):
        check_converged(np.r_[np.ones(10), np.nan])


def test_encode_training_set_needs_frozen_ae():
    ae = Autoencoder((1, 16, 16), (4, 8, 8))
    with pytest.raises(FrozenError):
        encode_training_set(ae, np.zeros((2, 1, 16, 16), np.float32), [0, 1])
    data = encode_training_set(freeze(ae), np.zeros((2, 1, 16, 16), np.float32), [0, 1])
    assert data.z0.shape == (2, 8, 2, 2) and data.pooled.shape == (2, 8)
