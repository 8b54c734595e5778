import math

import numpy as np
import pytest
import torch

from conftest import random_cloud, tiny_encoder_config
from crosscoherence.encoders.autoencoder import (
    AutoencoderConfig,
    DecoderConfig,
    PointAutoencoder,
    decode_cloud,
    reconstruction_loss,
    train_autoencoder,
)
from crosscoherence.encoders.pointnet import (
    EncoderConfig,
    PointNetEncoder,
    SetAbstraction,
    SetAbstractionConfig,
    encode_global,
    encode_local,
    set_abstraction,
)
from crosscoherence.geometry import ColoredPointCloud, ball_query, chamfer_distance, farthest_point_sample


def _mlp_loop(mlp, x):
    """Per-point forward of a SharedMLP written out with numpy, one vector at a time."""
    for layer in mlp.net:
        name = type(layer).__name__
        if name == "Linear":
            x = layer.weight.detach().numpy() @ x + layer.bias.detach().numpy()
        elif name == "LayerNorm":
            mu, var = x.mean(), x.var()
            x = (x - mu) / math.sqrt(var + layer.eps) * layer.weight.detach().numpy() + layer.bias.detach().numpy()
        elif name == "ReLU":
            x = np.maximum(x, 0)
    return x


def test_set_abstraction_matches_loop(rng):
    torch.set_default_dtype(torch.float64)
    try:
        cfg = SetAbstractionConfig(8, 0.5, 6, (5, 7))
        module = SetAbstraction(cfg, in_features=3)
    finally:
        torch.set_default_dtype(torch.float32)
    pos = rng.random((64, 3))
    feats = rng.random((64, 3))
    new_xyz, out = set_abstraction(pos, feats, cfg, module)
    centers = farthest_point_sample(pos, 8)
    groups = ball_query(pos, centers, 0.5, 6)
    for s, c in enumerate(centers):
        rows = [_mlp_loop(module.mlp, np.concatenate([pos[j] - pos[c], feats[j]])) for j in groups[s]]
        np.testing.assert_allclose(out[s].detach().numpy(), np.max(rows, axis=0), atol=1e-6)
        np.testing.assert_allclose(new_xyz[s].detach().numpy(), pos[c])


def _identity_sa(n_in):
    cfg = SetAbstractionConfig(1, 100.0, 64, (n_in + 3,))
    module = SetAbstraction(cfg, n_in, layer_norm=False, activation=None)
    with torch.no_grad():
        lin = module.mlp.net[0]
        lin.weight.copy_(torch.eye(n_in + 3))
        lin.bias.zero_()
    return cfg, module


def test_identity_mlp_gives_coordinatewise_max(rng):
    cfg, module = _identity_sa(3)
    pos, feats = rng.random((20, 3)), rng.random((20, 3))
    _, out = set_abstraction(pos, feats, cfg, module)
    c = farthest_point_sample(pos, 1)[0]
    expected = np.concatenate([(pos - pos[c]).max(0), feats.max(0)])
    np.testing.assert_allclose(out[0].detach().numpy(), expected, atol=1e-6)


def test_duplicated_points_same_output(rng):
    cfg, module = _identity_sa(3)
    pos, feats = rng.random((20, 3)), rng.random((20, 3))
    _, a = set_abstraction(pos, feats, cfg, module)
    _, b = set_abstraction(np.concatenate([pos, pos]), np.concatenate([feats, feats]), cfg, module)
    torch.testing.assert_close(a, b)


def test_encoder_permutation_invariant(rng):
    enc = PointNetEncoder(tiny_encoder_config(n_points=128, widths=16)).eval()
    c = random_cloud(rng, 128)
    perm = rng.permutation(128)
    with torch.no_grad():
        a, b = encode_local(c, enc), encode_local(c.permuted(perm), enc)
        ga, gb = encode_global(c, enc), encode_global(c.permuted(perm), enc)
    torch.testing.assert_close(a.features, b.features, atol=1e-5, rtol=0)
    assert float((ga - gb).norm()) < 1e-5


def test_default_encoder_shapes():
    enc = PointNetEncoder().eval()
    corners = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    pts = np.tile(corners, (256, 1))
    cloud = ColoredPointCloud(pts, np.full_like(pts, 0.5))
    with torch.no_grad():
        local = encode_local(cloud, enc)
        code = encode_global(cloud, enc)
    assert tuple(local.features.shape) == (128, 256)
    assert tuple(code.shape) == (1024,)
    assert torch.isfinite(local.features).all() and torch.isfinite(code).all()


def test_encoder_rejects_tiny_cloud(rng):
    enc = PointNetEncoder(tiny_encoder_config())
    with pytest.raises(ValueError):
        encode_global(random_cloud(rng, 8), enc)


def test_config_round_trip():
    cfg = tiny_encoder_config()
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


def test_decode_zero_code_zero_init():
    model = PointAutoencoder(tiny_encoder_config(), DecoderConfig(n_points=50, hidden=(16,), zero_init_final=True))
    out = decode_cloud(np.zeros(model.encoder.cfg.d_global), model)
    assert out.n == 50
    assert np.all(out.points == 0)
    assert np.all(out.colors == 0.5)


def test_decode_output_size(rng):
    model = PointAutoencoder(tiny_encoder_config(), DecoderConfig(n_points=33, hidden=(16,)))
    assert decode_cloud(rng.normal(size=model.encoder.cfg.d_global), model).n == 33


def test_reconstruction_loss_matches_numpy(rng):
    a, b = rng.random((1, 10, 3)), rng.random((1, 12, 3))
    ca, cb = rng.random((1, 10, 3)), rng.random((1, 12, 3))
    ch, co = reconstruction_loss(*(torch.as_tensor(x) for x in (a, ca, b, cb)))
    assert abs(float(ch[0]) - chamfer_distance(a[0], b[0])) < 1e-9
    d2 = ((a[0][:, None] - b[0][None]) ** 2).sum(-1)
    expected = (((ca[0] - cb[0][d2.argmin(1)]) ** 2).sum(1).mean()
                + ((cb[0] - ca[0][d2.argmin(0)]) ** 2).sum(1).mean())
    assert abs(float(co[0]) - expected) < 1e-9


def _toy_clouds(rng, count=8, n=64):
    return [random_cloud(rng, n, f"s{i}") for i in range(count)]


def test_lambda_zero_color_rows_get_no_gradient(rng):
    model = PointAutoencoder(tiny_encoder_config(), DecoderConfig(n_points=32, hidden=(16,)))
    clouds = _toy_clouds(rng, 2)
    xyz, rgb, c, g = model.encoder.prepare(clouds)
    px, pc = model(xyz, rgb, c, g)
    chamfer, color = reconstruction_loss(px, pc, xyz, rgb)
    (chamfer + 0.0 * color).mean().backward()
    grad = model.decoder.out.weight.grad.reshape(32, 6, -1)
    assert torch.all(grad[:, 3:] == 0)
    assert torch.any(grad[:, :3] != 0)


def test_step0_loss_matches_forward(rng):
    clouds = _toy_clouds(rng, 4)
    cfg = AutoencoderConfig(tiny_encoder_config(), DecoderConfig(n_points=32, hidden=(16,)), steps=1,
                            batch_size=4, seed=5)
    torch.manual_seed(5)
    fresh = PointAutoencoder(cfg.encoder, cfg.decoder)
    with torch.no_grad():
        order = np.random.default_rng(5).permutation(4)
        px, pc = fresh(*fresh.encoder.prepare([clouds[i] for i in order]))
        xyz, rgb, _, _ = fresh.encoder.prepare([clouds[i] for i in order])
        ch, co = reconstruction_loss(px, pc, xyz, rgb)
        expected = float((ch + co).mean())
    result = train_autoencoder(clouds, cfg)
    assert result.initial_loss == pytest.approx(expected, abs=1e-6)


def test_toy_training_reduces_chamfer(rng):
    clouds = _toy_clouds(rng, 8)
    cfg = AutoencoderConfig(tiny_encoder_config(), DecoderConfig(n_points=64, hidden=(64,)), steps=500,
                            batch_size=8, lr=3e-3, log_every=0)
    result = train_autoencoder(clouds, cfg)
    assert result.history[-1]["chamfer"] < result.history[0]["chamfer"]
    assert result.final_chamfer < result.history[0]["chamfer"]


def _gradcheck_model():
    torch.set_default_dtype(torch.float64)
    try:
        return PointAutoencoder(tiny_encoder_config(n_points=32, widths=8), DecoderConfig(n_points=16, hidden=(8,)))
    finally:
        torch.set_default_dtype(torch.float32)


def test_autoencoder_gradients_match_finite_differences(rng):
    model = _gradcheck_model()
    clouds = _toy_clouds(rng, 2, n=32)
    inputs = model.encoder.prepare(clouds)

    def loss_fn():
        px, pc = model(*inputs)
        ch, co = reconstruction_loss(px, pc, inputs[0], inputs[1])
        return (ch + co).mean()

    model.zero_grad()
    loss_fn().backward()
    h = 1e-6
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone().reshape(-1)
        idx = rng.choice(p.numel(), size=min(6, p.numel()), replace=False)
        flat = p.data.reshape(-1)
        for i in idx:
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
            numeric = (up - down) / (2 * h)
            assert abs(numeric - analytic[i].item()) <= 1e-5 + 1e-4 * abs(numeric), (name, i)
