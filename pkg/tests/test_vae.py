from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meshlets.errors import BadDimError, BadMagicError, DimMismatchError, NonFiniteError, VersionError
from meshlets.vae import (N_LAYERS, TrainConfig, VaeModel, decode, decoder_vjp, elbo_loss, encode,
                          init_model, interpolate, layer_widths, load_checkpoint, save_checkpoint,
                          train)

from oracles import central_difference


def _toy(seed=0, dim=12):
    m = init_model(dim, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    # nonzero biases so every path is exercised
    return VaeModel.from_layers([(W, rng.normal(0, 0.1, b.shape)) for W, b in m.layers()])


def test_init_dims():
    m = init_model(12, seed=0)
    assert m.latent_dim == 4 and len(m.encoder) + 1 == N_LAYERS and len(m.decoder) == N_LAYERS
    w = layer_widths(2883, 961)
    assert w[0] == 2883 and w[-1] == 961 and all(a >= b for a, b in zip(w, w[1:]))
    assert layer_widths(12, 4) == sorted(layer_widths(12, 4), reverse=True)
    with pytest.raises(BadDimError):
        init_model(13)


def test_full_grid_shapes():
    m = init_model(2883, seed=0)
    assert m.latent_dim == 961
    mu, lv = encode(m, np.zeros(2883))
    assert mu.shape == lv.shape == (961,)
    assert decode(m, mu).shape == (2883,)


def test_init_deterministic():
    a, b = init_model(27, seed=5), init_model(27, seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a.params(), b.params()))
    c = init_model(27, seed=6)
    assert not np.array_equal(a.params()[0], c.params()[0])


def test_encode_decode_examples():
    m = init_model(12, seed=1, dtype=np.float64)
    mu, lv = encode(m, np.zeros(12))
    assert np.all(mu == 0)
    assert np.array_equal(encode(m, np.ones(12))[0], encode(m, np.ones(12))[0])
    assert np.all(np.isfinite(decode(m, np.zeros(4))))
    with pytest.raises(DimMismatchError):
        encode(m, np.zeros(11))
    with pytest.raises(DimMismatchError):
        decode(m, np.zeros(5))


def test_elbo_examples():
    m = _toy()
    x = np.random.default_rng(5).normal(size=(3, 12))
    xhat = decode(m, encode(m, x)[0])
    loss, _ = elbo_loss(m, x, beta=0.0)
    # beta = 0: exactly the squared residual, which vanishes when xhat = x
    assert loss == pytest.approx(np.mean(np.sum((xhat - x) ** 2, axis=1)), rel=1e-12)
    assert elbo_loss(m, x, 0.0, mask=np.zeros_like(x))[0] == 0.0
    z = init_model(12, seed=0, dtype=np.float64)
    zero_heads = VaeModel(z.encoder, (z.mu_head[0] * 0, z.mu_head[1] * 0),
                          (z.logvar_head[0] * 0, z.logvar_head[1] * 0), z.decoder)
    x = np.random.default_rng(0).normal(size=(4, 12))
    l0, _ = elbo_loss(zero_heads, x, beta=0.0)
    l1, _ = elbo_loss(zero_heads, x, beta=7.0)
    assert l0 == l1   # mu = 0, logvar = 0 gives a zero KL term


def test_elbo_gradients_finite_difference():
    m = _toy(3)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 12))
    mask = (rng.random((5, 12)) > 0.2).astype(float)
    eps = rng.normal(size=(5, 4))
    _, grads = elbo_loss(m, x, 0.3, mask, eps)
    params = m.params()
    for p, g in zip(params, grads):
        def f(v, p=p):
            old = p.copy()
            p[...] = v
            val = elbo_loss(m, x, 0.3, mask, eps)[0]
            p[...] = old
            return val
        fd = central_difference(f, p.copy(), h=1e-6)
        assert np.linalg.norm(fd - g) <= 1e-4 * max(np.linalg.norm(g), 1e-8)


def test_decoder_vjp_finite_difference():
    m = _toy(4)
    z = np.random.default_rng(1).normal(size=4)
    w = np.random.default_rng(2).normal(size=12)
    _, g = decoder_vjp(m, z, w)
    fd = central_difference(lambda v: float(decode(m, v) @ w), z)
    assert np.allclose(g[0], fd, rtol=1e-6, atol=1e-8)


def test_nonfinite_loss():
    m = _toy()
    with pytest.raises(NonFiniteError), np.errstate(invalid="ignore", over="ignore"):
        elbo_loss(m, np.full((1, 12), np.inf), 0.1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_elbo_deterministic_given_noise(seed):
    m = _toy(seed % 1000)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 12))
    eps = rng.normal(size=(3, 4))
    a = elbo_loss(m, x, 0.1, None, eps)
    b = elbo_loss(m, x, 0.1, None, eps)
    assert a[0] == b[0] and all(np.array_equal(u, v) for u, v in zip(a[1], b[1]))
    assert m.latent_dim * 3 == m.input_dim


def test_interpolate_endpoints():
    m = _toy()
    la, lb = np.ones(4), -np.ones(4)
    out = interpolate(m, la, lb, 5)
    assert np.allclose(out[0], decode(m, la)) and np.allclose(out[-1], decode(m, lb))
    same = interpolate(m, la, la, 4)
    assert all(np.array_equal(o, same[0]) for o in same)
    with pytest.raises(ValueError):
        interpolate(m, la, lb, 1)
    with pytest.raises(DimMismatchError):
        interpolate(m, np.ones(3), lb, 3)


def test_checkpoint_round_trip_and_errors(tmp_path):
    m = init_model(27, seed=2)
    p = tmp_path / "m.vae"
    save_checkpoint(m, p)
    back = load_checkpoint(p)
    assert all(np.array_equal(a, b) for a, b in zip(m.params(), back.params()))
    raw = p.read_bytes()
    assert raw[:4] == b"VAE1"
    (tmp_path / "t.vae").write_bytes(raw[:-5])
    with pytest.raises((BadMagicError, OSError)):
        load_checkpoint(tmp_path / "t.vae")
    (tmp_path / "v.vae").write_bytes(raw[:4] + bytes([9]) + raw[5:])
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "v.vae")
    (tmp_path / "x.vae").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(tmp_path / "x.vae")


def test_train_toy_constant_corpus(tmp_path):
    # one meshlet repeated: the autoencoder must learn to reproduce it
    rng = np.random.default_rng(0)
    g = rng.normal(0, 0.3, size=(1, 3, 3, 3)).repeat(256, axis=0)
    v = np.ones(g.shape[:3], bool)
    ck = tmp_path / "toy.vae"
    cfg = TrainConfig(epochs=60, batch_size=32, lr=1e-3, beta=1e-3, seed=1)
    m = train((g, v), cfg, checkpoint=ck)
    assert ck.exists() and len(m.history) == 60
    x = g[0].reshape(-1)
    rec = decode(m, encode(m, x)[0])
    assert np.mean((rec - x) ** 2) < 0.01 * np.mean(x ** 2)
    assert m.history[-1] <= m.history[0]
    m2 = train((g, v), cfg)
    assert all(np.array_equal(a, b) for a, b in zip(m.params(), m2.params()))


def test_train_rejects_mismatch():
    g = np.zeros((4, 3, 3, 3))
    v = np.ones((4, 3, 3), bool)
    with pytest.raises(DimMismatchError):
        train((g, v), TrainConfig(epochs=1), model=init_model(12))
    with pytest.raises(ValueError):
        TrainConfig(beta=-1)
