import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opensetids import nn
from opensetids.encoder import PayloadEncoder, enhanced_features
from opensetids.errors import EmptyClass, EmptyLossList, ShapeMismatch
from opensetids.features import apply_normalization, featurize, fit_normalization, split_features
from opensetids.synth import default_specs, generate
from opensetids.vae import (LATENT, VAE, ReconstructionThreshold, VAEConfig, is_unknown,
                            reconstruct, reconstruction_loss, reconstruction_losses,
                            reparameterize, select_threshold, train_vae, vae_decode, vae_encode,
                            vae_objective)


def class_features(n, seed=0):
    """Enhanced features of one synthetic class through a fixed random encoder."""
    flows = generate([default_specs()[1]], n, seed=seed)
    payload, aux = split_features(featurize(flows))
    enc = PayloadEncoder(np.random.default_rng(42)).eval()
    return enhanced_features(payload, apply_normalization(aux, fit_normalization(aux)), enc)


def set_last_encoder_layer(vae, bias):
    last = vae.enc[-1]
    last.weight.assign(np.zeros_like(last.weight.data))
    last.bias.assign(bias)


# --------------------------------------------------------------------------
# encode / reparameterize / decode

def test_variance_is_exp_of_raw_output():
    vae = VAE()
    bias = np.zeros(2 * LATENT)
    bias[:LATENT] = np.linspace(-1, 1, LATENT)
    bias[LATENT] = -50.0
    set_last_encoder_layer(vae, bias)
    mu, var = vae_encode(np.ones(528), vae)
    np.testing.assert_array_equal(mu, nn.round_f32(bias[:LATENT]))
    assert var[0] == math.exp(-50) and var[0] > 0
    np.testing.assert_array_equal(var[1:], 1.0)


def test_mu_is_raw_output(rng):
    vae = VAE(rng=rng)
    x = rng.normal(size=(3, 528))
    mu, var = vae_encode(x, vae)
    raw = vae.encoder_output(x).data
    np.testing.assert_array_equal(mu, raw[:, :LATENT])
    np.testing.assert_array_equal(var, np.exp(raw[:, LATENT:]))


def test_encode_rejects_wrong_width():
    with pytest.raises(ShapeMismatch):
        vae_encode(np.zeros(527), VAE())


def test_variance_strictly_positive_on_random_inputs(rng):
    vae = VAE(rng=rng)
    _, var = vae_encode(rng.normal(0, 5, (2000, 528)), vae)
    assert np.all(var > 0)


def test_reparameterize_identities(rng):
    mu = rng.normal(size=LATENT)
    assert np.array_equal(reparameterize(mu, np.full(LATENT, 9.0), np.zeros(LATENT)), mu)
    tiny = np.exp(np.full(LATENT, -1000.0))
    assert np.array_equal(reparameterize(mu, tiny, rng.normal(size=LATENT)), mu)


def test_reparameterize_statistics():
    eps = np.random.default_rng(2024).standard_normal(100_000)
    z = reparameterize(1.0, 4.0, eps)
    assert 0.97 <= z.mean() <= 1.03
    assert 3.9 <= z.var() <= 4.1


def test_reparameterize_gradient_skips_noise():
    mu = nn.Tensor(np.array([0.5]), requires_grad=True)
    var = nn.Tensor(np.array([4.0]), requires_grad=True)
    nn.backward(reparameterize(mu, var, np.array([1.5])).sum())
    assert mu.grad.tolist() == [1.0]
    assert var.grad.tolist() == [pytest.approx(1.5 * 0.5 / 2.0)]


def test_decoder(rng):
    vae = VAE(rng=rng)
    z = rng.normal(size=LATENT)
    out = vae_decode(z, vae)
    assert out.shape == (528,)
    np.testing.assert_array_equal(out, vae_decode(z, vae))
    last = vae.dec[-1]
    last.weight.assign(np.zeros_like(last.weight.data))
    last.bias.assign(np.full(528, 0.75))
    np.testing.assert_array_equal(vae_decode(rng.normal(size=(4, LATENT)), vae), 0.75)


def test_reconstruct_uses_posterior_mean(rng):
    vae = VAE(rng=rng)
    x = rng.normal(size=(2, 528))
    mu, _ = vae_encode(x, vae)
    np.testing.assert_array_equal(reconstruct(x, vae), vae_decode(mu, vae))


# --------------------------------------------------------------------------
# losses

def test_reconstruction_loss_examples():
    x = np.linspace(0, 1, 528)
    assert reconstruction_loss(x, x) == 0
    assert reconstruction_loss(x, x + 1) == pytest.approx(1.0)
    e = np.zeros(528)
    e[0] = 1.0
    assert reconstruction_loss(e, np.zeros(528)) == 1 / 528
    with pytest.raises(ShapeMismatch):
        reconstruction_loss(np.zeros(528), np.zeros(527))


def test_zero_kl_weight_is_plain_reconstruction(rng):
    vae = VAE(rng=rng)
    x = rng.normal(size=(4, 528))
    eps = rng.standard_normal((4, LATENT))
    mu, var = vae_encode(x, vae)
    expected = np.mean((vae_decode(mu + eps * np.sqrt(var), vae) - x) ** 2)
    assert float(vae_objective(vae, x, eps, 0.0).data) == pytest.approx(expected, rel=1e-12)
    with_kl = float(vae_objective(vae, x, eps, 1.0).data)
    assert with_kl == pytest.approx(expected + float(nn.gaussian_kl(mu, var).data), rel=1e-12)


# --------------------------------------------------------------------------
# training

@pytest.fixture(scope="module")
def features_200():
    return class_features(200)


def test_training_reduces_loss(features_200):
    res = train_vae(features_200, 1, VAEConfig(epochs=50, seed=0))
    assert len(res.loss_history) == 50
    assert res.loss_history[-1] < res.loss_history[0]
    assert res.vae.class_index == 1


def test_training_is_deterministic(features_200):
    cfg = VAEConfig(epochs=2, seed=5)
    a = train_vae(features_200[:50], 0, cfg).vae.state_dict()
    b = train_vae(features_200[:50], 0, cfg).vae.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_training_leaves_input_untouched(features_200):
    before = features_200.copy()
    train_vae(features_200[:30], 0, VAEConfig(epochs=1))
    np.testing.assert_array_equal(features_200, before)


def test_empty_class():
    with pytest.raises(EmptyClass):
        train_vae(np.zeros((0, 528)))


# --------------------------------------------------------------------------
# thresholds

def test_threshold_examples():
    assert select_threshold(np.arange(1, 101), 0.96).threshold == 96
    assert select_threshold([3.0, 9.0, 1.0], 1.0).threshold == 9.0
    assert select_threshold([2.5], 0.01).threshold == 2.5
    assert select_threshold(np.arange(1, 101), 0.07).threshold == 7
    with pytest.raises(EmptyLossList):
        select_threshold([])
    with pytest.raises(ValueError):
        select_threshold([1.0], 0.0)
    with pytest.raises(ValueError):
        ReconstructionThreshold(-1.0, 0.9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=300), st.floats(0.01, 1.0))
def test_threshold_quantile_property(losses, position):
    thr = select_threshold(losses, position).threshold
    n = len(losses)
    above = sum(x > thr for x in losses)
    assert above / n <= 1 - position + 1 / n
    assert thr in losses


def test_boundary_is_strict(rng):
    vae = VAE(rng=rng)
    x = rng.normal(size=528)
    loss = float(reconstruction_losses(x, vae)[0])
    assert is_unknown(x, vae, ReconstructionThreshold(loss, 0.96)) == (False, loss)
    flag, _ = is_unknown(x, vae, ReconstructionThreshold(loss - 1e-9, 0.96))
    assert flag


def test_exceedance_fraction_on_training_class():
    feats = class_features(1000, seed=1)
    vae = train_vae(feats, 0, VAEConfig(epochs=3, seed=0)).vae
    losses = reconstruction_losses(feats, vae)
    thr = select_threshold(losses, 0.96)
    flags = [is_unknown(f, vae, thr)[0] for f in feats[:50]]
    assert flags == list(losses[:50] > thr.threshold)
    assert 0.02 <= float(np.mean(losses > thr.threshold)) <= 0.06
