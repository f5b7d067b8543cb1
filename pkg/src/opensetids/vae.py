"""
Per-class variational autoencoders over flattened enhanced features.

Encoder 528 -> 264 -> 132 -> 66 and decoder 33 -> 66 -> 132 -> 264 -> 528,
sigmoid between layers and no activation on either output. The first 33
encoder outputs are the latent means, the last 33 are log-variances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .encoder import ENHANCED_SIZE
from .errors import EmptyClass, EmptyLossList, ShapeMismatch

LATENT = 33
ENCODER_WIDTHS = (ENHANCED_SIZE, 264, 132, 2 * LATENT)
DECODER_WIDTHS = (LATENT, 66, 132, 264, ENHANCED_SIZE)
DEFAULT_POSITION = 0.96


class VAE(nn.Module):
    def __init__(self, class_index: int = 0, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.class_index = class_index
        self.enc = [nn.Linear(a, b, rng) for a, b in zip(ENCODER_WIDTHS, ENCODER_WIDTHS[1:])]
        self.dec = [nn.Linear(a, b, rng) for a, b in zip(DECODER_WIDTHS, DECODER_WIDTHS[1:])]

    def encoder_output(self, x) -> nn.Tensor:
        return _mlp(self.enc, x)

    def decode(self, z) -> nn.Tensor:
        return _mlp(self.dec, z)


def _mlp(layers, x) -> nn.Tensor:
    h = nn.as_tensor(x)
    for i, layer in enumerate(layers):
        if i:
            h = nn.sigmoid(h)
        h = layer(h)
    return h


def _as_batch(x, width: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeMismatch(f"expected vectors of length {width}, got shape {x.shape}")
    return x, single


def vae_encode(epf, vae: VAE) -> tuple[np.ndarray, np.ndarray]:
    """Latent means and variances (variance = exp of the raw output)."""
    x, single = _as_batch(epf, ENHANCED_SIZE)
    raw = vae.encoder_output(x).data
    mu, var = raw[:, :LATENT], np.exp(raw[:, LATENT:])
    return (mu[0], var[0]) if single else (mu, var)


def reparameterize(mu, var, eps):
    """z = mu + eps * sqrt(var); works on arrays or on graph tensors."""
    if isinstance(mu, nn.Tensor) or isinstance(var, nn.Tensor):
        return nn.as_tensor(mu) + nn.as_tensor(eps) * nn.as_tensor(var).sqrt()
    return np.asarray(mu) + np.asarray(eps) * np.sqrt(var)


def vae_decode(z, vae: VAE) -> np.ndarray:
    zb, single = _as_batch(z, LATENT)
    out = vae.decode(zb).data
    return out[0] if single else out


def reconstruction_loss(epf, reconstruction) -> np.ndarray | float:
    """Mean squared error over the 528 components (per row for batches)."""
    a = np.asarray(epf, dtype=np.float64)
    b = np.asarray(reconstruction, dtype=np.float64)
    if a.shape != b.shape or a.shape[-1] != ENHANCED_SIZE:
        raise ShapeMismatch(f"reconstruction shapes {a.shape} / {b.shape} invalid")
    out = np.mean((a - b) ** 2, axis=-1)
    return float(out) if out.ndim == 0 else out


def reconstruct(epf, vae: VAE) -> np.ndarray:
    """Deterministic reconstruction through the posterior mean (eps = 0)."""
    mu, _ = vae_encode(epf, vae)
    return vae_decode(mu, vae)


def reconstruction_losses(epf, vae: VAE) -> np.ndarray:
    x, _ = _as_batch(epf, ENHANCED_SIZE)
    return reconstruction_loss(x, reconstruct(x, vae))


@dataclass
class VAEConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta_kl: float = 1.0
    position: float = DEFAULT_POSITION
    seed: int = 0


@dataclass
class VAETrainResult:
    vae: VAE
    loss_history: list[float] = field(default_factory=list)


def vae_objective(vae: VAE, x: np.ndarray, eps: np.ndarray, beta_kl: float):
    raw = vae.encoder_output(x)
    mu = raw[:, :LATENT]
    var = raw[:, LATENT:].exp()
    recon = vae.decode(reparameterize(mu, var, eps))
    loss = nn.mse(recon, x)
    if beta_kl:
        loss = loss + beta_kl * nn.gaussian_kl(mu, var)
    return loss


def train_vae(features, class_index: int = 0, config: VAEConfig | None = None) -> VAETrainResult:
    """Train one class's VAE on its (n, 528) enhanced features.

    The features are plain arrays computed upstream, so the payload encoder
    that produced them cannot receive gradients here.
    """
    config = config or VAEConfig()
    x = np.asarray(features, dtype=np.float64)
    if x.size == 0:
        raise EmptyClass(f"no training features for class index {class_index}")
    x, _ = _as_batch(x, ENHANCED_SIZE)
    rng = np.random.default_rng(config.seed)
    vae = VAE(class_index, rng)
    opt = nn.Adam(vae.parameters(), lr=config.learning_rate)
    history = []
    n = x.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            eps = rng.standard_normal((idx.size, LATENT))
            loss = vae_objective(vae, x[idx], eps, config.beta_kl)
            opt.zero_grad()
            nn.backward(loss)
            opt.step()
            total += float(loss.data) * idx.size
        history.append(total / n)
    opt.zero_grad()
    return VAETrainResult(vae, history)


@dataclass(frozen=True)
class ReconstructionThreshold:
    threshold: float
    position: float
    class_index: int = 0

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be non-negative")


def select_threshold(losses, position: float = DEFAULT_POSITION,
                     class_index: int = 0) -> ReconstructionThreshold:
    """The ceil(position * N)-th smallest loss (1-based)."""
    losses = np.sort(np.asarray(losses, dtype=np.float64).ravel())
    if losses.size == 0:
        raise EmptyLossList("cannot select a threshold from zero losses")
    if not 0.0 < position <= 1.0:
        raise ValueError("threshold position must lie in (0, 1]")
    # round away representation noise such as 0.07 * 100 = 7.000000000000001
    k = math.ceil(round(position * losses.size, 9))
    k = min(max(k, 1), losses.size)
    return ReconstructionThreshold(float(losses[k - 1]), position, class_index)


def is_unknown(epf, vae: VAE, threshold: ReconstructionThreshold) -> tuple[bool, float]:
    loss = float(reconstruction_losses(epf, vae)[0])
    return loss > threshold.threshold, loss
