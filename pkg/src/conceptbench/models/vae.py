"""Gaussian-latent VAEs: an unsupervised beta-VAE and an adaptive paired variant.

The paired model encodes both images of a pair, picks the latent dimensions
whose posteriors barely differ, replaces them in both posteriors by their
average, then scores both reconstructions under the usual beta-weighted
objective.
"""

from __future__ import annotations

import logging
from typing import Callable, Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted
from torch import nn
from torch.nn import functional as F

from ..datasets import PairStream
from ..learners.networks import (
    DEFAULT_CHANNELS,
    DEFAULT_HIDDEN,
    NetworkSpec,
    TrainConfig,
    build_network,
    predict_batched,
    run_steps,
    to_tensor,
)
from ..metrics import MetricSeries
from .gaussian import AVERAGING, GaussianPosterior, adaptive_average_terms, kl_terms, shared_mask_terms

log = logging.getLogger(__name__)

LIKELIHOODS = ("bernoulli", "gaussian")
GAUSSIAN_VARIANCE = 0.1


class VAENet(nn.Module):
    def __init__(self, image_shape, latent_dim, channels, hidden, likelihood):
        super().__init__()
        c, h, w = image_shape
        self.image_shape = tuple(image_shape)
        self.latent_dim = latent_dim
        self.likelihood = likelihood
        self.encoder_spec = NetworkSpec("conv_encoder", (c, h, w), (2 * latent_dim,), channels, hidden)
        self.decoder_spec = NetworkSpec("deconv_decoder", (latent_dim,), (c, h, w), channels, hidden)
        self.encoder = build_network(self.encoder_spec)
        self.decoder = build_network(self.decoder_spec)

    def encode(self, x):
        out = self.encoder(x)
        return out[:, : self.latent_dim], out[:, self.latent_dim:]

    def decode_logits(self, z):
        return self.decoder(z)

    def mean_image(self, z):
        return torch.sigmoid(self.decode_logits(z))

    def log_likelihood(self, x, logits):
        """Per-sample log p(x | z), summed over pixels."""
        if self.likelihood == "bernoulli":
            ll = -F.binary_cross_entropy_with_logits(logits, x, reduction="none")
        else:
            mean = torch.sigmoid(logits)
            ll = -0.5 * ((x - mean) ** 2 / GAUSSIAN_VARIANCE + np.log(2 * np.pi * GAUSSIAN_VARIANCE))
        return ll.flatten(1).sum(1)

    @staticmethod
    def reparameterize(mu, logvar, noise=None):
        if noise is None:
            noise = torch.randn_like(mu)
        return mu + torch.exp(0.5 * logvar) * noise

    def elbo_terms(self, x, noise=None):
        """(reconstruction log-likelihood, KL to the prior), per sample."""
        mu, logvar = self.encode(x)
        z = self.reparameterize(mu, logvar, noise)
        return self.log_likelihood(x, self.decode_logits(z)), kl_terms(mu, logvar).sum(1)

    def pair_terms(self, x1, x2, averaging="product_of_experts", symmetric=True, noise=None, shared=None):
        """Paired objective pieces: (recon1, recon2, kl1, kl2, shared mask).

        ``shared`` overrides the selected dimensions with a boolean mask.
        """
        mu1, lv1 = self.encode(x1)
        mu2, lv2 = self.encode(x2)
        if shared is None:
            shared = shared_mask_terms(mu1, lv1, mu2, lv2, symmetric)
        else:
            shared = torch.as_tensor(shared, dtype=torch.bool).expand_as(mu1)
        mu1, lv1, mu2, lv2 = adaptive_average_terms(mu1, lv1, mu2, lv2, shared, averaging)
        n1, n2 = (None, None) if noise is None else noise
        z1 = self.reparameterize(mu1, lv1, n1)
        z2 = self.reparameterize(mu2, lv2, n2)
        r1 = self.log_likelihood(x1, self.decode_logits(z1))
        r2 = self.log_likelihood(x2, self.decode_logits(z2))
        return r1, r2, kl_terms(mu1, lv1).sum(1), kl_terms(mu2, lv2).sum(1), shared


def pair_loss(net: VAENet, x1, x2, beta, averaging="product_of_experts", symmetric=True, noise=None,
              shared=None):
    """Negated paired objective, averaged over the batch."""
    r1, r2, k1, k2, _ = net.pair_terms(x1, x2, averaging, symmetric, noise, shared)
    return -(r1 + r2 - beta * (k1 + k2)).mean()


def vae_loss(net: VAENet, x, beta, noise=None):
    recon, kl = net.elbo_terms(x, noise)
    return -(recon - beta * kl).mean()


class BetaVAE(TransformerMixin, BaseEstimator):
    """Unsupervised VAE; ``transform`` returns posterior means."""

    def __init__(self, latent_dim=10, beta=1.0, channels=DEFAULT_CHANNELS, hidden=DEFAULT_HIDDEN,
                 likelihood="auto", lr=1e-3, batch_size=64, epochs=10, steps=None,
                 optimizer="adaptive_moment", seed=0, eval_every=None):
        self.latent_dim = latent_dim
        self.beta = beta
        self.channels = channels
        self.hidden = hidden
        self.likelihood = likelihood
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.steps = steps
        self.optimizer = optimizer
        self.seed = seed
        self.eval_every = eval_every

    mode = "unsupervised"

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, steps=self.steps,
                           optimizer=self.optimizer, seed=self.seed, eval_every=self.eval_every)

    def _check_params(self):
        if self.beta < 0 or not np.isfinite(self.beta):
            raise ValueError("beta must be finite and >= 0")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")

    def _init_net(self, image_shape):
        h, w, c = image_shape
        likelihood = self.likelihood
        if likelihood == "auto":
            likelihood = "bernoulli" if c == 1 else "gaussian"
        if likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be 'auto' or one of {LIKELIHOODS}")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.net_ = VAENet((c, h, w), self.latent_dim, tuple(self.channels), self.hidden, likelihood)
        self.image_shape_ = (h, w, c)
        self.likelihood_ = likelihood

    def _fit_loop(self, n, batch_loss, callback):
        cfg = self._train_config()
        gen = torch.Generator().manual_seed(self.seed)

        def on_eval(step):
            if callback is not None:
                self.net_.eval()
                callback(step, self)
                self.net_.train()

        self.net_.train()
        try:
            self.losses_ = run_steps(self.net_.parameters(), n, lambda idx, step: batch_loss(idx, gen),
                                     cfg, on_eval)
        finally:
            self.net_.eval()
        self.n_steps_ = len(self.losses_)
        return self

    def fit(self, X, y=None, callback: Optional[Callable] = None):
        self._check_params()
        X = check_array(X, allow_nd=True, dtype=np.float32)
        self._init_net(X.shape[1:])

        def batch_loss(idx, gen):
            xb = to_tensor(X[idx])
            noise = torch.randn(len(xb), self.latent_dim, generator=gen)
            return vae_loss(self.net_, xb, self.beta, noise)

        return self._fit_loop(len(X), batch_loss, callback)

    # ---- inference

    def _check_images(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, allow_nd=True, dtype=np.float32)
        if X.shape[1:] != self.image_shape_:
            raise ValueError(f"expected images of shape {self.image_shape_}, got {X.shape[1:]}")
        return X

    def encode(self, X) -> GaussianPosterior:
        X = self._check_images(X)
        out = predict_batched(lambda x: torch.cat(self.net_.encode(x), dim=1), X)
        return GaussianPosterior(out[:, : self.latent_dim], out[:, self.latent_dim:])

    def transform(self, X):
        return self.encode(X).mean

    def decode(self, Z):
        check_is_fitted(self, "net_")
        Z = check_array(Z, dtype=np.float32)
        if Z.shape[1] != self.latent_dim:
            raise ValueError(f"latent codes must have {self.latent_dim} dimensions")
        out = predict_batched(self.net_.mean_image, Z)
        return np.transpose(out, (0, 2, 3, 1))

    def reconstruct(self, X):
        return self.decode(self.transform(X))

    def elbo(self, X, seed: int = 0):
        """Per-sample (reconstruction, KL, reconstruction - beta * KL) with one latent draw."""
        X = self._check_images(X)
        gen = torch.Generator().manual_seed(seed)
        recon, kl = [], []
        with torch.no_grad():
            for i in range(0, len(X), 512):
                xb = to_tensor(X[i:i + 512])
                noise = torch.randn(len(xb), self.latent_dim, generator=gen)
                r, k = self.net_.elbo_terms(xb, noise)
                recon.append(r.numpy())
                kl.append(k.numpy())
        recon, kl = np.concatenate(recon), np.concatenate(kl)
        total = recon - self.beta * kl
        if not np.all(np.isfinite(total)):
            raise FloatingPointError("non-finite ELBO")
        return recon, kl, total

    def score(self, X, y=None):
        return float(self.elbo(X)[2].mean())


class WeaklySupervisedVAE(BetaVAE):
    """Adaptive paired VAE trained on pairs that differ in a few concepts.

    ``fit`` takes a :class:`~conceptbench.datasets.PairStream` or an array of
    pairs shaped ``(N, 2, H, W, C)``.
    """

    mode = "weak_paired"

    def __init__(self, latent_dim=10, beta=1.0, channels=DEFAULT_CHANNELS, hidden=DEFAULT_HIDDEN,
                 likelihood="auto", averaging="product_of_experts", symmetric_kl=True, lr=1e-3,
                 batch_size=64, epochs=10, steps=None, optimizer="adaptive_moment", seed=0,
                 eval_every=None):
        super().__init__(latent_dim=latent_dim, beta=beta, channels=channels, hidden=hidden,
                         likelihood=likelihood, lr=lr, batch_size=batch_size, epochs=epochs, steps=steps,
                         optimizer=optimizer, seed=seed, eval_every=eval_every)
        self.averaging = averaging
        self.symmetric_kl = symmetric_kl

    def fit(self, X, y=None, callback: Optional[Callable] = None):
        self._check_params()
        if self.averaging not in AVERAGING:
            raise ValueError(f"averaging must be one of {AVERAGING}")
        if isinstance(X, PairStream):
            stream = X
            self._init_net(stream.image_shape)
            pair_rng = np.random.default_rng([self.seed, 1])
            n = len(stream)

            def next_pair(idx):
                return stream.batch(pair_rng, len(idx))
        else:
            pairs = check_array(X, allow_nd=True, dtype=np.float32)
            if pairs.ndim != 5 or pairs.shape[1] != 2:
                raise ValueError("pairs must be shaped (N, 2, H, W, C)")
            self._init_net(pairs.shape[2:])
            n = len(pairs)

            def next_pair(idx):
                return pairs[idx, 0], pairs[idx, 1]

        def batch_loss(idx, gen):
            a, b = next_pair(idx)
            x1, x2 = to_tensor(a), to_tensor(b)
            noise = (torch.randn(len(x1), self.latent_dim, generator=gen),
                     torch.randn(len(x2), self.latent_dim, generator=gen))
            return pair_loss(self.net_, x1, x2, self.beta, self.averaging, self.symmetric_kl, noise)

        return self._fit_loop(n, batch_loss, callback)


def _evaluating(evaluate, method, seed):
    """Wrap an accuracy hook ``evaluate(model) -> {concept: acc}`` as a fit callback."""
    state = {"series": None}

    def callback(step, model):
        acc = evaluate(model)
        if state["series"] is None:
            state["series"] = MetricSeries(method, seed, list(acc))
        state["series"].append(step, acc)

    return (callback if evaluate is not None else None), state


def train_vae(X, beta=1.0, cfg: Optional[TrainConfig] = None, evaluate=None, **kwargs):
    """Fit a :class:`BetaVAE`; returns ``(model, series)``.

    ``series`` holds the accuracies returned by ``evaluate(model)`` at each
    checkpoint, or is ``None`` without a hook.
    """
    cfg = cfg or TrainConfig()
    model = BetaVAE(beta=beta, lr=cfg.lr, batch_size=cfg.batch_size, epochs=cfg.epochs, steps=cfg.steps,
                    optimizer=cfg.optimizer, seed=cfg.seed, eval_every=cfg.eval_every, **kwargs)
    callback, state = _evaluating(evaluate, "vae", cfg.seed)
    model.fit(X, callback=callback)
    return model, state["series"]


def train_wvae(pairs, beta=1.0, averaging="product_of_experts", cfg: Optional[TrainConfig] = None,
               evaluate=None, **kwargs):
    """Fit a :class:`WeaklySupervisedVAE`; returns ``(model, series)`` like :func:`train_vae`."""
    cfg = cfg or TrainConfig()
    model = WeaklySupervisedVAE(beta=beta, averaging=averaging, lr=cfg.lr, batch_size=cfg.batch_size,
                                epochs=cfg.epochs, steps=cfg.steps, optimizer=cfg.optimizer, seed=cfg.seed,
                                eval_every=cfg.eval_every, **kwargs)
    callback, state = _evaluating(evaluate, "wvae", cfg.seed)
    model.fit(pairs, callback=callback)
    return model, state["series"]


def encode(model: BetaVAE, X) -> GaussianPosterior:
    return model.encode(X)


def decode(model: BetaVAE, Z) -> np.ndarray:
    return model.decode(Z)


def elbo(model: BetaVAE, X):
    return model.elbo(X)
