"""Diagonal Gaussian posteriors: KL divergences, shared-set selection, averaging.

The batched ``*_terms`` helpers operate on torch tensors so they can sit
inside a training graph; the public functions accept numpy arrays or
:class:`GaussianPosterior` objects and return numpy results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

AVERAGING = ("product_of_experts", "arithmetic")


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    log_variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_variance = np.asarray(self.log_variance, dtype=np.float64)
        if self.mean.shape != self.log_variance.shape:
            raise ValueError("mean and log_variance shapes differ")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.log_variance))):
            raise ValueError("posterior parameters must be finite")

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_variance)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @classmethod
    def standard(cls, dim: int) -> "GaussianPosterior":
        return cls(np.zeros(dim), np.zeros(dim))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + np.exp(0.5 * self.log_variance) * rng.standard_normal((n, *self.mean.shape))


@dataclass
class SharedSet:
    dims: frozenset
    threshold: float

    def mask(self, dim: int) -> np.ndarray:
        m = np.zeros(dim, dtype=bool)
        m[list(self.dims)] = True
        return m


# --------------------------------------------------------------------------
# tensor kernels


def kl_terms(mu_q, logvar_q, mu_p=None, logvar_p=None):
    """Elementwise KL(q || p); ``p`` defaults to the standard normal."""
    if mu_p is None:
        return 0.5 * (mu_q**2 + torch.exp(logvar_q) - logvar_q - 1.0)
    return 0.5 * (logvar_p - logvar_q + (torch.exp(logvar_q) + (mu_q - mu_p) ** 2) * torch.exp(-logvar_p) - 1.0)


def shared_mask_from_divergence(delta):
    """Dimensions below the midpoint of the per-row divergence range.

    Rows whose divergences are all equal share every dimension.
    """
    hi = delta.max(dim=-1, keepdim=True).values
    lo = delta.min(dim=-1, keepdim=True).values
    tau = 0.5 * (hi + lo)
    return (delta < tau) | (hi == lo)


def shared_mask_terms(mu1, logvar1, mu2, logvar2, symmetric: bool = True):
    with torch.no_grad():
        delta = kl_terms(mu1, logvar1, mu2, logvar2)
        if symmetric:
            delta = 0.5 * (delta + kl_terms(mu2, logvar2, mu1, logvar1))
        return shared_mask_from_divergence(delta)


def average_terms(mu1, logvar1, mu2, logvar2, averaging: str = "product_of_experts"):
    if averaging == "product_of_experts":
        logvar = -torch.logaddexp(-logvar1, -logvar2)
        mu = torch.exp(logvar) * (mu1 * torch.exp(-logvar1) + mu2 * torch.exp(-logvar2))
    elif averaging == "arithmetic":
        mu = 0.5 * (mu1 + mu2)
        logvar = torch.logaddexp(logvar1, logvar2) - np.log(2.0)
    else:
        raise ValueError(f"averaging must be one of {AVERAGING}")
    return mu, logvar


def adaptive_average_terms(mu1, logvar1, mu2, logvar2, mask, averaging="product_of_experts"):
    mu_a, lv_a = average_terms(mu1, logvar1, mu2, logvar2, averaging)
    return (torch.where(mask, mu_a, mu1), torch.where(mask, lv_a, logvar1),
            torch.where(mask, mu_a, mu2), torch.where(mask, lv_a, logvar2))


# --------------------------------------------------------------------------
# array API


def _t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def kl_gaussian(q: GaussianPosterior, p: GaussianPosterior | None = None):
    """Closed-form KL(q || p) per dimension and in total (summed over the last axis)."""
    if p is not None and p.mean.shape != q.mean.shape:
        raise ValueError("posterior shapes differ")
    per = kl_terms(_t(q.mean), _t(q.log_variance),
                   None if p is None else _t(p.mean), None if p is None else _t(p.log_variance)).numpy()
    return per, per.sum(axis=-1)


def select_shared_set(q1: GaussianPosterior, q2: GaussianPosterior, symmetric: bool = True) -> SharedSet:
    """Latent dimensions judged unchanged between the two posteriors.

    The per-dimension divergence is the symmetrised KL, the mean of both
    directions (only KL(q1 || q2) when ``symmetric`` is false); dimensions
    strictly below the midpoint of its range are shared.
    """
    if q1.mean.shape != q2.mean.shape or q1.mean.ndim != 1:
        raise ValueError("expected two posteriors over the same latent dimensions")
    delta, _ = kl_gaussian(q1, q2)
    if symmetric:
        delta = 0.5 * (delta + kl_gaussian(q2, q1)[0])
    return shared_set_from_divergence(delta)


def shared_set_from_divergence(delta) -> SharedSet:
    delta = np.asarray(delta, dtype=np.float64)
    mask = shared_mask_from_divergence(_t(delta)).numpy()
    tau = 0.5 * (delta.max() + delta.min())
    return SharedSet(frozenset(int(i) for i in np.flatnonzero(mask)), float(tau))


def adaptive_average(q1: GaussianPosterior, q2: GaussianPosterior, shared: SharedSet,
                     averaging: str = "product_of_experts"):
    """Replace both posteriors by their average on the shared dimensions."""
    d = q1.dim
    if any(not 0 <= i < d for i in shared.dims):
        raise ValueError(f"shared dimensions {sorted(shared.dims)} out of range for dim {d}")
    mask = torch.as_tensor(shared.mask(d))
    m1, l1, m2, l2 = adaptive_average_terms(_t(q1.mean), _t(q1.log_variance), _t(q2.mean),
                                            _t(q2.log_variance), mask, averaging)
    return GaussianPosterior(m1.numpy(), l1.numpy()), GaussianPosterior(m2.numpy(), l2.numpy())
