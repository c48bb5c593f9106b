"""Variational graph autoencoder over a learnable sample-sample adjacency.

The posterior over per-sample latents comes from a two-layer GCN with a
shared first layer and separate mean / log-scale heads.  Two decoders read
the latents: an inner-product decoder for edge probabilities and a one-step
neighbourhood-aggregation decoder that reconstructs sample embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .hetembed import glorot, zeros

LOG_SIGMA_MIN, LOG_SIGMA_MAX = -6.0, 6.0


class SampleAdjacency:
    """n x n logits, kept symmetric by construction: A = sigmoid((L + L^T) / 2), zero diagonal."""

    def __init__(self, logits: np.ndarray):
        logits = np.asarray(logits, dtype=np.float64)
        logits = 0.5 * (logits + logits.T)
        self.logits = T.parameter(logits, "adj.logits")
        self._offdiag = T.Tensor(1.0 - np.eye(logits.shape[0]))

    @classmethod
    def random(cls, n: int, gen: np.random.Generator, std: float = 0.1) -> SampleAdjacency:
        return cls(gen.normal(0.0, std, size=(n, n)))

    @classmethod
    def from_knn(cls, features: np.ndarray, gen: np.random.Generator, k: int = 10, strength: float = 2.0) -> SampleAdjacency:
        x = np.asarray(features, dtype=np.float64)
        n = x.shape[0]
        d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        k = min(k, n - 1)
        nbr = np.argsort(d2, axis=1, kind="stable")[:, :k]
        logits = np.full((n, n), -strength)
        logits[np.repeat(np.arange(n), k), nbr.ravel()] = strength
        logits = np.maximum(logits, logits.T)
        return cls(logits + gen.normal(0.0, 0.01, size=(n, n)))

    @property
    def n(self) -> int:
        return self.logits.shape[0]

    def parameters(self) -> list[T.Tensor]:
        return [self.logits]

    def weights(self) -> T.Tensor:
        sym = T.scale(self.logits + T.transpose(self.logits), 0.5)
        return T.mul(T.sigmoid(sym), self._offdiag)

    def normalized(self) -> T.Tensor:
        return T.sym_normalize(self.weights())


@dataclass
class GaussianLatent:
    mu: T.Tensor
    log_sigma: T.Tensor
    z: T.Tensor

    @property
    def width(self) -> int:
        return self.mu.shape[1]


class GCNEncoder:
    def __init__(self, in_dim: int, gen: np.random.Generator, hidden: int = 64, latent: int = 32):
        self.w0 = glorot(gen, in_dim, hidden, "gcn.W0")
        self.w_mu = glorot(gen, hidden, latent, "gcn.W1_mu")
        self.w_sigma = glorot(gen, hidden, latent, "gcn.W1_sigma")

    def parameters(self) -> list[T.Tensor]:
        return [self.w0, self.w_mu, self.w_sigma]


def gcn_encode(
    P: T.Tensor, adj_norm: T.Tensor, enc: GCNEncoder, eps: np.ndarray | None
) -> GaussianLatent:
    """mu, log sigma = A_n relu(A_n P W0) W1_{mu,sigma};  z = mu + exp(log sigma) * eps.

    ``eps=None`` returns z = mu (deterministic evaluation).
    """
    hidden = T.relu(adj_norm @ (P @ enc.w0))
    agg = adj_norm @ hidden
    mu = agg @ enc.w_mu
    log_sigma = T.clamp(agg @ enc.w_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    if eps is None:
        return GaussianLatent(mu, log_sigma, mu)
    z = mu + T.mul(T.exp(log_sigma), T.Tensor(eps))
    return GaussianLatent(mu, log_sigma, z)


def adjacency_logits(z: T.Tensor) -> T.Tensor:
    return z @ T.transpose(z)


def decode_adjacency(latent: GaussianLatent | T.Tensor) -> T.Tensor:
    """Edge probabilities sigmoid(z_i . z_j); symmetric because z z^T is."""
    z = latent.z if isinstance(latent, GaussianLatent) else latent
    return T.sigmoid(adjacency_logits(z))


class FeatureDecoder:
    def __init__(self, in_dim: int, latent: int, gen: np.random.Generator, hidden: int = 64):
        self.z_lift = glorot(gen, latent, hidden, "dec.z_lift")
        self.theta = glorot(gen, in_dim + hidden, hidden, "dec.theta")
        self.theta_b = zeros(hidden, "dec.theta_b")

    def parameters(self) -> list[T.Tensor]:
        return [self.z_lift, self.theta, self.theta_b]


def decode_features(z: T.Tensor, adj_norm: T.Tensor, x_input: T.Tensor, dec: FeatureDecoder) -> T.Tensor:
    """p_hat = relu(Theta [x_i, sum_j A_n[i, j] H_j]) with H = z @ z_lift (single unrolled step)."""
    neighbours = adj_norm @ (z @ dec.z_lift)
    return T.relu(T.add_bias(T.concat([x_input, neighbours], axis=1) @ dec.theta, dec.theta_b))


def kl_divergence(mu: T.Tensor, log_sigma: T.Tensor) -> T.Tensor:
    """sum_i 0.5 * sum_k (mu^2 + sigma^2 - 1 - 2 log sigma), closed form vs N(0, I)."""
    sigma2 = T.exp(T.scale(log_sigma, 2.0))
    inner = T.mul(mu, mu) + sigma2 - T.scale(log_sigma, 2.0) - 1.0
    return T.scale(T.sum(inner), 0.5)


def positive_weight(target: np.ndarray) -> float:
    ones = float(np.asarray(target).sum())
    total = float(np.asarray(target).size)
    if ones <= 0:
        return 1.0
    return max((total - ones) / ones, 1e-12)


def reconstruction_loss(logits: T.Tensor, target: np.ndarray, pos_weight: float) -> T.Tensor:
    """Mean weighted binary cross-entropy between sigmoid(logits) and a constant target."""
    if pos_weight <= 0:
        raise ConfigError(f"pos_weight must be positive, got {pos_weight}")
    return T.mean(T.bce_with_logits(logits, target, pos_weight))


@dataclass
class ElboTerms:
    recon: T.Tensor
    kl: T.Tensor

    @property
    def loss(self) -> T.Tensor:
        return self.recon + self.kl


def elbo(
    latent: GaussianLatent,
    target: np.ndarray,
    pos_weight: float | None = None,
    kl_weight: float = 1.0,
) -> ElboTerms:
    """Negated ELBO split into reconstruction and KL; minimise ``recon + kl``.

    ``target`` is a constant array in [0, 1] (the detached current adjacency).
    """
    target = np.asarray(target, dtype=np.float64)
    if np.any(target < 0) or np.any(target > 1):
        raise ConfigError("adjacency target entries must lie in [0, 1]")
    pw = positive_weight(target) if pos_weight is None else pos_weight
    recon = reconstruction_loss(adjacency_logits(latent.z), target, pw)
    kl = kl_divergence(latent.mu, latent.log_sigma)
    if kl_weight != 1.0:
        kl = T.scale(kl, kl_weight)
    return ElboTerms(recon, kl)
