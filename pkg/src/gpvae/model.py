"""Homoscedastic Gaussian decoder, standard-normal prior and single-q ELBO estimates."""
from __future__ import annotations

import math

import torch

from .errors import ContractError, DomainError, NumericError
from .gp import EncoderNets, conditional_encoder
from .nn import MLP
from .prob import LOG_2PI, DiagGaussian, RngStream, as_tensor, reparam_sample


class Decoder:
    """p(x|z) = N(x; g(z), sigma2_x I) with a fixed observation variance."""

    def __init__(self, net: MLP, sigma2_x: float = 0.1):
        if not sigma2_x > 0:
            raise DomainError(f"sigma2_x must be positive, got {sigma2_x}")
        self.net = net
        self.sigma2_x = float(sigma2_x)

    @property
    def latent_dim(self) -> int:
        return self.net.in_dim

    @property
    def data_dim(self) -> int:
        return self.net.out_dim

    def mean(self, z) -> torch.Tensor:
        return self.net(z)


def log_lik(x, z, dec: Decoder) -> torch.Tensor:
    """log N(x; g(z), sigma2_x I) summed over data dims; z may carry extra leading sample axes."""
    x = as_tensor(x)
    g = dec.mean(z)
    if g.shape[-1] != x.shape[-1]:
        raise ContractError(f"data dim {x.shape[-1]} != decoder output dim {g.shape[-1]}")
    s2 = dec.sigma2_x
    return (-0.5 * math.log(2 * math.pi * s2) - (x - g) ** 2 / (2 * s2)).sum(-1)


def log_prior(z) -> torch.Tensor:
    z = as_tensor(z)
    return -0.5 * (LOG_2PI + z ** 2).sum(-1)


def elbo_estimate(x, q: DiagGaussian, dec: Decoder, rng: RngStream, n: int = 1) -> torch.Tensor:
    """n-sample reparametrized estimate of E_q[log p(x, z) - log q(z)], one value per row of x."""
    z = reparam_sample(q, rng, n)
    terms = {"log_lik": log_lik(x, z, dec), "log_prior": log_prior(z), "log_q": q.log_prob(z)}
    for name, t in terms.items():
        if not bool(torch.isfinite(t).all()):
            raise NumericError(f"non-finite {name} in ELBO estimate", term=name)
    return (terms["log_lik"] + terms["log_prior"] - terms["log_q"]).mean(0)


def surrogate_elbo_L(x, nets: EncoderNets, W, U, dec: Decoder, rng: RngStream, n: int = 1) -> torch.Tensor:
    """Surrogate log-likelihood of the weights: the ELBO under q(z | x, W, U)."""
    return elbo_estimate(x, conditional_encoder(x, nets, W, U), dec, rng, n)
