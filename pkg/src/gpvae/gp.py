"""Random-function encoder with a linear deep kernel.

The encoder mean and standard-deviation functions are ``b(x) + W psi_m(x)`` and
``c(x) + U psi_s(x)`` with Gaussian posteriors over the rows of W and U:
``w_j ~ N(mu_j, Sigma_j)``, ``u_j ~ N(eta_j, Gamma_j)``. Marginalizing W, U and
matching moments gives a single diagonal Gaussian encoder.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch

from .errors import ContractError
from .nn import MLP
from .prob import DTYPE, EPS_VAR, CholeskyPSD, DiagGaussian, RngStream, as_tensor


class GPVarParams:
    """Variational parameters for all d latent dimensions, stored in one flat vector.

    Layout: ``mu`` (d*p), ``eta`` (d*p), then the two covariance factors in
    log-Cholesky form (diagonal holds log L_ii, strict lower part holds L_ij,
    upper part unused). In ``diag`` mode each factor is just the d*p log-diagonal.
    """

    def __init__(self, d: int, p: int, diag: bool = False, params=None):
        if d < 1 or p < 1:
            raise ContractError(f"need d, p >= 1, got d={d}, p={p}")
        self.d, self.p, self.diag = int(d), int(p), bool(diag)
        self._fac = self.d * self.p if self.diag else self.d * self.p * self.p
        self.n_params = 2 * self.d * self.p + 2 * self._fac
        if params is None:
            params = torch.zeros(self.n_params, dtype=DTYPE)
        params = as_tensor(params).detach().clone()
        if params.shape != (self.n_params,):
            raise ContractError(f"expected {self.n_params} GP parameters, got {tuple(params.shape)}")
        self.params = params.requires_grad_(True)
        self._tril = torch.tril(torch.ones(self.p, self.p, dtype=DTYPE), -1)

    @classmethod
    def init(cls, d: int, p: int, scale: float = 0.01, diag: bool = False) -> "GPVarParams":
        lam = cls(d, p, diag=diag)
        log_scale = math.log(scale)
        with torch.no_grad():
            if diag:
                lam.params[2 * d * p:] = log_scale
            else:
                eye = torch.eye(p, dtype=DTYPE) * log_scale
                lam.params[2 * d * p:] = eye.expand(2 * d, p, p).reshape(-1)
        return lam

    def _slices(self, flat=None):
        flat = self.params if flat is None else flat
        dp = self.d * self.p
        mu = flat[:dp].view(self.d, self.p)
        eta = flat[dp:2 * dp].view(self.d, self.p)
        shape = (self.d, self.p) if self.diag else (self.d, self.p, self.p)
        s_raw = flat[2 * dp:2 * dp + self._fac].view(shape)
        g_raw = flat[2 * dp + self._fac:].view(shape)
        return mu, eta, s_raw, g_raw

    @property
    def mu(self) -> torch.Tensor:
        return self._slices()[0]

    @property
    def eta(self) -> torch.Tensor:
        return self._slices()[1]

    def _lower(self, raw):
        if self.diag:
            return torch.diag_embed(torch.exp(raw))
        return raw * self._tril + torch.diag_embed(torch.exp(torch.diagonal(raw, dim1=-2, dim2=-1)))

    def sigma_factors(self) -> torch.Tensor:
        """Lower Cholesky factors of Sigma_1..Sigma_d, shape (d, p, p)."""
        return self._lower(self._slices()[2])

    def gamma_factors(self) -> torch.Tensor:
        return self._lower(self._slices()[3])

    def cholesky(self, which: str, j: int) -> CholeskyPSD:
        factors = self.sigma_factors() if which == "sigma" else self.gamma_factors()
        return CholeskyPSD(factors[j].detach())

    def project(self, which: str, phi: torch.Tensor) -> torch.Tensor:
        """Rows ``L_j^T phi`` for every latent dim: (..., p) -> (..., d, p)."""
        raw = self._slices()[2 if which == "sigma" else 3]
        if self.diag:
            return phi[..., None, :] * torch.exp(raw)
        return torch.einsum("...k,jkl->...jl", phi, self._lower(raw))

    def logdets(self) -> tuple[torch.Tensor, torch.Tensor]:
        _, _, s_raw, g_raw = self._slices()
        if self.diag:
            return 2 * s_raw.sum(-1), 2 * g_raw.sum(-1)
        diag = lambda r: torch.diagonal(r, dim1=-2, dim2=-1)
        return 2 * diag(s_raw).sum(-1), 2 * diag(g_raw).sum(-1)

    def log_cholesky_blocks(self, flat=None) -> list[tuple[torch.Tensor, ...]]:
        """Per latent dim ``(mu_j, S_j, eta_j, G_j)``, with S, G as full p x p log-Cholesky matrices."""
        mu, eta, s_raw, g_raw = self._slices(flat)
        if self.diag:
            s_raw, g_raw = torch.diag_embed(s_raw), torch.diag_embed(g_raw)
        else:
            keep = self._tril + torch.eye(self.p, dtype=DTYPE)
            s_raw, g_raw = s_raw * keep, g_raw * keep
        return [(mu[j], s_raw[j], eta[j], g_raw[j]) for j in range(self.d)]

    @classmethod
    def from_log_cholesky_blocks(cls, blocks, diag: bool = False) -> "GPVarParams":
        d, p = len(blocks), blocks[0][0].shape[0]
        mu = torch.stack([b[0] for b in blocks])
        eta = torch.stack([b[2] for b in blocks])
        s = torch.stack([b[1] for b in blocks])
        g = torch.stack([b[3] for b in blocks])
        if diag:
            s, g = torch.diagonal(s, dim1=-2, dim2=-1), torch.diagonal(g, dim1=-2, dim2=-1)
        flat = torch.cat([mu.reshape(-1), eta.reshape(-1), s.reshape(-1), g.reshape(-1)])
        return cls(d, p, diag=diag, params=flat)

    def __repr__(self):
        return f"GPVarParams(d={self.d}, p={self.p}, diag={self.diag})"


class FeaturePair(NamedTuple):
    phi_m: torch.Tensor
    phi_s: torch.Tensor


class EncoderNets(NamedTuple):
    """``base``: x -> [b(x), c(x)] (2d outputs); ``features``: x -> [psi_m(x), psi_s(x)] (2p outputs)."""

    base: MLP
    features: MLP


@dataclass
class EncoderStats:
    m: torch.Tensor
    v: torch.Tensor
    unc_f: torch.Tensor
    unc_h: torch.Tensor
    b: torch.Tensor
    c: torch.Tensor
    features: FeaturePair
    proj_s: torch.Tensor  # L_Gamma_j^T psi_s(x), reused by the MC log term

    @property
    def uncertainty(self) -> torch.Tensor:
        return self.unc_f + self.unc_h

    def gaussian(self) -> DiagGaussian:
        return DiagGaussian(self.m, self.v)


def split_base(out: torch.Tensor, d: int) -> tuple[torch.Tensor, torch.Tensor]:
    if out.shape[-1] != 2 * d:
        raise ContractError(f"base network must output 2d={2 * d} values, got {out.shape[-1]}")
    return out[..., :d], out[..., d:]


def features(nets: EncoderNets, x, p: int) -> FeaturePair:
    out = nets.features(x)
    if out.shape[-1] != 2 * p:
        raise ContractError(f"feature network must output 2p={2 * p} values, got {out.shape[-1]}")
    return FeaturePair(out[..., :p], out[..., p:])


def encoder_moments(b, c, feats: FeaturePair, lam: GPVarParams) -> EncoderStats:
    """Moment-matched marginal q(z|x) from base outputs and features."""
    b, c = as_tensor(b), as_tensor(c)
    phi_m, phi_s = (as_tensor(t) for t in feats)
    if b.shape[-1] != lam.d or c.shape != b.shape:
        raise ContractError(f"b, c must have {lam.d} entries")
    if phi_m.shape[-1] != lam.p or phi_s.shape[-1] != lam.p:
        raise ContractError(f"features must have {lam.p} entries")
    m = b + phi_m @ lam.mu.T
    eta_s = phi_s @ lam.eta.T
    proj_m = lam.project("sigma", phi_m)
    proj_s = lam.project("gamma", phi_s)
    q_sigma = (proj_m ** 2).sum(-1)
    q_gamma = (proj_s ** 2).sum(-1)
    # (c + eta^T psi_s)^2 + psi_s^T Gamma psi_s + psi_m^T Sigma psi_m: the expanded
    # form with eta eta^T + Gamma, written as a sum of nonnegative terms
    v = torch.clamp((c + eta_s) ** 2 + q_gamma + q_sigma, min=EPS_VAR)
    return EncoderStats(m=m, v=v, unc_f=q_sigma.sum(-1), unc_h=q_gamma.sum(-1), b=b, c=c,
                        features=FeaturePair(phi_m, phi_s), proj_s=proj_s)


def marginal_encoder(x, nets: EncoderNets, lam: GPVarParams) -> EncoderStats:
    b, c = split_base(nets.base(x), lam.d)
    return encoder_moments(b, c, features(nets, x, lam.p), lam)


def conditional_encoder(x, nets: EncoderNets, W, U) -> DiagGaussian:
    """q(z | x, W, U) for fixed weight matrices.

    W and U are (..., d, p); their leading axes broadcast against the batch axes of
    x, so a stack of weight draws can be evaluated for one input in a single call.
    """
    W, U = as_tensor(W), as_tensor(U)
    if W.shape != U.shape or W.ndim < 2:
        raise ContractError(f"W and U must be matching (..., d, p) arrays, got {tuple(W.shape)}, {tuple(U.shape)}")
    d, p = W.shape[-2:]
    b, c = split_base(nets.base(x), d)
    feats = features(nets, x, p)
    mean = b + (feats.phi_m[..., None, :] * W).sum(-1)
    std = c + (feats.phi_s[..., None, :] * U).sum(-1)
    return DiagGaussian(mean, torch.clamp(std ** 2, min=EPS_VAR))


def expected_log_sq_std(stats: EncoderStats, lam: GPVarParams, rng: RngStream, S: int) -> torch.Tensor:
    """MC estimate of E_{u_j ~ N(eta_j, Gamma_j)} log (c_j + u_j^T psi_s)^2, shape (..., d)."""
    if S < 1:
        raise ContractError("S must be >= 1")
    eps = rng.normal((S,) + tuple(stats.proj_s.shape))
    centre = stats.c + stats.features.phi_s @ lam.eta.T
    noise = (eps * stats.proj_s).sum(-1)
    anchor = torch.log(torch.clamp(centre ** 2, min=EPS_VAR))
    # average each draw's offset from the anchor, as log((1 + noise/centre)^2) when neither
    # side hits the floor; the offsets vanish exactly as the spread of u goes to zero
    ok = (centre ** 2 >= EPS_VAR) & ((centre + noise) ** 2 >= EPS_VAR)
    safe = torch.where(ok, centre, torch.ones_like(centre))
    offset = torch.where(ok, torch.log((1.0 + noise / safe) ** 2),
                         torch.log(torch.clamp((centre + noise) ** 2, min=EPS_VAR)) - anchor)
    return anchor + offset.mean(0)


def expected_kl_from_stats(stats: EncoderStats, lam: GPVarParams, rng: RngStream, S: int) -> torch.Tensor:
    log_sq = expected_log_sq_std(stats, lam, rng, S)
    return 0.5 * (stats.v + stats.m ** 2 - 1.0 - log_sq).sum(-1)


def expected_kl_to_prior(x, nets: EncoderNets, lam: GPVarParams, rng: RngStream, S: int = 8) -> torch.Tensor:
    """E_{q(W,U)} KL(q(z|x,W,U) || N(0, I)), one value per input row."""
    return expected_kl_from_stats(marginal_encoder(x, nets, lam), lam, rng, S)


def weight_kl(lam: GPVarParams) -> torch.Tensor:
    """KL(q(W, U) || N(0, I)) in closed form."""
    p = lam.p
    ld_s, ld_g = lam.logdets()
    tr_s = (lam.sigma_factors() ** 2).sum((-2, -1))
    tr_g = (lam.gamma_factors() ** 2).sum((-2, -1))
    kl_w = 0.5 * (tr_s + (lam.mu ** 2).sum(-1) - p - ld_s)
    kl_u = 0.5 * (tr_g + (lam.eta ** 2).sum(-1) - p - ld_g)
    return (kl_w + kl_u).sum()


def deep_kernel_cov(psi, x, x2) -> torch.Tensor:
    """Linear deep kernel k(x, x') = psi(x)^T psi(x')."""
    return (psi(x) * psi(x2)).sum(-1)
