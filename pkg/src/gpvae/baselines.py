"""Comparison inference schemes: plain VAE encoder, per-instance SVI and semi-amortized refinement."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError
from .gp import split_base
from .model import Decoder, log_lik
from .nn import MLP
from .prob import EPS_VAR, DiagGaussian, RngStream, as_tensor


@dataclass
class InstanceVarParams:
    """Per-instance q(z) = N(mean, exp(log_std)^2); rows are independent instances."""

    mean: torch.Tensor
    log_std: torch.Tensor

    def __post_init__(self):
        self.mean, self.log_std = as_tensor(self.mean), as_tensor(self.log_std)
        if self.mean.shape != self.log_std.shape:
            raise ContractError("mean and log_std shapes differ")

    def gaussian(self) -> DiagGaussian:
        return DiagGaussian(self.mean, torch.exp(2 * self.log_std))

    @classmethod
    def from_gaussian(cls, q: DiagGaussian) -> "InstanceVarParams":
        return cls(q.mean.detach().clone(), 0.5 * torch.log(q.var.detach()))

    def detach(self) -> "InstanceVarParams":
        return InstanceVarParams(self.mean.detach().clone(), self.log_std.detach().clone())


def vae_encoder(x, base: MLP) -> DiagGaussian:
    """N(b(x), Diag(c(x))^2) with the variance floor."""
    b, c = split_base(base(x), base.out_dim // 2)
    return DiagGaussian(b, torch.clamp(c ** 2, min=EPS_VAR))


def instance_elbo(x, lam: InstanceVarParams, dec: Decoder, eps: torch.Tensor) -> torch.Tensor:
    """ELBO per instance with the given standard-normal draws ``eps`` (n, B, d).

    The KL to the prior is exact; only the reconstruction term is sampled.
    """
    z = lam.mean + torch.exp(lam.log_std) * eps
    kl = 0.5 * (torch.exp(2 * lam.log_std) + lam.mean ** 2 - 1.0 - 2 * lam.log_std).sum(-1)
    return log_lik(x, z, dec).mean(0) - kl


def svi_optimize(x, dec: Decoder, init: InstanceVarParams, steps: int, step_size: float,
                 rng: RngStream, decay: float | None = None) -> InstanceVarParams:
    """Plain gradient ascent on each instance's ELBO, one reparametrized sample per step.

    Step t draws its noise from ``rng.child("step", t)``, so runs of different length
    share their first steps' noise. With ``decay`` the step size at t is
    ``step_size / (1 + t / decay)``. An instance whose ELBO turns non-finite is
    reverted to its last parameters with a finite ELBO and frozen there; the other
    instances keep going.
    """
    if steps < 0:
        raise ContractError("steps must be >= 0")
    x = as_tensor(x)
    lam = prev = init.detach()
    live = torch.ones(lam.mean.shape[:-1], dtype=torch.bool)
    for t in range(steps + 1):
        mean = lam.mean.clone().requires_grad_(True)
        log_std = lam.log_std.clone().requires_grad_(True)
        eps = rng.child("step", t).normal((1,) + tuple(mean.shape))
        value = instance_elbo(x, InstanceVarParams(mean, log_std), dec, eps)
        bad = (live & ~torch.isfinite(value))[..., None]
        lam = InstanceVarParams(torch.where(bad, prev.mean, lam.mean), torch.where(bad, prev.log_std, lam.log_std))
        live = live & torch.isfinite(value)
        # the last draw only checks the final update
        if t == steps or not bool(live.any()):
            break
        # instances are independent, so masking the dead ones keeps their non-finite
        # values out of the live instances' gradients
        g_mean, g_log_std = torch.autograd.grad(torch.where(live, value, 0.0).sum(), (mean, log_std))
        lr = step_size if decay is None else step_size / (1.0 + t / decay)
        keep = live[..., None]
        prev = lam
        lam = InstanceVarParams(torch.where(keep, lam.mean + lr * g_mean, lam.mean).detach(),
                                torch.where(keep, lam.log_std + lr * g_log_std, lam.log_std).detach())
    return lam


def sa_refine(x, base: MLP, dec: Decoder, k: int, rng: RngStream, step_size: float = 1e-3) -> InstanceVarParams:
    """Semi-amortized inference: start at the VAE encoder output, then k SVI steps."""
    with torch.no_grad():
        init = InstanceVarParams.from_gaussian(vae_encoder(x, base))
    return svi_optimize(x, dec, init, k, step_size, rng)


@dataclass
class GapReport:
    elbo_amortized: np.ndarray
    elbo_svi: np.ndarray

    @property
    def gap(self) -> np.ndarray:
        return self.elbo_svi - self.elbo_amortized

    @property
    def mean(self) -> float:
        return float(self.gap.mean())

    @property
    def stderr(self) -> float:
        g = self.gap
        if len(g) < 2 or not np.isfinite(g).all():
            return float("nan")
        with np.errstate(over="ignore"):  # a diverged SVI run can leave gaps near the float range
            return float(g.std(ddof=1) / np.sqrt(len(g)))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["instance", "elbo_amortized", "elbo_svi", "gap"])
            for i, (a, s, g) in enumerate(zip(self.elbo_amortized, self.elbo_svi, self.gap)):
                w.writerow([i, repr(float(a)), repr(float(s)), repr(float(g))])


def amortization_gap(x, encode, dec: Decoder, rng: RngStream, steps: int = 500, step_size: float = 1e-2,
                     decay: float = 100.0, n_eval: int = 256, batch_size: int = 256) -> GapReport:
    """ELBO(long SVI run from the amortized q) - ELBO(amortized q), per instance.

    ``encode`` maps a batch of inputs to a DiagGaussian. Both ELBOs use the same
    ``n_eval`` evaluation draws per instance.
    """
    x = as_tensor(x)
    amort, svi = [], []
    for i, start in enumerate(range(0, len(x), batch_size)):
        xb = x[start:start + batch_size]
        with torch.no_grad():
            init = InstanceVarParams.from_gaussian(encode(xb))
        opt = svi_optimize(xb, dec, init, steps, step_size, rng.child("svi", i), decay=decay)
        eps = rng.child("eval", i).normal((n_eval,) + tuple(init.mean.shape))
        with torch.no_grad():
            amort.append(instance_elbo(xb, init, dec, eps).numpy())
            svi.append(instance_elbo(xb, opt, dec, eps).numpy())
    return GapReport(np.concatenate(amort), np.concatenate(svi))
