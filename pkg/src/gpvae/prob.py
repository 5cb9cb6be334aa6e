"""Diagonal Gaussians, KL divergences, moment matching, Cholesky factors and RNG streams.

Everything here is float64 torch so the same code serves the differentiable
training path and the closed-form tests.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError, DomainError

EPS_VAR = 1e-8
LOG_2PI = math.log(2.0 * math.pi)
DTYPE = torch.float64


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class DiagGaussian:
    """N(mean, Diag(var)); the last axis is the event dimension, leading axes are batch."""

    mean: torch.Tensor
    var: torch.Tensor

    def __post_init__(self):
        mean, var = as_tensor(self.mean), as_tensor(self.var)
        if mean.shape != var.shape:
            raise ContractError(f"mean shape {tuple(mean.shape)} != var shape {tuple(var.shape)}")
        if bool((var <= 0).any()) or bool(torch.isnan(var).any()):
            raise DomainError("DiagGaussian variance must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> torch.Tensor:
        return torch.sqrt(torch.clamp(self.var, min=EPS_VAR))

    def log_prob(self, z) -> torch.Tensor:
        z = as_tensor(z)
        var = torch.clamp(self.var, min=EPS_VAR)
        return -0.5 * (LOG_2PI + torch.log(var) + (z - self.mean) ** 2 / var).sum(-1)

    @classmethod
    def standard(cls, d: int) -> "DiagGaussian":
        return cls(torch.zeros(d, dtype=DTYPE), torch.ones(d, dtype=DTYPE))


def _key_int(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ContractError("RNG keys must be nonnegative")
        return int(k)
    digest = hashlib.blake2b(str(k).encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """Seeded counter-based (Philox) stream; ``child`` derives independent named sub-streams.

    A stream is addressed by ``(seed, key)``; two streams with the same address
    produce the same variates regardless of what else was drawn elsewhere.
    """

    def __init__(self, seed: int, key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_key_int(k) for k in self.key))
        self._gen = np.random.Generator(np.random.Philox(ss))
        self.counter = 0

    def child(self, *key) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(key))

    def normal(self, shape) -> torch.Tensor:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        self.counter += int(np.prod(shape, dtype=np.int64))
        return torch.from_numpy(self._gen.standard_normal(shape))

    def uniform(self, shape) -> torch.Tensor:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        self.counter += int(np.prod(shape, dtype=np.int64))
        return torch.from_numpy(self._gen.random(shape))

    def permutation(self, n: int) -> np.ndarray:
        self.counter += n
        return self._gen.permutation(n)

    def integers(self, low, high, size) -> np.ndarray:
        self.counter += int(np.prod(size))
        return self._gen.integers(low, high, size)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def getstate(self) -> dict:
        st = self._gen.bit_generator.state
        return {"seed": self.seed, "key": list(self.key), "counter": self.counter,
                "bit_generator": _jsonable(st)}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        rng = cls(state["seed"], tuple(state["key"]))
        bg = state["bit_generator"]
        rng._gen.bit_generator.state = {
            **bg,
            "state": {k: np.asarray(v, dtype=np.uint64) for k, v in bg["state"].items()},
            "buffer": np.asarray(bg["buffer"], dtype=np.uint64),
        }
        rng.counter = state["counter"]
        return rng

    def __repr__(self):
        return f"RngStream(seed={self.seed}, key={self.key}, counter={self.counter})"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(v) for v in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """KL(q || p) summed over the event axis."""
    if q.dim != p.dim:
        raise ContractError(f"dimension mismatch: {q.dim} vs {p.dim}")
    ratio = q.var / p.var
    return 0.5 * (ratio + (q.mean - p.mean) ** 2 / p.var - 1.0 - torch.log(ratio)).sum(-1)


def kl_to_standard_normal(q: DiagGaussian) -> torch.Tensor:
    return 0.5 * (q.var + q.mean ** 2 - 1.0 - torch.log(q.var)).sum(-1)


def moment_match(weights, means, vars) -> DiagGaussian:
    """Collapse a diagonal Gaussian mixture to one Gaussian with the same first two moments."""
    w = as_tensor(weights)
    means = as_tensor(means if isinstance(means, torch.Tensor) else np.asarray(means))
    vars = as_tensor(vars if isinstance(vars, torch.Tensor) else np.asarray(vars))
    if w.ndim != 1 or means.shape[0] != w.shape[0] or means.shape != vars.shape:
        raise ContractError(
            f"need K weights and K x d means/vars, got {tuple(w.shape)}, {tuple(means.shape)}, {tuple(vars.shape)}")
    if bool((w < 0).any()) or abs(float(w.sum()) - 1.0) > 1e-9:
        raise ContractError(f"mixture weights must be nonnegative and sum to 1 (sum={float(w.sum())!r})")
    m = (w[:, None] * means).sum(0)
    second = (w[:, None] * (means ** 2 + vars)).sum(0)
    return DiagGaussian(m, torch.clamp(second - m ** 2, min=0.0))


def reparam_sample(g: DiagGaussian, rng: RngStream, n: int = 1) -> torch.Tensor:
    """``n`` draws ``mean + sqrt(var) * eps`` stacked on a new leading axis."""
    if n < 1:
        raise ContractError("n must be >= 1")
    eps = rng.normal((n,) + tuple(g.mean.shape))
    return g.mean + torch.sqrt(torch.clamp(g.var, min=EPS_VAR)) * eps


class CholeskyPSD:
    """A p x p lower-triangular factor L with positive diagonal, representing L L^T."""

    def __init__(self, lower):
        L = as_tensor(lower)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise ContractError(f"Cholesky factor must be square, got {tuple(L.shape)}")
        if bool((torch.triu(L, diagonal=1) != 0).any()):
            raise ContractError("Cholesky factor must be lower triangular")
        if bool((torch.diagonal(L) <= 0).any()):
            raise DomainError("Cholesky factor needs a strictly positive diagonal")
        self.lower = L

    @classmethod
    def from_log_cholesky(cls, raw) -> "CholeskyPSD":
        """Build from a matrix whose diagonal holds log L_ii and strict lower part holds L_ij."""
        raw = as_tensor(raw)
        return cls(torch.tril(raw, -1) + torch.diag_embed(torch.exp(torch.diagonal(raw))))

    @property
    def p(self) -> int:
        return self.lower.shape[0]

    def logdet(self) -> torch.Tensor:
        return 2.0 * torch.log(torch.diagonal(self.lower)).sum()


def psd_from_cholesky(c: CholeskyPSD) -> torch.Tensor:
    return c.lower @ c.lower.T


def quad_form(c: CholeskyPSD, x) -> torch.Tensor:
    """x^T (L L^T) x computed as ||L^T x||^2; leading axes of x are batch."""
    x = as_tensor(x)
    if x.shape[-1] != c.p:
        raise ContractError(f"vector length {x.shape[-1]} != {c.p}")
    return ((x @ c.lower) ** 2).sum(-1)
