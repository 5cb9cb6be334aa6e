"""Flat-parameter MLPs, gradient evaluation and Adam.

Each network keeps all of its weights and biases in one contiguous float64
vector so optimizer state and checkpoints are plain arrays. Gradients come from
torch autograd.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import torch

from .errors import ContractError, NumericError
from .prob import DTYPE, RngStream, as_tensor

LEAKY_SLOPE = 0.01


class Activation(str, Enum):
    LEAKY_RELU = "leaky_relu"
    RELU = "relu"
    IDENTITY = "identity"


def leaky_relu(x: torch.Tensor, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    # torch.where picks the positive branch at 0, so the subgradient there is 1
    return torch.where(x >= 0, x, slope * x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.where(x >= 0, x, torch.zeros_like(x))


_ACTIVATIONS = {
    Activation.LEAKY_RELU: leaky_relu,
    Activation.RELU: relu,
    Activation.IDENTITY: lambda x: x,
}


class MLP:
    """Fully connected network ``widths[0] -> ... -> widths[-1]``.

    Hidden layers use ``activation``; the output layer uses ``output_activation``
    (identity by default). Parameters live in ``self.params``, ordered layer by
    layer as (W row-major, b).
    """

    def __init__(self, widths: Sequence[int], activation=Activation.LEAKY_RELU,
                 output_activation=Activation.IDENTITY, params=None):
        if len(widths) < 2 or any(int(w) < 1 for w in widths):
            raise ContractError(f"invalid layer widths {list(widths)}")
        self.widths = [int(w) for w in widths]
        self.activation = Activation(activation)
        self.output_activation = Activation(output_activation)
        self.shapes = []
        offset = 0
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            self.shapes.append((offset, fan_out, fan_in))
            offset += fan_out * fan_in + fan_out
        self.n_params = offset
        if params is None:
            params = torch.zeros(self.n_params, dtype=DTYPE)
        params = as_tensor(params).detach().clone()
        if params.shape != (self.n_params,):
            raise ContractError(f"expected {self.n_params} parameters, got {tuple(params.shape)}")
        self.params = params.requires_grad_(True)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def init(self, rng: RngStream) -> "MLP":
        """He-normal weights N(0, 2/fan_in), zero biases."""
        chunks = []
        for _, fan_out, fan_in in self.shapes:
            chunks.append(rng.normal((fan_out, fan_in)).reshape(-1) * math.sqrt(2.0 / fan_in))
            chunks.append(torch.zeros(fan_out, dtype=DTYPE))
        with torch.no_grad():
            self.params.copy_(torch.cat(chunks))
        return self

    def unflatten(self, params=None) -> list[tuple[torch.Tensor, torch.Tensor]]:
        flat = self.params if params is None else params
        layers = []
        for offset, fan_out, fan_in in self.shapes:
            n_w = fan_out * fan_in
            W = flat[offset:offset + n_w].view(fan_out, fan_in)
            b = flat[offset + n_w:offset + n_w + fan_out]
            layers.append((W, b))
        return layers

    @staticmethod
    def flatten(layers) -> torch.Tensor:
        return torch.cat([t.reshape(-1) for W, b in layers for t in (W, b)])

    def __call__(self, x, params=None) -> torch.Tensor:
        return forward(self, x, params)

    def manifest(self) -> dict:
        return {"widths": self.widths, "activation": self.activation.value,
                "output_activation": self.output_activation.value, "n_params": self.n_params}

    def __repr__(self):
        return f"MLP({self.widths}, {self.activation.value})"


def forward(f: MLP, x, params=None) -> torch.Tensor:
    x = as_tensor(x)
    if x.shape[-1] != f.in_dim:
        raise ContractError(f"input width {x.shape[-1]} != network input width {f.in_dim}")
    hidden = _ACTIVATIONS[f.activation]
    layers = f.unflatten(params)
    for i, (W, b) in enumerate(layers):
        x = x @ W.T + b
        x = hidden(x) if i < len(layers) - 1 else _ACTIVATIONS[f.output_activation](x)
    return x


def grad(loss: torch.Tensor, params: Sequence[torch.Tensor], term: str = "loss") -> list[torch.Tensor]:
    """d loss / d params for each flat parameter vector (zeros where unused)."""
    if loss.ndim != 0:
        raise ContractError("loss must be a scalar")
    if not bool(torch.isfinite(loss)):
        raise NumericError(f"non-finite {term}: {float(loss.detach())!r}", term=term)
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: torch.Tensor | None = field(default=None, repr=False)
    v: torch.Tensor | None = field(default=None, repr=False)


def adam_step(state: AdamState, params: torch.Tensor, grads: torch.Tensor) -> tuple[torch.Tensor, AdamState]:
    """One bias-corrected Adam *descent* step; returns new parameters and the advanced state.

    Non-finite gradients raise before any state is touched.
    """
    params, grads = as_tensor(params).detach(), as_tensor(grads).detach()
    if params.shape != grads.shape:
        raise ContractError(f"params {tuple(params.shape)} and grads {tuple(grads.shape)} differ")
    if not bool(torch.isfinite(grads).all()):
        raise NumericError("non-finite gradient entries; Adam step refused", term="gradient")
    m = torch.zeros_like(params) if state.m is None else state.m
    v = torch.zeros_like(params) if state.v is None else state.v
    if m.shape != params.shape:
        raise ContractError("Adam moment vectors do not match parameter length")
    t = state.step + 1
    m = state.beta1 * m + (1.0 - state.beta1) * grads
    v = state.beta2 * v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params - state.lr * m_hat / (torch.sqrt(v_hat) + state.eps)
    state.m, state.v, state.step = m, v, t
    return new, state
