"""Per-datapoint ELBO, the training loop, and run logs."""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ContractError, NumericError
from .gp import (EncoderNets, EncoderStats, GPVarParams, encoder_moments, expected_kl_from_stats,
                 features, split_base, weight_kl)
from .model import Decoder, log_lik
from .nn import MLP, Activation, AdamState, adam_step, grad
from .prob import EPS_VAR, DiagGaussian, RngStream, as_tensor, reparam_sample

log = logging.getLogger(__name__)

MODES = ("gpvae", "vae")
LOG_COLUMNS = ("epoch", "train_elbo", "val_elbo", "weight_kl", "wall_ms")


@dataclass
class TrainConfig:
    mode: str = "gpvae"
    d: int = 10
    p: int = 16
    h: int = 256
    batch_size: int = 128
    lr: float = 5e-4
    epochs: int = 50
    mc_kl: int = 8
    mc_kl_eval: int = 1000
    mc_recon: int = 1
    sigma2_x: float = 0.1
    seed: int = 0
    diag_cov: bool = False
    lambda_init_scale: float = 0.01
    freeze_lambda: bool = False

    def __post_init__(self):
        validate_fields(self)
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}, got {self.mode!r}")
        for name in ("d", "p", "h", "batch_size", "mc_kl", "mc_kl_eval", "mc_recon"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: expected a positive int, got {getattr(self, name)!r}")
        if self.epochs < 0:
            raise ConfigError(f"epochs: expected a nonnegative int, got {self.epochs!r}")
        for name in ("lr", "sigma2_x", "lambda_init_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: expected a positive float, got {getattr(self, name)!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**d)


def validate_fields(obj) -> None:
    """Check dataclass field types, naming the offending field and the expected type."""
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        expected = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool,
                                                             "str": str}.get(str(f.type))
        if expected is None:
            continue
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            setattr(obj, f.name, float(value))
            continue
        ok = isinstance(value, expected) and not (expected is int and isinstance(value, bool))
        if not ok:
            raise ConfigError(f"{f.name}: expected {expected.__name__}, got {type(value).__name__} ({value!r})")


class Model:
    """Encoder (b, c), feature map (psi_m, psi_s), GP variational parameters and decoder.

    In ``vae`` mode only the base encoder and decoder exist.
    """

    def __init__(self, config: TrainConfig, data_dim: int):
        self.config = config
        self.data_dim = int(data_dim)
        c = config
        self.encoder = MLP([data_dim, c.h, c.h, 2 * c.d], Activation.LEAKY_RELU)
        self.decoder = Decoder(MLP([c.d, c.h, c.h, data_dim], Activation.RELU), c.sigma2_x)
        self.features = None
        self.lam = None
        if c.mode == "gpvae":
            self.features = MLP([data_dim, c.h, c.h, 2 * c.p], Activation.LEAKY_RELU)
            self.lam = GPVarParams.init(c.d, c.p, c.lambda_init_scale, diag=c.diag_cov)

    def init(self, rng: RngStream) -> "Model":
        self.encoder.init(rng.child("encoder"))
        self.decoder.net.init(rng.child("decoder"))
        if self.features is not None:
            self.features.init(rng.child("features"))
        return self

    @property
    def is_gp(self) -> bool:
        return self.lam is not None

    @property
    def nets(self) -> EncoderNets:
        return EncoderNets(self.encoder, self.features)

    def groups(self) -> dict[str, torch.Tensor]:
        out = {"encoder": self.encoder.params, "decoder": self.decoder.net.params}
        if self.is_gp:
            out["features"] = self.features.params
            out["lambda"] = self.lam.params
        return out

    def trainable(self) -> list[str]:
        names = list(self.groups())
        if self.is_gp and self.config.freeze_lambda:
            names.remove("lambda")
        return names

    def base(self, x) -> tuple[torch.Tensor, torch.Tensor]:
        return split_base(self.encoder(x), self.config.d)

    def stats(self, x) -> EncoderStats:
        if not self.is_gp:
            raise ContractError("encoder statistics need a gpvae-mode model")
        b, c = self.base(x)
        return encoder_moments(b, c, features(self.nets, x, self.config.p), self.lam)

    def encode(self, x) -> DiagGaussian:
        """The amortized q(z|x): the moment-matched marginal for gpvae, N(b, c^2) for vae."""
        if self.is_gp:
            return self.stats(x).gaussian()
        b, c = self.base(x)
        return DiagGaussian(b, torch.clamp(c ** 2, min=EPS_VAR))

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.groups().items()}

    def load_snapshot(self, snap: dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for k, v in self.groups().items():
                v.copy_(snap[k])


@dataclass
class ElboTerms:
    total: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor
    weight_kl: torch.Tensor


def _check_finite(term: str, *ts: torch.Tensor) -> None:
    if not all(bool(torch.isfinite(t).all()) for t in ts):
        raise NumericError(f"non-finite {term} term in ELBO", term=term)


def elbo_terms(model: Model, x, rng: RngStream, n_data: int, mc_kl: int | None = None) -> ElboTerms:
    """Per-datapoint ELBO: E_q(z|x) log p(x|z) - E_q(W,U) KL(q(z|x,W,U)||p(z)) - KL(q(W,U)||N(0,I)) / N.

    Reconstruction noise and the log-term noise come from separate sub-streams so a
    vae-mode model sees the same reconstruction draws.
    """
    x = as_tensor(x)
    cfg = model.config
    if model.is_gp:
        stats = model.stats(x)
        _check_finite("encoder", stats.m, stats.v)
        q = stats.gaussian()
        kl = expected_kl_from_stats(stats, model.lam, rng.child("logsq"), mc_kl or cfg.mc_kl)
        wkl = torch.zeros((), dtype=x.dtype) if cfg.freeze_lambda else weight_kl(model.lam)
    else:
        b, c = model.base(x)
        _check_finite("encoder", b, c)
        q = DiagGaussian(b, torch.clamp(c ** 2, min=EPS_VAR))
        # log-variance built from c on its own branch, as the gpvae log term is, so that
        # a gpvae model with vanishing weight covariance accumulates gradients in the same order
        log_var = torch.log(torch.clamp(c ** 2, min=EPS_VAR))
        kl = 0.5 * (q.var + q.mean ** 2 - 1.0 - log_var).sum(-1)
        wkl = torch.zeros((), dtype=x.dtype)
    z = reparam_sample(q, rng.child("recon"), cfg.mc_recon)
    recon = log_lik(x, z, model.decoder).mean(0)
    for name, t in (("reconstruction", recon), ("expected_kl", kl), ("weight_kl", wkl)):
        _check_finite(name, t)
    return ElboTerms(recon - kl - wkl / n_data, recon, kl, wkl)


def elbo(model: Model, x, rng: RngStream, n_data: int) -> torch.Tensor:
    return elbo_terms(model, x, rng, n_data).total


@dataclass
class TrainState:
    model: Model
    adam: dict[str, AdamState]
    epoch: int = 0
    best: dict[str, torch.Tensor] | None = None
    best_epoch: int = -1
    best_val: float = float("-inf")
    history: list[dict] = field(default_factory=list)

    @property
    def config(self) -> TrainConfig:
        return self.model.config


def init_state(config: TrainConfig, data_dim: int) -> TrainState:
    model = Model(config, data_dim).init(RngStream(config.seed).child("init"))
    adam = {name: AdamState(lr=config.lr) for name in model.trainable()}
    return TrainState(model, adam)


def train_step(state: TrainState, xb: torch.Tensor, rng: RngStream, n_data: int) -> float:
    model = state.model
    groups = model.groups()
    names = model.trainable()
    value = elbo(model, xb, rng, n_data).mean()
    grads = grad(-value, [groups[n] for n in names], term="negative ELBO")
    for name, g in zip(names, grads):
        new, _ = adam_step(state.adam[name], groups[name], g)
        with torch.no_grad():
            groups[name].copy_(new)
    return float(value.detach())


@torch.no_grad()
def evaluate_elbo(model: Model, x: np.ndarray, rng: RngStream, n_data: int, batch_size: int = 500,
                  mc_kl: int | None = None) -> float:
    if len(x) == 0:
        return float("nan")
    total = 0.0
    for i, start in enumerate(range(0, len(x), batch_size)):
        xb = torch.from_numpy(x[start:start + batch_size])
        total += float(elbo_terms(model, xb, rng.child(i), n_data, mc_kl).total.sum())
    return total / len(x)


def train(dataset, config: TrainConfig, state: TrainState | None = None, log_path=None,
          checkpoint_path=None, stop_after_epoch: int | None = None) -> TrainState:
    """Adam on the mean mini-batch ELBO over every trainable group, one epoch at a time.

    ``dataset`` is a :class:`~gpvae.data.Dataset` (its train/val parts are used) or a
    bare N x D array. Shuffling and all MC noise are keyed by (seed, epoch, batch), so
    a run resumed from a checkpoint continues bit-identically. On a non-finite loss the
    error propagates and the last checkpoint on disk is left untouched.
    """
    x_train, x_val = (dataset, np.zeros((0, dataset.shape[1]))) if isinstance(dataset, np.ndarray) \
        else (dataset.train, dataset.val)
    if len(x_train) == 0:
        raise ContractError("training set is empty")
    if config.batch_size > len(x_train):
        raise ConfigError(f"batch_size: {config.batch_size} exceeds training-set size {len(x_train)}")
    if state is None:
        state = init_state(config, x_train.shape[1])
    n = len(x_train)
    xt = torch.from_numpy(np.ascontiguousarray(x_train))
    root = RngStream(config.seed)
    last = config.epochs if stop_after_epoch is None else min(config.epochs, stop_after_epoch)
    for epoch in range(state.epoch, last):
        t0 = time.perf_counter()
        order = torch.from_numpy(root.child("shuffle", epoch).permutation(n))
        values = []
        for i, start in enumerate(range(0, n, config.batch_size)):
            xb = xt[order[start:start + config.batch_size]]
            values.append(train_step(state, xb, root.child("train", epoch, i), n) * len(xb))
        train_elbo = sum(values) / n
        val_elbo = evaluate_elbo(state.model, x_val, root.child("val", epoch), n)
        wkl = float(weight_kl(state.model.lam).detach()) if state.model.is_gp else 0.0
        if not np.isfinite(train_elbo):
            raise NumericError(f"non-finite training ELBO at epoch {epoch}", term="train_elbo")
        state.epoch = epoch + 1
        score = val_elbo if np.isfinite(val_elbo) else train_elbo
        if score > state.best_val:
            state.best_val, state.best_epoch, state.best = score, epoch, state.model.snapshot()
        row = {"epoch": epoch, "train_elbo": train_elbo, "val_elbo": val_elbo, "weight_kl": wkl,
               "wall_ms": 1000.0 * (time.perf_counter() - t0)}
        state.history.append(row)
        log.info("epoch %d train %.3f val %.3f", epoch, train_elbo, val_elbo)
        if log_path is not None:
            write_run_log(log_path, state.history)
        if checkpoint_path is not None:
            from .checkpoint import save_checkpoint

            save_checkpoint(state, checkpoint_path)
    return state


def write_run_log(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]])


def best_model(state: TrainState) -> Model:
    """A copy of the model at the best validation epoch (the current one if none recorded)."""
    model = Model(state.config, state.model.data_dim)
    model.load_snapshot(state.best if state.best is not None else state.model.snapshot())
    return model
