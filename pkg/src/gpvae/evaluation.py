"""IWAE estimates, 2-D posterior grids, the uncertainty study and inference timing."""
from __future__ import annotations

import csv
import json
import math
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy.stats import spearmanr

from .errors import ContractError, NumericError
from .model import Decoder, log_lik, log_prior
from .prob import DiagGaussian, RngStream, as_tensor, reparam_sample


def iwae(x, q: DiagGaussian, dec: Decoder, K: int, rng: RngStream) -> torch.Tensor:
    """log (1/K) sum_k p(x, z_k) / q(z_k | x) with z_k ~ q, one value per row of x."""
    if K < 1:
        raise ContractError("K must be >= 1")
    z = reparam_sample(q, rng, K)
    log_w = log_lik(x, z, dec) + log_prior(z) - q.log_prob(z)
    if bool(torch.isneginf(log_w).all(0).any()) or bool(torch.isnan(log_w).any()):
        raise NumericError("importance weights are all zero or NaN", term="log_weights")
    return torch.logsumexp(log_w, 0) - math.log(K)


@torch.no_grad()
def iwae_dataset(encode: Callable, dec: Decoder, x: np.ndarray, K: int, rng: RngStream,
                 batch_size: int = 128) -> list[dict]:
    """Per-batch IWAE rows ``{batch, n, mean_iwae}`` over ``x``."""
    rows = []
    for i, start in enumerate(range(0, len(x), batch_size)):
        xb = torch.from_numpy(np.ascontiguousarray(x[start:start + batch_size]))
        vals = iwae(xb, encode(xb), dec, K, rng.child("batch", i))
        rows.append({"batch": i, "n": len(xb), "mean_iwae": float(vals.mean()), "values": vals.numpy()})
    return rows


def write_iwae_csv(path, rows: list[dict], K: int) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["batch", "n", "K", "mean_iwae"])
        for r in rows:
            w.writerow([r["batch"], r["n"], K, repr(r["mean_iwae"])])


@dataclass
class GridSpec:
    lo: float = -6.0
    hi: float = 6.0
    resolution: int = 200

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / self.resolution

    @property
    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.resolution) + 0.5) * self.step

    def points(self) -> np.ndarray:
        """Cell centers, (resolution^2, 2); the first coordinate indexes rows of the table."""
        a, b = np.meshgrid(self.centers, self.centers, indexing="ij")
        return np.stack([a.ravel(), b.ravel()], axis=1)


@dataclass
class Grid2D:
    """Normalized log density on a square grid: sum(exp(table)) * cell_area == 1."""

    spec: GridSpec
    table: np.ndarray

    @property
    def cell_area(self) -> float:
        return self.spec.step ** 2

    def probs(self) -> np.ndarray:
        return np.exp(self.table) * self.cell_area

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        w = self.probs().ravel()
        pts = self.spec.points()
        mean = w @ pts
        centered = pts - mean
        return mean, (centered * w[:, None]).T @ centered

    def export(self, path) -> None:
        """Header (magic, lo, hi, resolution) then the table as row-major little-endian float64."""
        s = self.spec
        with open(path, "wb") as f:
            f.write(b"GPGRID01" + struct.pack("<ddI", s.lo, s.hi, s.resolution))
            f.write(np.ascontiguousarray(self.table, dtype="<f8").tobytes())

    @classmethod
    def read(cls, path) -> "Grid2D":
        raw = Path(path).read_bytes()
        if raw[:8] != b"GPGRID01":
            raise ContractError(f"{path}: not a grid export")
        lo, hi, res = struct.unpack("<ddI", raw[8:28])
        table = np.frombuffer(raw, dtype="<f8", offset=28).reshape(res, res)
        return cls(GridSpec(lo, hi, res), table.copy())


def normalize_log_table(raw: np.ndarray, spec: GridSpec) -> np.ndarray:
    m = raw.max()
    return raw - (m + np.log(np.exp(raw - m).sum())) - np.log(spec.step ** 2)


@torch.no_grad()
def true_posterior_grids(X, dec: Decoder, spec: GridSpec = GridSpec(), chunk: int = 4096) -> list[Grid2D]:
    """p(z | x) on the grid for every row of X, via log p(x|z) + log p(z) normalized per row.

    The decoder is evaluated once per grid point and shared across rows.
    """
    if dec.latent_dim != 2:
        raise ContractError(f"posterior grids need a 2-D latent space, decoder has d={dec.latent_dim}")
    X = as_tensor(np.atleast_2d(np.asarray(X)) if not isinstance(X, torch.Tensor) else X.reshape(-1, X.shape[-1]))
    pts = torch.from_numpy(spec.points())
    s2 = dec.sigma2_x
    xx = (X ** 2).sum(-1)
    raws = []
    for start in range(0, len(pts), chunk):
        z = pts[start:start + chunk]
        g = dec.mean(z)
        sq = xx[None, :] - 2 * g @ X.T + (g ** 2).sum(-1)[:, None]
        ll = -0.5 * X.shape[-1] * math.log(2 * math.pi * s2) - sq / (2 * s2)
        raws.append((ll + log_prior(z)[:, None]).numpy())
    raw = np.concatenate(raws, 0).T.reshape(len(X), spec.resolution, spec.resolution)
    return [Grid2D(spec, normalize_log_table(r, spec)) for r in raw]


def true_posterior_grid(x, dec: Decoder, spec: GridSpec = GridSpec()) -> Grid2D:
    return true_posterior_grids(as_tensor(x).reshape(1, -1), dec, spec)[0]


def gaussian_log_density(pts: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(cov)
    sol = np.linalg.solve(L, (pts - mean).T)
    return -0.5 * (sol ** 2).sum(0) - np.log(np.diag(L)).sum() - 0.5 * len(mean) * math.log(2 * math.pi)


def non_gaussianity(grid: Grid2D) -> float:
    """KL(grid density || its moment-matched full-covariance Gaussian), by quadrature."""
    mean, cov = grid.moments()
    w = grid.probs().ravel()
    t = grid.table.ravel()
    ref = gaussian_log_density(grid.spec.points(), mean, cov)
    mask = w > 0
    return max(float((w[mask] * (t[mask] - ref[mask])).sum()), 0.0)


NG_ROUNDOFF = 1e-10


@dataclass
class UncertaintyStudy:
    uncertainty: np.ndarray
    unc_f: np.ndarray
    unc_h: np.ndarray
    non_gaussianity: np.ndarray

    @property
    def spearman(self) -> float:
        """Rank correlation; NaN when either column is constant (undefined).

        Non-Gaussianity values spread by less than ``NG_ROUNDOFF`` are treated as
        equal: that is quadrature round-off, and ranking it would be noise.
        """
        if np.ptp(self.uncertainty) == 0 or np.ptp(self.non_gaussianity) <= NG_ROUNDOFF:
            return float("nan")
        return float(spearmanr(self.uncertainty, self.non_gaussianity).statistic)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["instance", "uncertainty", "unc_f", "unc_h", "non_gaussianity"])
            for i in range(len(self.uncertainty)):
                w.writerow([i] + [repr(float(a[i])) for a in
                                  (self.uncertainty, self.unc_f, self.unc_h, self.non_gaussianity)])

    def summary(self) -> dict:
        rho = self.spearman
        return {"n": int(len(self.uncertainty)), "spearman": None if math.isnan(rho) else rho,
                "status": "undefined" if math.isnan(rho) else "ok"}


@torch.no_grad()
def uncertainty_study(model, X: np.ndarray, spec: GridSpec = GridSpec(), grid_dir=None) -> UncertaintyStudy:
    """Uncertainty gauge vs non-Gaussianity of the grid posterior, per test instance."""
    if not model.is_gp or model.config.d != 2:
        raise ContractError("the uncertainty study needs a gpvae model with d = 2")
    xt = torch.from_numpy(np.ascontiguousarray(X))
    stats = model.stats(xt)
    grids = true_posterior_grids(xt, model.decoder, spec)
    if grid_dir is not None:
        grid_dir = Path(grid_dir)
        grid_dir.mkdir(parents=True, exist_ok=True)
        for i, g in enumerate(grids):
            g.export(grid_dir / f"grid_{i:04d}.bin")
    return UncertaintyStudy(stats.uncertainty.numpy(), stats.unc_f.numpy(), stats.unc_h.numpy(),
                            np.array([non_gaussianity(g) for g in grids]))


@dataclass
class BenchResult:
    per_batch_ms: list[float]

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.per_batch_ms))

    @property
    def spread(self) -> float:
        """(max - min) / mean across repetitions."""
        return float(np.ptp(self.per_batch_ms) / self.mean_ms)


def bench_inference(infer: Callable, X: np.ndarray, batch_size: int = 128, repeats: int = 5,
                    warmup: int = 1) -> BenchResult:
    """Mean per-batch wall time of ``infer`` over all test batches, repeated ``repeats`` times.

    Batches are materialized as tensors beforehand so only inference is timed.
    """
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        batches = [torch.from_numpy(np.ascontiguousarray(X[s:s + batch_size]))
                   for s in range(0, len(X), batch_size)]
        for _ in range(warmup):
            infer(batches[0])
        per_batch = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            for xb in batches:
                infer(xb)
            per_batch.append(1000.0 * (time.perf_counter() - t0) / len(batches))
        return BenchResult(per_batch)
    finally:
        torch.set_num_threads(threads)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
