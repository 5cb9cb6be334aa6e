"""Binary checkpoints: a JSON manifest followed by little-endian float64 blocks.

Layout::

    b"GPVAECK1" | u64 LE manifest length | manifest (UTF-8 JSON) | payload

The manifest lists every block with its name, shape, byte offset into the
payload and byte length, plus the payload SHA-256. The GP block stores, for
each latent dim j in turn, ``mu_j (p), S_j (p x p), eta_j (p), G_j (p x p)``
where S_j, G_j are log-Cholesky factors (log L_ii on the diagonal).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .gp import GPVarParams
from .nn import AdamState
from .training import Model, TrainConfig, TrainState

MAGIC = b"GPVAECK1"
VERSION = 1


def _lambda_layout(lam: GPVarParams, flat: torch.Tensor) -> np.ndarray:
    blocks = lam.log_cholesky_blocks(flat)
    return torch.cat([t.reshape(-1) for blk in blocks for t in blk]).detach().numpy()


def _lambda_from_layout(arr: np.ndarray, d: int, p: int, diag: bool) -> torch.Tensor:
    per = 2 * p + 2 * p * p
    t = torch.from_numpy(arr.copy())
    blocks = []
    for j in range(d):
        seg = t[j * per:(j + 1) * per]
        mu, S = seg[:p], seg[p:p + p * p].view(p, p)
        eta, G = seg[p + p * p:2 * p + p * p], seg[2 * p + p * p:].view(p, p)
        blocks.append((mu, S, eta, G))
    return GPVarParams.from_log_cholesky_blocks(blocks, diag=diag).params.detach()


def _group_array(model: Model, name: str, flat: torch.Tensor) -> np.ndarray:
    if name == "lambda":
        return _lambda_layout(model.lam, flat)
    return flat.detach().numpy()


def _group_tensor(model: Model, name: str, arr: np.ndarray) -> torch.Tensor:
    if name == "lambda":
        c = model.config
        return _lambda_from_layout(arr, c.d, c.p, c.diag_cov)
    return torch.from_numpy(arr.copy())


def _expected_shapes(config: TrainConfig, data_dim: int) -> dict[str, list[int]]:
    model = Model(config, data_dim)
    shapes = {name: [t.numel()] for name, t in model.groups().items()}
    if model.is_gp:
        shapes["lambda"] = [config.d, 2 * config.p + 2 * config.p * config.p]
    return shapes


def save_checkpoint(state: TrainState, path) -> None:
    """Write atomically (temp file + rename) so a crash never leaves a partial checkpoint."""
    model = state.model
    arrays: list[tuple[str, np.ndarray, list[int]]] = []
    shapes = _expected_shapes(model.config, model.data_dim)
    for name, flat in model.groups().items():
        arrays.append((f"params/{name}", _group_array(model, name, flat), shapes[name]))
    for name, st in state.adam.items():
        if st.m is not None:
            arrays.append((f"adam_m/{name}", st.m.numpy(), [st.m.numel()]))
            arrays.append((f"adam_v/{name}", st.v.numpy(), [st.v.numel()]))
    if state.best is not None:
        for name, flat in state.best.items():
            arrays.append((f"best/{name}", _group_array(model, name, flat), shapes[name]))

    blocks, chunks, offset = [], [], 0
    for name, arr, shape in arrays:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        blocks.append({"name": name, "shape": shape, "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    manifest = {
        "version": VERSION,
        "config": model.config.to_dict(),
        "data_dim": model.data_dim,
        "epoch": state.epoch,
        "best_epoch": state.best_epoch,
        "best_val": state.best_val,
        "history": state.history,
        "adam": {k: {"lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps, "step": s.step}
                 for k, s in state.adam.items()},
        "blocks": blocks,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<Q", len(head)) + head + payload)
    os.replace(tmp, path)


def read_manifest(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated header)")
    (n,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + n:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16:16 + n])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from None
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: version {manifest.get('version')} != supported {VERSION}")
    payload = raw[16 + n:]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of {manifest['payload_bytes']} bytes)")
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    return manifest, payload


def load_checkpoint(path, config: TrainConfig | None = None) -> TrainState:
    """Restore a TrainState. With ``config``, every block shape is checked against it first."""
    manifest, payload = read_manifest(path)
    stored = TrainConfig.from_dict(manifest["config"])
    data_dim = manifest["data_dim"]
    cfg = stored if config is None else config
    expected = _expected_shapes(cfg, data_dim)
    found = {b["name"]: b for b in manifest["blocks"]}
    diffs = []
    for name, shape in expected.items():
        blk = found.get(f"params/{name}")
        if blk is None:
            diffs.append(f"params/{name}: missing (expected shape {shape})")
        elif blk["shape"] != shape:
            diffs.append(f"params/{name}: stored shape {blk['shape']} != expected {shape}")
    extra = {b.split("/", 1)[1] for b in found if b.startswith("params/")} - set(expected)
    diffs += [f"params/{name}: present in checkpoint but not in config" for name in sorted(extra)]
    if diffs:
        raise CheckpointError("checkpoint does not match config:\n  " + "\n  ".join(diffs))

    def block(name):
        b = found[name]
        return np.frombuffer(payload, dtype="<f8", count=b["nbytes"] // 8, offset=b["offset"])

    model = Model(cfg, data_dim)
    groups = model.groups()
    with torch.no_grad():
        for name in groups:
            groups[name].copy_(_group_tensor(model, name, block(f"params/{name}")))
    adam = {}
    for name, meta in manifest["adam"].items():
        st = AdamState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"], step=meta["step"])
        if f"adam_m/{name}" in found:
            st.m = torch.from_numpy(block(f"adam_m/{name}").copy())
            st.v = torch.from_numpy(block(f"adam_v/{name}").copy())
        adam[name] = st
    best = None
    if any(k.startswith("best/") for k in found):
        best = {name: _group_tensor(model, name, block(f"best/{name}")) for name in groups}
    return TrainState(model, adam, epoch=manifest["epoch"], best=best, best_epoch=manifest["best_epoch"],
                      best_val=manifest["best_val"], history=manifest["history"])
