"""Command-line entry point: ``gpvae {train,eval,gap,uncertainty,bench} --config run.json``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .baselines import amortization_gap, sa_refine
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, build_dataset, parse_config
from .errors import CheckpointError, ConfigError, ContractError, FormatError, NumericError
from .evaluation import (GridSpec, bench_inference, iwae_dataset, uncertainty_study, write_iwae_csv,
                         write_json)
from .prob import RngStream
from .training import best_model, train, write_run_log

log = logging.getLogger("gpvae")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())
    (out / "seed").write_text(f"{cfg.seed}\n")
    return out


def _trained(cfg: RunConfig):
    path = cfg.checkpoint_path
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path} (run `train` first or set \"checkpoint\")")
    state = load_checkpoint(path, cfg.model)
    return best_model(state)


def _test_inputs(cfg: RunConfig) -> np.ndarray:
    x = build_dataset(cfg).test
    if cfg.eval.max_test:
        x = x[:cfg.eval.max_test]
    if len(x) == 0:
        raise ContractError("test split is empty")
    return x


def cmd_train(cfg: RunConfig, resume: bool = False) -> dict:
    out = _out_dir(cfg)
    ds = build_dataset(cfg)
    state = None
    if resume and cfg.checkpoint_path.exists():
        state = load_checkpoint(cfg.checkpoint_path, cfg.model)
        log.info("resuming from epoch %d", state.epoch)
    state = train(ds, cfg.model, state, log_path=out / "train_log.csv", checkpoint_path=cfg.checkpoint_path)
    # also covers epochs=0, where the loop never writes one
    save_checkpoint(state, cfg.checkpoint_path)
    write_run_log(out / "train_log.csv", state.history)
    return {"epochs": state.epoch, "best_epoch": state.best_epoch, "best_val": state.best_val}


def cmd_eval(cfg: RunConfig) -> dict:
    model = _trained(cfg)
    out = _out_dir(cfg)
    x = _test_inputs(cfg)
    rows = iwae_dataset(model.encode, model.decoder, x, cfg.eval.K, RngStream(cfg.seed).child("eval"),
                        cfg.eval.batch_size)
    write_iwae_csv(out / "eval_iwae.csv", rows, cfg.eval.K)
    vals = np.concatenate([r["values"] for r in rows])
    summary = {"K": cfg.eval.K, "n": int(len(vals)), "mean_iwae": float(vals.mean()),
               "stderr": float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else None}
    write_json(out / "eval_summary.json", summary)
    return summary


def cmd_gap(cfg: RunConfig) -> dict:
    model = _trained(cfg)
    out = _out_dir(cfg)
    e = cfg.eval
    rep = amortization_gap(_test_inputs(cfg), model.encode, model.decoder, RngStream(cfg.seed).child("gap"),
                           steps=e.svi_steps, step_size=e.svi_step_size, decay=e.svi_decay,
                           n_eval=e.gap_eval_samples, batch_size=e.batch_size)
    rep.write_csv(out / "gap.csv")
    worse = int((~np.isfinite(rep.elbo_svi) | (rep.elbo_svi < rep.elbo_amortized)).sum())
    if worse:
        log.warning("SVI ended below the amortized ELBO on %d of %d instances; eval.svi_step_size may be too "
                    "large for this model", worse, len(rep.gap))
    summary = {"n": int(len(rep.gap)), "mean_gap": rep.mean, "stderr": rep.stderr}
    write_json(out / "gap_summary.json", summary)
    return summary


def cmd_uncertainty(cfg: RunConfig) -> dict:
    model = _trained(cfg)
    out = _out_dir(cfg)
    x = _test_inputs(cfg)[:cfg.eval.n_instances]
    spec = GridSpec(-cfg.eval.grid_bound, cfg.eval.grid_bound, cfg.eval.grid_resolution)
    study = uncertainty_study(model, x, spec, grid_dir=out / "grids")
    study.write_csv(out / "uncertainty.csv")
    summary = study.summary()
    write_json(out / "uncertainty_summary.json", summary)
    return summary


def cmd_bench(cfg: RunConfig) -> dict:
    model = _trained(cfg)
    out = _out_dir(cfg)
    x = _test_inputs(cfg)
    e = cfg.eval
    rng = RngStream(cfg.seed).child("bench")
    methods = [("vae", 0, lambda xb: model.base(xb))]
    if model.is_gp:
        methods.append(("gpvae", 0, lambda xb: model.encode(xb)))
    for k in e.sa_steps:
        methods.append(("sa", k, lambda xb, k=k: sa_refine(xb, model.encoder, model.decoder, k, rng, e.sa_step_size)))
    rows = []
    for name, k, fn in methods:
        infer = torch.no_grad()(fn) if name != "sa" else fn
        res = bench_inference(infer, x, e.batch_size, e.bench_repeats)
        rows.append({"method": name, "k": k, "mean_ms": res.mean_ms, "spread": res.spread,
                     "per_batch_ms": res.per_batch_ms})
    with open(out / "timing.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "k", "batch_size", "mean_ms", "spread"])
        for r in rows:
            w.writerow([r["method"], r["k"], e.batch_size, repr(r["mean_ms"]), repr(r["spread"])])
    summary = {r["method"] + (f"_{r['k']}" if r["method"] == "sa" else ""): r["mean_ms"] for r in rows}
    write_json(out / "timing_summary.json", summary)
    return summary


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gap": cmd_gap, "uncertainty": cmd_uncertainty,
            "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gpvae", description=__doc__)
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out-dir", help="override out_dir from the config")
    ap.add_argument("--checkpoint", help="override the checkpoint path")
    ap.add_argument("--seed", type=int, help="override the seed (model seed included)")
    ap.add_argument("--resume", action="store_true", help="train: continue from an existing checkpoint")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve(args) -> RunConfig:
    try:
        raw = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.config}: invalid JSON ({e})") from None
    if args.seed is not None and isinstance(raw, dict):
        raw["seed"] = args.seed
        raw.setdefault("model", {})["seed"] = args.seed
    cfg = parse_config(raw)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if args.checkpoint:
        cfg.checkpoint = args.checkpoint
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve(args)
        summary = cmd_train(cfg, args.resume) if args.command == "train" else COMMANDS[args.command](cfg)
    except (ConfigError, CheckpointError, FormatError, ContractError, NumericError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
