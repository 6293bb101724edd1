"""Command-line entry point: ``amir {train, eval, degrade, analyze}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .backbone import AmirConfig, AmirModel
from .checkpoint import load_checkpoint, read_manifest, write_blob
from .config import build_settings, load_raw
from .data import (DEGRADATIONS, Corpus, DataConfig, list_images, parse_tasks, read_grayscale,
                   sample_patch, sample_rng)
from .errors import AmirError, ConfigError, DataError
from .metrics import export_instructions, expert_usage, model_interference, write_instruction_csv
from .training import TrainConfig, evaluate, lr_at, train

log = logging.getLogger("amir")


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    raw = load_raw(args.config) if args.config else {}
    model_o, train_o = {}, {}
    if args.tasks:
        train_o["tasks"] = parse_tasks(args.tasks)
    if args.seed is not None:
        train_o["seed"] = args.seed
    if args.iterations is not None:
        train_o["iterations"] = args.iterations
    if args.disable_srm:
        model_o["use_srm"] = False
    if args.disable_crm:
        model_o["use_crm"] = False
    if args.no_dictionary:
        model_o["use_dictionary"] = False
    overrides = {k: v for k, v in (("model", model_o), ("train", train_o)) if v}
    settings = build_settings(raw, overrides, "desk-scale" if args.desk_scale else None)
    out = Path(args.out)
    result = train(settings.model, settings.train, settings.data, out_dir=out, resume=args.resume)
    print(f"trained {result.iteration} iterations; log and checkpoints in {out}")
    return 0


# ---------------------------------------------------------------------------
# checkpoint helpers

def load_from_checkpoint(directory):
    manifest = read_manifest(directory)
    cfg = manifest.get("config", {})
    model_cfg = AmirConfig.from_dict(cfg.get("model", {}))
    train_cfg = TrainConfig.from_dict(cfg.get("train", {}))
    data_cfg = DataConfig(**cfg.get("data", {}))
    model = AmirModel(model_cfg)
    load_checkpoint(directory, model)
    model.eval()
    return model, train_cfg, data_cfg, manifest


def probe_batches(corpus: Corpus, tasks, split: str, seed: int, size: int, count: int):
    """Fixed per-task (lq, hq) patch batches for analysis."""
    out = {}
    for task in tasks:
        ids = corpus.ids(task, split)
        if not ids:
            raise DataError(f"task {task!r} has no {split} sources")
        rng = np.random.default_rng(seed)
        lqs, hqs = [], []
        for n in range(count):
            s = corpus.sample(task, ids[n % len(ids)], epoch=split, seed=seed)
            p = sample_patch(s, size, rng)
            lqs.append(p.lq)
            hqs.append(p.hq)
        out[task] = (torch.from_numpy(np.stack(lqs)[:, None].astype(np.float32)),
                     torch.from_numpy(np.stack(hqs)[:, None].astype(np.float32)))
    return out


def cmd_eval(args) -> int:
    model, train_cfg, data_cfg, _ = load_from_checkpoint(args.checkpoint)
    corpus = Corpus(data_cfg, train_cfg.tasks)
    report = evaluate(model, corpus, train_cfg.tasks, args.split, train_cfg.seed)
    payload = {"split": args.split, "checkpoint": str(args.checkpoint), **report.to_dict()}
    Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(json.dumps(report.average))
    return 0


def cmd_analyze(args) -> int:
    model, train_cfg, data_cfg, manifest = load_from_checkpoint(args.checkpoint)
    corpus = Corpus(data_cfg, train_cfg.tasks)
    batches = probe_batches(corpus, train_cfg.tasks, args.split, train_cfg.seed,
                            train_cfg.patch_size, args.samples)
    if args.what == "interference":
        step = args.step_size
        if step is None:
            it = min(int(manifest.get("iteration", 0)), train_cfg.iterations)
            step = lr_at(it, train_cfg.iterations, train_cfg.lr_max, train_cfg.lr_min)
        matrix = model_interference(model, batches, args.block, step)
        matrix.to_csv(args.out)
    elif args.what == "experts":
        if not model.spatial_routers():
            raise ConfigError("checkpoint has no spatial routers to analyse")
        stats = expert_usage(model, {t: [lq] for t, (lq, _) in batches.items()})
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["task", "srm", "expert", "top1_freq", "top2_freq"])
            w.writeheader()
            w.writerows(stats.rows())
        print(json.dumps(stats.paths()))
    else:
        samples = [(t, lq[i:i + 1]) for t, (lq, _) in batches.items() for i in range(lq.shape[0])]
        write_instruction_csv(export_instructions(model, samples), args.out)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# degrade

def degrade_directory(input_dir, task: str, out_dir, params: dict, seed: int) -> dict:
    """Degrade every PNG in ``input_dir`` and cache lq/hq blobs plus a manifest."""
    if task not in DEGRADATIONS:
        raise ConfigError(f"unknown task {task!r}; known: {sorted(DEGRADATIONS)}")
    deg = DEGRADATIONS[task]
    unknown = set(params) - set(deg.defaults)
    if unknown:
        raise ConfigError(f"parameters {sorted(unknown)} do not apply to task {task!r}")
    effective = {**deg.defaults, **params}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = list_images(input_dir)
    entries = []
    for path in images:
        try:
            hq = read_grayscale(path)
            lq = deg(hq, rng=sample_rng(seed, path.stem, 0), **effective)
        except AmirError:
            raise
        except Exception as exc:  # unreadable or unsupported image
            log.warning("skipping %s: %s", path.name, exc)
            continue
        write_blob(out / f"{path.stem}_lq.bin", lq)
        write_blob(out / f"{path.stem}_hq.bin", hq)
        entries.append({"source": path.name, "lq": f"{path.stem}_lq.bin", "hq": f"{path.stem}_hq.bin",
                        "shape": list(hq.shape)})
    if not entries:
        raise DataError(f"no usable images in {input_dir}")
    manifest = {"task": task, "params": effective, "seed": seed, "pairs": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def cmd_degrade(args) -> int:
    params = {}
    for key in ("factor", "sigma", "poisson_scale", "drf", "quantization"):
        v = getattr(args, key)
        if v is not None:
            params[key] = v
    manifest = degrade_directory(args.input, args.task, args.out, params, args.seed)
    print(f"wrote {len(manifest['pairs'])} pairs to {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amir", description="All-in-one routed restoration network.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="TOML (or .json) config file")
    t.add_argument("--tasks", help="comma-separated subset of sr,denoise,synth")
    t.add_argument("--desk-scale", action="store_true", help="use the desk-scale preset")
    t.add_argument("--disable-srm", action="store_true", help="remove spatial routing modules")
    t.add_argument("--disable-crm", action="store_true", help="remove channel routing modules")
    t.add_argument("--no-dictionary", action="store_true", help="use encoder output as the instruction")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--resume", help="checkpoint directory to resume from")
    t.add_argument("--out", default="runs/amir", help="output directory (default: runs/amir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--out", default="metrics.json")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("degrade", help="build a cached lq/hq corpus from PNGs")
    d.add_argument("--input", required=True, help="directory of grayscale PNGs")
    d.add_argument("--task", required=True, choices=sorted(DEGRADATIONS))
    d.add_argument("--out", required=True)
    d.add_argument("--factor", type=int, help="k-space crop factor (sr)")
    d.add_argument("--sigma", type=float, help="Gaussian noise std (denoise)")
    d.add_argument("--poisson-scale", dest="poisson_scale", type=float, help="Poisson scale (denoise)")
    d.add_argument("--drf", type=int, help="dose reduction factor (synth)")
    d.add_argument("--quantization", type=float, help="count quantisation (synth)")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_degrade)

    a = sub.add_parser("analyze", help="routing and interference diagnostics")
    asub = a.add_subparsers(dest="what", required=True)
    for name, default_out, help_ in (("interference", "matrix.csv", "task interference matrix"),
                                     ("experts", "usage.csv", "expert usage and top-1 paths"),
                                     ("instructions", "embeddings.csv", "export instruction vectors")):
        s = asub.add_parser(name, help=help_)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--split", default="test", choices=["train", "val", "test"])
        s.add_argument("--samples", type=int, default=8, help="patches per task")
        s.add_argument("--out", default=default_out)
        if name == "interference":
            s.add_argument("--block", default="second",
                           help="'second', 'last' or a block name such as latent.0")
            s.add_argument("--step-size", dest="step_size", type=float,
                           help="probe step (default: learning rate at the checkpoint)")
        s.set_defaults(func=cmd_analyze)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AmirError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
