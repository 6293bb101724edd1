"""Multi-task training: composite loss, cosine schedule, task batching, checkpoints."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import torch

from .backbone import AmirConfig, AmirModel, restore_image
from .checkpoint import load_checkpoint, save_checkpoint, write_blob
from .data import Corpus, DataConfig, derive_seed, parse_tasks, sample_patch
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .metrics import mean_metrics, MetricsReport
from .routing import GateDecision, balance_loss, cv_squared, expert_importance

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    tasks: List[str] = field(default_factory=lambda: ["sr", "denoise", "synth"])
    patch_size: int = 128
    batch_size: int = 8
    iterations: int = 200_000
    lr_max: float = 2e-4
    lr_min: float = 1e-6
    gamma: float = 0.01
    seed: int = 0
    val_every: Optional[int] = None
    checkpoint_every: Optional[int] = None
    val_images: Optional[int] = None

    def __post_init__(self):
        self.tasks = parse_tasks(self.tasks)
        self.validate()

    def validate(self) -> None:
        def bad(key, value, constraint):
            raise ConfigError(f"train.{key}={value!r} violates {constraint}")

        if self.patch_size < 32 or self.patch_size % 8:
            bad("patch_size", self.patch_size, "patch_size >= 32 and divisible by 8")
        if self.batch_size < 1:
            bad("batch_size", self.batch_size, "batch_size >= 1")
        if self.iterations < 1:
            bad("iterations", self.iterations, "iterations >= 1")
        if not 0 < self.lr_max:
            bad("lr_max", self.lr_max, "lr_max > 0")
        if not 0 <= self.lr_min < self.lr_max:
            bad("lr_min", self.lr_min, f"0 <= lr_min < lr_max ({self.lr_max})")
        if self.gamma < 0:
            bad("gamma", self.gamma, "gamma >= 0")
        for key in ("val_every", "checkpoint_every", "val_images"):
            v = getattr(self, key)
            if v is not None and v < 1:
                bad(key, v, f"{key} >= 1")

    @property
    def validation_interval(self) -> int:
        return self.val_every or max(self.iterations // 100, 100)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


class LossTerms(NamedTuple):
    total: torch.Tensor
    l1: torch.Tensor
    balance: torch.Tensor


def total_loss(pred: torch.Tensor, target: torch.Tensor,
               decisions: Sequence = (), gamma: float = 0.01) -> LossTerms:
    """Mean absolute error plus gamma times the balance term.

    ``decisions`` holds one entry per spatial router (a GateDecision or a list
    of them); the balance term is the sum of each router's importance CV^2.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    l1 = (pred - target).abs().mean()
    if isinstance(decisions, GateDecision):
        decisions = [decisions]
    if decisions:
        balance = sum(balance_loss(d) for d in decisions)
    else:
        balance = l1.new_zeros(())
    return LossTerms(l1 + gamma * balance, l1, balance)


def lr_at(t: int, total: int, lr_max: float = 2e-4, lr_min: float = 1e-6) -> float:
    """Cosine annealing from lr_max at t=0 to lr_min at t=total."""
    if not 0 <= t <= total:
        raise ConfigError(f"iteration {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t / total))


class TaskBatch(NamedTuple):
    task: str
    lq: torch.Tensor
    hq: torch.Tensor
    source_ids: List[str]


def sample_task_batch(corpus: Corpus, tasks: Sequence[str], iteration: int, seed: int,
                      batch_size: int, patch_size: int, split: str = "train") -> TaskBatch:
    """One task per batch, drawn uniformly; a pure function of (seed, iteration)."""
    if not tasks:
        raise ConfigError("no tasks to sample from")
    rng = np.random.default_rng(derive_seed("batch", seed, iteration))
    task = tasks[int(rng.integers(len(tasks)))]
    ids = corpus.ids(task, split)
    if not ids:
        raise DataError(f"task {task!r} has no {split} sources")
    lqs, hqs, chosen = [], [], []
    for slot in range(batch_size):
        sid = ids[int(rng.integers(len(ids)))]
        sample = corpus.sample(task, sid, epoch=f"{iteration}.{slot}", seed=seed)
        patch = sample_patch(sample, patch_size, rng)
        lqs.append(patch.lq)
        hqs.append(patch.hq)
        chosen.append(sid)
    lq = torch.from_numpy(np.stack(lqs)[:, None].astype(np.float32))
    hq = torch.from_numpy(np.stack(hqs)[:, None].astype(np.float32))
    return TaskBatch(task, lq, hq, chosen)


def task_frequencies(tasks: Sequence[str], seed: int, n: int) -> Dict[str, int]:
    """Count which task each of the first n batches would draw (no data loaded)."""
    counts = {t: 0 for t in tasks}
    for it in range(n):
        rng = np.random.default_rng(derive_seed("batch", seed, it))
        counts[tasks[int(rng.integers(len(tasks)))]] += 1
    return counts


@torch.no_grad()
def evaluate(model: AmirModel, corpus: Corpus, tasks: Sequence[str], split: str = "val",
             seed: int = 0, limit: Optional[int] = None) -> MetricsReport:
    """Restore every image of a split (clamped to [0, 1]) and report per-task metrics."""
    was_training = model.training
    model.eval()
    per_task = {}
    for task in tasks:
        ids = corpus.ids(task, split)[:limit]
        if not ids:
            raise DataError(f"task {task!r} has no {split} sources")
        pairs = []
        for sid in ids:
            s = corpus.sample(task, sid, epoch=split, seed=seed)
            x = torch.from_numpy(s.lq.astype(np.float32))
            out = restore_image(model, x).clamp(0, 1).double().numpy()
            pairs.append((out, s.hq))
        per_task[task] = mean_metrics(pairs)
    model.train(was_training)
    return MetricsReport(per_task)


@torch.no_grad()
def importance_cv2(model: AmirModel, corpus: Corpus, tasks: Sequence[str], split: str = "val",
                   seed: int = 0) -> List[float]:
    """Per spatial router: CV^2 of expert importance over every token of a split's images."""
    was_training = model.training
    model.eval()
    per_srm: Optional[List[torch.Tensor]] = None
    for task in tasks:
        for sid in corpus.ids(task, split):
            s = corpus.sample(task, sid, epoch=split, seed=seed)
            x = torch.from_numpy(s.lq.astype(np.float32))[None, None]
            _, trace = model.forward_with_routing(x)
            imp = [expert_importance(d) for d in trace.decisions]
            per_srm = imp if per_srm is None else [a + b for a, b in zip(per_srm, imp)]
    model.train(was_training)
    return [float(cv_squared(v)) for v in (per_srm or [])]


def log_columns(tasks: Sequence[str]) -> List[str]:
    cols = ["iteration", "lr", "l1", "balance", "total"]
    for t in tasks:
        cols += [f"{t}_psnr", f"{t}_ssim", f"{t}_rmse"]
    return cols


def write_log(rows: List[dict], tasks: Sequence[str], path) -> None:
    cols = log_columns(tasks)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, restval="")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


@dataclass
class TrainResult:
    model: AmirModel
    optimizer: torch.optim.Optimizer
    iteration: int
    log: List[dict]


def make_optimizer(model: torch.nn.Module, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8,
                            weight_decay=0.0, foreach=False)


def _dump_batch(out_dir, iteration, batch: TaskBatch) -> Path:
    d = Path(out_dir) / f"nonfinite_batch_{iteration}"
    d.mkdir(parents=True, exist_ok=True)
    write_blob(d / "lq.bin", batch.lq)
    write_blob(d / "hq.bin", batch.hq)
    (d / "sources.txt").write_text("\n".join([batch.task, *batch.source_ids]))
    return d


def full_config(model_cfg: AmirConfig, train_cfg: TrainConfig, data_cfg: DataConfig) -> dict:
    return {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": data_cfg.to_dict()}


def build_model(model_cfg: AmirConfig, seed: int) -> AmirModel:
    torch.manual_seed(seed)
    return AmirModel(model_cfg)


def train(model_cfg: AmirConfig, train_cfg: TrainConfig, data_cfg: Optional[DataConfig] = None,
          corpus: Optional[Corpus] = None, out_dir=None, resume=None,
          stop_at: Optional[int] = None, validate: bool = True) -> TrainResult:
    """Run the training loop.

    ``stop_at`` ends the run early while keeping the schedule of the full
    ``train_cfg.iterations``. ``resume`` is a checkpoint directory to continue
    from. With ``out_dir`` the metrics log and checkpoints are written there.
    """
    torch.use_deterministic_algorithms(True, warn_only=True)
    data_cfg = data_cfg or DataConfig()
    corpus = corpus or Corpus(data_cfg, train_cfg.tasks)
    cfg_dict = full_config(model_cfg, train_cfg, data_cfg)
    model = build_model(model_cfg, train_cfg.seed)
    optimizer = make_optimizer(model, train_cfg.lr_max)
    start = 0
    rows: List[dict] = []
    if resume is not None:
        manifest = load_checkpoint(resume, model, optimizer)
        start = int(manifest["iteration"])
        rows = list(manifest.get("log", []))

    total = train_cfg.iterations
    end = total if stop_at is None else min(stop_at, total)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    val_every = train_cfg.validation_interval
    model.train()

    def checkpoint(it):
        if out is None:
            return
        save_checkpoint(out / f"ckpt_{it:07d}", model, optimizer, config=cfg_dict, iteration=it,
                        seeds={"seed": train_cfg.seed, "split_seed": data_cfg.split_seed},
                        extra={"log": rows})

    for it in range(start, end):
        lr = lr_at(it, total, train_cfg.lr_max, train_cfg.lr_min)
        for g in optimizer.param_groups:
            g["lr"] = lr
        batch = sample_task_batch(corpus, train_cfg.tasks, it, train_cfg.seed,
                                  train_cfg.batch_size, train_cfg.patch_size)
        try:
            pred, trace = model.forward_with_routing(batch.lq)
            terms = total_loss(pred, batch.hq, trace.decisions, train_cfg.gamma)
            if not torch.isfinite(terms.total):
                raise NumericalError("non-finite loss")
        except NumericalError as exc:
            where = _dump_batch(out, it, batch) if out is not None else None
            raise NumericalError(f"{exc} at iteration {it} (task {batch.task}, "
                                 f"sources {batch.source_ids}); batch dumped to {where}") from exc
        optimizer.zero_grad(set_to_none=True)
        terms.total.backward()
        optimizer.step()

        row = {"iteration": it + 1, "lr": lr, "l1": terms.l1.item(),
               "balance": terms.balance.item(), "total": terms.total.item()}
        if validate and ((it + 1) % val_every == 0 or it + 1 == total):
            report = evaluate(model, corpus, train_cfg.tasks, "val", train_cfg.seed, train_cfg.val_images)
            for t, m in report.per_task.items():
                row.update({f"{t}_psnr": m["psnr"], f"{t}_ssim": m["ssim"], f"{t}_rmse": m["rmse"]})
            log.info("iter %d lr %.3g l1 %.5f val psnr %s", it + 1, lr, row["l1"],
                     {t: round(m["psnr"], 3) for t, m in report.per_task.items()})
        rows.append(row)
        if train_cfg.checkpoint_every and (it + 1) % train_cfg.checkpoint_every == 0:
            checkpoint(it + 1)

    if out is not None:
        checkpoint(end)
        write_log(rows, train_cfg.tasks, out / "metrics.csv")
    return TrainResult(model, optimizer, end, rows)
