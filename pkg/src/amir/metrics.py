"""Restoration metrics, task interference probing and routing statistics."""
from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Sequence

import numpy as np
import torch
from scipy.signal import convolve2d

from .errors import ShapeError

UNDEFINED = float("nan")


def _pair(pred, target):
    pred = np.asarray(pred.detach().cpu() if isinstance(pred, torch.Tensor) else pred, dtype=np.float64)
    target = np.asarray(target.detach().cpu() if isinstance(target, torch.Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ShapeError("empty images")
    return pred, target


def mse(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.mean((pred - target) ** 2))


def rmse(pred, target) -> float:
    return math.sqrt(mse(pred, target))


def psnr(pred, target, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    err = mse(pred, target)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / err)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(pred, target, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully-covered window positions (Gaussian-weighted statistics)."""
    pred, target = _pair(pred, target)
    pred, target = np.squeeze(pred), np.squeeze(target)
    if pred.ndim != 2:
        raise ShapeError(f"ssim expects a single 2D image, got shape {pred.shape}")
    if min(pred.shape) < win_size:
        raise ShapeError(f"image {pred.shape} smaller than the {win_size}x{win_size} window")
    g = gaussian_window(win_size, sigma)

    def filt(a):
        return convolve2d(convolve2d(a, g[None, :], mode="valid"), g[:, None], mode="valid")

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = filt(pred), filt(target)
    sxx = filt(pred * pred) - mx * mx
    syy = filt(target * target) - my * my
    sxy = filt(pred * target) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    per_task: Dict[str, Dict[str, float]]

    @property
    def average(self) -> Dict[str, float]:
        keys = ("psnr", "ssim", "rmse")
        if not self.per_task:
            return {k: UNDEFINED for k in keys}
        return {k: float(np.mean([m[k] for m in self.per_task.values()])) for k in keys}

    def to_dict(self) -> dict:
        return {"per_task": self.per_task, "average": self.average}


def image_metrics(pred, target, data_range: float = 1.0) -> Dict[str, float]:
    return {"psnr": psnr(pred, target, data_range), "ssim": ssim(pred, target, data_range),
            "rmse": rmse(pred, target)}


def mean_metrics(pairs) -> Dict[str, float]:
    """Average per-image metrics over an iterable of (pred, target) pairs."""
    rows = [image_metrics(p, t) for p, t in pairs]
    return {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim", "rmse")}


# ---------------------------------------------------------------------------
# interference

@dataclass
class InterferenceMatrix:
    """values[i][j]: percent of task i's own one-step improvement obtained by stepping on task j."""

    tasks: List[str]
    values: np.ndarray
    block: str
    step_size: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task_i"] + [f"from_{t}" for t in self.tasks])
            for t, row in zip(self.tasks, self.values):
                w.writerow([t] + [f"{v:.6f}" for v in row])
            fh.write(f"# block={self.block} step_size={self.step_size!r}\n")


def interference_matrix(params: Sequence[torch.nn.Parameter],
                        task_losses: Mapping[str, Callable[[], torch.Tensor]],
                        step_size: float, block: str = "") -> InterferenceMatrix:
    """Lookahead interference among tasks restricted to ``params``.

    ``task_losses`` maps task name to a closure evaluating that task's loss
    at the current parameters. For each task j one gradient step of size
    ``step_size`` on L_j is taken on ``params`` only, every L_i is
    re-evaluated, and the parameters are restored exactly. Entries are
    100 * (L_i(theta) - L_i(theta_j)) / (L_i(theta) - L_i(theta_i)); a zero
    denominator gives NaN.
    """
    if step_size <= 0:
        raise ValueError(f"step size must be positive, got {step_size}")
    params = list(params)
    tasks = list(task_losses)
    saved = [p.detach().clone() for p in params]

    with torch.no_grad():
        base = {t: float(task_losses[t]()) for t in tasks}
    grads = {}
    for t in tasks:
        loss = task_losses[t]()
        g = torch.autograd.grad(loss, params, allow_unused=True)
        grads[t] = [torch.zeros_like(p) if gi is None else gi.detach() for p, gi in zip(params, g)]

    after = np.zeros((len(tasks), len(tasks)))
    try:
        for j, tj in enumerate(tasks):
            with torch.no_grad():
                for p, g in zip(params, grads[tj]):
                    p.sub_(step_size * g)
                for i, ti in enumerate(tasks):
                    after[i, j] = float(task_losses[ti]())
                for p, s in zip(params, saved):
                    p.copy_(s)
    finally:
        with torch.no_grad():
            for p, s in zip(params, saved):
                p.copy_(s)

    values = np.full((len(tasks), len(tasks)), UNDEFINED)
    for i, ti in enumerate(tasks):
        own = base[ti] - after[i, i]
        if own == 0:
            continue
        for j in range(len(tasks)):
            values[i, j] = 100.0 if i == j else 100.0 * (base[ti] - after[i, j]) / own
    return InterferenceMatrix(tasks, values, block, step_size)


def model_interference(model, batches: Mapping[str, tuple], block: str,
                       step_size: float) -> InterferenceMatrix:
    """Interference of an AmirModel's L1 losses on per-task (lq, hq) batches at one block.

    Probing runs on a float64 copy so that small steps (late-schedule learning
    rates) are not lost to float32 rounding; ``model`` itself is never touched.
    """
    probe = copy.deepcopy(model).double().eval()
    params = probe.block_parameters(block)

    def closure(lq, hq):
        lq, hq = lq.double(), hq.double()
        return lambda: (probe(lq) - hq).abs().mean()

    losses = {t: closure(lq, hq) for t, (lq, hq) in batches.items()}
    return interference_matrix(params, losses, step_size, block)


# ---------------------------------------------------------------------------
# expert usage and instructions

@dataclass
class ExpertUsageStats:
    """Per SRM and task, selection frequency of each expert as first and second choice."""

    num_experts: int
    top1: Dict[str, List[np.ndarray]] = field(default_factory=dict)
    top2: Dict[str, List[np.ndarray]] = field(default_factory=dict)

    def path(self, task: str) -> List[int]:
        return [int(np.argmax(f)) for f in self.top1[task]]

    def paths(self) -> Dict[str, List[int]]:
        return {t: self.path(t) for t in self.top1}

    def rows(self):
        for task in self.top1:
            for s, freq in enumerate(self.top1[task]):
                second = self.top2[task][s] if task in self.top2 else None
                for e in range(self.num_experts):
                    yield {"task": task, "srm": s + 1, "expert": e,
                           "top1_freq": float(freq[e]),
                           "top2_freq": float(second[e]) if second is not None else UNDEFINED}


def usage_from_decisions(decisions_by_task: Mapping[str, Sequence[Sequence]], num_experts: int) -> ExpertUsageStats:
    """Aggregate gate decisions. ``decisions_by_task[task][srm]`` is a list of GateDecisions."""
    stats = ExpertUsageStats(num_experts)
    for task, per_srm in decisions_by_task.items():
        stats.top1[task] = []
        stats.top2[task] = []
        for decs in per_srm:
            sel = torch.cat([d.selected for d in decs], dim=0)
            for rank, store in ((0, stats.top1), (1, stats.top2)):
                if sel.shape[1] <= rank:
                    continue
                counts = torch.bincount(sel[:, rank], minlength=num_experts).double()
                store[task].append((counts / counts.sum()).numpy())
    return stats


@torch.no_grad()
def expert_usage(model, batches: Mapping[str, Sequence[torch.Tensor]]) -> ExpertUsageStats:
    """Run each task's LQ inputs through a frozen model and tally expert choices per SRM."""
    model.eval()
    num_srm = len(model.spatial_routers())
    collected = {}
    for task, inputs in batches.items():
        per_srm = [[] for _ in range(num_srm)]
        for x in inputs:
            _, trace = model.forward_with_routing(x)
            for s, d in enumerate(trace.decisions):
                per_srm[s].append(d)
        collected[task] = per_srm
    return usage_from_decisions(collected, model.config.num_experts)


@torch.no_grad()
def export_instructions(model, samples: Sequence[tuple]) -> List[list]:
    """One row per (task, lq image): [task, v0, ..., v255]."""
    model.eval()
    rows = []
    for task, lq in samples:
        inst = model.instruction(lq if lq.dim() == 4 else lq.reshape(1, 1, *lq.shape[-2:]))
        if inst is None:
            raise ValueError("model has no instruction network (routing disabled)")
        for vec in inst.vector:
            rows.append([task] + [float(v) for v in vec])
    return rows


def write_instruction_csv(rows, path) -> None:
    dim = len(rows[0]) - 1 if rows else 256
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task"] + [f"i{k}" for k in range(dim)])
        w.writerows(rows)


def cosine_separation(rows) -> tuple:
    """(mean intra-task cosine similarity, mean inter-task cosine similarity) of exported rows."""
    labels = np.array([r[0] for r in rows])
    x = np.array([r[1:] for r in rows], dtype=np.float64)
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    sim = x @ x.T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(rows), dtype=bool)
    return float(sim[same & off].mean()), float(sim[~same].mean())
