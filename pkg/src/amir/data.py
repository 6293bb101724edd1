"""Three-task corpus: degradation operators, synthetic sources, splits and patches.

All images are float64 numpy arrays of shape (H, W) in [0, 1]. Randomness is
drawn from ``numpy.random.Generator`` instances seeded per sample, so results
do not depend on the order in which samples are produced.
"""
from __future__ import annotations

import enum
import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, ShapeError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class TaskId(str, enum.Enum):
    SR = "sr"
    DENOISE = "denoise"
    SYNTH = "synth"

    def __str__(self) -> str:
        return self.value


def parse_tasks(spec) -> List[str]:
    """'sr,denoise' or an iterable of names -> validated list of task names."""
    names = spec.split(",") if isinstance(spec, str) else list(spec)
    names = [str(n).strip().lower() for n in names if str(n).strip()]
    if not names:
        raise ConfigError("tasks must name at least one task")
    for n in names:
        if n not in DEGRADATIONS:
            raise ConfigError(f"unknown task {n!r}; known: {sorted(DEGRADATIONS)}")
    return names


@dataclass
class TaskSample:
    task: str
    lq: np.ndarray
    hq: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        if self.lq.shape != self.hq.shape:
            raise ShapeError(f"lq {self.lq.shape} and hq {self.hq.shape} differ")


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary parts (hash of their repr)."""
    h = hashlib.blake2b(repr(tuple(str(p) for p in parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def sample_rng(seed: int, source_id: str, epoch: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, source_id, epoch))


# ---------------------------------------------------------------------------
# degradation operators

def kspace_mask(shape: Tuple[int, int], factor: int) -> np.ndarray:
    """Boolean mask over the centred spectrum keeping the central (H//f)x(W//f) block."""
    h, w = shape
    bh, bw = h // factor, w // factor
    mask = np.zeros(shape, dtype=bool)
    r0, c0 = h // 2 - bh // 2, w // 2 - bw // 2
    mask[r0:r0 + bh, c0:c0 + bw] = True
    return mask


def degrade_kspace(hq: np.ndarray, factor: int = 4) -> np.ndarray:
    """Keep the central 1/factor^2 of the centred 2D spectrum, zero-fill, invert, take magnitude."""
    hq = np.asarray(hq, dtype=np.float64)
    if hq.ndim != 2:
        raise ShapeError(f"expected a 2D image, got shape {hq.shape}")
    h, w = hq.shape
    if h % 2 or w % 2:
        raise ShapeError(f"k-space cropping needs even H and W, got {h}x{w}")
    if factor < 2 or factor > min(h, w) // 2:
        raise ConfigError(f"factor={factor} must be in [2, {min(h, w) // 2}] for a {h}x{w} image")
    spec = np.fft.fftshift(np.fft.fft2(hq))
    spec[~kspace_mask(hq.shape, factor)] = 0
    out = np.abs(np.fft.ifft2(np.fft.ifftshift(spec)))
    return np.clip(out, 0.0, 1.0)


def degrade_noise(hq: np.ndarray, sigma: float = 0.05, poisson_scale: Optional[float] = 200.0,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Mixed Poisson-Gaussian noise. ``poisson_scale=None`` disables the Poisson part."""
    if sigma < 0:
        raise ConfigError(f"sigma={sigma} must be >= 0")
    if poisson_scale is not None and poisson_scale <= 0:
        raise ConfigError(f"poisson_scale={poisson_scale} must be > 0")
    rng = rng if rng is not None else np.random.default_rng()
    hq = np.asarray(hq, dtype=np.float64)
    lq = hq.copy()
    if poisson_scale is not None:
        lq = rng.poisson(hq * poisson_scale) / poisson_scale
    if sigma > 0:
        lq = lq + rng.normal(0.0, sigma, size=hq.shape)
    return np.clip(lq, 0.0, 1.0)


def degrade_count_thinning(hq: np.ndarray, drf: int = 12, quantization: float = 1e4,
                           rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Low-dose surrogate: Poisson counts at hq*Q, keep each count with prob 1/drf, rescale."""
    if drf < 2:
        raise ConfigError(f"drf={drf} must be >= 2")
    rng = rng if rng is not None else np.random.default_rng()
    hq = np.asarray(hq, dtype=np.float64)
    counts = rng.poisson(hq * quantization)
    kept = rng.binomial(counts, 1.0 / drf)
    return np.clip(kept * (drf / quantization), 0.0, 1.0)


@dataclass
class Degradation:
    fn: Callable
    defaults: dict
    stochastic: bool = True

    def __call__(self, hq, rng=None, **params):
        kwargs = {**self.defaults, **params}
        if self.stochastic:
            kwargs["rng"] = rng
        return self.fn(hq, **kwargs)


DEGRADATIONS: Dict[str, Degradation] = {}


def register_task(name: str, fn: Callable, defaults: dict, stochastic: bool = True) -> None:
    DEGRADATIONS[name] = Degradation(fn, dict(defaults), stochastic)


register_task(TaskId.SR.value, degrade_kspace, {"factor": 4}, stochastic=False)
register_task(TaskId.DENOISE.value, degrade_noise, {"sigma": 0.05, "poisson_scale": 200.0})
register_task(TaskId.SYNTH.value, degrade_count_thinning, {"drf": 12, "quantization": 1e4})


# ---------------------------------------------------------------------------
# patches and splits

def sample_patch(sample: TaskSample, size: int, rng: np.random.Generator) -> TaskSample:
    h, w = sample.hq.shape[-2:]
    if size > min(h, w) or size < 1:
        raise ShapeError(f"patch size {size} does not fit a {h}x{w} image")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    window = (slice(top, top + size), slice(left, left + size))
    return TaskSample(sample.task, sample.lq[window], sample.hq[window], sample.source_id)


def assign_split(source_id: str, seed: int, fractions=(0.8, 0.1, 0.1)) -> str:
    u = derive_seed("split", seed, source_id) / 2.0 ** 64
    edge = 0.0
    for name, frac in zip(SPLITS, fractions):
        edge += frac
        if u < edge:
            return name
    return SPLITS[-1]


def make_splits(source_ids: Sequence[str], seed: int, fractions=(0.8, 0.1, 0.1)) -> Dict[str, List[str]]:
    """Split ids so that every split is nonempty when there are >= 3 ids.

    Assignment is hash based; if a split comes out empty it borrows the id
    with the smallest hash from the largest split, which keeps the result a
    pure function of (ids, seed).
    """
    splits = {s: [] for s in SPLITS}
    for sid in sorted(source_ids):
        splits[assign_split(sid, seed, fractions)].append(sid)
    if len(source_ids) >= len(SPLITS):
        for name in SPLITS:
            if not splits[name]:
                donor = max(SPLITS, key=lambda s: len(splits[s]))
                moved = min(splits[donor], key=lambda sid: derive_seed("split", seed, sid))
                splits[donor].remove(moved)
                splits[name].append(moved)
    return splits


# ---------------------------------------------------------------------------
# synthetic sources: three visually distinct families standing in for modalities

def _grid(size):
    y, x = np.mgrid[0:size, 0:size] / (size - 1) * 2 - 1
    return y, x


def _ellipse(y, x, cy, cx, ry, rx, angle):
    c, s = np.cos(angle), np.sin(angle)
    yy, xx = (y - cy), (x - cx)
    u = (xx * c + yy * s) / rx
    v = (-xx * s + yy * c) / ry
    return (u ** 2 + v ** 2) <= 1.0


def synth_mri(rng: np.random.Generator, size: int) -> np.ndarray:
    """Head-like phantom: nested ellipses plus fine oriented texture."""
    y, x = _grid(size)
    img = np.zeros((size, size))
    head = _ellipse(y, x, 0, 0, rng.uniform(0.75, 0.9), rng.uniform(0.6, 0.75), rng.uniform(-0.2, 0.2))
    img[head] = 0.35
    for _ in range(rng.integers(4, 8)):
        e = _ellipse(y, x, rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.4),
                     rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.25), rng.uniform(0, np.pi))
        img[e & head] = rng.uniform(0.4, 0.9)
    freq = rng.uniform(6, 12) * np.pi
    theta = rng.uniform(0, np.pi)
    texture = 0.08 * np.sin(freq * (x * np.cos(theta) + y * np.sin(theta)))
    img = np.where(head, img + texture, 0.0)
    return np.clip(img, 0.0, 1.0)


def synth_ct(rng: np.random.Generator, size: int) -> np.ndarray:
    """Body cross-section: soft tissue disc, bright bone ring, dark organs."""
    y, x = _grid(size)
    img = np.full((size, size), 0.02)
    ry, rx = rng.uniform(0.6, 0.8), rng.uniform(0.8, 0.95)
    body = _ellipse(y, x, 0, 0, ry, rx, 0)
    img[body] = 0.45
    inner = _ellipse(y, x, 0, 0, ry - 0.06, rx - 0.06, 0)
    img[body & ~inner] = 0.8
    for _ in range(rng.integers(2, 5)):
        e = _ellipse(y, x, rng.uniform(-0.3, 0.3), rng.uniform(-0.5, 0.5),
                     rng.uniform(0.08, 0.2), rng.uniform(0.08, 0.25), rng.uniform(0, np.pi))
        img[e & inner] = rng.uniform(0.2, 0.6)
    spine = _ellipse(y, x, ry - 0.25, 0, 0.08, 0.08, 0)
    img[spine] = 0.95
    return np.clip(img, 0.0, 1.0)


def synth_pet(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-uptake smooth body with a few hot spots."""
    y, x = _grid(size)
    body = np.exp(-((x / rng.uniform(0.5, 0.7)) ** 2 + (y / rng.uniform(0.7, 0.9)) ** 2) ** 2)
    img = 0.12 * body
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(-0.6, 0.6), rng.uniform(-0.4, 0.4)
        r = rng.uniform(0.04, 0.15)
        img += rng.uniform(0.3, 0.8) * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * r ** 2))
    return np.clip(img, 0.0, 1.0)


SYNTHETIC_SOURCES: Dict[str, Callable[[np.random.Generator, int], np.ndarray]] = {
    TaskId.SR.value: synth_mri,
    TaskId.DENOISE.value: synth_ct,
    TaskId.SYNTH.value: synth_pet,
}


# ---------------------------------------------------------------------------
# image IO

def read_grayscale(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale PNG into [0, 1] float64."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=-1) if arr.shape[-1] >= 3 else arr[..., 0]
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32, np.uint32, np.int64):
        return np.clip(arr.astype(np.float64) / 65535.0, 0, 1)
    return np.clip(arr.astype(np.float64), 0, 1)


IMAGE_SUFFIXES = (".png",)


def list_images(directory) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"source directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# ---------------------------------------------------------------------------
# corpus

@dataclass
class DataConfig:
    """Where HQ sources come from and how they are degraded.

    ``source = "synthetic"`` generates ``num_sources`` images per task of
    side ``image_size``. ``source = "directory"`` reads PNGs from
    ``root/<task>`` (root defaults to $AMIR_DATA_DIR) or from ``dirs``.
    """

    source: str = "synthetic"
    root: Optional[str] = None
    dirs: Dict[str, str] = field(default_factory=dict)
    num_sources: int = 60
    image_size: int = 64
    split_seed: int = 0
    params: Dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in ("synthetic", "directory"):
            raise ConfigError(f"data.source={self.source!r} must be 'synthetic' or 'directory'")
        if self.num_sources < 3:
            raise ConfigError(f"data.num_sources={self.num_sources} must be >= 3")
        if self.image_size < 32 or self.image_size % 2:
            raise ConfigError(f"data.image_size={self.image_size} must be even and >= 32")
        for task in self.params:
            if task not in DEGRADATIONS:
                raise ConfigError(f"data.params has unknown task {task!r}")

    def task_params(self, task: str) -> dict:
        return {**DEGRADATIONS[task].defaults, **self.params.get(task, {})}

    def to_dict(self) -> dict:
        return {
            "source": self.source, "root": self.root, "dirs": dict(self.dirs),
            "num_sources": self.num_sources, "image_size": self.image_size,
            "split_seed": self.split_seed, "params": {k: dict(v) for k, v in self.params.items()},
        }


class Corpus:
    """HQ sources per task, their splits, and on-demand degraded pairs."""

    def __init__(self, config: DataConfig, tasks: Sequence[str]):
        self.config = config
        self.tasks = list(tasks)
        self._paths: Dict[str, Dict[str, Path]] = {}
        self._hq: Dict[Tuple[str, str], np.ndarray] = {}
        self._static_lq: Dict[Tuple[str, str], np.ndarray] = {}
        self.splits: Dict[str, Dict[str, List[str]]] = {}
        for task in self.tasks:
            ids = self._discover(task)
            if not ids:
                raise DataError(f"no sources found for task {task!r}")
            self.splits[task] = make_splits(ids, config.split_seed)

    def _discover(self, task: str) -> List[str]:
        cfg = self.config
        if cfg.source == "synthetic":
            return [f"{task}-{i:04d}" for i in range(cfg.num_sources)]
        directory = cfg.dirs.get(task)
        if directory is None:
            root = cfg.root or os.environ.get("AMIR_DATA_DIR")
            if root is None:
                raise DataError(f"no directory for task {task!r}: set data.dirs, data.root or AMIR_DATA_DIR")
            directory = Path(root) / task
        paths = {}
        for p in list_images(directory):
            paths[f"{task}-{p.stem}"] = p
        self._paths[task] = paths
        return list(paths)

    def ids(self, task: str, split: str) -> List[str]:
        return self.splits[task][split]

    def hq(self, task: str, source_id: str) -> np.ndarray:
        key = (task, source_id)
        if key not in self._hq:
            if self.config.source == "synthetic":
                rng = np.random.default_rng(derive_seed("source", self.config.split_seed, source_id))
                img = SYNTHETIC_SOURCES[task](rng, self.config.image_size)
            else:
                img = read_grayscale(self._paths[task][source_id])
                if img.shape[0] % 2 or img.shape[1] % 2:
                    img = img[: img.shape[0] // 2 * 2, : img.shape[1] // 2 * 2]
            self._hq[key] = img
        return self._hq[key]

    def sample(self, task: str, source_id: str, epoch: int = 0, seed: int = 0) -> TaskSample:
        """Degraded pair for a source; the noise realisation depends on (seed, id, epoch)."""
        hq = self.hq(task, source_id)
        deg = DEGRADATIONS[task]
        params = self.config.task_params(task)
        if not deg.stochastic:
            key = (task, source_id)
            if key not in self._static_lq:
                self._static_lq[key] = deg(hq, **params)
            lq = self._static_lq[key]
        else:
            lq = deg(hq, rng=sample_rng(seed, source_id, epoch), **params)
        return TaskSample(task, lq, hq, source_id)


def corpus_manifest(config: DataConfig, tasks: Sequence[str]) -> dict:
    return {"tasks": list(tasks), "data": config.to_dict()}
