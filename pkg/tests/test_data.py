import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from amir.data import (DEGRADATIONS, Corpus, DataConfig, TaskSample, degrade_count_thinning,
                       degrade_kspace, degrade_noise, kspace_mask, make_splits, parse_tasks,
                       sample_patch, sample_rng)
from amir.errors import ConfigError, DataError, ShapeError


def smooth_image(size=64, seed=0):
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size] / size
    img = 0.4 + 0.2 * np.sin(2 * np.pi * (x + rng.random())) * np.cos(2 * np.pi * 2 * y)
    img[size // 4: size // 2, size // 4: size // 2] += 0.3
    return np.clip(img, 0, 1)


# -- k-space ------------------------------------------------------------------

def test_retains_six_and_a_quarter_percent():
    mask = kspace_mask((256, 256), 4)
    assert mask.sum() == 64 * 64
    assert mask.mean() == 0.0625


@pytest.mark.parametrize("shape,factor", [((256, 256), 4), ((64, 96), 2), ((40, 64), 8), ((50, 70), 3)])
def test_retention_count(shape, factor):
    assert kspace_mask(shape, factor).sum() == (shape[0] // factor) * (shape[1] // factor)


def test_constant_image_unchanged():
    img = np.full((64, 64), 0.37)
    assert np.abs(degrade_kspace(img) - img).max() < 1e-6


def test_cosine_in_and_out_of_band():
    x = np.arange(64)
    inside = 0.5 + 0.25 * np.cos(2 * np.pi * 3 * x / 64)[None, :] * np.ones((64, 1))
    assert np.abs(degrade_kspace(inside, 4) - inside).max() < 1e-5
    outside = 0.5 + 0.25 * np.cos(2 * np.pi * 20 * x / 64)[None, :] * np.ones((64, 1))
    assert np.abs(degrade_kspace(outside, 4) - 0.5).max() < 1e-5


def test_kspace_errors():
    with pytest.raises(ShapeError):
        degrade_kspace(np.zeros((63, 64)))
    with pytest.raises(ConfigError):
        degrade_kspace(np.zeros((64, 64)), factor=40)
    with pytest.raises(ConfigError):
        degrade_kspace(np.zeros((64, 64)), factor=1)


# -- noise --------------------------------------------------------------------

def test_noise_disabled_is_identity():
    img = smooth_image()
    assert np.array_equal(degrade_noise(img, sigma=0, poisson_scale=None, rng=np.random.default_rng(0)), img)


def test_gaussian_variance_monte_carlo():
    img = np.full((128, 128), 0.5)
    lq = degrade_noise(img, sigma=0.1, poisson_scale=None, rng=np.random.default_rng(1))
    assert abs(lq.var() / 0.01 - 1) < 0.10


def test_poisson_gaussian_moments():
    # mean hq, variance hq / scale + sigma^2
    img = np.full((256, 256), 0.4)
    lq = degrade_noise(img, sigma=0.05, poisson_scale=200.0, rng=np.random.default_rng(2))
    assert abs(lq.mean() - 0.4) < 0.002
    assert abs(lq.var() / (0.4 / 200 + 0.05 ** 2) - 1) < 0.05


def test_noise_deterministic_per_seed():
    img = smooth_image()
    a = degrade_noise(img, rng=sample_rng(3, "ct-0001", 5))
    b = degrade_noise(img, rng=sample_rng(3, "ct-0001", 5))
    c = degrade_noise(img, rng=sample_rng(3, "ct-0001", 6))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_noise_errors():
    with pytest.raises(ConfigError):
        degrade_noise(np.zeros((8, 8)), sigma=-1)
    with pytest.raises(ConfigError):
        degrade_noise(np.zeros((8, 8)), poisson_scale=0)


# -- count thinning -----------------------------------------------------------

def test_thinning_unbiased():
    img = smooth_image(16)
    rng = np.random.default_rng(3)
    mean = np.mean([degrade_count_thinning(img, 12, rng=rng) for _ in range(1000)], axis=0)
    assert np.abs(mean / img - 1).max() < 0.02


def test_thinning_zero_image():
    assert not degrade_count_thinning(np.zeros((16, 16)), rng=np.random.default_rng(0)).any()


def test_thinning_noise_grows_with_drf():
    img = np.full((128, 128), 0.3)
    v12 = degrade_count_thinning(img, 12, rng=np.random.default_rng(4)).var()
    v2 = degrade_count_thinning(img, 2, rng=np.random.default_rng(4)).var()
    assert v12 > v2
    # variance of the rescaled thinned Poisson count: hq * drf / Q
    assert abs(v12 / (0.3 * 12 / 1e4) - 1) < 0.05


def test_thinning_rejects_small_drf():
    with pytest.raises(ConfigError):
        degrade_count_thinning(np.zeros((4, 4)), drf=1)


def test_severity_ordering():
    img = smooth_image(128)

    def err(lq):
        return np.mean((lq - img) ** 2)

    sr = [err(degrade_kspace(img, f)) for f in (2, 4, 8)]
    dn = [err(degrade_noise(img, s, None, rng=np.random.default_rng(0))) for s in (0.02, 0.05, 0.1)]
    th = [err(degrade_count_thinning(img, d, rng=np.random.default_rng(0))) for d in (2, 4, 12)]
    for seq in (sr, dn, th):
        assert 0 < seq[0] < seq[1] < seq[2]


# -- patches ------------------------------------------------------------------

def test_whole_image_patch():
    s = TaskSample("sr", smooth_image(), smooth_image(seed=1), "x")
    p = sample_patch(s, 64, np.random.default_rng(0))
    assert np.array_equal(p.lq, s.lq) and np.array_equal(p.hq, s.hq)
    with pytest.raises(ShapeError):
        sample_patch(s, 65, np.random.default_rng(0))


def test_patch_coregistered():
    lq = np.zeros((40, 40))
    hq = np.zeros((40, 40))
    lq[17, 23] = hq[17, 23] = 1
    rng = np.random.default_rng(5)
    for _ in range(50):
        p = sample_patch(TaskSample("sr", lq, hq, "x"), 32, rng)
        assert np.array_equal(p.lq, p.hq)


def test_patch_offsets_uniform():
    # encode the offset in the pixel values so the crop reveals it
    size, n = 256, 20000
    rows = np.repeat(np.arange(size, dtype=float)[:, None], size, 1)
    cols = rows.T.copy()
    s = TaskSample("sr", rows, cols, "x")
    rng = np.random.default_rng(6)
    tops, lefts = [], []
    for _ in range(n):
        p = sample_patch(s, 128, rng)
        tops.append(int(p.lq[0, 0]))
        lefts.append(int(p.hq[0, 0]))
    for offsets in (tops, lefts):
        counts = np.bincount(offsets, minlength=129)
        assert len(counts) == 129
        assert stats.chisquare(counts).pvalue > 1e-3
    joint = np.histogram2d(tops, lefts, bins=8, range=[[0, 129], [0, 129]])[0]
    expected = np.outer(np.diff(np.linspace(0, 129, 9)), np.diff(np.linspace(0, 129, 9)))
    assert stats.chisquare(joint.ravel(), expected.ravel() / expected.sum() * n).pvalue > 1e-3


# -- splits and corpus --------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(3, 200), st.integers(0, 10 ** 6))
def test_split_purity(n, seed):
    ids = [f"src-{i}" for i in range(n)]
    splits = make_splits(ids, seed)
    seen = [sid for part in splits.values() for sid in part]
    assert sorted(seen) == sorted(ids)
    assert all(splits.values())
    assert splits == make_splits(list(reversed(ids)), seed)


def test_parse_tasks():
    assert parse_tasks("sr,synth") == ["sr", "synth"]
    with pytest.raises(ConfigError):
        parse_tasks("sr,deblur")
    with pytest.raises(ConfigError):
        parse_tasks("")


def test_registry_has_three_tasks():
    assert sorted(DEGRADATIONS) == ["denoise", "sr", "synth"]


def test_synthetic_corpus():
    corpus = Corpus(DataConfig(num_sources=12, image_size=64), ["sr", "denoise", "synth"])
    for task in corpus.tasks:
        ids = [i for s in ("train", "val", "test") for i in corpus.ids(task, s)]
        assert len(ids) == len(set(ids)) == 12
        s = corpus.sample(task, ids[0], epoch=0, seed=0)
        assert s.lq.shape == s.hq.shape == (64, 64)
        assert 0 <= s.hq.min() and s.hq.max() <= 1
        again = corpus.sample(task, ids[0], epoch=0, seed=0)
        assert np.array_equal(s.lq, again.lq)


def test_directory_corpus(tmp_path):
    from PIL import Image
    for task in ("sr", "denoise"):
        (tmp_path / task).mkdir()
        for i in range(4):
            arr = (smooth_image(32, seed=i) * 65535).astype(np.uint16)
            Image.fromarray(arr).save(tmp_path / task / f"img{i}.png")
    corpus = Corpus(DataConfig(source="directory", root=str(tmp_path)), ["sr", "denoise"])
    sid = corpus.ids("sr", "train")[0]
    hq = corpus.hq("sr", sid)
    assert hq.shape == (32, 32) and hq.max() <= 1
    with pytest.raises(DataError):
        Corpus(DataConfig(source="directory", root=str(tmp_path)), ["synth"])
