import math

import numpy as np
import pytest
import torch
from scipy import stats

from amir.backbone import AmirConfig
from amir.data import Corpus, DataConfig
from amir.errors import ConfigError, ShapeError
from amir.routing import sparse_top_k
from amir.training import (TrainConfig, evaluate, lr_at, sample_task_batch, task_frequencies,
                           total_loss, train)

SMALL_MODEL = AmirConfig(channels=8, blocks=(1, 1, 1, 1), refinement_blocks=1)
SMALL_DATA = DataConfig(num_sources=6, image_size=32)


def small_train(**kw):
    base = dict(patch_size=32, batch_size=2, iterations=6, val_every=3, seed=1)
    return TrainConfig(**{**base, **kw})


def test_loss_examples():
    x = torch.rand(1, 1, 8, 8)
    uniform = sparse_top_k(torch.full((16, 4), 0.25), 4)
    assert total_loss(x, x, [uniform]).total.item() == 0
    assert total_loss(x + 0.1, x, gamma=0).total.item() == pytest.approx(0.1, abs=1e-6)
    # importance (3, 1) has CV^2 = 0.25
    d = sparse_top_k(torch.tensor([[0.75, 0.25]] * 4), 2)
    terms = total_loss(x + 0.1, x, [d], gamma=0.01)
    assert terms.balance.item() == pytest.approx(0.25)
    assert terms.total.item() == pytest.approx(0.1025, abs=1e-6)
    with pytest.raises(ShapeError):
        total_loss(x, x[..., :4])


def test_lr_schedule():
    assert lr_at(0, 1000) == pytest.approx(2e-4)
    assert lr_at(1000, 1000) == pytest.approx(1e-6)
    assert lr_at(500, 1000) == pytest.approx(1.005e-4)
    lrs = [lr_at(t, 100) for t in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ConfigError):
        lr_at(1001, 1000)
    with pytest.raises(ConfigError):
        lr_at(-1, 1000)


def test_train_config_validation():
    with pytest.raises(ConfigError, match="lr_min"):
        TrainConfig(lr_min=1e-3, lr_max=1e-4)
    with pytest.raises(ConfigError, match="gamma"):
        TrainConfig(gamma=-1)
    with pytest.raises(ConfigError):
        TrainConfig(tasks=[])
    assert TrainConfig(iterations=200_000).validation_interval == 2000
    assert TrainConfig(iterations=2000).validation_interval == 100


def test_task_frequencies_uniform():
    counts = task_frequencies(["sr", "denoise", "synth"], seed=0, n=30000)
    for c in counts.values():
        assert abs(c / 30000 - 1 / 3) < 0.02
    assert stats.chisquare(list(counts.values())).pvalue > 1e-3


def test_batches_single_task_and_deterministic():
    corpus = Corpus(SMALL_DATA, ["sr", "denoise", "synth"])
    a = sample_task_batch(corpus, ["sr", "denoise", "synth"], 7, 0, 3, 32)
    b = sample_task_batch(corpus, ["sr", "denoise", "synth"], 7, 0, 3, 32)
    assert a.task == b.task and torch.equal(a.lq, b.lq) and torch.equal(a.hq, b.hq)
    assert all(s.startswith(a.task) for s in a.source_ids)
    only = Corpus(SMALL_DATA, ["synth"])
    assert {sample_task_batch(only, ["synth"], i, 0, 1, 32).task for i in range(20)} == {"synth"}


def test_train_logs_and_checkpoints(tmp_path):
    result = train(SMALL_MODEL, small_train(), SMALL_DATA, out_dir=tmp_path)
    assert result.iteration == 6 and len(result.log) == 6
    assert "sr_psnr" in result.log[2] and "sr_psnr" not in result.log[0]
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("iteration,lr,l1,balance,total,sr_psnr,sr_ssim,sr_rmse")
    assert (tmp_path / "ckpt_0000006" / "manifest.json").is_file()


def test_runs_reproducible_and_resume_bit_exact(tmp_path):
    cfg = small_train(checkpoint_every=3)
    full = train(SMALL_MODEL, cfg, SMALL_DATA, out_dir=tmp_path / "a")
    again = train(SMALL_MODEL, cfg, SMALL_DATA)
    assert full.log == again.log
    resumed = train(SMALL_MODEL, cfg, SMALL_DATA, resume=tmp_path / "a" / "ckpt_0000003")
    assert resumed.log == full.log
    for (n, p), (_, q) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        assert torch.equal(p, q), n


@pytest.mark.parametrize("flags", [{"use_srm": False}, {"use_crm": False}, {"use_dictionary": False}])
def test_ablation_variants_train(flags):
    cfg = AmirConfig(**{**SMALL_MODEL.to_dict(), **flags})
    result = train(cfg, small_train(iterations=3), SMALL_DATA, validate=False)
    assert all(math.isfinite(r["total"]) for r in result.log)


def test_task_subset_and_evaluate():
    result = train(SMALL_MODEL, small_train(tasks=["sr", "synth"], iterations=2), SMALL_DATA)
    report = evaluate(result.model, Corpus(SMALL_DATA, ["sr", "synth"]), ["sr", "synth"], "test")
    assert set(report.per_task) == {"sr", "synth"}
    assert all(np.isfinite(v) for v in report.average.values())


def test_non_finite_loss_aborts_with_dump(tmp_path):
    from amir.errors import NumericalError
    # an infinite learning rate wrecks the parameters after the first step
    with pytest.raises(NumericalError, match="iteration 1") as info:
        train(SMALL_MODEL, small_train(lr_max=float("inf"), lr_min=0.0, iterations=3), SMALL_DATA,
              out_dir=tmp_path, validate=False)
    assert "nonfinite_batch_1" in str(info.value)
    assert (tmp_path / "nonfinite_batch_1" / "lq.bin").is_file()
