import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from amir.backbone import AmirConfig, AmirModel
from amir.checkpoint import load_checkpoint, read_blob, save_checkpoint, write_blob
from amir.errors import DataError
from amir.training import make_optimizer


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=6),
              elements=st.floats(width=32, allow_nan=False)))
def test_blob_round_trip_bit_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("blob") / "x.bin"
    write_blob(path, arr)
    back = read_blob(path)
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()


def test_blob_layout(tmp_path):
    write_blob(tmp_path / "x.bin", np.arange(6, dtype=np.float32).reshape(2, 3))
    raw = (tmp_path / "x.bin").read_bytes()
    assert struct.unpack_from("<4sIII", raw) == (b"AMRT", 1, 2, 0)
    assert struct.unpack_from("<QQ", raw, 16) == (2, 3)
    assert np.array_equal(np.frombuffer(raw[32:], "<f4"), np.arange(6))


def test_blob_rejects_garbage(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"nope" * 8)
    with pytest.raises(DataError):
        read_blob(tmp_path / "bad.bin")
    write_blob(tmp_path / "x.bin", np.zeros(4, np.float32))
    (tmp_path / "x.bin").write_bytes((tmp_path / "x.bin").read_bytes()[:-1])
    with pytest.raises(DataError):
        read_blob(tmp_path / "x.bin")


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    cfg = AmirConfig(channels=8, blocks=(1, 1, 1, 1), refinement_blocks=1)
    model = AmirModel(cfg)
    opt = make_optimizer(model, 1e-3)
    out, trace = model.forward_with_routing(torch.rand(1, 1, 32, 32))
    out.mean().backward()
    opt.step()
    save_checkpoint(tmp_path / "ck", model, opt, config={"model": cfg.to_dict()}, iteration=1)
    other = AmirModel(cfg)
    other_opt = make_optimizer(other, 1e-3)
    manifest = load_checkpoint(tmp_path / "ck", other, other_opt)
    assert manifest["iteration"] == 1
    for (n, p), (_, q) in zip(model.state_dict().items(), other.state_dict().items()):
        assert torch.equal(p, q), n
    for p, q in zip(model.parameters(), other.parameters()):
        a, b = opt.state.get(p), other_opt.state.get(q)
        if not a:  # experts nobody routed to never received a gradient
            assert not b
            continue
        assert torch.equal(a["exp_avg"], b["exp_avg"]) and torch.equal(a["exp_avg_sq"], b["exp_avg_sq"])
        assert float(a["step"]) == float(b["step"])
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing", other)
