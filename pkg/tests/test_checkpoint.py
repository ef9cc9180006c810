import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clipdca.checkpoint import (MAGIC, Checkpoint, CheckpointError, interpolate_weights, load_checkpoint,
                                save_checkpoint)
from clipdca.model import make_model


@pytest.fixture(scope="module")
def model():
    return make_model(["an image of a circle"], seed=1, depth=1, width=32, text_width=32, text_depth=1)


def test_round_trip_is_bit_identical(model, tmp_path):
    p = save_checkpoint(model, tmp_path / "m.dca", seed=7, step=3)
    ck = load_checkpoint(p)
    assert ck.equal(Checkpoint.from_model(model))
    assert ck.metadata["seed"] == 7 and ck.metadata["step"] == 3
    m2 = ck.to_model()
    for (k, a), b in zip(model.state_dict().items(), m2.state_dict().values()):
        assert a.numpy().tobytes() == b.numpy().tobytes(), k


def test_layout(model, tmp_path):
    raw = save_checkpoint(model, tmp_path / "m.dca").read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack_from("<I", raw, 4)[0] == 1


def test_truncated_file(model, tmp_path):
    p = save_checkpoint(model, tmp_path / "m.dca")
    raw = p.read_bytes()
    for cut in (3, 20, len(raw) - 1):
        p.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)


def test_unknown_version(model, tmp_path):
    p = save_checkpoint(model, tmp_path / "m.dca")
    raw = bytearray(p.read_bytes())
    struct.pack_into("<I", raw, 4, 99)
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)


def test_interpolation_endpoints(model):
    a = Checkpoint.from_model(model, step=1)
    b = Checkpoint({k: v + 1 for k, v in a.tensors.items()}, dict(a.metadata, step=2))
    assert interpolate_weights(a, b, 1.0).equal(a)
    assert interpolate_weights(a, b, 0.0).equal(b)
    mid = interpolate_weights(a, b, 0.5)
    assert mid.metadata["alpha"] == 0.5 and mid.metadata["parent_steps"] == [1, 2]


def test_interpolation_scalar():
    a, b = Checkpoint({"w": np.float32(2.0)}), Checkpoint({"w": np.float32(4.0)})
    assert float(interpolate_weights(a, b, 0.5).tensors["w"]) == 3.0


def test_interpolation_mismatch():
    a = Checkpoint({"w": np.zeros(3)})
    with pytest.raises(ValueError):
        interpolate_weights(a, Checkpoint({"v": np.zeros(3)}), 0.5)
    with pytest.raises(ValueError):
        interpolate_weights(a, Checkpoint({"w": np.zeros(4)}), 0.5)
    with pytest.raises(ValueError):
        interpolate_weights(a, a, 1.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2**31 - 1))
def test_interpolation_is_affine(alpha, seed):
    rng = np.random.default_rng(seed)
    a = Checkpoint({"w": rng.normal(size=(3, 4)), "b": rng.normal(size=5)})
    b = Checkpoint({"w": rng.normal(size=(3, 4)), "b": rng.normal(size=5)})
    x, y = interpolate_weights(a, b, alpha), interpolate_weights(a, b, 1 - alpha)
    for k in a.tensors:
        np.testing.assert_allclose(x.tensors[k] + y.tensors[k], a.tensors[k] + b.tensors[k], atol=1e-6)


def test_tensors_are_read_only(model):
    ck = Checkpoint.from_model(model)
    with pytest.raises(ValueError):
        next(iter(ck.tensors.values()))[...] = 0
