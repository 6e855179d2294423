import numpy as np
import pytest

from rwkv_unet.checkpoint import (
    MAGIC,
    ChecksumError,
    CheckpointError,
    CheckpointShapeError,
    NotACheckpointError,
    TruncatedError,
    VersionError,
    load_checkpoint,
    load_into,
    read_tensors,
    save_checkpoint,
    write_tensors,
)
from rwkv_unet.model import build, forward
from rwkv_unet.tensor import Tensor


def test_tensor_roundtrip_is_bit_exact(tmp_path, rng):
    arrays = {
        "a": rng.standard_normal((3, 4)).astype(np.float32),
        "b.c": rng.standard_normal(5),
        "scalar": np.array(2.5),
        "empty": np.zeros((0, 3), np.float32),
        "ünï": np.array([np.inf, -0.0, np.nan]),
    }
    write_tensors(tmp_path / "t.ckpt", arrays)
    back = read_tensors(tmp_path / "t.ckpt")
    assert list(back) == list(arrays)
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_header_layout(tmp_path):
    write_tensors(tmp_path / "t.ckpt", {"x": np.ones(2)})
    raw = (tmp_path / "t.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    assert int.from_bytes(raw[8:12], "little") == 1
    assert int.from_bytes(raw[12:16], "little") == 1
    assert int.from_bytes(raw[-8:], "little") == sum(np.ones(2).tobytes())


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(TypeError):
        write_tensors(tmp_path / "t.ckpt", {"x": np.ones(2, np.int64)})


@pytest.fixture
def ckpt(tmp_path, rng):
    path = tmp_path / "t.ckpt"
    write_tensors(path, {"x": rng.standard_normal((4, 4)), "y": np.ones(3, np.float32)})
    return path


def test_bad_magic(ckpt):
    raw = bytearray(ckpt.read_bytes())
    raw[0] ^= 0xFF
    ckpt.write_bytes(bytes(raw))
    with pytest.raises(NotACheckpointError):
        read_tensors(ckpt)


def test_bad_version(ckpt):
    raw = bytearray(ckpt.read_bytes())
    raw[8] = 9
    ckpt.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        read_tensors(ckpt)


@pytest.mark.parametrize("cut", [1, 8, 40])
def test_truncation(ckpt, cut):
    ckpt.write_bytes(ckpt.read_bytes()[:-cut])
    with pytest.raises(TruncatedError):
        read_tensors(ckpt)


def test_flipped_payload_byte(ckpt):
    raw = bytearray(ckpt.read_bytes())
    raw[60] ^= 0x01
    ckpt.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        read_tensors(ckpt)


def test_trailing_garbage(ckpt):
    ckpt.write_bytes(ckpt.read_bytes() + b"\0")
    with pytest.raises(CheckpointError):
        read_tensors(ckpt)


def test_model_roundtrip_reproduces_logits(tmp_path, rng):
    m = build("tiny", 1, 3, seed=7)
    save_checkpoint(m, tmp_path / "m.ckpt", extra={"opt.step": np.array([12.0])})
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert (back.variant, back.in_channels, back.num_classes) == (m.variant, 1, 3)
    x = Tensor(rng.standard_normal((1, 1, 32, 32)).astype(np.float32))
    assert forward(back, x).data.tobytes() == forward(m, x).data.tobytes()

    fresh = build("tiny", 1, 3, seed=0)
    extra = load_into(fresh, tmp_path / "m.ckpt")
    assert list(extra) == ["opt.step"]
    assert forward(fresh, x).data.tobytes() == forward(m, x).data.tobytes()


def test_wrong_architecture_names_offending_tensor(tmp_path):
    save_checkpoint(build("tiny", 1, 3), tmp_path / "m.ckpt")
    target = build("tiny", 1, 5)
    before = target.head.weight.data.copy()
    with pytest.raises(CheckpointShapeError, match="head.weight"):
        load_into(target, tmp_path / "m.ckpt")
    np.testing.assert_array_equal(target.head.weight.data, before)  # nothing partially assigned
    with pytest.raises(CheckpointShapeError):
        load_into(build("small", 1, 3), tmp_path / "m.ckpt")


def test_extra_name_collision(tmp_path):
    m = build("tiny", 1, 3)
    with pytest.raises(ValueError):
        save_checkpoint(m, tmp_path / "m.ckpt", extra={"head.bias": np.zeros(3)})
