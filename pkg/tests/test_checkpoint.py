import struct

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from t2ue import checkpoint
from t2ue.generator import GeneratorModel
from t2ue.surrogate import SurrogateModel, build_vocab
from t2ue.toydata import DatasetSpec


def test_layout_little_endian_float32():
    state = {"w": torch.tensor([1.0, -2.5]), "b": torch.tensor([[3.0]])}
    blob = checkpoint.encode(state, {"role": "test"})
    assert blob[:8] == b"T2UECKPT"
    (n,) = struct.unpack("<I", blob[8:12])
    assert blob[12 + n:] == struct.pack("<3f", 1.0, -2.5, 3.0)


@given(st.lists(st.floats(-1e6, 1e6, width=32), min_size=1, max_size=40))
def test_round_trip_bit_exact(values):
    state = {"a": torch.tensor(values, dtype=torch.float32), "n": torch.tensor(7, dtype=torch.int64)}
    header, back = checkpoint.decode(checkpoint.encode(state, {"k": 1}))
    assert header["k"] == 1 and header["format_version"] == checkpoint.FORMAT_VERSION
    assert torch.equal(back["a"], state["a"]) and back["n"].item() == 7 and back["n"].dtype == torch.int64


def test_rejects_bad_magic_and_trailing_bytes():
    blob = checkpoint.encode({"w": torch.ones(2)}, {})
    with pytest.raises(ValueError, match="magic"):
        checkpoint.decode(b"XXXXXXXX" + blob[8:])
    with pytest.raises(ValueError, match="trailing"):
        checkpoint.decode(blob + b"\0\0\0\0")


def test_surrogate_save_load_identical(tmp_path):
    torch.manual_seed(0)
    m = SurrogateModel(build_vocab(DatasetSpec())).freeze()
    p = m.save(tmp_path / "s.ckpt")
    back = SurrogateModel.load(p)
    assert back.frozen
    assert checkpoint.state_hash(back) == checkpoint.state_hash(m)
    assert back.save(tmp_path / "t.ckpt").read_bytes() == p.read_bytes()


def test_generator_save_load_identical(tmp_path):
    torch.manual_seed(0)
    g = GeneratorModel(block_channels=(8, 8, 8), base_channels=8)
    p = g.save(tmp_path / "g.ckpt")
    back, header = GeneratorModel.load(p)
    assert header["role"] == "generator" and header["config"]["block_channels"] == [8, 8, 8]
    assert checkpoint.state_hash(back) == checkpoint.state_hash(g)


def test_role_checked(tmp_path):
    torch.manual_seed(0)
    p = GeneratorModel(block_channels=(8, 8, 8), base_channels=8).save(tmp_path / "g.ckpt")
    with pytest.raises(ValueError, match="not a surrogate"):
        SurrogateModel.load(p)
