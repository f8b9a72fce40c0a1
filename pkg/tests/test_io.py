from __future__ import annotations

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diagsink.attention import Regularizer
from diagsink.io import (
    MAGIC,
    CheckpointError,
    code_hash,
    load_checkpoint,
    matrix_csv,
    pgm_p2,
    read_matrix_csv,
    read_pgm_p2,
    save_checkpoint,
    table_csv,
    write_atomic,
)
from diagsink.model import ModelConfig, TnSModel, model_forward


@pytest.fixture
def model():
    cfg = ModelConfig(n_nodes=4, window=5, horizon=2)
    return TnSModel.init(cfg, np.random.default_rng(0), Regularizer.penalty(-0.3))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, model, tmp_path):
        model.out_scale, model.out_shift = 2.5, -1.0
        f = tmp_path / "m.ckpt"
        save_checkpoint(f, model, seed=11, meta={"note": "x"})
        back, header = load_checkpoint(f)
        assert header["seed"] == 11 and header["meta"] == {"note": "x"}
        assert back.cfg == model.cfg and back.reg == model.reg
        assert set(back.params) == set(model.params)
        for k, v in model.params.items():
            assert back.params[k].tobytes() == v.tobytes()
        x = np.random.default_rng(1).normal(size=(2, 4, 5, 1))
        assert model_forward(x, back)[0].tobytes() == model_forward(x, model)[0].tobytes()

    def test_layout(self, model, tmp_path):
        f = tmp_path / "m.ckpt"
        save_checkpoint(f, model, seed=0)
        raw = f.read_bytes()
        assert raw[:8] == MAGIC
        version, hlen = struct.unpack("<IQ", raw[8:20])
        header = json.loads(raw[20 : 20 + hlen])
        n = sum(t["count"] for t in header["tensors"])
        assert version == 1 and len(raw) == 20 + hlen + 8 * n

    def test_save_is_deterministic(self, model, tmp_path):
        save_checkpoint(tmp_path / "a", model, 0)
        save_checkpoint(tmp_path / "b", model, 0)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    @pytest.mark.parametrize(
        "mutate",
        [
            lambda raw: b"",
            lambda raw: b"NOTACKPT" + raw[8:],
            lambda raw: raw[:8] + struct.pack("<I", 9) + raw[12:],
            lambda raw: raw[:-9],
            lambda raw: raw[:-8],
            lambda raw: raw[:24] + b"\xff\xfe" + raw[26:],
        ],
        ids=["empty", "magic", "version", "ragged", "short", "header"],
    )
    def test_corrupt_files_raise(self, model, tmp_path, mutate):
        f = tmp_path / "m.ckpt"
        save_checkpoint(f, model, 0)
        f.write_bytes(mutate(f.read_bytes()))
        with pytest.raises(CheckpointError):
            load_checkpoint(f)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.ckpt")


class TestText:
    @settings(max_examples=50)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1e300, 1e300)))
    def test_matrix_csv_exact(self, m):
        assert read_matrix_csv(matrix_csv(m)).tobytes() == m.tobytes()

    def test_pgm_mapping(self):
        a = np.array([[0.0, 0.5], [1.0, 0.25]])
        text = pgm_p2(a)
        assert text.splitlines()[:3] == ["P2", "2 2", "255"]
        np.testing.assert_array_equal(read_pgm_p2(text), [[255, 128], [0, 191]])

    def test_pgm_rectangular_and_blank(self):
        pix = read_pgm_p2(pgm_p2(np.zeros((2, 3))))
        assert pix.shape == (2, 3) and (pix == 255).all()

    def test_table_formatting(self):
        assert table_csv(["a", "b"], [[True, 0.1], [3, "x"]]) == "a,b\ntrue,0.10000000000000001\n3,x\n"


def test_write_atomic(tmp_path):
    f = tmp_path / "sub" / "out.txt"
    write_atomic(f, "one")
    write_atomic(f, b"two")
    assert f.read_text() == "two"
    assert [p.name for p in f.parent.iterdir()] == ["out.txt"]


def test_code_hash_stable():
    h = code_hash()
    assert h == code_hash() and len(h) == 64
