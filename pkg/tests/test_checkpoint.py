import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from spanforge import checkpoint
from spanforge import encoder as enc
from spanforge import finetune as ft
from spanforge.errors import IntegrityError
from spanforge.model import QAModel, load_model

from _support import random_window, toy_vocab

arrays = hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                    elements=st.floats(-1e6, 1e6, width=32))


@settings(max_examples=50)
@given(st.dictionaries(st.text(min_size=1, max_size=12), arrays, max_size=5),
       st.dictionaries(st.text(max_size=6), st.integers(-5, 5), max_size=3))
def test_round_trip(tensors, meta):
    got_meta, got = checkpoint.loads(checkpoint.dumps(tensors, meta))
    assert got_meta == meta
    assert list(got) == list(tensors)
    for name, arr in tensors.items():
        assert got[name].shape == arr.shape
        np.testing.assert_array_equal(got[name], arr)


def test_layout_header():
    blob = checkpoint.dumps({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"k": 1})
    assert blob[:4] == b"SPQA"
    version, meta_len = struct.unpack_from("<HI", blob, 4)
    assert version == checkpoint.VERSION and blob[10:10 + meta_len] == b'{"k": 1}'
    assert blob[-24:] == np.arange(6, dtype="<f4").tobytes()


def test_corruption_is_an_integrity_error(tmp_path):
    blob = checkpoint.dumps({"w": np.ones((4, 4), np.float32)}, {"kind": "full"})
    for bad in (b"NOPE" + blob[4:], blob[:-8], blob[:12], blob[:4] + b"\x09\x00" + blob[6:]):
        with pytest.raises(IntegrityError):
            checkpoint.loads(bad)
    with pytest.raises(IntegrityError):
        checkpoint.load(tmp_path / "missing.spqa")
    with pytest.raises(IntegrityError):
        checkpoint.file_sha256(tmp_path / "missing.spqa")


# ------------------------------------------------------------------- models

@pytest.fixture(scope="module")
def vocab():
    return toy_vocab()


def _model(vocab, seed=0):
    cfg = enc.EncoderConfig(vocab_size=len(vocab), layers=1, heads=2, hidden=8, ffn=16, max_positions=64)
    return QAModel(enc.init_weights(cfg, seed), vocab, 64, 16)


def test_model_round_trip(vocab, tmp_path):
    m = _model(vocab)
    digest = m.save(tmp_path / "m.spqa")
    assert digest == checkpoint.file_sha256(tmp_path / "m.spqa")
    back = load_model(tmp_path / "m.spqa")
    assert back.vocab == m.vocab and (back.max_len, back.stride) == (64, 16)
    assert back.config == m.config
    assert back.weights.digest() == m.weights.digest()
    # saving again is byte-identical
    assert back.save(tmp_path / "again.spqa") == digest


def test_adapter_round_trip_and_hash_binding(vocab, tmp_path):
    m = _model(vocab)
    base_hash = m.save(tmp_path / "base.spqa")
    m.adapters = ft.inject_lora(m.weights, ft.FinetuneConfig(mode="lora", lora_rank=2, seed=1))
    rng = np.random.default_rng(0)
    for ad in m.adapters.values():
        ad.B.data[...] = rng.normal(size=ad.B.shape)
    m.weights["span.start"].data[...] += 1.0
    m.save_adapter(tmp_path / "ad.spqa", base_hash)
    meta, tensors = checkpoint.load(tmp_path / "ad.spqa")
    assert meta["kind"] == "lora" and meta["base_sha256"] == base_hash
    assert sorted(tensors) == sorted([f"{n}.lora_{x}" for n in m.adapters for x in "AB"] + list(enc.SPAN_HEADS))

    back = load_model(tmp_path / "base.spqa", tmp_path / "ad.spqa")
    wins = [random_window(rng, 64, len(vocab), index=i) for i in range(3)]
    for (a0, a1), (b0, b1) in zip(m.span_probabilities(wins), back.span_probabilities(wins)):
        np.testing.assert_array_equal(a0, b0)
        np.testing.assert_array_equal(a1, b1)

    other = _model(vocab, seed=5)
    other.save(tmp_path / "other.spqa")
    with pytest.raises(IntegrityError, match="hash"):
        load_model(tmp_path / "other.spqa", tmp_path / "ad.spqa")


def test_wrong_checkpoint_kinds(vocab, tmp_path):
    m = _model(vocab)
    base_hash = m.save(tmp_path / "base.spqa")
    m.adapters = ft.inject_lora(m.weights, ft.FinetuneConfig(mode="lora", lora_rank=2))
    m.save_adapter(tmp_path / "ad.spqa", base_hash)
    with pytest.raises(IntegrityError):
        load_model(tmp_path / "ad.spqa")
    with pytest.raises(IntegrityError):
        load_model(tmp_path / "base.spqa", tmp_path / "base.spqa")
    with pytest.raises(IntegrityError):
        _model(vocab).save_adapter(tmp_path / "none.spqa", base_hash)
    checkpoint.save(tmp_path / "junk.spqa", {"x": np.ones(2)}, {"kind": "full", "encoder": {"layers": 1}})
    with pytest.raises(IntegrityError):
        load_model(tmp_path / "junk.spqa")
