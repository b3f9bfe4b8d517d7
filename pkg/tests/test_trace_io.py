import io
import json

import numpy as np
import pytest

from memaudit import trace_io
from memaudit.trace import ModelHead, TraceDims
from conftest import random_head, random_trace


def _roundtrip(trace):
    buf = io.BytesIO()
    trace_io.write_trace(trace, buf)
    buf.seek(0)
    return trace_io.read_trace(buf)


def test_layout_arithmetic_no_logits(rng):
    # header 32 + token_ids 2*4 + mask 2*1 + hidden 2*2*2*4 + attn 1*1*2*2*4
    t = random_trace(rng, n_layers=1, n_heads=1, seq_len=2, hidden_dim=2,
                     vocab_size=4)
    buf = io.BytesIO()
    n = trace_io.write_trace(t, buf)
    assert n == 32 + 8 + 2 + 32 + 16 == 90
    assert len(buf.getvalue()) == 90


def test_layout_arithmetic_with_logits(rng):
    t = random_trace(rng, n_layers=1, n_heads=1, seq_len=2, hidden_dim=2,
                     vocab_size=4, with_logits=True)
    buf = io.BytesIO()
    n = trace_io.write_trace(t, buf)
    assert n == 90 + 2 * 4 * 4


def test_write_read_write_identical_bytes(rng):
    t = random_trace(rng, with_logits=True)
    b1 = io.BytesIO()
    trace_io.write_trace(t, b1)
    b1.seek(0)
    t2 = trace_io.read_trace(b1)
    b2 = io.BytesIO()
    trace_io.write_trace(t2, b2)
    assert b1.getvalue() == b2.getvalue()


def test_roundtrip_bit_exact(rng):
    for k in range(20):
        t = random_trace(rng, n_layers=int(rng.integers(1, 4)),
                         n_heads=int(rng.integers(1, 3)),
                         seq_len=int(rng.integers(2, 10)),
                         hidden_dim=int(rng.integers(1, 6)),
                         vocab_size=int(rng.integers(2, 9)),
                         with_logits=bool(k % 2))
        t2 = _roundtrip(t)
        assert t2.dims == t.dims
        assert np.array_equal(t2.token_ids, t.token_ids)
        assert np.array_equal(t2.mask, t.mask)
        assert np.array_equal(t2.hidden_states, t.hidden_states)
        assert np.array_equal(t2.attentions, t.attentions)
        if t.final_logits is None:
            assert t2.final_logits is None
        else:
            assert np.array_equal(t2.final_logits, t.final_logits)


def test_bad_magic(rng):
    t = random_trace(rng)
    buf = io.BytesIO()
    trace_io.write_trace(t, buf)
    blob = bytearray(buf.getvalue())
    blob[:4] = b"MTRX"
    with pytest.raises(trace_io.TraceFormatError, match="bad magic"):
        trace_io.read_trace(io.BytesIO(bytes(blob)))


def test_truncated_payload(rng):
    t = random_trace(rng)
    buf = io.BytesIO()
    trace_io.write_trace(t, buf)
    blob = buf.getvalue()
    with pytest.raises(trace_io.TraceFormatError, match="truncated"):
        trace_io.read_trace(io.BytesIO(blob[:32]))
    with pytest.raises(trace_io.TraceFormatError, match="truncated"):
        trace_io.read_trace(io.BytesIO(blob + b"\x00"))


def test_invalid_trace_refused(rng):
    t = random_trace(rng, n_layers=1, n_heads=1, seq_len=2)
    t.attentions[0, 0, 1] = [0.6, 0.6]
    with pytest.raises(ValueError, match="invalid trace"):
        trace_io.write_trace(t, io.BytesIO())


def test_head_roundtrip(rng):
    for kind in ("layernorm", "rmsnorm", "identity"):
        for with_bias in (False, True):
            h = random_head(rng, 5, 9, kind, with_bias)
            buf = io.BytesIO()
            trace_io.write_head(h, buf)
            buf.seek(0)
            h2 = trace_io.read_head(buf)
            assert h2.norm_kind == kind
            assert h2.hidden_dim == 5 and h2.vocab_size == 9
            assert np.array_equal(h2.gain, h.gain)
            assert np.array_equal(h2.bias, h.bias)
            assert np.array_equal(h2.unembed, h.unembed)
            if with_bias:
                assert np.array_equal(h2.unembed_bias, h.unembed_bias)
            else:
                assert h2.unembed_bias is None


def test_identity_head_zeros_preserved():
    d = 3
    unembed = np.zeros((d, 5), np.float32)
    unembed[:d, :d] = np.eye(d)
    h = ModelHead(d, 5, "identity", 1e-5, np.ones(d), np.zeros(d), unembed)
    buf = io.BytesIO()
    trace_io.write_head(h, buf)
    buf.seek(0)
    h2 = trace_io.read_head(buf)
    assert np.array_equal(h2.unembed, unembed)
    assert np.array_equal(h2.bias, np.zeros(d))


def test_head_unknown_norm_kind(rng):
    h = random_head(rng)
    buf = io.BytesIO()
    trace_io.write_head(h, buf)
    blob = bytearray(buf.getvalue())
    blob[16:20] = (3).to_bytes(4, "little")  # norm_kind field
    with pytest.raises(trace_io.TraceFormatError, match="unknown norm kind"):
        trace_io.read_head(io.BytesIO(bytes(blob)))


def test_manifest_roundtrip(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(
        '{"trace":"a.mtrc","label":"member","group":"wiki","id":"a"}\n'
        '{"trace":"b.mtrc","label":"nonmember","group":"wiki","id":"b","text":"hi"}\n')
    m = trace_io.read_manifest(str(path))
    assert len(m) == 2
    assert m.entries[0].label == "member"
    assert m.entries[1].text == "hi"
    assert m.base_dir == str(tmp_path)


def test_manifest_errors(tmp_path):
    bad_label = tmp_path / "bad1.jsonl"
    bad_label.write_text('{"trace":"a.mtrc","label":"train","group":"g","id":"a"}\n')
    with pytest.raises(ValueError, match="unknown label"):
        trace_io.read_manifest(str(bad_label))

    dup = tmp_path / "bad2.jsonl"
    dup.write_text('{"trace":"a.mtrc","label":"member","group":"g","id":"a"}\n'
                   '{"trace":"b.mtrc","label":"member","group":"g","id":"a"}\n')
    with pytest.raises(ValueError, match="duplicate id a"):
        trace_io.read_manifest(str(dup))

    missing = tmp_path / "bad3.jsonl"
    missing.write_text('{"trace":"a.mtrc","label":"member","id":"a"}\n')
    with pytest.raises(ValueError, match="missing key"):
        trace_io.read_manifest(str(missing))


def test_reader_rejects_dim_size_mismatch(rng):
    # declared dims imply a different payload size than the actual bytes
    t = random_trace(rng, n_layers=1, n_heads=1, seq_len=4, hidden_dim=2,
                     vocab_size=4)
    buf = io.BytesIO()
    trace_io.write_trace(t, buf)
    blob = bytearray(buf.getvalue())
    blob[8:12] = (2).to_bytes(4, "little")  # claim L=2, payload is for L=1
    with pytest.raises(trace_io.TraceFormatError):
        trace_io.read_trace(io.BytesIO(bytes(blob)))
