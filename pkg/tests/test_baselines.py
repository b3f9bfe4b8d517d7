import math
import zlib

import numpy as np
import pytest

from memaudit.baselines import (lowercase_score, min_k_score, perplexity_score,
                                score_manifest, sequence_nll, zlib_score)
from memaudit.trace import (DatasetManifest, ManifestEntry, ModelHead,
                            SequenceTrace, TraceDims)
from memaudit import trace_io
from conftest import causal_attention, random_head, random_trace


def _trace_with_target_logprobs(logprobs, V=2):
    """L=1 identity-lens trace whose next-token log-probs are as given.

    All target tokens are 0; the final-layer hidden state at step j is set so
    softmax([a, 0]) puts e^{logprobs[j]} on token 0.
    """
    n = len(logprobs) + 1
    hidden = np.zeros((2, n, V), np.float32)
    for j, lp in enumerate(logprobs):
        p = math.exp(lp)
        hidden[1, j, 0] = math.log(p / (1 - p))
    rng = np.random.default_rng(0)
    dims = TraceDims(1, 1, n, V, V)
    unembed = np.eye(V, dtype=np.float32)
    head = ModelHead(V, V, "identity", 1e-5, np.ones(V), np.zeros(V), unembed)
    trace = SequenceTrace(dims, np.zeros(n, np.uint32), np.ones(n, np.uint8),
                          hidden, causal_attention(rng, 1, 1, n, n))
    return trace, head


def test_perplexity_half_probs():
    # logit 0 on both tokens: every next-token probability is exactly 1/2
    trace, head = _trace_with_target_logprobs([math.log(0.5)] * 4)
    assert abs(perplexity_score(trace, head) + 2.0) < 1e-6


def test_perplexity_certain_prediction():
    hidden = np.zeros((2, 3, 2), np.float32)
    hidden[1, :, 0] = 50.0  # p(token 0) ~ 1
    rng = np.random.default_rng(0)
    dims = TraceDims(1, 1, 3, 2, 2)
    head = ModelHead(2, 2, "identity", 1e-5, np.ones(2), np.zeros(2),
                     np.eye(2, dtype=np.float32))
    trace = SequenceTrace(dims, np.zeros(3, np.uint32), np.ones(3, np.uint8),
                          hidden, causal_attention(rng, 1, 1, 3, 3))
    assert abs(perplexity_score(trace, head) + 1.0) < 1e-9


def test_perplexity_mixed_logprobs():
    trace, head = _trace_with_target_logprobs([-1.0, -3.0])
    assert abs(sequence_nll(trace, head) - 2.0) < 1e-5
    assert abs(perplexity_score(trace, head) + math.exp(2.0)) < 1e-4


def test_perplexity_matches_direct_oracle(rng):
    from memaudit.lens import layer_logits, softmax_probs
    t = random_trace(rng, seq_len=9, hidden_dim=5, vocab_size=7, n_valid=7)
    head = random_head(rng, 5, 7)
    total = 0.0
    for j in range(6):
        probs = softmax_probs(layer_logits(t, head, t.dims.n_layers, j))
        total += -math.log(probs[t.token_ids[j + 1]])
    want = -math.exp(total / 6)
    got = perplexity_score(t, head)
    assert abs(got - want) <= 1e-9 * abs(want)


def test_min_k_selection():
    trace, head = _trace_with_target_logprobs([-1.0, -2.0, -3.0, -4.0])
    assert abs(min_k_score(trace, head, 50) - (-3.5)) < 1e-4
    assert abs(min_k_score(trace, head, 100) - (-2.5)) < 1e-4
    assert abs(min_k_score(trace, head, 1) - (-4.0)) < 1e-4


def test_min_k_k100_equals_mean_sign_convention():
    trace, head = _trace_with_target_logprobs([-0.5, -1.5, -2.5])
    assert abs(min_k_score(trace, head, 100) + sequence_nll(trace, head)) < 1e-12


def test_min_k_bad_k():
    trace, head = _trace_with_target_logprobs([-1.0, -2.0])
    with pytest.raises(ValueError):
        min_k_score(trace, head, 0)
    with pytest.raises(ValueError):
        min_k_score(trace, head, 101)


def test_zlib_oracle_and_monotonicity():
    trace, head = _trace_with_target_logprobs([-1.0, -2.0])
    text = b"a" * 64
    compressed_bits = 8 * len(zlib.compress(text))  # the recorded oracle
    nll_bits = 3.0 / math.log(2)
    got = zlib_score(trace, head, text)
    assert abs(got + nll_bits / compressed_bits) < 1e-4

    # larger compressed size moves the score monotonically toward zero
    import os
    small = zlib_score(trace, head, b"ab" * 128)
    large = zlib_score(trace, head, os.urandom(256))
    assert len(zlib.compress(b"ab" * 128)) < len(zlib.compress(os.urandom(256)))
    assert small < large < 0


def test_zlib_empty_text():
    trace, head = _trace_with_target_logprobs([-1.0])
    with pytest.raises(ValueError):
        zlib_score(trace, head, b"")


def test_lowercase_identical_pair():
    trace, head = _trace_with_target_logprobs([-1.0, -2.0])
    assert abs(lowercase_score(trace, trace, head) + 1.0) < 1e-12


def test_lowercase_ratio():
    t1, head = _trace_with_target_logprobs([-2.0, -2.0])
    t2, _ = _trace_with_target_logprobs([-2.0 + math.log(2), -2.0 + math.log(2)])
    # ppl(t1) = e^2, ppl(t2) = e^2 / 2
    assert abs(lowercase_score(t1, t2, head) + 2.0) < 1e-4


def test_scores_finite_on_random_traces(rng):
    for _ in range(5):
        t = random_trace(rng, seq_len=8, hidden_dim=4, vocab_size=9)
        head = random_head(rng, 4, 9)
        assert math.isfinite(perplexity_score(t, head))
        assert math.isfinite(min_k_score(t, head, 20))
        assert math.isfinite(zlib_score(t, head, b"hello world"))


def test_score_manifest_lowercase_missing_pair(tmp_path, rng):
    t = random_trace(rng, seq_len=6, hidden_dim=4, vocab_size=9)
    head = random_head(rng, 4, 9)
    trace_io.write_trace(t, str(tmp_path / "a.mtrc"))
    manifest = DatasetManifest(
        [ManifestEntry(trace="a.mtrc", label="member", group="g", id="a")],
        base_dir=str(tmp_path))
    paired = DatasetManifest([], base_dir=str(tmp_path))
    with pytest.raises(ValueError, match="no paired trace for id a"):
        score_manifest(manifest, head, "lowercase", paired=paired)


def test_score_manifest_rows(tmp_path, rng):
    traces = []
    entries = []
    for i, label in enumerate(["member", "nonmember"]):
        t = random_trace(rng, seq_len=6, hidden_dim=4, vocab_size=9)
        trace_io.write_trace(t, str(tmp_path / f"t{i}.mtrc"))
        entries.append(ManifestEntry(trace=f"t{i}.mtrc", label=label, group="g",
                                     id=f"t{i}", text="some text here"))
    head = random_head(rng, 4, 9)
    manifest = DatasetManifest(entries, base_dir=str(tmp_path))
    for method in ("ppl", "mink", "zlib"):
        rows = score_manifest(manifest, head, method)
        assert len(rows) == 2
        assert rows[0][0] == "t0" and rows[0][2] == method
        assert all(math.isfinite(r[3]) for r in rows)
