import numpy as np
import pytest

from memaudit.trace import ModelHead, SequenceTrace, TraceDims


def random_trace(rng, n_layers=2, n_heads=2, seq_len=8, hidden_dim=4,
                 vocab_size=12, n_valid=None, with_logits=False):
    """A structurally valid random trace with right padding."""
    L, H, n, d, V = n_layers, n_heads, seq_len, hidden_dim, vocab_size
    if n_valid is None:
        n_valid = n
    assert 2 <= n_valid <= n
    dims = TraceDims(L, H, n, d, V)
    token_ids = rng.integers(0, V, n).astype(np.uint32)
    mask = np.zeros(n, dtype=np.uint8)
    mask[:n_valid] = 1
    hidden = rng.normal(0, 1, (L + 1, n, d))
    attn = causal_attention(rng, L, H, n, n_valid)
    logits = rng.normal(0, 1, (n, V)) if with_logits else None
    return SequenceTrace(dims, token_ids, mask, hidden, attn, logits)


def causal_attention(rng, L, H, n, n_valid):
    """Causal softmax of random logits for valid queries; padded query rows
    get pure self-attention (they are ignored by validation and features)."""
    logits = rng.normal(0, 1, (L, H, n, n))
    pos = np.arange(n)
    allowed = (pos[None, :] <= pos[:, None]) & (pos[None, :] < n_valid)
    masked = np.where(allowed[None, None], logits, -1e30)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    attn = e / e.sum(axis=-1, keepdims=True)
    for t in range(n_valid, n):
        attn[:, :, t, :] = 0.0
        attn[:, :, t, t] = 1.0
    return attn


def random_head(rng, hidden_dim=4, vocab_size=12, norm_kind="layernorm",
                with_bias=False):
    d, V = hidden_dim, vocab_size
    return ModelHead(
        hidden_dim=d, vocab_size=V, norm_kind=norm_kind, norm_epsilon=1e-5,
        gain=rng.normal(1.0, 0.1, d), bias=rng.normal(0.0, 0.1, d),
        unembed=rng.normal(0.0, 1.0, (d, V)),
        unembed_bias=rng.normal(0.0, 0.1, V) if with_bias else None)


def append_padding(trace, extra):
    """The same trace with `extra` padded positions appended."""
    d = trace.dims
    L, H, n = d.n_layers, d.n_heads, d.seq_len
    n2 = n + extra
    dims2 = TraceDims(L, H, n2, d.hidden_dim, d.vocab_size)
    token_ids = np.concatenate([trace.token_ids, np.zeros(extra, np.uint32)])
    mask = np.concatenate([trace.mask, np.zeros(extra, np.uint8)])
    hidden = np.zeros((L + 1, n2, d.hidden_dim), np.float32)
    hidden[:, :n] = trace.hidden_states
    attn = np.zeros((L, H, n2, n2), np.float32)
    attn[:, :, :n, :n] = trace.attentions
    for t in range(n, n2):
        attn[:, :, t, t] = 1.0
    logits = None
    if trace.final_logits is not None:
        logits = np.zeros((n2, d.vocab_size), np.float32)
        logits[:n] = trace.final_logits
    return SequenceTrace(dims2, token_ids, mask, hidden, attn, logits)


@pytest.fixture
def rng():
    return np.random.default_rng(420)
