"""In-memory representation of a model's per-sequence activation record.

A trace bundles everything one forward pass produced for a single input
sequence: token ids, a validity mask (1 = real token, 0 = right padding),
hidden states for the embedding output plus every block output, full
attention maps, and optionally the final logits.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

LABELS = ("member", "nonmember", "neighbor")

ROW_SUM_TOL = 1e-4  # traces are stored as 32-bit floats
CAUSAL_TOL = 1e-6
MASKED_KEY_TOL = 1e-6


@dataclass(frozen=True)
class TraceDims:
    """Shape record: L blocks, H heads, n positions, width d, vocab V."""

    n_layers: int
    n_heads: int
    seq_len: int
    hidden_dim: int
    vocab_size: int

    def check(self):
        for name in ("n_layers", "n_heads", "seq_len", "hidden_dim", "vocab_size"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ValueError(f"dimension {name} must be a positive integer, got {v!r}")
        if self.seq_len < 2:
            raise ValueError(f"seq_len must be >= 2, got {self.seq_len}")
        return self


@dataclass
class SequenceTrace:
    """One sequence's full internal record.

    hidden_states has shape (L+1, n, d): index 0 is the embedding-layer
    output, index l >= 1 the output of block l. attentions has shape
    (L, H, n, n) with entry [l, h, t, s] = weight from query t to key s.
    """

    dims: TraceDims
    token_ids: np.ndarray
    mask: np.ndarray
    hidden_states: np.ndarray
    attentions: np.ndarray
    final_logits: Optional[np.ndarray] = None

    def __post_init__(self):
        d = self.dims
        d.check()
        self.token_ids = np.ascontiguousarray(self.token_ids, dtype=np.uint32)
        self.mask = np.ascontiguousarray(self.mask, dtype=np.uint8)
        self.hidden_states = np.ascontiguousarray(self.hidden_states, dtype=np.float32)
        self.attentions = np.ascontiguousarray(self.attentions, dtype=np.float32)
        if self.final_logits is not None:
            self.final_logits = np.ascontiguousarray(self.final_logits, dtype=np.float32)
        L, H, n, dd, V = d.n_layers, d.n_heads, d.seq_len, d.hidden_dim, d.vocab_size
        if self.token_ids.shape != (n,):
            raise ValueError(f"token_ids shape {self.token_ids.shape} != ({n},)")
        if self.mask.shape != (n,):
            raise ValueError(f"mask shape {self.mask.shape} != ({n},)")
        if self.hidden_states.shape != (L + 1, n, dd):
            raise ValueError(
                f"hidden_states shape {self.hidden_states.shape} != {(L + 1, n, dd)}")
        if self.attentions.shape != (L, H, n, n):
            raise ValueError(f"attentions shape {self.attentions.shape} != {(L, H, n, n)}")
        if self.final_logits is not None and self.final_logits.shape != (n, V):
            raise ValueError(f"final_logits shape {self.final_logits.shape} != {(n, V)}")


@dataclass
class ModelHead:
    """Final normalization plus unembedding, enough to decode any hidden state."""

    hidden_dim: int
    vocab_size: int
    norm_kind: str  # layernorm | rmsnorm | identity
    norm_epsilon: float
    gain: np.ndarray
    bias: np.ndarray
    unembed: np.ndarray  # (d, V)
    unembed_bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {self.norm_kind!r}")
        if not self.norm_epsilon > 0:
            raise ValueError(f"norm_epsilon must be > 0, got {self.norm_epsilon}")
        self.gain = np.ascontiguousarray(self.gain, dtype=np.float32)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float32)
        self.unembed = np.ascontiguousarray(self.unembed, dtype=np.float32)
        if self.unembed_bias is not None:
            self.unembed_bias = np.ascontiguousarray(self.unembed_bias, dtype=np.float32)
        d, V = self.hidden_dim, self.vocab_size
        if self.gain.shape != (d,):
            raise ValueError(f"gain shape {self.gain.shape} != ({d},)")
        if self.bias.shape != (d,):
            raise ValueError(f"bias shape {self.bias.shape} != ({d},)")
        if self.unembed.shape != (d, V):
            raise ValueError(f"unembed shape {self.unembed.shape} != {(d, V)}")
        if self.unembed_bias is not None and self.unembed_bias.shape != (V,):
            raise ValueError(f"unembed_bias shape {self.unembed_bias.shape} != ({V},)")


NORM_KINDS = ("layernorm", "rmsnorm", "identity")


@dataclass
class ManifestEntry:
    trace: str
    label: str
    group: str
    id: str
    text: Optional[str] = None  # raw text, used by compression-based baselines


@dataclass
class DatasetManifest:
    entries: list
    base_dir: str = "."

    def __len__(self):
        return len(self.entries)

    def ids(self):
        return [e.id for e in self.entries]

    def labels(self):
        return [e.label for e in self.entries]


@dataclass
class ValidationReport:
    ok: bool
    violations: list = field(default_factory=list)


def valid_positions(trace: SequenceTrace) -> np.ndarray:
    """Indices of real (unpadded) token positions, ascending.

    All downstream feature computations iterate only over these.
    """
    pos = np.flatnonzero(trace.mask != 0)
    if pos.size < 2:
        raise ValueError(f"sequence too short: {pos.size} valid positions, need >= 2")
    return pos


def validate_trace(trace: SequenceTrace) -> ValidationReport:
    """Check every trace invariant; report each violation with coordinates.

    Attention rows of padded query positions are ignored entirely: padding
    is right-aligned and those rows carry no information.
    """
    v = []
    d = trace.dims
    L, H, n = d.n_layers, d.n_heads, d.seq_len

    valid = np.flatnonzero(trace.mask != 0)
    if valid.size < 2:
        v.append(f"only {valid.size} valid positions, need >= 2")

    for name, arr in (("hidden_states", trace.hidden_states),
                      ("attentions", trace.attentions),
                      ("final_logits", trace.final_logits)):
        if arr is None:
            continue
        bad = ~np.isfinite(arr)
        if bad.any():
            for coord in np.argwhere(bad):
                v.append(f"non-finite value in {name} at {tuple(int(c) for c in coord)}")

    over = np.flatnonzero(trace.token_ids.astype(np.int64) >= d.vocab_size)
    for t in over:
        v.append(f"token id {int(trace.token_ids[t])} >= vocab size {d.vocab_size} at t={int(t)}")

    if valid.size:
        att = trace.attentions.astype(np.float64)
        rows = att[:, :, valid, :]  # (L, H, n_valid, n)

        sums = rows.sum(axis=3)
        bad = np.abs(sums - 1.0) > ROW_SUM_TOL
        for l, h, vi in np.argwhere(bad):
            t = int(valid[vi])
            v.append(f"row sum {sums[l, h, vi]:.6g} != 1 at (l={int(l)},h={int(h)},t={t})")

        key_idx = np.arange(n)
        future = key_idx[None, :] > valid[:, None]  # (n_valid, n)
        bad = (np.abs(rows) > CAUSAL_TOL) & future[None, None, :, :]
        for l, h, vi, s in np.argwhere(bad):
            t = int(valid[vi])
            v.append(f"causality violation at (l={int(l)},h={int(h)},t={t},s={int(s)})")

        masked_key = (trace.mask == 0)[None, None, None, :] & ~future[None, None, :, :]
        bad = (np.abs(rows) > MASKED_KEY_TOL) & masked_key
        for l, h, vi, s in np.argwhere(bad):
            t = int(valid[vi])
            v.append(f"attention {rows[l, h, vi, s]:.6g} to masked key at "
                     f"(l={int(l)},h={int(h)},t={t},s={int(s)})")

    return ValidationReport(ok=not v, violations=v)
