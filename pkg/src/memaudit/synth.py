"""Synthetic traces with controllable planted membership signatures.

Nonmember traces are pure noise: hidden states follow a Gaussian random walk
across layers, attention maps are causal softmaxes of Gaussian logits, and
the head is a random unembedding decoded without normalization. Member
traces run the identical generative process and then receive up to three
planted effects:

  (a) random-walk steps into the middle layer(s) shrink by (1 - delta),
  (b) a rho fraction of positions get hidden states aligned to one
      unembedding column, producing near-one-hot decoded predictions,
  (c) attention logits gain +beta on the self and previous-token entries of
      the first ceil(H/2) heads.

Neighbor traces use the member recipe at half effect size. With all effects
zero, member and nonmember distributions are identical by construction.
"""

import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .seeding import derive_seed
from .trace import (DatasetManifest, ManifestEntry, ModelHead, SequenceTrace,
                    TraceDims)
from . import trace_io

SPIKE_MAGNITUDE = 25.0  # hidden-state norm for confidence-spike positions

_MEMBER, _NONMEMBER, _NEIGHBOR = 0, 1, 2


@dataclass
class SynthSpec:
    n_layers: int = 2
    n_heads: int = 2
    seq_len: int = 24
    hidden_dim: int = 16
    vocab_size: int = 40
    n_members: int = 500
    n_nonmembers: int = 500
    n_neighbors: int = 0
    surprise_damping: float = 0.3   # delta in [0, 1)
    spike_rate: float = 0.1         # rho in [0, 1]
    focus_bonus: float = 2.0        # beta >= 0
    seed: int = 420
    # None = the one or two central transitions / every attention layer
    damp_transitions: Optional[list] = None
    focus_layers: Optional[list] = None

    def __post_init__(self):
        if not 0.0 <= self.surprise_damping < 1.0:
            raise ValueError(f"surprise_damping must be in [0, 1), got {self.surprise_damping}")
        if not 0.0 <= self.spike_rate <= 1.0:
            raise ValueError(f"spike_rate must be in [0, 1], got {self.spike_rate}")
        if self.focus_bonus < 0.0:
            raise ValueError(f"focus_bonus must be >= 0, got {self.focus_bonus}")

    def dims(self) -> TraceDims:
        return TraceDims(self.n_layers, self.n_heads, self.seq_len,
                         self.hidden_dim, self.vocab_size).check()

    def as_dict(self):
        return {
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "seq_len": self.seq_len, "hidden_dim": self.hidden_dim,
            "vocab_size": self.vocab_size, "n_members": self.n_members,
            "n_nonmembers": self.n_nonmembers, "n_neighbors": self.n_neighbors,
            "surprise_damping": self.surprise_damping,
            "spike_rate": self.spike_rate, "focus_bonus": self.focus_bonus,
            "seed": self.seed, "damp_transitions": self.damp_transitions,
            "focus_layers": self.focus_layers,
        }


def middle_transitions(n_layers: int) -> list:
    """The central transition, or the central two when L is even."""
    mid = (n_layers - 1) / 2
    return [i for i in range(n_layers) if abs(i - mid) <= 0.5]


def make_head(spec: SynthSpec) -> ModelHead:
    rng = np.random.default_rng(derive_seed(spec.seed, 0x4EAD))
    d, V = spec.hidden_dim, spec.vocab_size
    unembed = rng.normal(0.0, 1.0 / math.sqrt(d), (d, V))
    return ModelHead(hidden_dim=d, vocab_size=V, norm_kind="identity",
                     norm_epsilon=1e-5, gain=np.ones(d), bias=np.zeros(d),
                     unembed=unembed, unembed_bias=None)


def _make_trace(spec: SynthSpec, head: ModelHead, code: int, index: int,
                delta: float, rho: float, beta: float) -> SequenceTrace:
    rng = np.random.default_rng(derive_seed(spec.seed, code, index))
    L, H, n, d, V = (spec.n_layers, spec.n_heads, spec.seq_len,
                     spec.hidden_dim, spec.vocab_size)

    steps = rng.normal(0.0, 1.0, (L + 1, n, d))
    damped = spec.damp_transitions if spec.damp_transitions is not None \
        else middle_transitions(L)
    if delta > 0.0:
        for i in damped:
            steps[i + 1] *= (1.0 - delta)
    hidden = np.cumsum(steps, axis=0)

    att_logits = rng.normal(0.0, 1.0, (L, H, n, n))
    if beta > 0.0:
        layers = spec.focus_layers if spec.focus_layers is not None else range(L)
        diag = np.arange(n)
        for l in layers:
            for h in range(math.ceil(H / 2)):
                att_logits[l, h, diag, diag] += beta
                att_logits[l, h, diag[1:], diag[:-1]] += beta
    causal = np.tril(np.ones((n, n), dtype=bool))
    att_logits = np.where(causal, att_logits, -1e30)
    shifted = att_logits - att_logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    attn = e / e.sum(axis=-1, keepdims=True)

    if code != _NONMEMBER:
        spikes = np.flatnonzero(rng.random(n) < rho)
        for t in spikes:
            v = int(rng.integers(0, V))
            col = head.unembed[:, v].astype(np.float64)
            hidden[:, t, :] = SPIKE_MAGNITUDE * col / np.linalg.norm(col)

    token_ids = rng.integers(0, V, n)
    dims = TraceDims(L, H, n, d, V)
    return SequenceTrace(dims, token_ids.astype(np.uint32),
                         np.ones(n, dtype=np.uint8),
                         hidden.astype(np.float32), attn.astype(np.float32))


def generate(spec: SynthSpec, out_dir: str):
    """Write head, traces, and manifest under out_dir; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    head = make_head(spec)
    trace_io.write_head(head, os.path.join(out_dir, "model.mthd"))
    entries = []
    groups = (
        (_MEMBER, "member", "m", spec.n_members,
         spec.surprise_damping, spec.spike_rate, spec.focus_bonus),
        (_NONMEMBER, "nonmember", "n", spec.n_nonmembers, 0.0, 0.0, 0.0),
        (_NEIGHBOR, "neighbor", "b", spec.n_neighbors,
         spec.surprise_damping / 2, spec.spike_rate / 2, spec.focus_bonus / 2),
    )
    for code, label, prefix, count, delta, rho, beta in groups:
        for i in range(count):
            trace = _make_trace(spec, head, code, i, delta, rho, beta)
            name = f"{prefix}{i:04d}.mtrc"
            trace_io.write_trace(trace, os.path.join(out_dir, name))
            entries.append(ManifestEntry(trace=name, label=label, group="synth",
                                         id=f"{prefix}{i:04d}"))
    manifest = DatasetManifest(entries, base_dir=out_dir)
    trace_io.write_manifest(manifest, os.path.join(out_dir, "manifest.jsonl"))
    return manifest
