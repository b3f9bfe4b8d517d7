"""Per-layer next-token distributions decoded from hidden states.

Intermediate layers never expose logits directly; we decode them by applying
the model's *final* normalization and unembedding to every layer's hidden
state (the standard logit-lens construction). At the last layer this
reproduces the model's own output head exactly.
"""

from dataclasses import dataclass

import numpy as np

from .trace import ModelHead, SequenceTrace, valid_positions

DEFAULT_CHUNK = 32  # positions decoded at a time; bounds memory at chunk x V


@dataclass
class LayerPredictions:
    """Per-position prediction summaries for one layer, valid positions only."""

    layer: int
    positions: np.ndarray  # valid positions, ascending
    entropy: np.ndarray    # nats
    confidence: np.ndarray
    gap: np.ndarray


def _check_dims(trace: SequenceTrace, head: ModelHead):
    if trace.dims.hidden_dim != head.hidden_dim:
        raise ValueError(f"hidden dim mismatch: trace d={trace.dims.hidden_dim}, "
                         f"head d={head.hidden_dim}")
    if trace.dims.vocab_size != head.vocab_size:
        raise ValueError(f"vocab mismatch: trace V={trace.dims.vocab_size}, "
                         f"head V={head.vocab_size}")


def normalize_states(h: np.ndarray, head: ModelHead) -> np.ndarray:
    """Apply the head's normalization to rows of h (float64)."""
    h = np.asarray(h, dtype=np.float64)
    gain = head.gain.astype(np.float64)
    bias = head.bias.astype(np.float64)
    eps = float(head.norm_epsilon)
    if head.norm_kind == "layernorm":
        mu = h.mean(axis=-1, keepdims=True)
        var = ((h - mu) ** 2).mean(axis=-1, keepdims=True)
        return (h - mu) / np.sqrt(var + eps) * gain + bias
    if head.norm_kind == "rmsnorm":
        ms = (h ** 2).mean(axis=-1, keepdims=True)
        return h / np.sqrt(ms + eps) * gain
    return h


def layer_logits(trace: SequenceTrace, head: ModelHead, layer: int,
                 position: int) -> np.ndarray:
    """Decoded logits for one (layer, position); layer 0 is the embedding output."""
    _check_dims(trace, head)
    L = trace.dims.n_layers
    if not 0 <= layer <= L:
        raise ValueError(f"layer {layer} out of range [0, {L}]")
    h = trace.hidden_states[layer, position].astype(np.float64)
    normed = normalize_states(h, head)
    logits = normed @ head.unembed.astype(np.float64)
    if head.unembed_bias is not None:
        logits = logits + head.unembed_bias.astype(np.float64)
    return logits


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    x = np.asarray(logits, dtype=np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _prob_summaries(probs: np.ndarray):
    """entropy (nats), confidence, top1-top2 gap for each row of probs."""
    ent = -np.sum(np.where(probs > 0.0, probs * np.log(np.where(probs > 0.0, probs, 1.0)), 0.0),
                  axis=-1)
    if probs.shape[-1] >= 2:
        top2 = -np.partition(-probs, 1, axis=-1)[..., :2]
        conf = top2[..., 0]
        gap = top2[..., 0] - top2[..., 1]
    else:
        conf = probs[..., 0]
        gap = conf.copy()
    return ent, conf, gap


def layer_predictions(trace: SequenceTrace, head: ModelHead, layer: int,
                      chunk: int = DEFAULT_CHUNK) -> LayerPredictions:
    """Prediction summaries at every valid position, streamed in chunks.

    Per-layer logits are never materialized for the whole sequence; memory
    stays bounded at chunk x V.
    """
    _check_dims(trace, head)
    L = trace.dims.n_layers
    if not 0 <= layer <= L:
        raise ValueError(f"layer {layer} out of range [0, {L}]")
    pos = valid_positions(trace)
    unembed = head.unembed.astype(np.float64)
    ub = None if head.unembed_bias is None else head.unembed_bias.astype(np.float64)
    ent = np.empty(pos.size)
    conf = np.empty(pos.size)
    gap = np.empty(pos.size)
    for start in range(0, pos.size, chunk):
        sel = pos[start:start + chunk]
        h = trace.hidden_states[layer, sel].astype(np.float64)
        logits = normalize_states(h, head) @ unembed
        if ub is not None:
            logits = logits + ub
        probs = softmax_probs(logits)
        e, c, g = _prob_summaries(probs)
        ent[start:start + chunk] = e
        conf[start:start + chunk] = c
        gap[start:start + chunk] = g
    return LayerPredictions(layer=layer, positions=pos, entropy=ent,
                            confidence=conf, gap=gap)


def next_token_logprobs(trace: SequenceTrace, head: ModelHead,
                        chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """ln p(token at p_{j+1} | position p_j) over consecutive valid positions.

    Decoded from the final layer; length is n_valid - 1.
    """
    _check_dims(trace, head)
    pos = valid_positions(trace)
    L = trace.dims.n_layers
    unembed = head.unembed.astype(np.float64)
    ub = None if head.unembed_bias is None else head.unembed_bias.astype(np.float64)
    src = pos[:-1]
    targets = trace.token_ids[pos[1:]].astype(np.int64)
    out = np.empty(src.size)
    for start in range(0, src.size, chunk):
        sel = src[start:start + chunk]
        h = trace.hidden_states[L, sel].astype(np.float64)
        logits = normalize_states(h, head) @ unembed
        if ub is not None:
            logits = logits + ub
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1))
        tgt = targets[start:start + sel.shape[0]]
        out[start:start + sel.shape[0]] = shifted[np.arange(sel.shape[0]), tgt] - logz
    return out
