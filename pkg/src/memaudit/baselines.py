"""Reference-free output-only membership scores, computed from traces.

All scores follow the convention higher = more member-like, so one AUC
routine serves every method. Scores use the final-layer decoded
probabilities from the same trace files as the feature pipeline, which keeps
model conditions identical across methods.
"""

import math
import zlib

import numpy as np

from .lens import next_token_logprobs
from .trace import ModelHead, SequenceTrace


def sequence_nll(trace: SequenceTrace, head: ModelHead) -> float:
    """Mean next-token negative log-likelihood in nats over valid positions."""
    lp = next_token_logprobs(trace, head)
    return float(-lp.mean())


def perplexity_score(trace: SequenceTrace, head: ModelHead) -> float:
    """Negative perplexity: -exp(mean NLL)."""
    return -math.exp(sequence_nll(trace, head))


def min_k_score(trace: SequenceTrace, head: ModelHead, k_percent: float) -> float:
    """Mean of the lowest k% next-token log-probabilities.

    The selected count is ceil(k% of the prediction count), at least one.
    """
    if not 0 < k_percent <= 100:
        raise ValueError(f"k_percent must be in (0, 100], got {k_percent}")
    lp = next_token_logprobs(trace, head)
    count = math.ceil(k_percent / 100 * lp.size)
    count = max(1, min(count, lp.size))
    lowest = np.sort(lp)[:count]
    return float(lowest.mean())


def zlib_score(trace: SequenceTrace, head: ModelHead, raw_text: bytes) -> float:
    """Negative ratio of total model bits to DEFLATE-compressed size in bits."""
    if not raw_text:
        raise ValueError("zlib baseline needs non-empty raw text for the trace")
    lp = next_token_logprobs(trace, head)
    nll_bits = float(-lp.sum()) / math.log(2)
    compressed_bits = 8 * len(zlib.compress(raw_text))
    return -(nll_bits / compressed_bits)


def lowercase_score(trace: SequenceTrace, lowercased_trace: SequenceTrace,
                    head: ModelHead) -> float:
    """Negative ratio of original to lowercased perplexity."""
    ppl = math.exp(sequence_nll(trace, head))
    ppl_lower = math.exp(sequence_nll(lowercased_trace, head))
    return -(ppl / ppl_lower)


METHODS = ("ppl", "mink", "zlib", "lowercase")


def score_manifest(manifest, head: ModelHead, method: str, k_percent: float = 20.0,
                   paired=None):
    """Score every manifest entry; returns rows of (id, label, method, score).

    zlib requires each entry to carry a text field; lowercase requires a
    paired manifest holding the lowercased-text traces under the same ids.
    """
    from . import trace_io

    if method not in METHODS:
        raise ValueError(f"unknown baseline method {method!r}")
    paired_by_id = {}
    if method == "lowercase":
        if paired is None:
            raise ValueError("lowercase baseline needs a paired manifest")
        paired_by_id = {e.id: trace_io.resolve_trace_path(paired, e)
                        for e in paired.entries}
    rows = []
    for entry in manifest.entries:
        trace = trace_io.read_trace(trace_io.resolve_trace_path(manifest, entry))
        if method == "ppl":
            score = perplexity_score(trace, head)
        elif method == "mink":
            score = min_k_score(trace, head, k_percent)
        elif method == "zlib":
            if entry.text is None:
                raise ValueError(f"manifest entry {entry.id} has no text field")
            score = zlib_score(trace, head, entry.text.encode("utf-8"))
        else:
            if entry.id not in paired_by_id:
                raise ValueError(f"no paired trace for id {entry.id}")
            lowered = trace_io.read_trace(paired_by_id[entry.id])
            score = lowercase_score(trace, lowered, head)
        rows.append((entry.id, entry.label, method, score))
    return rows
