"""Writers for the trace file formats consumed by the auditing toolkit.

These are implemented here independently; the byte layout below is the whole
contract between the exporter and the toolkit, so nothing else is shared.

Trace files (.mtrc), little-endian:
    magic "MTRC" | version u32=1 | L u32 | H u32 | n u32 | d u32 | V u32 | flags u32
    token_ids n x u32 | mask n x u8
    hidden (L+1)*n*d x f32 | attention L*H*n*n x f32
    logits n*V x f32 iff flags bit 0

Head files (.mthd):
    magic "MTHD" | version u32=1 | d u32 | V u32 | norm_kind u32
    | epsilon f32 | flags u32
    gain d x f32 | bias d x f32 | unembed d*V x f32 (d rows of V)
    unembed_bias V x f32 iff flags bit 0

norm_kind: 0 layernorm, 1 rmsnorm, 2 identity. Manifests are JSON lines with
keys trace, label, group, id and an optional text field.
"""

import json
import struct

import numpy as np

TRACE_MAGIC = b"MTRC"
HEAD_MAGIC = b"MTHD"
VERSION = 1
NORM_KINDS = {"layernorm": 0, "rmsnorm": 1, "identity": 2}

_TRACE_HEADER = struct.Struct("<4sIIIIIII")
_HEAD_HEADER = struct.Struct("<4sIIIIfI")


def write_trace(path, token_ids, mask, hidden_states, attentions, vocab_size,
                final_logits=None):
    """hidden_states: (L+1, n, d); attentions: (L, H, n, n)."""
    token_ids = np.ascontiguousarray(token_ids, dtype="<u4")
    mask = np.ascontiguousarray(mask, dtype="<u1")
    hidden_states = np.ascontiguousarray(hidden_states, dtype="<f4")
    attentions = np.ascontiguousarray(attentions, dtype="<f4")
    L, H, n = attentions.shape[0], attentions.shape[1], token_ids.shape[0]
    d = hidden_states.shape[2]
    if hidden_states.shape != (L + 1, n, d):
        raise ValueError(f"hidden_states shape {hidden_states.shape} inconsistent "
                         f"with L={L}, n={n}")
    if attentions.shape != (L, H, n, n):
        raise ValueError(f"attentions shape {attentions.shape} inconsistent")
    flags = 0 if final_logits is None else 1
    with open(path, "wb") as f:
        f.write(_TRACE_HEADER.pack(TRACE_MAGIC, VERSION, L, H, n, d,
                                   int(vocab_size), flags))
        f.write(token_ids.tobytes())
        f.write(mask.tobytes())
        f.write(hidden_states.tobytes())
        f.write(attentions.tobytes())
        if final_logits is not None:
            f.write(np.ascontiguousarray(final_logits, dtype="<f4").tobytes())


def write_head(path, norm_kind, epsilon, gain, bias, unembed, unembed_bias=None):
    """unembed: (d, V) with rows indexed by hidden dimension."""
    if norm_kind not in NORM_KINDS:
        raise ValueError(f"unknown norm kind {norm_kind!r}")
    gain = np.ascontiguousarray(gain, dtype="<f4")
    bias = np.ascontiguousarray(bias, dtype="<f4")
    unembed = np.ascontiguousarray(unembed, dtype="<f4")
    d, V = unembed.shape
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("gain/bias must match the hidden dimension")
    flags = 0 if unembed_bias is None else 1
    with open(path, "wb") as f:
        f.write(_HEAD_HEADER.pack(HEAD_MAGIC, VERSION, d, V,
                                  NORM_KINDS[norm_kind], float(epsilon), flags))
        f.write(gain.tobytes())
        f.write(bias.tobytes())
        f.write(unembed.tobytes())
        if unembed_bias is not None:
            f.write(np.ascontiguousarray(unembed_bias, dtype="<f4").tobytes())


def write_manifest(path, entries):
    """entries: iterables of dicts with trace/label/group/id (+ optional text)."""
    with open(path, "w", encoding="utf-8") as f:
        for entry in entries:
            rec = {"trace": entry["trace"], "label": entry["label"],
                   "group": entry.get("group", "default"), "id": entry["id"]}
            if entry.get("text") is not None:
                rec["text"] = entry["text"]
            f.write(json.dumps(rec) + "\n")
