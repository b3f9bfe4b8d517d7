"""Bit-exact binary serialization for traces, model heads, and manifests.

Trace files (.mtrc), little-endian throughout:
    magic "MTRC" | version u32 | L u32 | H u32 | n u32 | d u32 | V u32 | flags u32
    token_ids  n x u32
    mask       n x u8
    hidden     (L+1)*n*d x f32   (layer, then position, then dimension)
    attention  L*H*n*n x f32     (layer, head, query, key)
    logits     n*V x f32         iff flags bit 0

Head files (.mthd):
    magic "MTHD" | version u32 | d u32 | V u32 | norm_kind u32 | epsilon f32 | flags u32
    gain d x f32 | bias d x f32 | unembed d*V x f32 (row-major d x V)
    unembed_bias V x f32         iff flags bit 0

Manifests are line-delimited JSON with keys trace, label, group, id and an
optional text field.
"""

import json
import os
import struct

import numpy as np

from .trace import (LABELS, NORM_KINDS, DatasetManifest, ManifestEntry,
                    ModelHead, SequenceTrace, TraceDims, validate_trace)

TRACE_MAGIC = b"MTRC"
HEAD_MAGIC = b"MTHD"
VERSION = 1

_TRACE_HEADER = struct.Struct("<4sIIIIIII")
_HEAD_HEADER = struct.Struct("<4sIIIIfI")

FLAG_FINAL_LOGITS = 1
FLAG_UNEMBED_BIAS = 1


class TraceFormatError(ValueError):
    pass


def write_trace(trace: SequenceTrace, destination) -> int:
    """Serialize a validated trace; returns the byte count written."""
    report = validate_trace(trace)
    if not report.ok:
        raise ValueError("refusing to write invalid trace: " + report.violations[0])
    d = trace.dims
    flags = FLAG_FINAL_LOGITS if trace.final_logits is not None else 0
    blob = bytearray()
    blob += _TRACE_HEADER.pack(TRACE_MAGIC, VERSION, d.n_layers, d.n_heads,
                               d.seq_len, d.hidden_dim, d.vocab_size, flags)
    blob += trace.token_ids.astype("<u4").tobytes()
    blob += trace.mask.astype("<u1").tobytes()
    blob += trace.hidden_states.astype("<f4").tobytes()
    blob += trace.attentions.astype("<f4").tobytes()
    if trace.final_logits is not None:
        blob += trace.final_logits.astype("<f4").tobytes()
    return _write_bytes(destination, bytes(blob))


def trace_file_size(dims: TraceDims, with_logits: bool) -> int:
    L, H, n, d, V = (dims.n_layers, dims.n_heads, dims.seq_len,
                     dims.hidden_dim, dims.vocab_size)
    size = _TRACE_HEADER.size + n * 4 + n + (L + 1) * n * d * 4 + L * H * n * n * 4
    if with_logits:
        size += n * V * 4
    return size


def read_trace(source) -> SequenceTrace:
    """Parse a trace file; the result is bit-identical to what was written."""
    blob = _read_bytes(source)
    if len(blob) < _TRACE_HEADER.size:
        raise TraceFormatError("truncated payload: file shorter than header")
    magic, version, L, H, n, d, V, flags = _TRACE_HEADER.unpack_from(blob)
    if magic != TRACE_MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TraceFormatError(f"unsupported version {version}")
    try:
        dims = TraceDims(int(L), int(H), int(n), int(d), int(V)).check()
    except ValueError as e:
        raise TraceFormatError(f"bad dimensions in header: {e}") from e
    with_logits = bool(flags & FLAG_FINAL_LOGITS)
    expect = trace_file_size(dims, with_logits)
    if len(blob) != expect:
        raise TraceFormatError(
            f"truncated payload: declared dims imply {expect} bytes, file has {len(blob)}")
    off = _TRACE_HEADER.size
    token_ids = np.frombuffer(blob, "<u4", n, off).copy()
    off += n * 4
    mask = np.frombuffer(blob, "<u1", n, off).copy()
    off += n
    hidden = np.frombuffer(blob, "<f4", (L + 1) * n * d, off).reshape(L + 1, n, d).copy()
    off += (L + 1) * n * d * 4
    attn = np.frombuffer(blob, "<f4", L * H * n * n, off).reshape(L, H, n, n).copy()
    off += L * H * n * n * 4
    logits = None
    if with_logits:
        logits = np.frombuffer(blob, "<f4", n * V, off).reshape(n, V).copy()
    return SequenceTrace(dims, token_ids, mask, hidden, attn, logits)


def write_head(head: ModelHead, destination) -> int:
    flags = FLAG_UNEMBED_BIAS if head.unembed_bias is not None else 0
    blob = bytearray()
    blob += _HEAD_HEADER.pack(HEAD_MAGIC, VERSION, head.hidden_dim, head.vocab_size,
                              NORM_KINDS.index(head.norm_kind),
                              np.float32(head.norm_epsilon), flags)
    blob += head.gain.astype("<f4").tobytes()
    blob += head.bias.astype("<f4").tobytes()
    blob += head.unembed.astype("<f4").tobytes()
    if head.unembed_bias is not None:
        blob += head.unembed_bias.astype("<f4").tobytes()
    return _write_bytes(destination, bytes(blob))


def read_head(source) -> ModelHead:
    blob = _read_bytes(source)
    if len(blob) < _HEAD_HEADER.size:
        raise TraceFormatError("truncated payload: file shorter than header")
    magic, version, d, V, kind, eps, flags = _HEAD_HEADER.unpack_from(blob)
    if magic != HEAD_MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TraceFormatError(f"unsupported version {version}")
    if kind >= len(NORM_KINDS):
        raise TraceFormatError(f"unknown norm kind {kind}")
    if d <= 0 or V <= 0:
        raise TraceFormatError(f"bad dimensions d={d} V={V}")
    with_bias = bool(flags & FLAG_UNEMBED_BIAS)
    expect = _HEAD_HEADER.size + (2 * d + d * V + (V if with_bias else 0)) * 4
    if len(blob) != expect:
        raise TraceFormatError(
            f"truncated payload: declared dims imply {expect} bytes, file has {len(blob)}")
    off = _HEAD_HEADER.size
    gain = np.frombuffer(blob, "<f4", d, off).copy()
    off += d * 4
    bias = np.frombuffer(blob, "<f4", d, off).copy()
    off += d * 4
    unembed = np.frombuffer(blob, "<f4", d * V, off).reshape(d, V).copy()
    off += d * V * 4
    ub = None
    if with_bias:
        ub = np.frombuffer(blob, "<f4", V, off).copy()
    return ModelHead(int(d), int(V), NORM_KINDS[kind], float(np.float32(eps)),
                     gain, bias, unembed, ub)


def read_manifest(source) -> DatasetManifest:
    """Parse a JSONL manifest; entries keep file order, duplicate ids rejected."""
    if hasattr(source, "read"):
        lines = source.read().splitlines()
        base = "."
    else:
        with open(source, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        base = os.path.dirname(os.path.abspath(source))
    entries = []
    seen = set()
    for ln, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValueError(f"manifest line {ln}: invalid JSON ({e})") from e
        for key in ("trace", "label", "group", "id"):
            if key not in rec:
                raise ValueError(f"manifest line {ln}: missing key {key!r}")
        if rec["label"] not in LABELS:
            raise ValueError(f"manifest line {ln}: unknown label {rec['label']!r}")
        if rec["id"] in seen:
            raise ValueError(f"duplicate id {rec['id']}")
        seen.add(rec["id"])
        entries.append(ManifestEntry(trace=rec["trace"], label=rec["label"],
                                     group=rec["group"], id=rec["id"],
                                     text=rec.get("text")))
    return DatasetManifest(entries, base_dir=base)


def write_manifest(manifest: DatasetManifest, destination) -> int:
    out = []
    for e in manifest.entries:
        rec = {"trace": e.trace, "label": e.label, "group": e.group, "id": e.id}
        if e.text is not None:
            rec["text"] = e.text
        out.append(json.dumps(rec, sort_keys=False))
    return _write_bytes(destination, ("\n".join(out) + "\n").encode("utf-8"))


def resolve_trace_path(manifest: DatasetManifest, entry: ManifestEntry) -> str:
    if os.path.isabs(entry.trace):
        return entry.trace
    return os.path.join(manifest.base_dir, entry.trace)


def _write_bytes(destination, blob: bytes) -> int:
    if hasattr(destination, "write"):
        destination.write(blob)
    else:
        with open(destination, "wb") as f:
            f.write(blob)
    return len(blob)


def _read_bytes(source) -> bytes:
    if hasattr(source, "read"):
        return source.read()
    with open(source, "rb") as f:
        return f.read()
