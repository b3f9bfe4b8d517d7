"""Behavioral feature extraction from activation traces.

One trace maps to one fixed-length vector describing how the model processed
the sequence: how hidden states move between layers, how confident the
per-layer decoded predictions are, how attention mass is distributed, and how
the running context representation evolves. Padded positions never
contribute.

Feature families and their registry names, for a model with L blocks:

  trans{i}_{surprise|nsurprise|stability}_{mean|min|max|std|argmin|argmax}
      for each transition i in [0, L)                      (18 per transition)
  pred{l}_{entropy|conf|gap}_{mean|min|max|std},
  pred{l}_conf_stability, pred{l}_tok{first|mid|last}_confstd
      for each lens layer l in [0, L]                      (16 per layer)
  attn{l}_{entropy|concentration|sparsity|selfattn|prevbias|meandist},
  attn{l}_head_{entropy|focus}_{mean|std|min|max}
      for each attention layer l in [0, L)                 (14 per layer)
  ctx{l}_{mean|std|min|max}, pos{l}_firstlast
      for each hidden layer l in [0, L]                    (5 per layer)
"""

import csv
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .lens import layer_predictions
from .trace import (DatasetManifest, ModelHead, SequenceTrace, TraceDims,
                    valid_positions, validate_trace)
from . import trace_io

ATTN_ENTROPY_EPS = 1e-10
CONF_STABILITY_EPS = 1e-8
TOKEN_WINDOW = 2  # half-width of the local confidence window

_STATS6 = ("mean", "min", "max", "std", "argmin", "argmax")
_STATS4 = ("mean", "min", "max", "std")


@dataclass
class FeatureVector:
    names: tuple
    values: np.ndarray
    flags: list = field(default_factory=list)

    def as_dict(self):
        return dict(zip(self.names, self.values))


@dataclass
class FeatureMatrix:
    names: tuple
    values: np.ndarray  # (rows, len(names)) float64
    labels: list
    ids: list


def registry_names(n_layers: int, n_heads: int) -> tuple:
    """Deterministic, duplicate-free feature name ordering."""
    L = n_layers
    names = []
    for i in range(L):
        for metric in ("surprise", "nsurprise", "stability"):
            for stat in _STATS6:
                names.append(f"trans{i}_{metric}_{stat}")
    for l in range(L + 1):
        for metric in ("entropy", "conf", "gap"):
            for stat in _STATS4:
                names.append(f"pred{l}_{metric}_{stat}")
        names.append(f"pred{l}_conf_stability")
        for where in ("first", "mid", "last"):
            names.append(f"pred{l}_tok{where}_confstd")
    for l in range(L):
        for metric in ("entropy", "concentration", "sparsity", "selfattn",
                       "prevbias", "meandist"):
            names.append(f"attn{l}_{metric}")
        for metric in ("entropy", "focus"):
            for stat in ("mean", "std", "min", "max"):
                names.append(f"attn{l}_head_{metric}_{stat}")
    for l in range(L + 1):
        for stat in ("mean", "std", "min", "max"):
            names.append(f"ctx{l}_{stat}")
        names.append(f"pos{l}_firstlast")
    return tuple(names)


def feature_registry(dims: TraceDims) -> tuple:
    dims.check()
    return registry_names(dims.n_layers, dims.n_heads)


def layer_tag(name: str) -> int:
    """Layer a feature is attributed to, for layer-filtered extraction.

    Transitions and attention maps sit between two hidden layers; both are
    tagged to the destination layer (block l's attention feeds state l+1).
    """
    fam, rest = name.split("_", 1)[0], name
    if fam.startswith("trans"):
        return int(fam[5:]) + 1
    if fam.startswith("pred"):
        return int(fam[4:])
    if fam.startswith("attn"):
        return int(fam[4:]) + 1
    if fam.startswith("ctx"):
        return int(fam[3:])
    if fam.startswith("pos"):
        return int(fam[3:])
    raise ValueError(f"unrecognized feature name {rest!r}")


def stat_summary(values: np.ndarray) -> dict:
    """mean/min/max/population-std plus fractional argmin/argmax positions."""
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    denom = n - 1 if n > 1 else 1
    return {
        "mean": float(x.mean()),
        "min": float(x.min()),
        "max": float(x.max()),
        "std": float(x.std()),
        "argmin": float(int(np.argmin(x)) / denom) if n > 1 else 0.0,
        "argmax": float(int(np.argmax(x)) / denom) if n > 1 else 0.0,
    }


def transition_features(trace: SequenceTrace, i: int, flags: Optional[list] = None):
    """Hidden-state movement between layer i and i+1, per valid position.

    surprise  = ||h_{i+1} - h_i||2
    nsurprise = same distance after unit-normalizing both states
    stability = cosine similarity of the two states
    """
    L = trace.dims.n_layers
    if not 0 <= i <= L - 1:
        raise ValueError(f"transition {i} out of range [0, {L - 1}]")
    pos = valid_positions(trace)
    a = trace.hidden_states[i, pos].astype(np.float64)
    b = trace.hidden_states[i + 1, pos].astype(np.float64)
    surprise = np.linalg.norm(b - a, axis=1)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero = (na == 0.0) | (nb == 0.0)
    if zero.any() and flags is not None:
        for t in pos[zero]:
            flags.append(f"zero-norm hidden state in transition {i} at t={int(t)}")
    ahat = np.where(na[:, None] > 0.0, a / np.where(na[:, None] > 0.0, na[:, None], 1.0), 0.0)
    bhat = np.where(nb[:, None] > 0.0, b / np.where(nb[:, None] > 0.0, nb[:, None], 1.0), 0.0)
    nsurprise = np.linalg.norm(bhat - ahat, axis=1)
    stability = np.where(zero, 0.0, np.sum(ahat * bhat, axis=1))
    out = {}
    for metric, vals in (("surprise", surprise), ("nsurprise", nsurprise),
                         ("stability", stability)):
        for stat, v in stat_summary(vals).items():
            out[f"trans{i}_{metric}_{stat}"] = v
    return out


def prediction_features(preds) -> dict:
    """Aggregates of per-position entropy/confidence/gap for one lens layer."""
    l = preds.layer
    out = {}
    for metric, vals in (("entropy", preds.entropy), ("conf", preds.confidence),
                         ("gap", preds.gap)):
        s = stat_summary(vals)
        for stat in _STATS4:
            out[f"pred{l}_{metric}_{stat}"] = s[stat]
    conf = preds.confidence
    out[f"pred{l}_conf_stability"] = float(conf.mean() / (conf.std() + CONF_STABILITY_EPS))
    pos = preds.positions
    m = pos.size
    anchors = (("first", pos[0]), ("mid", pos[(m - 1) // 2]), ("last", pos[m - 1]))
    for where, k in anchors:
        sel = (pos >= k - TOKEN_WINDOW) & (pos <= k + TOKEN_WINDOW)
        out[f"pred{l}_tok{where}_confstd"] = float(conf[sel].std())
    return out


def attention_layer_features(trace: SequenceTrace, l: int) -> dict:
    """Distribution and position statistics of layer l's attention maps.

    Only valid queries t and valid causal keys s <= t participate. Entropy is
    in bits; the sparsity threshold is the layer's own mean over the valid
    causal entries of the head-averaged map.
    """
    L, H = trace.dims.n_layers, trace.dims.n_heads
    if not 0 <= l <= L - 1:
        raise ValueError(f"attention layer {l} out of range [0, {L - 1}]")
    pos = valid_positions(trace)
    m = pos.size
    att = trace.attentions[l].astype(np.float64)  # (H, n, n)
    sub = att[:, pos[:, None], pos[None, :]]      # (H, m, m) valid x valid
    causal = pos[None, :] <= pos[:, None]         # (m, m)
    sub = sub * causal[None, :, :]

    abar = sub.mean(axis=0)                       # (m, m)

    plog = np.log2(abar + ATTN_ENTROPY_EPS) * causal
    entropy = float(-(abar * plog).sum() / m)

    concentration = float(np.where(causal, abar, -np.inf).max(axis=1).mean())

    n_entries = int(causal.sum())
    tau = float(abar[causal].mean())
    sparsity = float((abar[causal] < tau).sum() / n_entries)

    selfattn = float(np.diagonal(abar).mean())

    # attention from each valid position (second onward) to the absolutely
    # previous token index
    att_mean = att.mean(axis=0)
    prev = np.empty(m - 1)
    for j in range(1, m):
        t = pos[j]
        prev[j - 1] = att_mean[t, t - 1]
    prevbias = float(prev.mean())

    dist = np.abs(pos[:, None] - pos[None, :]).astype(np.float64)
    meandist = float((dist * abar).sum() / abar.sum())

    head_ent = np.empty(H)
    head_focus = np.empty(H)
    for h in range(H):
        a = sub[h]
        head_ent[h] = -(a * (np.log2(a + ATTN_ENTROPY_EPS) * causal)).sum() / m
        head_focus[h] = np.where(causal, a, -np.inf).max(axis=1).mean()

    out = {
        f"attn{l}_entropy": entropy,
        f"attn{l}_concentration": concentration,
        f"attn{l}_sparsity": sparsity,
        f"attn{l}_selfattn": selfattn,
        f"attn{l}_prevbias": prevbias,
        f"attn{l}_meandist": meandist,
    }
    for metric, vals in (("entropy", head_ent), ("focus", head_focus)):
        out[f"attn{l}_head_{metric}_mean"] = float(vals.mean())
        out[f"attn{l}_head_{metric}_std"] = float(vals.std())
        out[f"attn{l}_head_{metric}_min"] = float(vals.min())
        out[f"attn{l}_head_{metric}_max"] = float(vals.max())
    return out


def context_evolution_features(trace: SequenceTrace, l: int) -> dict:
    """How much the running mean representation moves per added token."""
    pos = valid_positions(trace)
    h = trace.hidden_states[l, pos].astype(np.float64)
    running = np.cumsum(h, axis=0) / np.arange(1, pos.size + 1)[:, None]
    steps = np.linalg.norm(np.diff(running, axis=0), axis=1)
    return {
        f"ctx{l}_mean": float(steps.mean()),
        f"ctx{l}_std": float(steps.std()),
        f"ctx{l}_min": float(steps.min()),
        f"ctx{l}_max": float(steps.max()),
    }


def first_last_similarity(trace: SequenceTrace, l: int,
                          flags: Optional[list] = None) -> dict:
    pos = valid_positions(trace)
    a = trace.hidden_states[l, pos[0]].astype(np.float64)
    b = trace.hidden_states[l, pos[-1]].astype(np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        if flags is not None:
            flags.append(f"zero-norm hidden state in first/last similarity at layer {l}")
        value = 0.0
    else:
        value = float(a @ b / (na * nb))
    return {f"pos{l}_firstlast": value}


def extract_features(trace: SequenceTrace, head: ModelHead,
                     trace_id: str = "<trace>") -> FeatureVector:
    """Full feature vector for one trace, in registry order."""
    report = validate_trace(trace)
    if not report.ok:
        raise ValueError(f"invalid trace {trace_id}: {report.violations[0]}")
    names = feature_registry(trace.dims)
    flags = []
    out = {}
    L = trace.dims.n_layers
    for i in range(L):
        out.update(transition_features(trace, i, flags))
    for l in range(L + 1):
        out.update(prediction_features(layer_predictions(trace, head, l)))
    for l in range(L):
        out.update(attention_layer_features(trace, l))
    for l in range(L + 1):
        out.update(context_evolution_features(trace, l))
        out.update(first_last_similarity(trace, l, flags))
    values = np.array([out[n] for n in names], dtype=np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        name = names[int(np.flatnonzero(bad)[0])]
        raise ValueError(f"non-finite feature {name} for trace {trace_id}")
    return FeatureVector(names=names, values=values, flags=flags)


def _extract_one(args):
    path, head, layer_filter, expect = args
    trace = trace_io.read_trace(path)
    d = trace.dims
    if expect is not None and (d.n_layers, d.n_heads, d.hidden_dim,
                               d.vocab_size) != expect:
        raise ValueError(f"heterogeneous trace dimensions at {path}")
    vec = extract_features(trace, head, trace_id=os.path.basename(path))
    if layer_filter is None:
        return vec.values
    keep = [j for j, n in enumerate(vec.names) if layer_tag(n) == layer_filter]
    return vec.values[keep]


_WORKER_STATE = {}


def _init_worker(head_path, layer_filter, expect):
    _WORKER_STATE["head"] = trace_io.read_head(head_path)
    _WORKER_STATE["layer_filter"] = layer_filter
    _WORKER_STATE["expect"] = expect


def _worker_extract(path):
    return _extract_one((path, _WORKER_STATE["head"], _WORKER_STATE["layer_filter"],
                         _WORKER_STATE["expect"]))


def extract_matrix(manifest: DatasetManifest, head: ModelHead,
                   layer_filter: Optional[int] = None, workers: int = 1,
                   head_path: Optional[str] = None) -> FeatureMatrix:
    """Feature matrix over a manifest, one row per entry, in manifest order.

    layer_filter keeps only features tagged to that layer. Output is
    independent of the worker count.
    """
    if len(manifest) == 0:
        raise ValueError("empty dataset")
    paths = [trace_io.resolve_trace_path(manifest, e) for e in manifest.entries]
    first = trace_io.read_trace(paths[0])
    names = feature_registry(first.dims)
    dims0 = first.dims
    if layer_filter is not None:
        if not 0 <= layer_filter <= dims0.n_layers:
            raise ValueError(f"layer filter {layer_filter} out of range "
                             f"[0, {dims0.n_layers}]")
        names = tuple(n for n in names if layer_tag(n) == layer_filter)

    expect = (dims0.n_layers, dims0.n_heads, dims0.hidden_dim, dims0.vocab_size)
    if workers > 1 and head_path is not None and len(paths) > 1:
        import concurrent.futures as cf
        with cf.ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                    initargs=(head_path, layer_filter, expect)) as pool:
            rows = list(pool.map(_worker_extract, paths, chunksize=8))
    else:
        rows = [_extract_one((path, head, layer_filter, expect)) for path in paths]
    X = np.vstack(rows)
    return FeatureMatrix(names=names, values=X, labels=manifest.labels(),
                         ids=manifest.ids())


def filter_matrix(matrix: FeatureMatrix, layer_filter: int) -> FeatureMatrix:
    """Column subset of an already-extracted matrix for one layer tag."""
    keep = [j for j, n in enumerate(matrix.names) if layer_tag(n) == layer_filter]
    return FeatureMatrix(names=tuple(matrix.names[j] for j in keep),
                         values=matrix.values[:, keep],
                         labels=list(matrix.labels), ids=list(matrix.ids))


def save_matrix_csv(matrix: FeatureMatrix, destination) -> None:
    """CSV with header id,label,<names...>; values at 17 significant digits."""
    own = not hasattr(destination, "write")
    f = open(destination, "w", newline="", encoding="utf-8") if own else destination
    try:
        f.write("id,label," + ",".join(matrix.names) + "\n")
        for i in range(matrix.values.shape[0]):
            row = ",".join(f"{v:.17g}" for v in matrix.values[i])
            f.write(f"{matrix.ids[i]},{matrix.labels[i]},{row}\n")
    finally:
        if own:
            f.close()


def load_matrix_csv(source) -> FeatureMatrix:
    own = not hasattr(source, "read")
    f = open(source, "r", newline="", encoding="utf-8") if own else source
    try:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[:2] != ["id", "label"]:
            raise ValueError("feature CSV must start with id,label columns")
        names = tuple(header[2:])
        ids, labels, rows = [], [], []
        for rec in reader:
            if not rec:
                continue
            ids.append(rec[0])
            labels.append(rec[1])
            rows.append([float(x) for x in rec[2:]])
        if not rows:
            raise ValueError("empty dataset")
        return FeatureMatrix(names=names, values=np.array(rows, dtype=np.float64),
                             labels=labels, ids=ids)
    finally:
        if own:
            f.close()
