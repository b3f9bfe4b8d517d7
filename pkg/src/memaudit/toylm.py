"""Small deterministic decoder-only transformer with hand-derived gradients.

Pre-norm blocks (x += Attn(LN(x)); x += MLP(LN(x))) with ReLU MLPs, learned
absolute positional embeddings, untied unembedding, and causal masked
softmax attention scaled by 1/sqrt(d/H). Everything runs in float64 numpy;
training uses Adam. The model exists to memorize small corpora and emit
traces, not to be a faithful replica of any production architecture.
"""

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .trace import ModelHead, SequenceTrace, TraceDims
from . import trace_io

LN_EPS = 1e-5
INIT_STD = 0.02
NEG_INF = -1e30

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class ToyConfig:
    vocab_size: int
    context_len: int
    n_layers: int
    n_heads: int
    hidden_dim: int
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by "
                             f"n_heads {self.n_heads}")
        for name in ("vocab_size", "context_len", "n_layers", "n_heads", "hidden_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def head_dim(self):
        return self.hidden_dim // self.n_heads

    @property
    def mlp_dim(self):
        return 4 * self.hidden_dim

    def as_dict(self):
        return {"vocab_size": self.vocab_size, "context_len": self.context_len,
                "n_layers": self.n_layers, "n_heads": self.n_heads,
                "hidden_dim": self.hidden_dim, "seed": self.seed}


@dataclass
class ToyParams:
    config: ToyConfig
    tensors: dict  # name -> float64 ndarray

    def copy(self):
        return ToyParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_params(config: ToyConfig) -> ToyParams:
    """Seeded Gaussian init (std 0.02); norm gains 1, all biases 0."""
    rng = np.random.default_rng(config.seed)
    d, dm, V = config.hidden_dim, config.mlp_dim, config.vocab_size
    t = {
        "tok_emb": rng.normal(0.0, INIT_STD, (V, d)),
        "pos_emb": rng.normal(0.0, INIT_STD, (config.context_len, d)),
    }
    for b in range(config.n_layers):
        p = f"block{b}."
        t[p + "ln1_gain"] = np.ones(d)
        t[p + "ln1_bias"] = np.zeros(d)
        t[p + "wq"] = rng.normal(0.0, INIT_STD, (d, d))
        t[p + "wk"] = rng.normal(0.0, INIT_STD, (d, d))
        t[p + "wv"] = rng.normal(0.0, INIT_STD, (d, d))
        t[p + "wo"] = rng.normal(0.0, INIT_STD, (d, d))
        t[p + "ln2_gain"] = np.ones(d)
        t[p + "ln2_bias"] = np.zeros(d)
        t[p + "w1"] = rng.normal(0.0, INIT_STD, (d, dm))
        t[p + "b1"] = np.zeros(dm)
        t[p + "w2"] = rng.normal(0.0, INIT_STD, (dm, d))
        t[p + "b2"] = np.zeros(d)
    t["final_ln_gain"] = np.ones(d)
    t["final_ln_bias"] = np.zeros(d)
    t["unembed"] = rng.normal(0.0, INIT_STD, (d, V))
    return ToyParams(config, t)


def _layernorm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layernorm_backward(dy, gain, cache):
    xhat, inv = cache
    dgain = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbias = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dgain, dbias


def _softmax(scores):
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_batch(params: ToyParams, tokens: np.ndarray, lens: np.ndarray,
                   want_cache: bool):
    """Forward pass over a (B, n) batch; returns logits and optional cache.

    Attention keys are masked causally and to valid positions; queries are
    computed everywhere, rows of padded queries simply go unused.
    """
    cfg = params.config
    t = params.tensors
    B, n = tokens.shape
    if n > cfg.context_len:
        raise ValueError(f"sequence length {n} exceeds context {cfg.context_len}")
    if tokens.max() >= cfg.vocab_size:
        raise ValueError(f"token id {int(tokens.max())} >= vocab {cfg.vocab_size}")
    H, dh, d = cfg.n_heads, cfg.head_dim, cfg.hidden_dim

    x = t["tok_emb"][tokens] + t["pos_emb"][:n]
    pos = np.arange(n)
    causal = pos[None, :] <= pos[:, None]  # keys s <= query t
    key_valid = pos[None, :] < lens[:, None]  # (B, n)
    allowed = causal[None, None, :, :] & key_valid[:, None, None, :]

    cache = {"tokens": tokens, "lens": lens, "x0": x, "blocks": [],
             "allowed": allowed} if want_cache else None
    hiddens = [x]
    attns = []

    for b in range(cfg.n_layers):
        p = f"block{b}."
        u, ln1c = _layernorm(x, t[p + "ln1_gain"], t[p + "ln1_bias"])
        q = (u @ t[p + "wq"]).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        k = (u @ t[p + "wk"]).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        v = (u @ t[p + "wv"]).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
        scores = np.where(allowed, scores, NEG_INF)
        A = _softmax(scores)  # (B, H, n, n)
        z = (A @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
        attn_out = z @ t[p + "wo"]
        x_attn = x + attn_out

        w, ln2c = _layernorm(x_attn, t[p + "ln2_gain"], t[p + "ln2_bias"])
        m1 = w @ t[p + "w1"] + t[p + "b1"]
        a = np.maximum(m1, 0.0)
        mlp_out = a @ t[p + "w2"] + t[p + "b2"]
        x = x_attn + mlp_out

        hiddens.append(x)
        attns.append(A)
        if want_cache:
            cache["blocks"].append({"ln1c": ln1c, "u": u, "q": q, "k": k, "v": v,
                                    "A": A, "z": z, "x_attn": x_attn,
                                    "ln2c": ln2c, "w": w, "m1": m1, "a": a})

    xf, lnfc = _layernorm(x, t["final_ln_gain"], t["final_ln_bias"])
    logits = xf @ t["unembed"]
    if want_cache:
        cache["lnfc"] = lnfc
        cache["xf"] = xf
        cache["hiddens"] = hiddens
        cache["attns"] = attns
    return logits, cache


def _loss_from_logits(logits, tokens, lens):
    """Mean next-token cross-entropy over valid predictions; also returns the
    per-prediction weight matrix and log-probabilities used by backward."""
    B, n, V = logits.shape
    pos = np.arange(n)
    predict = pos[None, :] < (lens[:, None] - 1)  # (B, n), t predicts t+1
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    targets = np.zeros((B, n), dtype=np.int64)
    targets[:, :-1] = tokens[:, 1:]
    tgt_logp = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0] - logz
    count = int(predict.sum())
    if count == 0:
        raise ValueError("no next-token predictions: all sequences shorter than 2")
    total = -(tgt_logp * predict).sum()
    return total / count, predict, targets, count


def forward(params: ToyParams, token_ids, pad_to: int = None):
    """Run one sequence; returns its trace and per-position loss terms.

    The trace records the embedding output, every block output, all
    attention maps, and final logits. loss_terms[t] = -ln p(token_{t+1} | t)
    for t in [0, len-2].
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("token_ids must be one-dimensional")
    ell = ids.size
    n = ell if pad_to is None else pad_to
    if n < ell:
        raise ValueError(f"pad_to {pad_to} shorter than sequence {ell}")
    cfg = params.config
    tokens = np.zeros((1, n), dtype=np.int64)
    tokens[0, :ell] = ids
    lens = np.array([ell], dtype=np.int64)
    logits, cache = _forward_batch(params, tokens, lens, want_cache=True)

    shifted = logits[0] - logits[0].max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    loss_terms = np.array([-(shifted[t, ids[t + 1]] - logz[t]) for t in range(ell - 1)])

    dims = TraceDims(cfg.n_layers, cfg.n_heads, n, cfg.hidden_dim, cfg.vocab_size)
    mask = np.zeros(n, dtype=np.uint8)
    mask[:ell] = 1
    hidden = np.stack([h[0] for h in cache["hiddens"]]).astype(np.float32)
    attn = np.stack([a[0] for a in cache["attns"]]).astype(np.float32)
    trace = SequenceTrace(dims, tokens[0].astype(np.uint32), mask, hidden,
                          attn, logits[0].astype(np.float32))
    return trace, loss_terms


def loss(params: ToyParams, token_ids) -> float:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size < 2:
        raise ValueError("need at least 2 tokens for a next-token loss")
    logits, _ = _forward_batch(params, ids[None, :], np.array([ids.size]), False)
    value, _, _, _ = _loss_from_logits(logits, ids[None, :], np.array([ids.size]))
    return float(value)


def _backward_batch(params: ToyParams, tokens, lens):
    cfg = params.config
    t = params.tensors
    B, n = tokens.shape
    H, dh, d = cfg.n_heads, cfg.head_dim, cfg.hidden_dim

    logits, cache = _forward_batch(params, tokens, lens, want_cache=True)
    value, predict, targets, count = _loss_from_logits(logits, tokens, lens)

    probs = _softmax(logits)
    dlogits = probs.copy()
    rows = np.arange(B)[:, None], np.arange(n)[None, :]
    dlogits[rows[0], rows[1], targets] -= 1.0
    dlogits *= predict[..., None] / count

    grads = {}
    grads["unembed"] = cache["xf"].reshape(-1, d).T @ dlogits.reshape(-1, cfg.vocab_size)
    dxf = dlogits @ t["unembed"].T
    dx, dg, db = _layernorm_backward(dxf, t["final_ln_gain"], cache["lnfc"])
    grads["final_ln_gain"] = dg
    grads["final_ln_bias"] = db

    scale = 1.0 / math.sqrt(dh)
    for b in reversed(range(cfg.n_layers)):
        p = f"block{b}."
        blk = cache["blocks"][b]
        # MLP branch
        dmlp_out = dx
        grads[p + "b2"] = dmlp_out.sum(axis=(0, 1))
        grads[p + "w2"] = blk["a"].reshape(-1, cfg.mlp_dim).T @ dmlp_out.reshape(-1, d)
        da = dmlp_out @ t[p + "w2"].T
        dm1 = da * (blk["m1"] > 0.0)
        grads[p + "b1"] = dm1.sum(axis=(0, 1))
        grads[p + "w1"] = blk["w"].reshape(-1, d).T @ dm1.reshape(-1, cfg.mlp_dim)
        dw = dm1 @ t[p + "w1"].T
        dx_attn, dg2, db2 = _layernorm_backward(dw, t[p + "ln2_gain"], blk["ln2c"])
        grads[p + "ln2_gain"] = dg2
        grads[p + "ln2_bias"] = db2
        dx_attn = dx_attn + dx  # residual

        # attention branch
        dattn_out = dx_attn
        grads[p + "wo"] = blk["z"].reshape(-1, d).T @ dattn_out.reshape(-1, d)
        dz = (dattn_out @ t[p + "wo"].T).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        A, q, k, v = blk["A"], blk["q"], blk["k"], blk["v"]
        dA = dz @ v.transpose(0, 1, 3, 2)
        dv = A.transpose(0, 1, 3, 2) @ dz
        dscores = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
        dq = dscores @ k * scale
        dk = dscores.transpose(0, 1, 3, 2) @ q * scale
        du = (dq.transpose(0, 2, 1, 3).reshape(B, n, d) @ t[p + "wq"].T
              + dk.transpose(0, 2, 1, 3).reshape(B, n, d) @ t[p + "wk"].T
              + dv.transpose(0, 2, 1, 3).reshape(B, n, d) @ t[p + "wv"].T)
        u2 = blk["u"].reshape(-1, d)
        grads[p + "wq"] = u2.T @ dq.transpose(0, 2, 1, 3).reshape(-1, d)
        grads[p + "wk"] = u2.T @ dk.transpose(0, 2, 1, 3).reshape(-1, d)
        grads[p + "wv"] = u2.T @ dv.transpose(0, 2, 1, 3).reshape(-1, d)
        dx_ln, dg1, db1 = _layernorm_backward(du, t[p + "ln1_gain"], blk["ln1c"])
        grads[p + "ln1_gain"] = dg1
        grads[p + "ln1_bias"] = db1
        dx = dx_attn + dx_ln  # residual

    grads["pos_emb"] = np.zeros_like(t["pos_emb"])
    grads["pos_emb"][:n] = dx.sum(axis=0)
    grads["tok_emb"] = np.zeros_like(t["tok_emb"])
    np.add.at(grads["tok_emb"], tokens.reshape(-1), dx.reshape(-1, d))
    return float(value), grads


def backward(params: ToyParams, token_ids):
    """Exact analytic gradients of loss() for every parameter tensor."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size < 2:
        raise ValueError("need at least 2 tokens for a next-token loss")
    _, grads = _backward_batch(params, ids[None, :], np.array([ids.size]))
    return grads


def train(params: ToyParams, sequences, steps: int, lr: float,
          batch_size: int = 16, seed: int = 0):
    """Adam on next-token loss over the member set; deterministic batching.

    Batches walk a seeded permutation of the member set, reshuffled each
    epoch. Returns updated params and the per-step loss curve.
    """
    if len(sequences) == 0:
        raise ValueError("empty member set")
    seqs = np.asarray(sequences, dtype=np.int64)
    if seqs.ndim != 2:
        raise ValueError("sequences must be a rectangular (count, length) array")
    N = seqs.shape[0]
    lens = np.full(batch_size, seqs.shape[1], dtype=np.int64)

    out = params.copy()
    m = {k: np.zeros_like(v) for k, v in out.tensors.items()}
    v = {k: np.zeros_like(vv) for k, vv in out.tensors.items()}
    rng = np.random.default_rng(seed)
    order = rng.permutation(N)
    cursor = 0
    curve = np.empty(steps)
    for step in range(steps):
        if cursor + batch_size > N:
            order = rng.permutation(N)
            cursor = 0
        batch = seqs[order[cursor:cursor + batch_size]]
        cursor += batch_size
        value, grads = _backward_batch(out, batch, lens[:batch.shape[0]])
        if not math.isfinite(value):
            raise FloatingPointError(f"training diverged at step {step}: loss {value}")
        curve[step] = value
        tstep = step + 1
        bc1 = 1.0 - ADAM_BETA1 ** tstep
        bc2 = 1.0 - ADAM_BETA2 ** tstep
        for key, g in grads.items():
            m[key] = ADAM_BETA1 * m[key] + (1 - ADAM_BETA1) * g
            v[key] = ADAM_BETA2 * v[key] + (1 - ADAM_BETA2) * g * g
            out.tensors[key] -= lr * (m[key] / bc1) / (np.sqrt(v[key] / bc2) + ADAM_EPS)
    return out, curve


def mean_loss(params: ToyParams, sequences, batch_size: int = 32) -> float:
    """Mean per-prediction loss over a set of equal-length sequences."""
    seqs = np.asarray(sequences, dtype=np.int64)
    total, count = 0.0, 0
    for start in range(0, seqs.shape[0], batch_size):
        batch = seqs[start:start + batch_size]
        lens = np.full(batch.shape[0], seqs.shape[1], dtype=np.int64)
        logits, _ = _forward_batch(params, batch, lens, False)
        value, predict, _, c = _loss_from_logits(logits, batch, lens)
        total += float(value) * c
        count += c
    return total / count


def export_head(params: ToyParams) -> ModelHead:
    t = params.tensors
    return ModelHead(hidden_dim=params.config.hidden_dim,
                     vocab_size=params.config.vocab_size,
                     norm_kind="layernorm", norm_epsilon=LN_EPS,
                     gain=t["final_ln_gain"], bias=t["final_ln_bias"],
                     unembed=t["unembed"], unembed_bias=None)


def export(params: ToyParams, sequences, ids, out_dir, pad_to: int = None):
    """Write one .mtrc per sequence plus the model head; returns the paths."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    head_path = os.path.join(out_dir, "model.mthd")
    trace_io.write_head(export_head(params), head_path)
    paths = []
    for seq, sid in zip(sequences, ids):
        trace, _ = forward(params, seq, pad_to=pad_to)
        path = os.path.join(out_dir, f"{sid}.mtrc")
        trace_io.write_trace(trace, path)
        paths.append(path)
    return paths, head_path


def markov_sequences(count: int, length: int, vocab: int, seed: int,
                     concentration: float = 1.5):
    """Sequences from a seeded order-1 Markov chain over the vocabulary.

    The chain's rows are softmax(N(0, concentration^2)) over next tokens;
    higher concentration gives lower-entropy, more learnable chains.
    """
    rng = np.random.default_rng(seed)
    logits = rng.normal(0.0, concentration, (vocab, vocab))
    rows = np.exp(logits - logits.max(axis=1, keepdims=True))
    rows /= rows.sum(axis=1, keepdims=True)
    start = rng.integers(0, vocab, count)
    out = np.empty((count, length), dtype=np.int64)
    out[:, 0] = start
    for t in range(1, length):
        u = rng.random(count)
        cdf = np.cumsum(rows[out[:, t - 1]], axis=1)
        out[:, t] = (u[:, None] > cdf).sum(axis=1)
    return out


def write_params(params: ToyParams, destination) -> int:
    """Deterministic binary container: config JSON + named float64 tensors."""
    blob = bytearray()
    blob += b"TOYP"
    blob += struct.pack("<I", 1)
    cfg = json.dumps(params.config.as_dict(), sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(cfg)) + cfg
    names = sorted(params.tensors)
    blob += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f8")
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb)) + nb
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    data = bytes(blob)
    if hasattr(destination, "write"):
        destination.write(data)
    else:
        with open(destination, "wb") as f:
            f.write(data)
    return len(data)


def read_params(source) -> ToyParams:
    if hasattr(source, "read"):
        blob = source.read()
    else:
        with open(source, "rb") as f:
            blob = f.read()
    if blob[:4] != b"TOYP":
        raise ValueError(f"bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != 1:
        raise ValueError(f"unsupported version {version}")
    (clen,) = struct.unpack_from("<I", blob, 8)
    off = 12
    cfg = ToyConfig(**json.loads(blob[off:off + clen].decode("utf-8")))
    off += clen
    (ntens,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(ntens):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(blob, "<f8", size, off).reshape(shape).copy()
        off += size * 8
    return ToyParams(cfg, tensors)
