"""Run candidate sequences through a causal LM and write activation traces.

The exporter owns every framework-specific detail: tokenization with the
model's native tokenizer, right padding, truncation, batched inference with
hidden states and attentions captured, locating the final normalization and
unembedding, and masking cleanup so the written attention maps are exactly
causal and row-stochastic over valid positions.
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import formats


@dataclass
class ExportStats:
    n_sequences: int
    n_layers: int
    n_heads: int
    hidden_dim: int
    vocab_size: int
    max_lens_deviation: float  # worst |lens softmax - stored softmax| seen


def load_model(model_id: str, dtype=torch.float32):
    """Load a hub model + native tokenizer, configured to expose attentions."""
    from transformers import AutoModelForCausalLM, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(model_id)
    model = AutoModelForCausalLM.from_pretrained(
        model_id, dtype=dtype, attn_implementation="eager")
    model.eval()
    return model, tokenizer


def read_text_dataset(path):
    """JSONL rows with id, text, label (member | nonmember | neighbor)."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            for key in ("id", "text", "label"):
                if key not in rec:
                    raise ValueError(f"{path}:{ln}: missing key {key!r}")
            if rec["label"] not in ("member", "nonmember", "neighbor"):
                raise ValueError(f"{path}:{ln}: unknown label {rec['label']!r}")
            rows.append(rec)
    if not rows:
        raise ValueError(f"{path}: empty dataset")
    return rows


def _final_norm_module(model):
    """The model's last pre-unembedding normalization module."""
    base = getattr(model, model.base_model_prefix, model)
    for attr in ("ln_f", "final_layer_norm", "norm", "final_layernorm"):
        mod = getattr(base, attr, None)
        if mod is not None:
            return mod
    # fall back to the last norm-like direct child of the decoder stack
    candidates = [m for m in base.children()
                  if m.__class__.__name__.lower().endswith(("norm", "layernorm"))]
    if candidates:
        return candidates[-1]
    raise ValueError(f"cannot locate the final normalization of "
                     f"{model.__class__.__name__}")


def extract_head(model):
    """(norm_kind, epsilon, gain, bias, unembed (d, V), unembed_bias)."""
    norm = _final_norm_module(model)
    name = norm.__class__.__name__.lower()
    weight = norm.weight.detach().to(torch.float32).cpu().numpy()
    d = weight.shape[0]
    if "rms" in name:
        kind = "rmsnorm"
        bias = np.zeros(d, dtype=np.float32)
        eps = getattr(norm, "variance_epsilon", getattr(norm, "eps", 1e-6))
    else:
        kind = "layernorm"
        b = getattr(norm, "bias", None)
        bias = (b.detach().to(torch.float32).cpu().numpy() if b is not None
                else np.zeros(d, dtype=np.float32))
        eps = getattr(norm, "eps", 1e-5)
    lm_head = model.get_output_embeddings()
    unembed = lm_head.weight.detach().to(torch.float32).cpu().numpy().T  # (d, V)
    head_bias = getattr(lm_head, "bias", None)
    unembed_bias = (head_bias.detach().to(torch.float32).cpu().numpy()
                    if head_bias is not None else None)
    return kind, float(eps), weight, bias, unembed, unembed_bias


def _clean_attentions(attn, mask):
    """Zero future and padded-key entries, renormalize valid query rows.

    attn: (L, H, n, n) float32; mask: (n,) of 0/1. Padded query rows become
    pure self-attention so every stored value is finite and harmless.
    """
    L, H, n, _ = attn.shape
    pos = np.arange(n)
    allowed = (pos[None, :] <= pos[:, None]) & (mask[None, :] != 0)
    attn = attn * allowed[None, None, :, :]
    sums = attn.sum(axis=3, keepdims=True)
    valid_q = mask != 0
    safe = np.where(sums > 0.0, sums, 1.0)
    attn = np.where(valid_q[None, None, :, None], attn / safe, 0.0)
    for t in pos[~valid_q]:
        attn[:, :, t, :] = 0.0
        attn[:, :, t, t] = 1.0
    return attn.astype(np.float32)


def _lens_deviation(hidden_last, mask, head_tuple, logits):
    """Max |softmax(lens logits) - softmax(model logits)| over valid rows."""
    kind, eps, gain, bias, unembed, unembed_bias = head_tuple
    h = hidden_last[mask != 0].astype(np.float64)
    if kind == "layernorm":
        mu = h.mean(axis=-1, keepdims=True)
        var = ((h - mu) ** 2).mean(axis=-1, keepdims=True)
        normed = (h - mu) / np.sqrt(var + eps) * gain + bias
    elif kind == "rmsnorm":
        normed = h / np.sqrt((h ** 2).mean(axis=-1, keepdims=True) + eps) * gain
    else:
        normed = h
    lens = normed @ unembed.astype(np.float64)
    if unembed_bias is not None:
        lens = lens + unembed_bias
    stored = logits[mask != 0].astype(np.float64)

    def softmax(x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    return float(np.abs(softmax(lens) - softmax(stored)).max())


def export_dataset(model, tokenizer, rows, out_dir, max_len: int = 512,
                   batch_size: int = 32, store_logits: bool = False,
                   keep_text: bool = True, device: str = "cpu") -> ExportStats:
    """Write one .mtrc per row plus model.mthd and manifest.jsonl.

    rows come from read_text_dataset. Sequences are tokenized with right
    padding to the batch maximum and truncated to max_len.
    """
    os.makedirs(out_dir, exist_ok=True)
    model = model.to(device).eval()
    if tokenizer.pad_token is None:
        tokenizer.pad_token = tokenizer.eos_token
    if tokenizer.pad_token is None:
        raise ValueError("tokenizer has neither a pad nor an eos token")
    tokenizer.padding_side = "right"

    head_tuple = extract_head(model)
    kind, eps, gain, bias, unembed, unembed_bias = head_tuple
    formats.write_head(os.path.join(out_dir, "model.mthd"), kind, eps, gain,
                       bias, unembed, unembed_bias)
    vocab_size = unembed.shape[1]

    entries = []
    worst_dev = 0.0
    n_layers = n_heads = hidden_dim = 0
    for start in range(0, len(rows), batch_size):
        batch = rows[start:start + batch_size]
        enc = tokenizer([r["text"] for r in batch], return_tensors="pt",
                        padding=True, truncation=True, max_length=max_len)
        enc = {k: v.to(device) for k, v in enc.items()}
        try:
            with torch.no_grad():
                out = model(input_ids=enc["input_ids"],
                            attention_mask=enc["attention_mask"],
                            output_hidden_states=True, output_attentions=True)
        except torch.cuda.OutOfMemoryError as e:
            raise RuntimeError(
                f"out of memory on a batch of {len(batch)}; retry with a "
                f"smaller --batch") from e
        if out.attentions is None or len(out.attentions) == 0 \
                or out.attentions[0] is None:
            raise ValueError("model did not return attention maps; it may not "
                             "support attn_implementation='eager'")
        hidden = torch.stack(out.hidden_states).to(torch.float32).cpu().numpy()
        attn = torch.stack(out.attentions).to(torch.float32).cpu().numpy()
        logits = out.logits.to(torch.float32).cpu().numpy()
        ids_np = enc["input_ids"].cpu().numpy()
        mask_np = enc["attention_mask"].cpu().numpy().astype(np.uint8)
        n_layers, n_heads, hidden_dim = attn.shape[0], attn.shape[2], hidden.shape[3]

        for bi, row in enumerate(batch):
            mask = mask_np[bi]
            if mask.sum() < 2:
                raise ValueError(f"sequence {row['id']} tokenizes to fewer than "
                                 f"2 tokens")
            cleaned = _clean_attentions(attn[:, bi], mask)
            worst_dev = max(worst_dev, _lens_deviation(hidden[-1, bi], mask,
                                                       head_tuple, logits[bi]))
            name = f"{row['id']}.mtrc"
            formats.write_trace(os.path.join(out_dir, name),
                                ids_np[bi], mask, hidden[:, bi], cleaned,
                                vocab_size,
                                logits[bi] if store_logits else None)
            entries.append({"trace": name, "label": row["label"],
                            "group": row.get("group", "default"), "id": row["id"],
                            "text": row["text"] if keep_text else None})
    formats.write_manifest(os.path.join(out_dir, "manifest.jsonl"), entries)
    meta = {"n_sequences": len(entries), "n_layers": int(n_layers),
            "n_heads": int(n_heads), "hidden_dim": int(hidden_dim),
            "vocab_size": int(vocab_size), "max_len": max_len,
            "norm_kind": kind, "store_logits": store_logits,
            "hidden_state_convention":
                "model-exposed hidden_states list: embeddings first, then "
                "one entry per decoder block",
            "max_lens_softmax_deviation": worst_dev}
    with open(os.path.join(out_dir, "export_meta.json"), "w") as f:
        json.dump(meta, f, indent=1)
    return ExportStats(n_sequences=len(entries), n_layers=int(n_layers),
                       n_heads=int(n_heads), hidden_dim=int(hidden_dim),
                       vocab_size=int(vocab_size), max_lens_deviation=worst_dev)
