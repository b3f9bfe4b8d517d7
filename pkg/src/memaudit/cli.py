"""Command-line entry point.

Subcommands: extract, train, eval, layerwise, neighbors, baseline, synth,
toy-train, toy-export. Fixed inputs and seeds give byte-identical outputs;
no subcommand mutates its inputs. Exit codes: 0 success, 1 runtime error
(diagnostic on stderr), 2 usage error.
"""

import argparse
import json
import sys

import numpy as np

DEFAULT_SEED = 420


def _cmd_extract(args):
    from . import trace_io
    from .features import extract_matrix, save_matrix_csv

    manifest = trace_io.read_manifest(args.manifest)
    head = trace_io.read_head(args.head)
    matrix = extract_matrix(manifest, head, layer_filter=args.layer,
                            workers=args.workers, head_path=args.head)
    save_matrix_csv(matrix, args.out)
    print(f"wrote {matrix.values.shape[0]} rows x {len(matrix.names)} features "
          f"to {args.out}")


def _cmd_train(args):
    from .features import load_matrix_csv
    from .forest import model_to_json, train_pipeline

    matrix = load_matrix_csv(args.features)
    model, report = train_pipeline(matrix, args.seed)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(model_to_json(model))
    with open(args.report, "w", encoding="utf-8") as f:
        json.dump(report.to_json_dict(), f, indent=1)
        f.write("\n")
    print(f"held-out AUC {report.heldout_auc:.4f} "
          f"(fold mean {report.fold_auc_mean:.4f} +- {report.fold_auc_std:.4f})")


def _cmd_eval(args):
    from .features import load_matrix_csv
    from .forest import model_from_json
    from .metrics import auc, precision_recall

    with open(args.model, "r", encoding="utf-8") as f:
        model = model_from_json(f.read())
    matrix = load_matrix_csv(args.features)
    if matrix.names != model.feature_names:
        raise ValueError("feature CSV columns do not match the model's features")
    scores = model.predict_proba_scaled(matrix.values)
    labeled = [(s, 1 if lab == "member" else 0)
               for s, lab in zip(scores, matrix.labels) if lab != "neighbor"]
    y = np.array([lab for _, lab in labeled])
    s = np.array([sc for sc, _ in labeled])
    threshold = 0.5  # fixed predicted-probability cut, as in the neighbors path
    result = {
        "n_member": int((y == 1).sum()),
        "n_nonmember": int((y == 0).sum()),
        "threshold": threshold,
    }
    result["auc"] = auc(s, y) if 0 < result["n_member"] and 0 < result["n_nonmember"] else None
    p, r = precision_recall(s, y, threshold)
    result["precision"] = p
    result["recall"] = r
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(result, f, indent=1)
        f.write("\n")
    print(f"auc {result['auc']} precision {p} recall {r}")


def _cmd_layerwise(args):
    from . import trace_io
    from .metrics import layerwise_auc

    manifest = trace_io.read_manifest(args.manifest)
    head = trace_io.read_head(args.head)
    curve = layerwise_auc(manifest, head, args.seed, fast=args.fast,
                          workers=args.workers, head_path=args.head)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("layer,auc\n")
        for layer, score in curve:
            f.write(f"{layer},{score:.17g}\n")
    best = max(curve, key=lambda t: t[1])
    print(f"layer-wise AUC written to {args.out}; peak {best[1]:.4f} at layer {best[0]}")


def _cmd_neighbors(args):
    from .features import load_matrix_csv
    from .forest import model_from_json
    from .metrics import precision_recall

    with open(args.model, "r", encoding="utf-8") as f:
        model = model_from_json(f.read())
    matrix = load_matrix_csv(args.features)
    if matrix.names != model.feature_names:
        raise ValueError("feature CSV columns do not match the model's features")
    # zero-shot: neighbors are scored by the member/nonmember classifier as-is,
    # counting neighbors as true members and nonmembers as true negatives
    keep = [i for i, lab in enumerate(matrix.labels) if lab in ("neighbor", "nonmember")]
    if not any(matrix.labels[i] == "neighbor" for i in keep):
        raise ValueError("no neighbor rows in feature CSV")
    scores = model.predict_proba_scaled(matrix.values[keep])
    y = np.array([1 if matrix.labels[i] == "neighbor" else 0 for i in keep])
    p, r = precision_recall(scores, y, args.threshold)
    result = {
        "n_neighbor": int((y == 1).sum()),
        "n_nonmember": int((y == 0).sum()),
        "threshold": args.threshold,
        "precision": p,
        "recall": r,
    }
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(result, f, indent=1)
        f.write("\n")
    print(f"neighbors: precision {p} recall {r}")


def _cmd_baseline(args):
    from . import trace_io
    from .baselines import score_manifest

    manifest = trace_io.read_manifest(args.manifest)
    head = trace_io.read_head(args.head)
    paired = trace_io.read_manifest(args.paired) if args.paired else None
    rows = score_manifest(manifest, head, args.method, k_percent=args.k, paired=paired)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("id,label,method,score\n")
        for rid, label, method, score in rows:
            f.write(f"{rid},{label},{method},{score:.17g}\n")
    print(f"wrote {len(rows)} {args.method} scores to {args.out}")


def _cmd_synth(args):
    from .synth import SynthSpec, generate

    with open(args.spec, "r", encoding="utf-8") as f:
        spec = SynthSpec(**json.load(f))
    manifest = generate(spec, args.out)
    print(f"generated {len(manifest)} traces in {args.out}")


def _cmd_toy_train(args):
    from . import toylm

    with open(args.config, "r", encoding="utf-8") as f:
        cfg = json.load(f)
    config = toylm.ToyConfig(**cfg["model"])
    data = cfg["data"]
    if data["kind"] != "markov":
        raise ValueError(f"unknown data kind {data['kind']!r}")
    members = toylm.markov_sequences(data["count"], data["length"],
                                     config.vocab_size, data["seed"],
                                     concentration=data.get("concentration", 1.5))
    training = cfg["training"]
    params = toylm.init_params(config)
    params, curve = toylm.train(params, members, steps=training["steps"],
                                lr=training["lr"],
                                batch_size=training.get("batch_size", 16),
                                seed=training.get("seed", 0))
    toylm.write_params(params, args.out)
    if "members_out" in cfg:
        _write_sequences(members, cfg["members_out"])
    if "nonmembers_out" in cfg:
        held = toylm.markov_sequences(data["count"], data["length"],
                                      config.vocab_size, data["seed"] + 1,
                                      concentration=data.get("concentration", 1.5))
        _write_sequences(held, cfg["nonmembers_out"])
    print(f"final training loss {curve[-1]:.4f}; params written to {args.out}")


def _write_sequences(seqs, path):
    with open(path, "w", encoding="utf-8") as f:
        for i, seq in enumerate(seqs):
            f.write(json.dumps({"id": f"s{i:05d}", "tokens": [int(t) for t in seq]}))
            f.write("\n")


def _read_sequences(path):
    ids, seqs = [], []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            ids.append(rec["id"])
            seqs.append(rec["tokens"])
    return ids, seqs


def _cmd_toy_export(args):
    import os
    from . import toylm, trace_io
    from .trace import DatasetManifest, ManifestEntry

    params = toylm.read_params(args.params)
    entries = []
    os.makedirs(args.out, exist_ok=True)
    head_path = None
    for label, path, prefix in (("member", args.members, "m"),
                                ("nonmember", args.nonmembers, "n")):
        if path is None:
            continue
        ids, seqs = _read_sequences(path)
        ids = [f"{prefix}_{sid}" for sid in ids]
        _, head_path = toylm.export(params, seqs, ids, args.out)
        for sid in ids:
            entries.append(ManifestEntry(trace=f"{sid}.mtrc", label=label,
                                         group="toy", id=sid))
    if not entries:
        raise ValueError("nothing to export: give --members and/or --nonmembers")
    manifest = DatasetManifest(entries, base_dir=args.out)
    trace_io.write_manifest(manifest, os.path.join(args.out, "manifest.jsonl"))
    print(f"exported {len(entries)} traces to {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="memaudit",
        description="Membership-inference auditing from transformer activation traces")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="compute feature CSV from a trace manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("train", help="train the classifier on a feature CSV")
    p.add_argument("--features", required=True)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a feature CSV with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("layerwise", help="held-out AUC per layer tag")
    p.add_argument("--manifest", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", required=True)
    p.add_argument("--fast", action="store_true",
                   help="fixed hyperparameters, no search")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_layerwise)

    p = sub.add_parser("neighbors", help="zero-shot precision/recall on neighbors")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_neighbors)

    p = sub.add_parser("baseline", help="reference-free baseline scores")
    p.add_argument("--manifest", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--method", required=True, choices=["ppl", "mink", "zlib", "lowercase"])
    p.add_argument("--k", type=float, default=20.0)
    p.add_argument("--paired", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("synth", help="generate a synthetic planted-signal dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("toy-train", help="train the toy LM on generated members")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_toy_train)

    p = sub.add_parser("toy-export", help="export toy LM traces for sequences")
    p.add_argument("--params", required=True)
    p.add_argument("--members", default=None)
    p.add_argument("--nonmembers", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_toy_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
