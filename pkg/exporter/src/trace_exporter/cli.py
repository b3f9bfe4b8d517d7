"""Command line for the trace exporter."""

import argparse
import sys


def build_parser():
    parser = argparse.ArgumentParser(
        prog="trace-exporter",
        description="Export causal LM activations to .mtrc traces")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="run a labeled text dataset through a model")
    p.add_argument("--model", required=True, help="hub model identifier")
    p.add_argument("--data", required=True, help="JSONL with id/text/label rows")
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=512)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--store-logits", action="store_true",
                   help="write final logits into each trace (large for big vocabularies)")
    p.add_argument("--device", default="cpu")
    p.set_defaults(func=_cmd_export)
    return parser


def _cmd_export(args):
    from .export import export_dataset, load_model, read_text_dataset

    rows = read_text_dataset(args.data)
    model, tokenizer = load_model(args.model)
    stats = export_dataset(model, tokenizer, rows, args.out,
                           max_len=args.max_len, batch_size=args.batch,
                           store_logits=args.store_logits, device=args.device)
    print(f"exported {stats.n_sequences} traces "
          f"(L={stats.n_layers}, H={stats.n_heads}, d={stats.hidden_dim}, "
          f"V={stats.vocab_size}); "
          f"max lens softmax deviation {stats.max_lens_deviation:.2e}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
