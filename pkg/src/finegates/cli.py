"""``finegates`` command line: train, eval, prune, bench-matmul, bench-infer, gates-report.

Exit codes: 0 success, 2 configuration or input problem, 3 numeric abort
during training, 4 a layer that pruning would empty completely.
"""

import argparse
import csv
import os
import sys

from . import bench
from .checkpoint import load_checkpoint
from .config import load_config, manifest_text
from .data import generate_planted, load_tsv, load_vocab, save_vocab, split_corpus
from .errors import DegenerateLayerError, FineGatesError, InputError, NumericError
from .gates import report_rows, write_report
from .training import fit, model_checkpoint, model_from_checkpoint, predict, write_checkpoint
from .transformer import Encoder, count_params

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_DEGENERATE = 0, 2, 3, 4

MANIFEST = "manifest.txt"
METRICS = "metrics.csv"
VOCAB = "vocab.tsv"
PRUNED = "pruned.ckpt"
PRUNE_REPORT = "prune_report.csv"
BENCH = "bench.csv"
PREDICTIONS = "predictions.csv"
GATES_REPORT = "gates_report.csv"


def _truncate(corpus, max_len):
    corpus.sequences = [s[:max_len] for s in corpus.sequences]
    return corpus


def build_data(cfg):
    """(train, eval, embedding) for a RunConfig; fills data-derived model fields in place."""
    d = cfg.data
    if d.source == "planted":
        corpus = generate_planted(d.planted_spec(cfg.model.model_dim))
        train, ev = split_corpus(corpus, d.eval_fraction)
        cfg.model.vocab_size = d.vocab_size
        cfg.model.num_classes = d.num_classes
        cfg.model.max_seq_len = max(cfg.model.max_seq_len, d.seq_len)
        return train, ev, corpus.embedding
    cap = d.max_samples or None
    train = load_tsv(d.train_path, cap)
    if d.eval_path:
        ev = load_tsv(d.eval_path, cap, vocab=train.vocab, num_classes=train.num_classes, split="eval")
    else:
        train, ev = split_corpus(train, d.eval_fraction)
    cfg.model.vocab_size = len(train.vocab)
    cfg.model.num_classes = max(train.num_classes, ev.num_classes)
    train.num_classes = ev.num_classes = cfg.model.num_classes
    return _truncate(train, cfg.model.max_seq_len), _truncate(ev, cfg.model.max_seq_len), None


def eval_corpus(args, model):
    """Evaluation data from ``--config`` (rebuilt split) or ``--data`` (+ optional ``--vocab``)."""
    if args.config:
        cfg = load_config(args.config)
        _, ev, _ = build_data(cfg)
    elif args.data:
        vocab = load_vocab(args.vocab) if args.vocab else None
        if vocab is None:
            raise InputError("--data needs --vocab (the vocab.tsv written at training time)")
        ev = load_tsv(args.data, vocab=vocab, num_classes=model.cfg.num_classes, split="eval")
    else:
        raise InputError("give --config (a run manifest) or --data with --vocab")
    if len(ev) == 0:
        raise InputError("empty evaluation set")
    return _truncate(ev, model.cfg.max_seq_len)


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _load_model(path):
    if not os.path.isfile(path):
        raise InputError(f"checkpoint not found: {path}")
    return model_from_checkpoint(load_checkpoint(path))


# ---------------------------------------------------------------- subcommands


def cmd_train(args):
    cfg = load_config(args.config, args.set or (), args.seed)
    train, ev, embedding = build_data(cfg)
    cfg.model.validate()
    out = _out_dir(args.out)
    with open(os.path.join(out, MANIFEST), "w", encoding="utf-8") as fh:
        fh.write(manifest_text(cfg))
    save_vocab(train.vocab, os.path.join(out, VOCAB))
    model = Encoder(cfg.model, embedding=embedding)

    def report(row):
        if not args.quiet:
            print("step {step}: task_loss={task_loss:.4f} sparse_loss={sparse_loss:.4f} "
                  "open={open_fraction_mean:.4f} sparsity={achieved_sparsity:.4f} "
                  "accuracy={accuracy:.4f}".format(**row), flush=True)

    result = fit(model, train, ev, cfg.train, out_dir=out, on_eval=report)
    last = result.last
    print(f"final accuracy={last['accuracy']!r} achieved_sparsity={last['achieved_sparsity']!r}")
    return EXIT_OK


def cmd_eval(args):
    model = _load_model(args.checkpoint)
    ev = eval_corpus(args, model)
    preds = predict(model, ev)
    acc = float((preds == ev.labels).mean())
    out = _out_dir(args.out)
    with open(os.path.join(out, PREDICTIONS), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "prediction"])
        for i, (y, p) in enumerate(zip(ev.labels, preds)):
            w.writerow([i, int(y), int(p)])
    print(f"accuracy={acc!r} examples={len(ev)}")
    return EXIT_OK


def prune_report(model, threshold=0.0):
    """Per-layer rows plus a TOTAL row: layer, kept_rows, kept_cols, removed_params, layer_sparsity."""
    rows, removed, total = [], 0, 0
    kept_r = kept_c = 0
    for layer in model.layers():
        k, d = layer.shape
        gr, gc = layer.eval_gate_values()
        nr, nc = int((gr > threshold).sum()), int((gc > threshold).sum())
        gone = layer.removable_params(threshold)
        rows.append([layer.name, nr, nc, gone, gone / (k * d)])
        removed, total = removed + gone, total + k * d
        kept_r, kept_c = kept_r + nr, kept_c + nc
    rows.append(["TOTAL", kept_r, kept_c, removed, removed / total if total else 0.0])
    return rows


def cmd_prune(args):
    model = _load_model(args.checkpoint)
    if model.pruned:
        raise InputError("checkpoint is already pruned")
    pruned = model.prune(args.threshold)
    rows = prune_report(model, args.threshold)
    assert rows[-1][3] == count_params(model, args.threshold)["removable"]
    out = _out_dir(args.out)
    write_checkpoint(os.path.join(out, PRUNED), model_checkpoint(pruned, extra_meta={"threshold": args.threshold}))
    with open(os.path.join(out, PRUNE_REPORT), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "kept_rows", "kept_cols", "removed_params", "layer_sparsity"])
        for r in rows:
            w.writerow(r[:4] + [repr(float(r[4]))])
    total = rows[-1]
    print(f"removed_params={total[3]} sparsity={total[4]!r}")
    return EXIT_OK


def cmd_bench_matmul(args):
    grid = [float(s) for s in args.sparsity.split(",")]

    def progress(row):
        if not args.quiet:
            d = row.as_dict()
            print("sparsity {sparsity:.2f}: dense {dense_ms:.4f} ms, gathered {gathered_ms:.4f} ms, "
                  "reduction {relative_reduction_pct:.2f}%".format(**d), flush=True)

    rows = bench.bench_matmul(args.dim, args.batch, args.repeats, grid, args.backend, args.seed, progress)
    out = _out_dir(args.out)
    with open(os.path.join(out, BENCH), "w", newline="") as fh:
        fh.write(bench.rows_csv([r.as_dict() for r in rows], bench.MATMUL_COLUMNS))
    return EXIT_OK


def cmd_bench_infer(args):
    model = _load_model(args.checkpoint)
    ev = eval_corpus(args, model)
    levels = [float(s) for s in args.levels.split(",")]
    rows = bench.bench_infer(model, ev, levels, args.repeats)
    out = _out_dir(args.out)
    with open(os.path.join(out, BENCH), "w", newline="") as fh:
        fh.write(bench.rows_csv(rows, bench.INFER_COLUMNS))
    for r in rows:
        print(f"sparsity {r['sparsity']:.2f}: {r['median_epoch_ms']:.3f} ms, RTF {r['RTF']:.3f}")
    return EXIT_OK


def cmd_gates_report(args):
    model = _load_model(args.checkpoint)
    rows = []
    for name, side, g in model.gate_vectors():
        rows.extend(report_rows(name, side, g, args.threshold))
    if not rows:
        raise InputError(f"checkpoint {args.checkpoint} has no gates")
    out = _out_dir(args.out)
    write_report(os.path.join(out, GATES_REPORT), rows)
    closed = sum(1 for r in rows if not r["kept"])
    print(f"gates={len(rows)} closed={closed} achieved_sparsity={closed / len(rows)!r}")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="finegates", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a gated model")
    t.add_argument("--config", help="INI file with [model], [train], [data] sections (or a manifest)")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    t.add_argument("--seed", type=int, help="override the training seed")
    t.add_argument("--out", required=True)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    def data_args(q):
        q.add_argument("--config", help="run manifest; its eval split is rebuilt")
        q.add_argument("--data", help="TSV file of 'label<TAB>tokens' lines")
        q.add_argument("--vocab", help="vocab.tsv written by train")

    e = sub.add_parser("eval", help="accuracy and predictions for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    data_args(e)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("prune", help="fuse gates and drop closed rows and columns")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--threshold", type=float, default=0.0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_prune)

    b = sub.add_parser("bench-matmul", help="dense vs column-gathered matrix product timing")
    b.add_argument("--dim", type=int, default=1024)
    b.add_argument("--batch", type=int, default=16)
    b.add_argument("--repeats", type=int, default=10**5)
    b.add_argument("--sparsity", default=",".join(str(s) for s in bench.DEFAULT_GRID))
    b.add_argument("--backend", default="numpy", choices=["auto", "numpy", "torch"])
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.add_argument("--quiet", action="store_true")
    b.set_defaults(func=cmd_bench_matmul)

    i = sub.add_parser("bench-infer", help="validation-epoch time at several pruning levels")
    i.add_argument("--checkpoint", required=True)
    data_args(i)
    i.add_argument("--levels", default="0,0.2,0.4,0.6,0.8")
    i.add_argument("--repeats", type=int, default=10)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_bench_infer)

    g = sub.add_parser("gates-report", help="per-gate CSV of means and evaluation values")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--threshold", type=float, default=0.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gates_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DegenerateLayerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (FineGatesError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
