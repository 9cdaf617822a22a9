"""Command-line entry point: ``resofilter <command> [flags]``.

Exit codes: 0 success, 2 usage error, 1 runtime error. Every command accepts
``--config FILE.json``; flags override the file, which overrides built-ins.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import analysis, bench, diffscore, objective
from . import dataio as D
from . import filterpipe as F
from . import model as M
from . import train as T
from ._fileio import atomic_write_text
from .errors import ResoFilterError

WORKERS_ENV = "RESOFILTER_WORKERS"


class UsageError(Exception):
    pass


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {text}")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _retain(text):
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"retain fraction must lie in (0, 1], got {text}")
    return v


def _pos_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a number >= 0, got {text}")
    return v


def _grid(text):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}") from None
    if not vals or any(not 0.0 < v <= 1.0 for v in vals):
        raise argparse.ArgumentTypeError("grid values must lie in (0, 1]")
    return vals


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--d-model", type=_pos_int, default=64, help="hidden size (default: %(default)s)")
    g.add_argument("--n-heads", type=_pos_int, default=4, help="attention heads (default: %(default)s)")
    g.add_argument("--n-layers", type=_pos_int, default=4, help="decoder blocks (default: %(default)s)")
    g.add_argument("--d-ff", type=_pos_int, default=128, help="MLP width (default: %(default)s)")
    g.add_argument("--max-seq-len", type=_pos_int, default=128, help="context length (default: %(default)s)")
    g.add_argument("--style", choices=D.STYLES, default=D.TURN_MARKERS,
                   help="chat template (default: %(default)s)")


def _add_select_flags(p):
    p.add_argument("--module", choices=M.SCORED_MODULES, default="w_up", help="scored matrix (default: %(default)s)")
    p.add_argument("--stat", choices=F.STATS, default="mean_abs", help="per-matrix statistic (default: %(default)s)")
    p.add_argument("--last-layers", type=_pos_int, default=3, help="layer window n (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resofilter", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, description=help_,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", help="JSON file of flag defaults (keys use underscores)")
        return p

    p = cmd("synth", "generate a labelled clean/dirty synthetic corpus")
    p.add_argument("--clean", type=_nonneg_int, default=400, help="number of clean samples")
    p.add_argument("--dirty", type=_nonneg_int, default=100, help="number of dirty samples")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--out", required=True, help="output JSONL path")

    p = cmd("pretrain", "train a model (from scratch or --init) on a JSONL corpus")
    p.add_argument("--data", required=True, help="training JSONL")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--init", help="start from this checkpoint instead of a fresh model")
    p.add_argument("--vocab-from", nargs="*", default=[], help="extra JSONL files contributing to the vocab")
    p.add_argument("--vocab-out", help="also write the vocab as a line-delimited file")
    p.add_argument("--heldout", help="JSONL evaluated before and after training")
    p.add_argument("--log", help="write per-step training records as JSONL")
    _add_model_flags(p)
    p.add_argument("--opt", choices=("adamw", "sgd"), default="adamw", help="optimizer")
    p.add_argument("--lr", type=_pos_float, default=1e-3, help="learning rate")
    p.add_argument("--weight-decay", type=_nonneg_float, default=0.0, help="decoupled weight decay")
    p.add_argument("--epochs", type=_pos_int, default=2, help="passes over the data")
    p.add_argument("--batch-size", type=_pos_int, default=8, help="samples per update")
    p.add_argument("--shuffle", action=argparse.BooleanOptionalAction, default=True, help="reshuffle each epoch")
    p.add_argument("--seed", type=int, default=0, help="model init and shuffle seed")

    p = cmd("score", "probe every sample and write the score file")
    p.add_argument("--ckpt", required=True, help="base model checkpoint")
    p.add_argument("--data", required=True, help="JSONL to score")
    p.add_argument("--out", required=True, help="output score JSONL")
    _add_select_flags(p)
    p.add_argument("--workers", type=_pos_int, default=_default_workers(),
                   help=f"worker processes (env {WORKERS_ENV})")
    p.add_argument("--probe-opt", choices=("adamw", "sgd"), default="adamw", help="probe optimizer")
    p.add_argument("--probe-lr", type=_nonneg_float, default=1e-5, help="probe learning rate")
    p.add_argument("--probe-weight-decay", type=_nonneg_float, default=0.0, help="probe weight decay")
    p.add_argument("--probe-steps", type=_pos_int, default=1, help="optimizer steps per probe")

    p = cmd("filter", "keep the lowest-change samples and write the filtered JSONL")
    p.add_argument("--data", required=True, help="input JSONL (the scored file)")
    p.add_argument("--scores", required=True, help="score JSONL from 'score'")
    p.add_argument("--out", required=True, help="filtered JSONL")
    p.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
    p.add_argument("--retain", type=_retain, default=0.5, help="fraction of samples kept")
    p.add_argument("--order", choices=F.ORDERINGS, default="original", help="output ordering")
    p.add_argument("--order-seed", type=int, default=0, help="seed for --order random")
    _add_select_flags(p)

    p = cmd("sweep", "tabulate the richness/characteristic objective over retain fractions")
    p.add_argument("--scores", required=True, help="score JSONL")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--beta", type=_nonneg_float, default=1.0, help="characteristic weight")
    p.add_argument("--lambda", dest="lam", type=_pos_float, default=None,
                   help="richness rate (default: 5 / dataset size)")
    p.add_argument("--grid", type=_grid, default=[0.25, 0.5, 0.75, 1.0], help="comma-separated retain fractions")

    p = cmd("analyze", "compare surface features of high- and low-change samples")
    p.add_argument("--ckpt", required=True, help="checkpoint (vocab and embedding table)")
    p.add_argument("--data", required=True, help="scored JSONL")
    p.add_argument("--scores", required=True, help="score JSONL")
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--fraction", type=_retain, default=0.01, help="class size as a fraction of the data")
    p.add_argument("--seed", type=int, default=0, help="seed for the random class")
    p.add_argument("--csv-dir", help="also write one histogram CSV per metric here")

    p = cmd("bench", "run the full synthetic pipeline and compare filtered vs random")
    p.add_argument("--seed", type=int, default=0, help="experiment seed")
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--timings", help="wall-time JSON (default: <out>.timings.json)")
    p.add_argument("--clean", type=_nonneg_int, default=400, help="clean samples in the scored corpus")
    p.add_argument("--dirty", type=_nonneg_int, default=100, help="dirty samples in the scored corpus")
    p.add_argument("--bootstrap", type=_pos_int, default=400, help="clean samples used to pretrain the base")
    p.add_argument("--heldout", type=_pos_int, default=100, help="clean samples in the held-out set")
    p.add_argument("--retain", type=_retain, default=0.5, help="fraction kept by both arms")
    p.add_argument("--analysis-fraction", type=_retain, default=0.1, help="class size for the feature report")
    p.add_argument("--workers", type=_pos_int, default=_default_workers(), help="scoring worker processes")
    _add_model_flags(p)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> None:
    """Load ``--config`` (if any) into the chosen subparser's defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or not known.command:
        return
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sp = subparsers.choices.get(known.command)
    if sp is None:
        return
    try:
        cfg = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except OSError as e:
        raise ResoFilterError(f"cannot read config {known.config}: {e}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config {known.config} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    dests = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(cfg) - set(dests))
    if unknown:
        raise UsageError(f"unknown config keys for {known.command}: {unknown}")
    for key, value in cfg.items():
        action = dests[key]
        if action.type is not None and isinstance(value, (str, int, float)) and not isinstance(value, bool):
            try:
                value = action.type(str(value)) if action.type in (_grid,) else action.type(value)
            except (argparse.ArgumentTypeError, ValueError) as e:
                raise UsageError(f"config key {key}: {e}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key}: {value!r} not in {list(action.choices)}")
        action.required = False
        sp.set_defaults(**{key: value})


def _load_ckpt(path):
    params, meta = M.load_checkpoint(path)
    if "vocab" not in meta:
        raise ResoFilterError(f"{path}: checkpoint carries no vocab")
    return params, D.Vocab(meta["vocab"]), meta.get("style", D.TURN_MARKERS)


def _tokenized(samples, vocab, style, params):
    return D.tokenize_dataset(samples, vocab, style, params.config.max_seq_len)


def cmd_synth(a):
    D.save_jsonl(D.synth_corpus(a.clean, a.dirty, a.seed), a.out)
    print(f"wrote {a.clean + a.dirty} samples to {a.out}")


def cmd_pretrain(a):
    samples = D.load_jsonl(a.data)
    heldout = D.load_jsonl(a.heldout) if a.heldout else None
    if a.init:
        init, vocab, style = _load_ckpt(a.init)
    else:
        vocab_samples = list(samples)
        for extra in a.vocab_from:
            vocab_samples += D.load_jsonl(extra)
        vocab = D.Vocab.from_samples(vocab_samples)
        style = a.style
        init = M.init(M.ModelConfig(vocab_size=len(vocab), d_model=a.d_model, n_heads=a.n_heads,
                                    n_layers=a.n_layers, d_ff=a.d_ff, max_seq_len=a.max_seq_len,
                                    seed=a.seed).validate())
    data = _tokenized(samples, vocab, style, init)
    opt = T.OptimizerConfig(kind=a.opt, lr=a.lr, weight_decay=a.weight_decay)
    tc = T.TrainConfig(epochs=a.epochs, batch_size=a.batch_size, shuffle=a.shuffle, seed=a.seed)
    held_t = _tokenized(heldout, vocab, style, init) if heldout else None
    if held_t:
        print(f"heldout loss before: {T.eval_loss(init, held_t):.6f}")
    log = []
    params = T.train(init, data, opt, tc, log=log)
    if held_t:
        print(f"heldout loss after: {T.eval_loss(params, held_t):.6f}")
    M.save_checkpoint(a.out, params, {"vocab": vocab.tokens, "style": style})
    if a.vocab_out:
        vocab.save(a.vocab_out)
    if a.log:
        atomic_write_text(a.log, "".join(json.dumps(r) + "\n" for r in log))
    print(f"wrote checkpoint {a.out} after {len(log)} steps")


def _spec_from(a, **extra) -> F.FilterSpec:
    return F.FilterSpec(module=a.module, stat=a.stat, layer_window=a.last_layers, **extra)


def cmd_score(a):
    params, vocab, style = _load_ckpt(a.ckpt)
    data = _tokenized(D.load_jsonl(a.data), vocab, style, params)
    spec = _spec_from(a)
    opt = T.OptimizerConfig(kind=a.probe_opt, lr=a.probe_lr, weight_decay=a.probe_weight_decay)
    entries = diffscore.score_dataset(params, data, spec, opt, workers=a.workers, probe_steps=a.probe_steps)
    diffscore.save_scores(entries, a.out)
    print(f"scored {len(entries)} samples -> {a.out}")


def _rescored(entries, spec):
    e0 = entries[0]
    window = spec.layer_window
    if (e0.stat, e0.module) == (spec.stat, spec.module) and e0.layer_window[1] - e0.layer_window[0] + 1 == window:
        return entries
    n_layers = 1 + max(layer for layer, _ in e0.per_cell) if e0.per_cell else e0.layer_window[1] + 1
    return diffscore.rereduce(entries, spec, n_layers)


def cmd_filter(a):
    samples = D.load_jsonl(a.data)
    entries = diffscore.load_scores(a.scores)
    if len(entries) != len(samples):
        raise ResoFilterError(f"{len(entries)} scores for {len(samples)} samples")
    spec = _spec_from(a, retain_fraction=a.retain, ordering=a.order, order_seed=a.order_seed)
    entries = _rescored(entries, spec)
    kept = F.order(F.select(entries, spec), entries, spec)
    manifest = a.manifest or f"{a.out}.manifest.json"
    F.write_filtered(samples, kept, spec, a.out, manifest, input_path=a.data)
    print(f"kept {len(kept)} of {len(samples)} samples -> {a.out}")


def cmd_sweep(a):
    entries = diffscore.load_scores(a.scores)
    params = (objective.ObjectiveParams(beta=a.beta, lam=a.lam) if a.lam is not None
              else objective.ObjectiveParams.for_dataset(len(entries), beta=a.beta))
    rows = objective.sweep(entries, a.grid, params)
    objective.write_csv(rows, a.out)
    print(f"wrote {len(rows)} rows -> {a.out}")


def cmd_analyze(a):
    params, vocab, style = _load_ckpt(a.ckpt)
    data = _tokenized(D.load_jsonl(a.data), vocab, style, params)
    entries = diffscore.load_scores(a.scores)
    if a.fraction > 0.5:
        raise UsageError("--fraction must be <= 0.5")
    reports = analysis.report(data, entries, a.fraction, embed=analysis.embedding_mean(params),
                              rng_seed=a.seed)
    analysis.write_report(reports, a.out, a.fraction, csv_dir=a.csv_dir)
    print(f"wrote report with {len(reports)} metrics -> {a.out}")


def cmd_bench(a):
    if a.analysis_fraction > 0.5:
        raise UsageError("--analysis-fraction must be <= 0.5")
    cfg = bench.BenchConfig(n_clean=a.clean, n_dirty=a.dirty, n_bootstrap=a.bootstrap, n_heldout=a.heldout,
                            retain=a.retain, d_model=a.d_model, n_heads=a.n_heads, n_layers=a.n_layers,
                            d_ff=a.d_ff, max_seq_len=a.max_seq_len, analysis_fraction=a.analysis_fraction,
                            style=a.style)
    report, timings = bench.run(a.seed, cfg, workers=a.workers)
    report["checks"] = bench.passes(report)
    atomic_write_text(a.out, json.dumps(report, indent=2) + "\n")
    atomic_write_text(a.timings or f"{a.out}.timings.json", json.dumps(timings, indent=2) + "\n")
    print(f"auc={report['auc']:.4f} loss_resofilter={report['loss_resofilter']:.6f} "
          f"loss_random={report['loss_random']:.6f} -> {a.out}")


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "score": cmd_score,
    "filter": cmd_filter,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        print(f"resofilter: error: {e}", file=sys.stderr)
        return 2
    except ResoFilterError as e:
        print(f"resofilter: error: {e}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        print(f"resofilter: error: {e}", file=sys.stderr)
        return 2
    except (ResoFilterError, OSError) as e:
        print(f"resofilter: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
