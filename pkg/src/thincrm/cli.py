"""Command-line interface: ``thincrm <subcommand> ...``.

Every command writes into an output directory (``--out``, or a fresh
subdirectory of $THINCRM_OUTPUT_ROOT named after the command).  Files are
written atomically and runs are deterministic given ``--seed``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import re
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .chain import check_schedule
from .corpus import ConfigurationError, Corpus, format_number, ingest
from .evaluation import (
    HeldoutSplit,
    bump_curves,
    decade_predict,
    fit_lfm,
    fit_topics,
    generate_bag_of_items,
    generate_synthetic_corpus,
    kfold_indices,
    learned_curves,
    missing_entry_rmse,
    perplexity,
    report,
    split_documents,
    split_words,
)
from .lfm import DEFAULT_WIDTHS, LfmData, LfmHyper, LfmState, active_features
from .lfm import log_likelihood as lfm_log_likelihood
from .tgap_pfa import InvariantViolation, TopicHyper, TopicState, activation_curves, active_topics, top_words
from .tgap_pfa import log_likelihood as topic_log_likelihood
from .thinning import NumericalError, parse_widths

log = logging.getLogger("thincrm")

OUTPUT_ROOT_ENV = "THINCRM_OUTPUT_ROOT"
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# file helpers
# --------------------------------------------------------------------------

def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path: Path):
    return json.loads(Path(path).read_text())


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_number(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def output_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        out = root / f"{args.command}-seed{args.seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def config_snapshot(args) -> dict:
    cfg = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
           for k, v in vars(args).items() if k not in ("out", "func", "log_level")}
    cfg["version"] = __version__
    return cfg


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.default_rng([seed, chain])


class TraceWriter:
    """Streams trace rows to a temp file; ``close`` moves it into place even after a failure."""

    def __init__(self, path: Path, header):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = self.path.with_name(f".{self.path.name}.partial")
        self.fh = open(self.tmp, "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(header)

    def row(self, values) -> None:
        self.writer.writerow([format_number(v) if isinstance(v, (float, np.floating)) else v for v in values])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()
        os.replace(self.tmp, self.path)


def sample_path(chain_dir: Path, i: int) -> Path:
    return chain_dir / "samples" / f"iter-{i:06d}.json"


def load_samples(run: Path, cls):
    files = sorted(Path(run).glob("chain-*/samples/iter-*.json"))
    if not files:
        raise UsageError(f"{run}: no posterior samples found")
    return [cls.from_dict(read_json(f)) for f in files]


def widths_arg(text) -> np.ndarray:
    try:
        return parse_widths(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def positive_int(text) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def fraction_arg(text) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("must lie strictly between 0 and 1")
    return v


def decade_of(t: float, width: float) -> float:
    return math.floor(t / width) * width


# --------------------------------------------------------------------------
# ingest
# --------------------------------------------------------------------------

LEADING_NUMBER = re.compile(r"^(-?\d+(?:\.\d+)?)")


def read_sources(data: Path) -> list[tuple[float, str]]:
    """Raw texts with timestamps from a directory or a manifest file.

    Directory: every ``*.txt`` whose name starts with a number (the
    timestamp).  Manifest: TSV rows ``timestamp <tab> path`` with paths
    relative to the manifest.
    """
    sources = []
    if data.is_dir():
        for f in sorted(data.glob("*.txt")):
            m = LEADING_NUMBER.match(f.name)
            if not m:
                log.warning("skipping %s: no leading timestamp in file name", f.name)
                continue
            sources.append((float(m.group(1)), f.read_text(errors="replace")))
    else:
        for lineno, line in enumerate(data.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise UsageError(f"{data}:{lineno}: expected 'timestamp<TAB>path'")
            sources.append((float(parts[0]), (data.parent / parts[1]).read_text(errors="replace")))
    if not sources:
        raise UsageError(f"{data}: no input documents")
    return sources


def cmd_ingest(args) -> int:
    out = output_dir(args)
    corpus, vocab, summary = ingest(read_sources(Path(args.data)), args.min_count, args.tfidf_quantile,
                                    args.paragraphs)
    atomic_write(out / "corpus.tsv", corpus.to_tsv())
    atomic_write(out / "vocab.txt", "".join(f"{w}\n" for w in vocab))
    write_json(out / "ingest.json", {**summary, "config": config_snapshot(args)})
    log.info("%d documents, %d terms", corpus.D, len(vocab))
    return 0


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

def cmd_synth_lfm(args) -> int:
    out = output_dir(args)
    rng = np.random.default_rng(args.seed)
    truth, data = generate_bag_of_items(
        rng, points_per_covariate=args.points_per_covariate, noise_var=args.noise_var, phi=args.phi)
    data.save(out / ".data.tsv")
    os.replace(out / ".data.tsv", out / "data.tsv")
    write_json(out / "truth.json", {
        "A": truth.A.tolist(), "pi": truth.pi.tolist(), "curves": truth.curves.tolist(),
        "sigma2": truth.sigma2, "r": data.r.astype(int).tolist(),
        "kernels": [k.to_dict() for k in truth.kernels],
    })
    write_json(out / "config.json", config_snapshot(args))
    return 0


def cmd_synth_corpus(args) -> int:
    out = output_dir(args)
    rng = np.random.default_rng(args.seed)
    times = np.arange(1, args.timestamps + 1)
    curves = bump_curves(times, args.k_true, rng, args.bandwidth) if args.curves == "bumps" else None
    truth = generate_synthetic_corpus(args.k_true, args.vocab_size, times, args.docs_per_t, rng,
                                      words_per_doc=args.words_per_doc, phi=args.phi, curves=curves)
    atomic_write(out / "corpus.tsv", truth.corpus.to_tsv())
    atomic_write(out / "vocab.txt", "".join(f"w{p}\n" for p in range(args.vocab_size)))
    s = truth.state
    write_json(out / "truth.json", {
        "theta": s.theta.tolist(), "pi": s.pi.tolist(), "curves": truth.curves.tolist(),
        "r": s.r.astype(int).tolist(), "redrawn_documents": truth.redrawn_documents,
    })
    write_json(out / "config.json", config_snapshot(args))
    return 0


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

def _run_chains(args, out: Path, fit, trace_header, trace_values, save_state):
    """Run ``args.chains`` chains; returns the retained samples of all chains."""
    samples = []
    for c in range(args.chains):
        chain_dir = out / f"chain-{c}"
        trace = TraceWriter(chain_dir / "trace.csv", trace_header)

        def on_sweep(i, state, keep, chain_dir=chain_dir, trace=trace):
            trace.row([i, *trace_values(state)])
            if keep:
                write_json(sample_path(chain_dir, i), save_state(state))

        try:
            result = fit(chain_rng(args.seed, c), on_sweep)
        finally:
            trace.close()
        samples.extend(result.samples)
    return samples


def topic_hyper(args) -> TopicHyper:
    return TopicHyper(alpha_theta=args.alpha_theta, e=args.e, c0=args.c0, d0=args.d0, widths=args.widths,
                      gamma_shape=args.gamma_shape, gamma_rate=args.gamma_rate)


def lfm_hyper(args) -> LfmHyper:
    return LfmHyper(c0=args.c0, d0=args.d0, widths=args.widths, noise_shape=args.noise_shape,
                    noise_scale=args.noise_scale, feature_shape=args.feature_shape,
                    feature_scale=args.feature_scale)


def load_corpus(args) -> Corpus:
    if not args.data:
        raise UsageError("--data is required")
    return Corpus.load(args.data, args.vocab)


def cmd_fit_topics(args) -> int:
    check_schedule(args.iters, args.burnin, args.thin)
    out = output_dir(args)
    corpus = load_corpus(args)
    split_rng = np.random.default_rng([args.seed, 1 << 20])
    train, evaluation = corpus, None
    if args.doc_holdout:
        groups = [decade_of(t, args.decade_width) for t in corpus.doc_timestamps()]
        tr, te = split_documents(groups, args.doc_holdout, split_rng)
        train = corpus.subset_docs(tr)
        atomic_write(out / "train.tsv", train.to_tsv())
        atomic_write(out / "test.tsv", corpus.subset_docs(te).to_tsv())
    elif args.word_holdout:
        split = split_words(corpus, args.word_holdout, split_rng)
        split.save(out / ".split.json")
        os.replace(out / ".split.json", out / "split.json")
        train = split.train
    write_json(out / "config.json", {**config_snapshot(args), "times": train.times.tolist()})

    hyper = topic_hyper(args)

    def fit(rng, on_sweep):
        return fit_topics(train, args.k, hyper, args.iters, args.burnin, args.thin, rng,
                          static=args.static, on_sweep=on_sweep)

    samples = _run_chains(
        args, out, fit, ["iteration", "active_topics", "train_loglik"],
        lambda s: [active_topics(s), topic_log_likelihood(s, train)], lambda s: s.to_dict())

    _topic_reports(out, samples, train, args.top_words)
    if args.word_holdout:
        evaluation = report("perplexity", [perplexity(samples, split.heldout)], args.seed)
        write_json(out / "evaluation.json", evaluation)
        log.info("held-out perplexity %.4f", evaluation["value"])
    return 0


def _topic_reports(out: Path, samples, corpus: Corpus, n_top: int) -> None:
    vocab = corpus.vocab
    theta = sum(s.theta for s in samples) / len(samples)
    usage = sum(s.pi * (s.r * s.beta).sum(axis=0) for s in samples) / len(samples)
    rows = []
    for k in np.argsort(-usage, kind="stable"):
        for rank, (word, prob) in enumerate(top_words(theta[k], vocab, n_top), 1):
            rows.append([int(k), rank, word, float(prob)])
    atomic_write(out / "topics.csv", csv_text(["topic", "rank", "word", "probability"], rows))
    curves = activation_curves(samples, corpus)
    rows = [[int(k), format_number(t), float(curves[k, j])] for k in range(curves.shape[0])
            for j, t in enumerate(corpus.times)]
    atomic_write(out / "activation.csv", csv_text(["topic", "timestamp", "mean_active"], rows))


def cmd_fit_lfm(args) -> int:
    check_schedule(args.iters, args.burnin, args.thin)
    if not args.data:
        raise UsageError("--data is required")
    out = output_dir(args)
    data = LfmData.load(args.data)
    write_json(out / "config.json", config_snapshot(args))
    hyper = lfm_hyper(args)

    def fit(rng, on_sweep):
        return fit_lfm(data, args.k, hyper, args.iters, args.burnin, args.thin, rng,
                       static=args.static, on_sweep=on_sweep)

    samples = _run_chains(
        args, out, fit, ["iteration", "active_features", "loglik", "sigma2"],
        lambda s: [active_features(s), lfm_log_likelihood(s, data), float(s.sigma2)], lambda s: s.to_dict())
    _lfm_reports(out, samples, data.covariates)

    if args.folds:
        rng = np.random.default_rng([args.seed, 1 << 21])
        scores = [
            missing_entry_rmse(data, fold, args.k, hyper, args.iters, args.burnin, args.thin, rng,
                               static=args.static)
            for fold in kfold_indices(data.N, args.folds, rng)
        ]
        write_json(out / "evaluation.json", report("missing_entry_rmse", scores, args.seed))
    return 0


def _lfm_reports(out: Path, samples, grid) -> None:
    A = sum(s.A for s in samples) / len(samples)
    pi = sum(s.pi for s in samples) / len(samples)
    rows = [[k, float(pi[k]), *map(float, A[k])] for k in range(len(pi))]
    atomic_write(out / "features.csv", csv_text(["feature", "pi", *[f"a{j}" for j in range(A.shape[1])]], rows))
    curves = learned_curves(samples, grid)
    rows = [[k, ",".join(format_number(v) for v in grid[j]), float(curves[k, j])]
            for k in range(curves.shape[0]) for j in range(curves.shape[1])]
    atomic_write(out / "curves.csv", csv_text(["feature", "covariate", "thinning_probability"], rows))


# --------------------------------------------------------------------------
# evaluation commands
# --------------------------------------------------------------------------

def _run_model(run: Path) -> str:
    cfg = read_json(run / "config.json")
    return "lfm" if cfg.get("command") == "fit-lfm" else "topics"


def cmd_perplexity(args) -> int:
    if not args.run:
        raise UsageError("--run is required")
    run = Path(args.run)
    split = HeldoutSplit.load(args.split or run / "split.json")
    samples = load_samples(run, TopicState)
    out = output_dir(args)
    result = report("perplexity", [perplexity(samples, split.heldout)], args.seed)
    write_json(out / "perplexity.json", result)
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_predict_decade(args) -> int:
    if not args.run:
        raise UsageError("--run is required")
    run = Path(args.run)
    cfg = read_json(run / "config.json")
    width = args.decade_width or cfg.get("decade_width", 10.0)
    test = Corpus.load(args.data or run / "test.tsv")
    samples = load_samples(run, TopicState)
    times = np.asarray(cfg["times"], dtype=float)
    decades: dict = {}
    for t in times:
        decades.setdefault(decade_of(t, width), []).append(float(t))
    W = test.dense()
    rows, correct = [], 0
    for n in range(test.D):
        truth = decade_of(test.doc_timestamps()[n], width)
        guess = decade_predict(samples, W[n], decades)
        correct += guess == truth
        rows.append([test.doc_ids[n], format_number(truth), format_number(guess)])
    out = output_dir(args)
    atomic_write(out / "predictions.csv", csv_text(["doc_id", "decade", "predicted"], rows))
    result = report("decade_accuracy", [correct / max(test.D, 1)], args.seed)
    result["uniform_baseline"] = 1.0 / len(decades)
    write_json(out / "decade.json", result)
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    if not args.run:
        raise UsageError("--run is required")
    run = Path(args.run)
    model = args.model or _run_model(run)
    cfg = read_json(run / "config.json")
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    if model == "lfm":
        samples = load_samples(run, LfmState)
        _lfm_reports(out, samples, LfmData.load(cfg["data"]).covariates)
    else:
        samples = load_samples(run, TopicState)
        train_path = run / "train.tsv" if (run / "train.tsv").exists() else cfg["data"]
        corpus = Corpus.load(train_path, cfg.get("vocab"))
        if (run / "split.json").exists():
            corpus = HeldoutSplit.load(run / "split.json", corpus.vocab).train
        _topic_reports(out, samples, corpus, args.top_words)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="thincrm", description="Thinned completely random measures.")
    parser.add_argument("--log-level", default="WARNING")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>-seed<seed>)")
        p.add_argument("--data")
        p.add_argument("--vocab")
        p.add_argument("--model", choices=("lfm", "topics"))
        return p

    def sampler(p, k_default):
        p.add_argument("--k", type=positive_int, default=k_default)
        p.add_argument("--iters", type=positive_int, default=1000)
        p.add_argument("--burnin", type=int, default=500)
        p.add_argument("--thin", type=positive_int, default=10)
        p.add_argument("--chains", type=positive_int, default=1)
        p.add_argument("--c0", type=float, default=1.0)
        p.add_argument("--d0", type=float, default=1.0)
        p.add_argument("--widths", type=widths_arg, default=np.array(DEFAULT_WIDTHS))
        p.add_argument("--static", action="store_true", help="disable thinning (all indicators on)")

    p = common(sub.add_parser("ingest", help="raw texts -> corpus.tsv + vocab.txt"))
    p.add_argument("--min-count", type=int, default=10)
    p.add_argument("--tfidf-quantile", type=float, default=0.85,
                   help="keep terms whose TFIDF score reaches this quantile (0 keeps all)")
    p.add_argument("--paragraphs", type=positive_int, default=3)
    p.set_defaults(func=cmd_ingest)

    p = common(sub.add_parser("synth-lfm", help="synthetic bag-of-items data"))
    p.add_argument("--points-per-covariate", type=positive_int, default=100)
    p.add_argument("--noise-var", type=float, default=0.25)
    p.add_argument("--phi", type=float, default=0.1)
    p.set_defaults(func=cmd_synth_lfm)

    p = common(sub.add_parser("synth-corpus", help="synthetic time-varying corpus"))
    p.add_argument("--k-true", type=positive_int, default=8)
    p.add_argument("--vocab-size", type=positive_int, default=200)
    p.add_argument("--timestamps", type=positive_int, default=20)
    p.add_argument("--docs-per-t", type=positive_int, default=30)
    p.add_argument("--words-per-doc", type=float, default=100.0)
    p.add_argument("--phi", type=float, default=0.1)
    p.add_argument("--curves", choices=("rvm", "bumps"), default="rvm")
    p.add_argument("--bandwidth", type=float, default=5.0, help="bump width for --curves bumps")
    p.set_defaults(func=cmd_synth_corpus)

    p = common(sub.add_parser("fit-lfm", help="Gibbs sampler for the latent feature model"))
    sampler(p, 20)
    p.add_argument("--noise-shape", type=float, default=1.0)
    p.add_argument("--noise-scale", type=float, default=1.0)
    p.add_argument("--feature-shape", type=float, default=1.0)
    p.add_argument("--feature-scale", type=float, default=1.0)
    p.add_argument("--folds", type=int, default=0, help="also run k-fold missing-entry evaluation")
    p.set_defaults(func=cmd_fit_lfm)

    p = common(sub.add_parser("fit-topics", help="Gibbs sampler for the topic model"))
    sampler(p, 100)
    p.add_argument("--alpha-theta", type=float, default=0.05)
    p.add_argument("--e", type=float, default=1.0)
    p.add_argument("--gamma-shape", type=float, default=1.0)
    p.add_argument("--gamma-rate", type=float, default=1.0)
    p.add_argument("--word-holdout", type=fraction_arg, help="hold out this fraction of tokens")
    p.add_argument("--doc-holdout", type=fraction_arg, help="hold out this fraction of documents per decade")
    p.add_argument("--decade-width", type=float, default=10.0)
    p.add_argument("--top-words", type=positive_int, default=10)
    p.set_defaults(func=cmd_fit_topics)

    p = common(sub.add_parser("perplexity", help="held-out perplexity of a fitted run"))
    p.add_argument("--run")
    p.add_argument("--split")
    p.set_defaults(func=cmd_perplexity)

    p = common(sub.add_parser("predict-decade", help="decade prediction for held-out documents"))
    p.add_argument("--run")
    p.add_argument("--decade-width", type=float)
    p.set_defaults(func=cmd_predict_decade)

    p = common(sub.add_parser("report", help="regenerate topic/feature reports of a run"))
    p.add_argument("--run")
    p.add_argument("--top-words", type=positive_int, default=10)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "word_holdout", None) and getattr(args, "doc_holdout", None):
        parser.error("--word-holdout and --doc-holdout are exclusive")
    try:
        return args.func(args)
    except (NumericalError, InvariantViolation) as exc:
        print(f"thincrm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ConfigurationError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"thincrm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
