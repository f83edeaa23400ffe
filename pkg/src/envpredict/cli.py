"""Command-line entry point.

Every subcommand prints its results as ``key=value`` records, one per line,
to stdout. Errors go to stderr with exit status 1; bad arguments print the
usage text and exit with status 2.
"""
from __future__ import annotations

import argparse
import math
import shlex
import sys
from pathlib import Path

import numpy as np

from . import stats
from .architectures import ModelConfig, build_model, desk_config, load_model, param_count, save_model
from .evaluation import eval_teacher_forced, free_run_drift, generate
from .features import (
    FeatureSequence,
    compute_norm_stats,
    load_corpus,
    split_corpus,
    write_feature_file,
    write_manifest,
)
from .toysinger import ToySingerConfig, ToySingerOracle, synth_corpus
from .training import TrainConfig, train

# name -> (architecture, head, regime)
MODEL_MATRIX = {
    "bb1": ("bb1", "cgm", "noise"),
    "bb2": ("bb2", "cgm", "noise"),
    "mse": ("proposed", "mse", "iterated"),
    "cgm": ("proposed", "cgm", "iterated"),
    "iter": ("proposed", "mse", "iterated"),
    "noise": ("proposed", "mse", "noise"),
}


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return shlex.quote(str(v))


def format_record(rec):
    return " ".join(f"{k}={_fmt(v)}" for k, v in rec.items())


def _emit(stream, /, **rec):
    print(format_record(rec), file=stream)


def _split(corpus, which):
    train_set, test_set = split_corpus(corpus)
    return {"train": train_set, "test": test_set, "all": list(corpus)}[which]


# --------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args, out):
    singer = ToySingerConfig(seed=args.seed)
    corpus = synth_corpus(singer, args.phrases, args.frames)
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for seq in corpus:
        name = f"phrase_{seq.phrase_id:05d}.fsq"
        write_feature_file(seq, root / name)
        names.append(name)
    manifest = root / "manifest.txt"
    write_manifest(names, manifest)
    train_set, test_set = split_corpus(corpus)
    oracle = ToySingerOracle(singer, norm=compute_norm_stats(train_set))
    save_model(oracle, root / "oracle.json")
    _emit(
        out,
        kind="synth",
        phrases=len(corpus),
        frames=len(corpus) * args.frames,
        train=len(train_set),
        test=len(test_set),
        manifest=str(manifest),
        oracle=str(root / "oracle.json"),
    )
    return 0


def cmd_train(args, out):
    variant, head, regime = MODEL_MATRIX[args.model]
    cfg = (desk_config if args.size == "desk" else ModelConfig)(head=head)
    model = build_model(cfg, variant, seed=args.seed)
    corpus = load_corpus(args.data)
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    tcfg = TrainConfig(
        regime=regime,
        n_iter=args.n_iter,
        sigma_db=args.sigma_db,
        batch=args.batch,
        max_updates=args.updates,
        eval_every=args.eval_every,
        eval_horizon=args.horizon,
        seed=args.seed,
        head=head,
        clip_norm=None if args.no_clip else 5.0,
        checkpoint_dir=str(root / "checkpoints") if args.eval_every else None,
    )
    model, log = train(model, corpus, tcfg, log_path=root / "runlog.jsonl")
    save_model(model, root / "model.json")
    _emit(
        out,
        kind="train",
        model=args.model,
        variant=variant,
        head=head,
        regime=regime,
        params=param_count(model),
        updates=len(log.updates),
        checkpoint=str(root / "model.json"),
    )
    for rec in log.evals:
        _emit(out, **rec)
    return 0


def cmd_generate(args, out):
    model = load_model(args.checkpoint)
    corpus = load_corpus(args.data)
    if not 0 <= args.phrase < len(corpus):
        raise ValueError(f"phrase index {args.phrase} outside [0, {len(corpus)})")
    seq = corpus[args.phrase]
    h = model.config.history
    rng = np.random.default_rng(args.seed)
    env = generate(model, seq.phonemes, seq.f0, seq.loudness, seq.envelopes[:h], args.tau, rng, seq.vocab_size)
    gen = FeatureSequence(env, seq.phonemes, seq.f0, seq.loudness, seq.vocab_size)
    write_feature_file(gen, args.out)
    err = np.abs(env[h:] - seq.envelopes[h:])
    _emit(out, kind="generate", phrase=args.phrase, frames=len(env), mean_abs_db=float(err.mean()), out=args.out)
    return 0


def cmd_eval(args, out):
    model = load_model(args.checkpoint)
    split = _split(load_corpus(args.data), args.split)
    rep = eval_teacher_forced(model, split)
    if args.horizon > 0:
        rng = np.random.default_rng(args.seed)
        rep.drift = free_run_drift(model, split, args.horizon, args.tau, rng)
    for rec in rep.records():
        if rec["kind"] == "drift" and args.horizon > 0 and rec["horizon"] % args.drift_every and rec["horizon"] != args.horizon:
            continue
        _emit(out, **rec)
    return 0


def cmd_compare(args, out):
    scores = stats.read_score_file(args.scores, stats.PREFERENCE_RANGE)
    mean, p = stats.one_sided_t_test(scores)
    _emit(out, kind="t_test", label=scores.label, n=len(scores), mean=mean, p=p)
    return 0


def cmd_mos(args, out):
    scores = stats.read_score_file(args.scores, stats.MOS_RANGE)
    mean, half = stats.mos_summary(scores, args.alpha)
    _emit(out, kind="mos", label=scores.label, n=len(scores), mean=mean, half_width=half, alpha=args.alpha)
    return 0


# --------------------------------------------------------------------------
# parser


def _positive(kind):
    def parse(s):
        v = kind(s)
        if not v > 0 or (kind is float and not math.isfinite(v)):
            raise argparse.ArgumentTypeError(f"must be > 0, got {s}")
        return v

    return parse


def _nonneg(kind):
    def parse(s):
        v = kind(s)
        if v < 0:
            raise argparse.ArgumentTypeError(f"must be >= 0, got {s}")
        return v

    return parse


def build_parser():
    p = argparse.ArgumentParser(prog="envpredict", description="Autoregressive spectral-envelope predictor.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help):
        sp = sub.add_parser(name, help=help, description=help)
        sp.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        sp.set_defaults(func=func)
        return sp

    sp = add("synth-data", cmd_synth_data, "write a toy-singer corpus, its manifest and an oracle checkpoint")
    sp.add_argument("--out", required=True, help="output folder")
    sp.add_argument("--phrases", type=_positive(int), default=160)
    sp.add_argument("--frames", type=_positive(int), default=250, help="frames per phrase")

    sp = add("train", cmd_train, "train one model of the comparison matrix")
    sp.add_argument("--model", required=True, choices=sorted(MODEL_MATRIX))
    sp.add_argument("--data", required=True, help="corpus manifest")
    sp.add_argument("--out", required=True, help="output folder for run log and checkpoints")
    sp.add_argument("--size", choices=("full", "desk"), default="full", help="layer widths")
    sp.add_argument("--updates", type=_nonneg(int), default=1000)
    sp.add_argument("--eval-every", type=_nonneg(int), default=0)
    sp.add_argument("--horizon", type=_nonneg(int), default=200, help="free-run horizon for evaluations")
    sp.add_argument("--batch", type=_positive(int), default=16)
    sp.add_argument("--n-iter", type=_positive(int), default=24, help="rollout length of the iterated regime")
    sp.add_argument("--sigma-db", type=_nonneg(float), default=12.0, help="input noise of the noise regime")
    sp.add_argument("--no-clip", action="store_true", help="disable gradient-norm clipping")

    sp = add("generate", cmd_generate, "free-run one phrase from its controls and first frames")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="corpus manifest")
    sp.add_argument("--phrase", type=int, default=0, help="index into the manifest")
    sp.add_argument("--out", required=True, help="output feature file")
    sp.add_argument("--tau", type=_nonneg(float), default=0.0, help="sampling temperature (cgm head)")

    sp = add("eval", cmd_eval, "teacher-forced error and free-run drift")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="corpus manifest")
    sp.add_argument("--split", choices=("test", "train", "all"), default="test")
    sp.add_argument("--horizon", type=_nonneg(int), default=200)
    sp.add_argument("--drift-every", type=_positive(int), default=10, help="report every k-th drift step")
    sp.add_argument("--tau", type=_nonneg(float), default=0.0)

    sp = add("compare", cmd_compare, "one-sided t-test on a preference score file")
    sp.add_argument("scores", help="one score in [-3, 3] per line")

    sp = add("mos", cmd_mos, "mean opinion score with a t confidence interval")
    sp.add_argument("scores", help="one score in [1, 5] per line")
    sp.add_argument("--alpha", type=float, default=0.05)
    return p


def main(argv=None, out=None):
    out = out if out is not None else sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args, out)
    except (ValueError, OSError, FloatingPointError, RuntimeError) as e:
        print(f"envpredict {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
