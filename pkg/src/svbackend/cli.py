"""Command-line surface wiring the toolkit into train/score/evaluate pipelines.

Subcommands: gen-synth, sample-trials, fit-preprocess, train-backend, score,
evaluate. Every run is deterministic for a given --seed, so identical
invocations produce byte-identical output files.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import baselines, dataio, gplda, metrics, nplda, preprocess, synth, trainer

BACKENDS = ("gplda", "gb", "dplda", "nplda")


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _load_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise ValueError(f"config line {lineno}: expected 'key value'")
        values[parts[0]] = parts[1].strip()
    return values


def _train_config(args: argparse.Namespace) -> trainer.TrainConfig:
    """Defaults, overridden by --config file entries, overridden by flags."""
    values = {
        "batch_size": trainer.TrainConfig.batch_size,
        "lr": trainer.TrainConfig.lr,
        "lr_halving_patience": trainer.TrainConfig.lr_halving_patience,
        "max_epochs": trainer.TrainConfig.max_epochs,
        "seed": 42,
        "loss": trainer.TrainConfig.loss,
        "lam": trainer.TrainConfig.lam,
        "alpha": trainer.TrainConfig.alpha,
    }
    casts = {
        "batch_size": int, "lr": float, "lr_halving_patience": int,
        "max_epochs": int, "seed": int, "loss": str, "lam": float, "alpha": float,
    }
    if getattr(args, "config", None):
        for key, text in _load_config_file(args.config).items():
            if key not in casts:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = casts[key](text)
    for key in casts:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    cost = metrics.CostParams(args.c_miss, args.c_fa, args.p_target)
    return trainer.TrainConfig(costs=(cost,), stratified=True, **values)


def cmd_gen_synth(args: argparse.Namespace) -> int:
    spec = synth.load_spec(args.spec)
    dataio.write_archive(synth.generate(spec), args.out)
    return 0


def cmd_sample_trials(args: argparse.Namespace) -> int:
    archive = dataio.load_archive(args.archive)
    trials = trainer.sample_trials(archive, args.n_target, args.ratio, args.seed)
    dataio.write_trials(trials, args.out)
    return 0


def cmd_fit_preprocess(args: argparse.Namespace) -> int:
    archive = dataio.load_archive(args.archive)
    pipeline = preprocess.fit_pipeline(archive, args.lda_dim)
    dataio.save_model(pipeline, args.out)
    return 0


def _split_validation(
    trials: list[dataio.Trial], fraction: float, seed: int
) -> tuple[list[dataio.Trial], list[dataio.Trial]]:
    """Deterministic stratified split used when no validation list is given."""
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    train: list[dataio.Trial] = []
    valid: list[dataio.Trial] = []
    for label in (dataio.TARGET, dataio.NONTARGET):
        pool = [t for t in trials if t.label == label]
        n_valid = max(1, int(round(fraction * len(pool)))) if pool else 0
        order = rng.permutation(len(pool))
        chosen = set(order[:n_valid].tolist())
        valid.extend(t for i, t in enumerate(pool) if i in chosen)
        train.extend(t for i, t in enumerate(pool) if i not in chosen)
    return train, valid


def cmd_train_backend(args: argparse.Namespace) -> int:
    archive = dataio.load_archive(args.archive)
    config = _train_config(args)

    if args.backend == "gplda":
        backend = gplda.fit_gplda_backend(
            archive,
            target_dim=args.lda_dim,
            rank=args.rank,
            iterations=args.em_iters,
            average_per_speaker=args.average_per_speaker,
        )
        dataio.save_model(backend, args.out)
        return 0

    trials = dataio.load_trials(args.trials, archive)
    if args.init_model:
        seed_backend = dataio.load_model(args.init_model)
        if not isinstance(seed_backend, gplda.GPLDABackend):
            return _fail(f"--init-model must hold a gplda backend, got {type(seed_backend).__name__}")
    else:
        seed_backend = gplda.fit_gplda_backend(
            archive, target_dim=args.lda_dim, rank=args.rank, iterations=args.em_iters
        )
    pipeline = seed_backend.pipeline
    processed = preprocess.apply_archive(pipeline, archive)

    if args.backend == "gb":
        model = baselines.fit_gaussian_backend(trials, processed)
        dataio.save_model(baselines.GaussianBackend(pipeline, model), args.out)
        return 0

    if args.backend == "dplda":
        w0 = baselines.weights_from_score_matrices(seed_backend.sm).w
        model, losses = baselines.train_dplda(trials, processed, config, w0)
        dataio.save_model(baselines.DPLDABackend(pipeline, model), args.out)
        if args.history:
            lines = ["epoch,train_loss"]
            lines += [f"{i},{loss:.10g}" for i, loss in enumerate(losses)]
            Path(args.history).write_text("\n".join(lines) + "\n")
        return 0

    # nplda
    params = nplda.init_from_gplda(
        pipeline,
        seed_backend.model,
        seed_backend.sm,
        betas=tuple(cp.beta for cp in config.costs),
        alpha=config.alpha,
    )
    if args.valid_trials:
        train_trials = trials
        valid_trials = dataio.load_trials(args.valid_trials, archive)
    else:
        train_trials, valid_trials = _split_validation(trials, args.valid_fraction, config.seed)
    best, history = trainer.train_nplda(params, train_trials, valid_trials, archive, config)
    dataio.save_model(best, args.out)
    if args.history:
        Path(args.history).write_text(trainer.history_to_csv(history))
    return 0


def _scorer(model):
    if isinstance(model, (gplda.GPLDABackend, baselines.GaussianBackend,
                          baselines.DPLDABackend, nplda.NPLDAParams)):
        return model.score_batch
    raise TypeError(f"{type(model).__name__} is not a trial scorer")


def _model_input_dim(model) -> int:
    if isinstance(model, nplda.NPLDAParams):
        return model.input_dim
    return model.pipeline.input_dim


def cmd_score(args: argparse.Namespace) -> int:
    model = dataio.load_model(args.model)
    archive = dataio.load_archive(args.archive)
    expected = _model_input_dim(model)
    if archive.dimension != expected:
        return _fail(
            f"archive dimension {archive.dimension} does not match "
            f"model input dimension {expected}"
        )
    trials = dataio.load_trials(args.trials, archive)
    score = _scorer(model)
    records = []
    if trials:
        tensors = np.array(
            [[archive.row(t.enroll_id), archive.row(t.test_id)] for t in trials]
        )
        scores = score(archive.vectors[tensors[:, 0]], archive.vectors[tensors[:, 1]])
        with_labels = any(t.label != dataio.UNLABELED for t in trials)
        for t, s in zip(trials, scores):
            label = t.label if with_labels else None
            records.append(dataio.ScoreRecord(t.enroll_id, t.test_id, float(s), label))
    dataio.write_scores(records, args.out)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    records = dataio.load_scores(args.scores)
    if args.trials:
        labels = {
            (t.enroll_id, t.test_id): t.label for t in dataio.load_trials(args.trials)
        }
        try:
            records = [
                dataio.ScoreRecord(r.enroll_id, r.test_id, r.score,
                                   labels[(r.enroll_id, r.test_id)])
                for r in records
            ]
        except KeyError as exc:
            return _fail(f"score file trial {exc.args[0]} missing from the trial list")
    unlabeled = [r for r in records if r.label in (None, dataio.UNLABELED)]
    if unlabeled:
        if not args.ignore_unlabeled:
            return _fail(
                f"{len(unlabeled)} unlabeled trials present "
                "(use --ignore-unlabeled to drop them, or pass --trials)"
            )
        records = [r for r in records if r.label not in (None, dataio.UNLABELED)]
    if not records:
        return _fail("no labeled trials to evaluate")
    if args.beta is not None:
        cost = metrics.CostParams.from_beta(args.beta)
    else:
        cost = metrics.CostParams(args.c_miss, args.c_fa, args.p_target)
    scores = np.array([r.score for r in records])
    labels_arr = np.array([1 if r.label == dataio.TARGET else 0 for r in records])
    ss = metrics.ScoreSet(scores, labels_arr)
    print(metrics.metric_report(ss, cost))
    return 0


def _add_cost_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--c-miss", type=float, default=1.0, help="cost of a miss")
    p.add_argument("--c-fa", type=float, default=1.0, help="cost of a false alarm")
    p.add_argument("--p-target", type=float, default=0.01, help="prior target probability")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svbackend",
        description="Speaker-verification backend toolkit: train, score and evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic embedding archive")
    p.add_argument("spec", help="key-value generator spec file")
    p.add_argument("out", help="output archive path")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("sample-trials", help="sample gender-matched verification trials")
    p.add_argument("archive", help="embedding archive with speaker labels")
    p.add_argument("out", help="output trial list path")
    p.add_argument("--n-target", type=int, required=True, help="number of target trials")
    p.add_argument("--ratio", type=int, default=10, help="nontargets per target")
    p.add_argument("--seed", type=int, default=42, help="sampling seed")
    p.set_defaults(func=cmd_sample_trials)

    p = sub.add_parser("fit-preprocess", help="fit the centering/LDA/length-norm pipeline")
    p.add_argument("archive", help="embedding archive with speaker labels")
    p.add_argument("out", help="output pipeline model path")
    p.add_argument("--lda-dim", type=int, default=None,
                   help="projection dimension (default min(170, d, speakers-1))")
    p.set_defaults(func=cmd_fit_preprocess)

    p = sub.add_parser("train-backend", help="train a scoring backend")
    p.add_argument("backend", choices=BACKENDS, help="backend type")
    p.add_argument("archive", help="training embedding archive")
    p.add_argument("out", help="output model path")
    p.add_argument("--trials", help="labeled training trial list (gb/dplda/nplda)")
    p.add_argument("--valid-trials", help="validation trial list for nplda")
    p.add_argument("--valid-fraction", type=float, default=0.1,
                   help="held-out fraction when --valid-trials is absent")
    p.add_argument("--init-model", help="gplda backend file used to initialize dplda/nplda")
    p.add_argument("--history", help="write per-epoch history CSV here")
    p.add_argument("--lda-dim", type=int, default=None, help="pipeline projection dimension")
    p.add_argument("--rank", type=int, default=None, help="speaker subspace rank (default full)")
    p.add_argument("--em-iters", type=int, default=gplda.DEFAULT_EM_ITERATIONS,
                   help="EM iterations for the generative model")
    p.add_argument("--average-per-speaker", action="store_true",
                   help="fit the generative model on per-speaker mean vectors")
    p.add_argument("--config", help="key-value config file; flags win")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int, dest="lr_halving_patience")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--seed", type=int, default=None, help="training seed (default 42)")
    p.add_argument("--loss", choices=trainer.LOSSES)
    p.add_argument("--lambda", type=float, dest="lam",
                   help="regularizer weight for bce_regularized / dplda")
    p.add_argument("--alpha", type=float, help="sigmoid warp of the soft detection cost")
    _add_cost_flags(p)
    p.set_defaults(func=cmd_train_backend)

    p = sub.add_parser("score", help="score a trial list with a trained backend")
    p.add_argument("model", help="trained model file")
    p.add_argument("archive", help="embedding archive")
    p.add_argument("trials", help="trial list")
    p.add_argument("out", help="output score file")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="report EER and detection costs for a score file")
    p.add_argument("scores", help="score file (with labels, or pass --trials)")
    p.add_argument("--trials", help="trial list supplying labels")
    p.add_argument("--beta", type=float, default=None,
                   help="effective prior odds; overrides the cost flags")
    p.add_argument("--ignore-unlabeled", action="store_true",
                   help="drop unlabeled trials instead of failing")
    _add_cost_flags(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "train-backend" and args.backend != "gplda" and not args.trials:
        return _fail(f"backend {args.backend!r} requires --trials")
    try:
        return args.func(args)
    except (dataio.FormatError, ValueError, FloatingPointError, OSError,
            np.linalg.LinAlgError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
