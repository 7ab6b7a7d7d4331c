"""Command-line interface.

Subcommands: eval, simple-match, ttm, ttm-global, synth, validate-props.
Exit codes: 0 success, 1 validation error, 2 training divergence,
3 IO/format error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from . import io as ttio
from .core import GroupShape, ValidationError
from .metrics import display_round
from .scorer import AdapterParams, DivergenceError, TrainConfig
from .synth import SynthConfig, flatten, generate
from .ttm import (
    MODE_ABSOLUTE,
    MODE_PERCENTILE,
    RunReport,
    ThresholdSchedule,
    TtmConfig,
    adapter_score_fn,
    calibrate_tau,
    global_matching,
    run_global_ttm,
    run_simple_match,
    run_ttm,
    store_score_fn,
)
from .validate import check_propositions, format_proposition_table

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_DIVERGENCE = 2
EXIT_IO = 3


def _parse_shape(text: str) -> GroupShape:
    try:
        m, k = (int(part) for part in text.split(","))
    except ValueError:
        raise ValidationError(f"invalid shape '{text}', expected 'm,k'") from None
    return GroupShape(m, k)


def _load_score_source(args, dataset):
    """Build a per-group score function plus the embedding table, if any."""
    if args.embeddings and args.scores:
        raise ValidationError("pass either --embeddings or --scores, not both")
    if args.embeddings:
        table = ttio.load_embeddings(args.embeddings)
        from .core import validate_dataset

        validate_dataset(dataset, table)
        return adapter_score_fn(AdapterParams.identity(table.dim), table), table
    if args.scores:
        store = ttio.load_scores(args.scores, dataset)
        return store_score_fn(store), None
    raise ValidationError("one of --embeddings or --scores is required")


def _report_path(out: str, seed: int) -> Path:
    """Reports are append-only: directories get a fresh timestamp+seed name."""
    path = Path(out)
    if path.is_dir():
        stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
        return path / f"report_{stamp}_seed{seed}.json"
    return path


def _print_metrics(result: dict, keys) -> None:
    for key in keys:
        value = result.get(key)
        if value is None:
            continue
        print(f"{key:<22} {display_round(value):>8.2f}")


def _print_report(report: RunReport) -> None:
    base = report.baseline
    if base.get("group_match") is not None:
        print(
            f"baseline: group_score={display_round(base['group_score']):.2f} "
            f"group_match={display_round(base['group_match']):.2f}"
        )
    elif base.get("assignment_accuracy") is not None:
        print(
            "baseline: assignment_accuracy="
            f"{display_round(base['assignment_accuracy']):.2f}"
        )
    for stats in report.iterations:
        parts = [
            f"iter {stats.iteration:>2}",
            f"tau={stats.tau:.4f}",
            f"selected={stats.selected_count}",
            f"frac={stats.selection_fraction:.3f}",
        ]
        if stats.pseudo_label_precision is not None:
            parts.append(f"precision={stats.pseudo_label_precision:.3f}")
        if stats.group_match is not None:
            parts.append(f"group_match={display_round(stats.group_match):.2f}")
        if stats.assignment_accuracy is not None:
            parts.append(f"acc={display_round(stats.assignment_accuracy):.2f}")
        print("  ".join(parts))
    final = {key: value for key, value in report.final.items() if value is not None}
    print(
        "final: "
        + "  ".join(f"{key}={display_round(value):.2f}" for key, value in final.items())
    )
    if report.wall_clock_seconds is not None:
        print(f"wall clock: {report.wall_clock_seconds:.2f}s")


def _add_train_args(parser: argparse.ArgumentParser, default_batch: int) -> None:
    parser.add_argument("--iters", type=int, default=10, help="loop iterations")
    parser.add_argument("--epochs", type=int, default=20, help="epochs per iteration")
    parser.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    parser.add_argument("--batch", type=int, default=default_batch)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument(
        "--loss",
        choices=["sigmoid_pairwise", "softmax_contrastive"],
        default="sigmoid_pairwise",
    )
    parser.add_argument(
        "--lr-restart-factor", type=float, default=0.95, dest="lr_restart"
    )
    parser.add_argument(
        "--keep-optimizer-state",
        action="store_true",
        help="carry optimizer moments across iterations instead of resetting",
    )
    parser.add_argument("--out", help="report file, or directory for timestamped reports")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttmatch",
        description="Matching-based evaluation and test-time matching self-training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_eval = sub.add_parser("eval", help="metric table for a dataset")
    p_eval.add_argument("manifest")
    p_eval.add_argument("--embeddings")
    p_eval.add_argument("--scores")
    p_eval.add_argument(
        "--metric",
        choices=["all", "group-score", "group-match", "individual"],
        default="all",
    )

    p_simple = sub.add_parser("simple-match", help="raw vs match-induced report")
    p_simple.add_argument("manifest")
    p_simple.add_argument("--embeddings")
    p_simple.add_argument("--scores")
    p_simple.add_argument(
        "--overfit-check",
        action="store_true",
        help="burn induced matchings into one-hot matrices and re-evaluate",
    )

    p_ttm = sub.add_parser("ttm", help="grouped self-training loop")
    p_ttm.add_argument("manifest")
    p_ttm.add_argument("--embeddings", required=True)
    p_ttm.add_argument(
        "--schedule",
        choices=["constant", "linear-decay", "cosine-decay", "linear-ascend"],
        default="linear-decay",
    )
    p_ttm.add_argument("--tau-start", type=float, default=None)
    p_ttm.add_argument("--tau-end", type=float, default=0.0)
    p_ttm.add_argument(
        "--calibrate-frac",
        type=float,
        default=None,
        help="pick tau-start as the margin quantile keeping this fraction",
    )
    p_ttm.add_argument("--oracle", action="store_true")
    _add_train_args(p_ttm, default_batch=50)

    p_global = sub.add_parser("ttm-global", help="global matching loop (flattened)")
    p_global.add_argument("manifest")
    p_global.add_argument("--embeddings", required=True)
    p_global.add_argument(
        "--schedule",
        choices=["constant", "linear-decay", "cosine-decay", "linear-ascend"],
        default="linear-decay",
    )
    p_global.add_argument("--percentile-start", type=float, required=True)
    p_global.add_argument("--percentile-end", type=float, default=0.0)
    _add_train_args(p_global, default_batch=100)

    p_synth = sub.add_parser("synth", help="generate a planted synthetic dataset")
    p_synth.add_argument("--groups", type=int, default=400)
    p_synth.add_argument("--shape", default="2,2")
    p_synth.add_argument("--dim", type=int, default=64)
    p_synth.add_argument("--sigma", type=float, default=3.0, help="noise level")
    p_synth.add_argument("--anchor", type=float, default=2.0, help="anchor weight")
    p_synth.add_argument("--mu", type=float, default=1.0, help="concept signal")
    p_synth.add_argument(
        "--concept-rank", type=int, default=8, help="shared concept subspace rank"
    )
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True, help="output directory")

    p_props = sub.add_parser("validate-props", help="Monte Carlo proposition table")
    p_props.add_argument("--max-k", type=int, default=4)
    p_props.add_argument("--trials", type=int, default=1_000_000)
    p_props.add_argument("--seed", type=int, default=0)

    return parser


def _cmd_eval(args) -> int:
    dataset = ttio.load_manifest(args.manifest)
    score_fn, _ = _load_score_source(args, dataset)
    result = run_simple_match(dataset, score_fn)
    selected = {
        "all": ["group_score", "group_match", "individual_match", "assignment_accuracy"],
        "group-score": ["group_score"],
        "group-match": ["group_match"],
        "individual": ["individual_match"],
    }[args.metric]
    _print_metrics(result, selected)
    return EXIT_OK


def _cmd_simple_match(args) -> int:
    dataset = ttio.load_manifest(args.manifest)
    score_fn, _ = _load_score_source(args, dataset)
    result = run_simple_match(dataset, score_fn, overfit_check=args.overfit_check)
    print(f"{'raw (group_score)':<22} {display_round(result['group_score']):>8.2f}")
    print(f"{'simple match':<22} {display_round(result['group_match']):>8.2f}")
    print(f"{'individual match':<22} {display_round(result['individual_match']):>8.2f}")
    if "overfit_group_score" in result:
        print(
            f"{'overfit group_score':<22} "
            f"{display_round(result['overfit_group_score']):>8.2f}"
        )
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        lr_restart_factor=args.lr_restart,
        reset_optimizer_state=not args.keep_optimizer_state,
        seed=args.seed,
        loss=args.loss,
    )


def _cmd_ttm(args) -> int:
    dataset = ttio.load_manifest(args.manifest)
    table = ttio.load_embeddings(args.embeddings)
    from .core import validate_dataset

    validate_dataset(dataset, table)
    tau_start = args.tau_start
    if args.calibrate_frac is not None:
        tau_start = calibrate_tau(
            AdapterParams.identity(table.dim), dataset, table, args.calibrate_frac
        )
        print(f"calibrated tau_start={tau_start:.6f} ({args.calibrate_frac:.0%} kept)")
    if tau_start is None:
        raise ValidationError("provide --tau-start or --calibrate-frac")
    config = TtmConfig(
        schedule=ThresholdSchedule(
            kind=args.schedule,
            tau_start=tau_start,
            tau_end=args.tau_end,
            iterations=args.iters,
            mode=MODE_ABSOLUTE,
        ),
        train=_train_config(args),
        oracle_mode=args.oracle,
        seed=args.seed,
    )
    try:
        _, report = run_ttm(dataset, table, config)
    except DivergenceError as err:
        if args.out and getattr(err, "report", None) is not None:
            ttio.save_report(err.report, _report_path(args.out, args.seed))
        raise
    _print_report(report)
    if args.out:
        path = _report_path(args.out, args.seed)
        ttio.save_report(report, path)
        print(f"report written to {path}")
    return EXIT_OK


def _cmd_ttm_global(args) -> int:
    dataset = ttio.load_manifest(args.manifest)
    table = ttio.load_embeddings(args.embeddings)
    from .core import validate_dataset

    validate_dataset(dataset, table)
    flat = flatten(dataset)
    one_shot, acc = global_matching(
        flat, params=AdapterParams.identity(table.dim), table=table
    )
    if acc is not None:
        print(f"one-shot assignment accuracy: {display_round(100 * acc):.2f}")
    config = TtmConfig(
        schedule=ThresholdSchedule(
            kind=args.schedule,
            tau_start=args.percentile_start,
            tau_end=args.percentile_end,
            iterations=args.iters,
            mode=MODE_PERCENTILE,
        ),
        train=_train_config(args),
        global_mode=True,
        seed=args.seed,
    )
    try:
        _, report = run_global_ttm(flat, table, config)
    except DivergenceError as err:
        if args.out and getattr(err, "report", None) is not None:
            ttio.save_report(err.report, _report_path(args.out, args.seed))
        raise
    _print_report(report)
    if args.out:
        path = _report_path(args.out, args.seed)
        ttio.save_report(report, path)
        print(f"report written to {path}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    config = SynthConfig(
        n_groups=args.groups,
        shape=_parse_shape(args.shape),
        dim=args.dim,
        anchor_weight=args.anchor,
        signal=args.mu,
        noise=args.sigma,
        concept_rank=args.concept_rank,
        seed=args.seed,
    )
    dataset, table = generate(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ttio.save_manifest(dataset, out / "manifest.json")
    ttio.save_embeddings(table, out / "embeddings.json")
    print(
        f"wrote {len(dataset.groups)} groups "
        f"({config.shape.rows}x{config.shape.cols}, dim {config.dim}) to {out}"
    )
    return EXIT_OK


def _cmd_validate_props(args) -> int:
    results = check_propositions(max_k=args.max_k, trials=args.trials, seed=args.seed)
    print(format_proposition_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} cell(s) outside the acceptance band", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


_COMMANDS = {
    "eval": _cmd_eval,
    "simple-match": _cmd_simple_match,
    "ttm": _cmd_ttm,
    "ttm-global": _cmd_ttm_global,
    "synth": _cmd_synth,
    "validate-props": _cmd_validate_props,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ttio.FormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
