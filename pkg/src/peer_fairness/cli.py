"""Command-line interface: ``peer-fairness audit|explain|imbalance|synth|report``.

Exit codes: 0 success, 1 pipeline error, 2 usage or IO error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from dataclasses import replace
from typing import Any

from peer_fairness.config import TEST_STATISTICS, AuditConfig, load_config
from peer_fairness.data import Dataset, load_dataset
from peer_fairness.errors import PeerFairnessError, ReportError, UsageError
from peer_fairness.pipeline import run_audit_pipeline
from peer_fairness.report import (
    RunManifest,
    convert_report,
    load_report_models,
    read_audit_report,
    summary_lines,
    write_audit_report,
    write_explanations,
    write_imbalance_report,
)
from peer_fairness.robustness import (
    DEFAULT_REPEATS,
    REFERENCE_OMEGAS,
    run_imbalance_study,
)
from peer_fairness.synth import generate, load_synth_spec, sme_preset, write_synthetic

logger = logging.getLogger("peer_fairness")

EXIT_OK = 0
EXIT_PIPELINE = 1
EXIT_USAGE = 2

DEFAULT_OUT = "peer_fairness_out"

# argparse dest -> AuditConfig field
_CONFIG_FLAGS = {
    "seed": "seed",
    "threads": "threads",
    "delta": "delta",
    "delta_multiplier": "delta_multiplier",
    "subsets": "n_subsets",
    "subset_size": "subset_size",
    "min_peers": "min_peers",
    "alpha": "alpha",
    "extreme_factor": "extreme_factor",
    "test_statistic": "test_statistic",
    "one_sided": "one_sided",
    "explain_alpha": "explain_alpha",
    "folds": "folds",
    "train_fraction": "train_fraction",
    "freeze_delta": "freeze_delta",
    "ior_labels": "ior_labels",
}


def _float_list(raw: str) -> list[float]:
    try:
        return [float(v) for v in raw.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated numbers, got {raw!r}"
        ) from None


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML config file with an [audit] table")
    parser.add_argument("--out", default=DEFAULT_OUT, help="Output directory")
    parser.add_argument(
        "--seed", type=int, default=None, help="Random seed (env: PEER_FAIRNESS_SEED)"
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="Worker threads (env: PEER_FAIRNESS_THREADS); output is unaffected",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Log progress")


def _add_data(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", required=True, help="Dataset CSV")
    parser.add_argument("--schema", required=True, help="Schema TOML")


def _add_audit_options(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("audit settings")
    group.add_argument(
        "--delta", type=float, default=None, help="Absolute peer threshold"
    )
    group.add_argument(
        "--delta-multiplier",
        type=float,
        default=None,
        help="delta = multiplier x sd of protected coefficients (default 0.3)",
    )
    group.add_argument("--subsets", type=int, default=None, help="N peer subsets (100)")
    group.add_argument("--subset-size", type=int, default=None, help="K peers (30)")
    group.add_argument("--min-peers", type=int, default=None, help="Peer floor (35)")
    group.add_argument("--alpha", type=float, default=None, help="Significance (0.05)")
    group.add_argument(
        "--extreme-factor", type=float, default=None, help="Extremeness factor (0.1)"
    )
    group.add_argument(
        "--test-statistic", choices=TEST_STATISTICS, default=None, help="z-test variant"
    )
    group.add_argument(
        "--one-sided",
        action="store_true",
        default=None,
        help="Report one-sided p-values in the observed direction",
    )
    group.add_argument(
        "--explain-alpha", type=float, default=None, help="Explanation threshold"
    )
    group.add_argument("--folds", type=int, default=None, help="CV folds (5)")
    group.add_argument(
        "--train-fraction", type=float, default=None, help="Training share (0.8)"
    )
    group.add_argument(
        "--grid",
        type=_float_list,
        default=None,
        help="Comma-separated regularisation strengths",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peer-fairness",
        description="Audit a binary decision system with peer-induced fairness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    audit = sub.add_parser("audit", help="Run the full audit and write a report")
    _add_data(audit)
    _add_common(audit)
    _add_audit_options(audit)
    audit.add_argument(
        "--no-explain", action="store_true", help="Skip watch-out lists"
    )

    explain = sub.add_parser("explain", help="Watch-out lists for fair rejections")
    _add_data(explain)
    _add_common(explain)
    _add_audit_options(explain)
    explain.add_argument(
        "--report", help="Prior audit report whose configuration is reused"
    )

    imbalance = sub.add_parser("imbalance", help="Audit stability under imbalance")
    _add_data(imbalance)
    _add_common(imbalance)
    _add_audit_options(imbalance)
    imbalance.add_argument(
        "--report", help="Prior audit report whose configuration is reused"
    )
    imbalance.add_argument(
        "--omegas",
        type=_float_list,
        default=list(REFERENCE_OMEGAS),
        help="Comma-separated target protected shares",
    )
    imbalance.add_argument(
        "--repeats", type=int, default=DEFAULT_REPEATS, help="Repeats per target (5)"
    )
    imbalance.add_argument(
        "--freeze-delta",
        action="store_true",
        default=None,
        help="Reuse the baseline delta in every run",
    )
    imbalance.add_argument(
        "--no-reselect",
        action="store_true",
        help="Reuse the baseline regularisation strengths",
    )
    imbalance.add_argument(
        "--ior-labels",
        choices=("three_way", "five_way"),
        default=None,
        help="Verdict granularity for the invariant outcome ratio",
    )

    synth = sub.add_parser("synth", help="Generate a synthetic dataset")
    source = synth.add_mutually_exclusive_group(required=True)
    source.add_argument("--spec", help="Generator spec TOML")
    source.add_argument("--preset", choices=("sme",), help="Built-in generator")
    synth.add_argument("--out", default=DEFAULT_OUT, help="Output directory")
    synth.add_argument("--stem", default="synthetic", help="Output file stem")
    synth.add_argument(
        "--seed", type=int, default=None, help="Override the generator seed"
    )
    synth.add_argument("--n", type=int, default=None, help="Override instance count")
    synth.add_argument(
        "--direct-bias", type=float, default=None, help="Override the direct bias"
    )
    synth.add_argument("-v", "--verbose", action="store_true", help="Log progress")

    report = sub.add_parser("report", help="Rebuild plot tables from a report JSON")
    report.add_argument("--report", required=True, help="Audit report JSON")
    report.add_argument("--out", default=DEFAULT_OUT, help="Output directory")
    report.add_argument("-v", "--verbose", action="store_true", help="Log progress")
    return parser


def _cli_values(args: argparse.Namespace) -> dict[str, Any]:
    values = {
        field: getattr(args, dest, None) for dest, field in _CONFIG_FLAGS.items()
    }
    if getattr(args, "grid", None) is not None:
        values["grid"] = tuple(args.grid)
    if getattr(args, "no_reselect", False):
        values["reselect"] = False
    return values


def _resolve(
    args: argparse.Namespace,
) -> tuple[AuditConfig, Dataset, RunManifest | None]:
    """Config and dataset for a subcommand, checked against --report if given."""
    prior = None
    report_path = getattr(args, "report", None)
    if report_path:
        prior = read_audit_report(report_path).manifest
    config = load_config(
        args.config, _cli_values(args), base=prior.config if prior else None
    )
    dataset = load_dataset(args.data, args.schema)
    logger.info(
        "Loaded %d instances (%d protected) from %s",
        len(dataset),
        dataset.n_protected,
        args.data,
    )
    if prior is not None and prior.dataset_fingerprint != dataset.fingerprint():
        raise ReportError(
            f"Dataset {args.data} does not match the dataset of report {report_path} "
            f"(fingerprint {dataset.fingerprint()[:12]} vs "
            f"{prior.dataset_fingerprint[:12]})"
        )
    return config, dataset, prior


def cmd_audit(args: argparse.Namespace) -> int:
    config, dataset, _ = _resolve(args)
    run = run_audit_pipeline(dataset, config, explain=not args.no_explain)
    paths = write_audit_report(run, args.out)
    for line in summary_lines(run.results):
        print(line)
    print(f"Report written to {paths['report']}")
    return EXIT_OK


def cmd_explain(args: argparse.Namespace) -> int:
    config, dataset, prior = _resolve(args)
    models = (
        load_report_models(args.report, prior) if prior is not None else None
    )
    if models is not None:
        logger.info("Reusing the models saved with %s", args.report)
    run = run_audit_pipeline(dataset, config, explain=True, models=models)
    paths = write_explanations(run, args.out)
    assert run.explanations is not None
    print(f"Explained instances: {run.explanations.explained_count}")
    for feature, share in run.explanations.percentages.items():
        print(f"  {feature:<28} {share:6.2f}%")
    for note in run.explanations.notes:
        print(f"note: {note}")
    print(f"Explanations written to {paths['explanations']}")
    return EXIT_OK


def cmd_imbalance(args: argparse.Namespace) -> int:
    if args.repeats < 1:
        raise UsageError(f"--repeats must be at least 1, got {args.repeats}")
    config, dataset, _ = _resolve(args)
    baseline = run_audit_pipeline(dataset, config, explain=False)
    report = run_imbalance_study(
        dataset, config, args.omegas, args.repeats, baseline=baseline
    )
    path = write_imbalance_report(report, args.out, RunManifest.from_run(baseline))
    print(report.to_frame().to_string(index=False))
    for note in report.notes:
        print(f"note: {note}")
    print(f"Imbalance table written to {path}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    if args.spec:
        spec = load_synth_spec(args.spec)
    else:
        spec = sme_preset()
    overrides = {
        k: v
        for k, v in (
            ("seed", args.seed),
            ("n", args.n),
            ("direct_bias", args.direct_bias),
        )
        if v is not None
    }
    if overrides:
        spec = replace(spec, **overrides)
    dataset, truth = generate(spec)
    data_path, schema_path, truth_path = write_synthetic(
        dataset, truth, args.out, args.stem
    )
    print(
        f"Generated {len(dataset)} instances "
        f"({dataset.n_protected} protected, outcome rate {dataset.y.mean():.4f})"
    )
    for path in (data_path, schema_path, truth_path):
        print(f"  {path}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    paths = convert_report(args.report, args.out)
    for path in paths.values():
        print(path)
    return EXIT_OK


COMMANDS = {
    "audit": cmd_audit,
    "explain": cmd_explain,
    "imbalance": cmd_imbalance,
    "synth": cmd_synth,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except PeerFairnessError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
