"""
Command line entry point.

    python -m app.cli run     --config demo.toml --seed 7 --dump-tree tree.json
    python -m app.cli loo     --config demo.toml --baseline --explain
    python -m app.cli ablate  --config demo.toml --axis selection
    python -m app.cli loo     --config demo.toml --baseline --seeds 0,1,2,3,4
    python -m app.cli export-data --out data/
    python -m app.cli dump-tree   --config demo.toml
    python -m app.cli serve

Exit codes: 0 success, 2 config or usage error, 1 runtime error.
"""
import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from app.core.config import configure_logging, get_settings, load_experiment_config
from app.core.errors import ConfigError, TreeFedError
from app.core.monitoring import init_monitoring, shutdown_monitoring
from app.schemas.schemas import ExperimentConfig, fedavg_baseline
from app.services import reporting, simulation
from app.services.synthetic import export_domains, generate_all, import_domains

logger = logging.getLogger("app.cli")


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got '{text}'")
    if not seeds or len(set(seeds)) != len(seeds) or min(seeds) < 0:
        raise argparse.ArgumentTypeError(f"seeds must be distinct non-negative integers, got '{text}'")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treefed", description="Tree-structured federated domain generalization simulator")
    parser.add_argument("--log-level", default=None, help="overrides TREEFED_LOG")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="dotted-key config file")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--out", type=Path, default=None, help="output directory (default TREEFED_OUTPUT_DIR)")
    common.add_argument("--data-dir", type=Path, default=None, help="read domains exported by export-data")

    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="train one federation")
    run.add_argument("--holdout", default=None, help="domain left out of training")
    run.add_argument("--log-style", action="store_true", help="include FedStyle buffers in round logs")
    run.add_argument("--dump-tree", type=Path, default=None, help="write the final tree here")
    run.add_argument("--checkpoint-dir", type=Path, default=None)

    loo = sub.add_parser("loo", parents=[common], help="leave-one-domain-out evaluation")
    loo.add_argument("--baseline", action="store_true", help="also run the FedAvg baseline")
    loo.add_argument("--explain", action="store_true", help="write per-image decision lines")
    loo.add_argument("--masks", action="store_true", help="write predicted masks as PGM")
    loo.add_argument("--seeds", type=_seed_list, default=None, help="comma-separated seeds, e.g. 0,1,2,3,4")

    ablate = sub.add_parser("ablate", parents=[common], help="sweep one ablation axis")
    ablate.add_argument("--axis", choices=[*simulation.AXES, "all"], required=True)
    ablate.add_argument("--seeds", type=_seed_list, default=None, help="comma-separated seeds, e.g. 0,1,2,3,4")

    sub.add_parser("export-data", parents=[common], help="write the synthetic domains as PGM files")
    sub.add_parser("dump-tree", parents=[common], help="train and print the final tree")

    serve = sub.add_parser("serve", help="start the HTTP API")
    serve.add_argument("--host", default=None)
    serve.add_argument("--port", type=int, default=None)
    return parser


def _load(args) -> tuple[ExperimentConfig, Optional[dict]]:
    config = load_experiment_config(args.config, args.seed) if args.config else ExperimentConfig()
    if args.config is None and args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    data = None
    if args.data_dir is not None:
        try:
            specs, data = import_domains(args.data_dir)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot import domains from {args.data_dir}: {exc}") from exc
        config = config.model_copy(update={"data": config.data.model_copy(update={"domains": specs})})
    return config, data


def _out(args) -> Path:
    return args.out if args.out is not None else get_settings().output_dir


async def _run(args, config: ExperimentConfig, data) -> None:
    data = data if data is not None else generate_all(config.data.domains)
    if args.holdout is not None:
        if args.holdout not in data:
            raise ConfigError(f"unknown holdout domain '{args.holdout}'")
        data = {d: s for d, s in data.items() if d != args.holdout}
    checkpoint_dir = args.checkpoint_dir or get_settings().checkpoint_dir
    state = await simulation.run_federation(config, data, log_style=args.log_style, checkpoint_dir=checkpoint_dir)
    out = _out(args)
    reporting.write_round_logs(out / "rounds.jsonl", state.logs)
    reporting.write_tree_dump(args.dump_tree or out / "tree.json", state.tree)
    print(f"{len(state.logs)} rounds, root checksum {state.logs[-1].root_checksum}")


def _print_sweep(sweep) -> None:
    print(reporting.seed_table(sweep), end="")
    for check in sweep.checks:
        status = "PASS" if check.passed else "FAIL"
        print(
            f"{status} {check.name}: {check.candidate} {check.candidate_dice:.4f} (std {check.candidate_std:.4f}) "
            f"vs {check.baseline} {check.baseline_dice:.4f} (std {check.baseline_std:.4f})"
        )


async def _loo(args, config: ExperimentConfig, data) -> None:
    data = simulation.domain_data(config, data)
    out = _out(args)
    if args.seeds:
        if args.explain or args.masks:
            logger.warning("--explain and --masks only apply to single-seed runs")
        per_seed, sweep = await simulation.leave_one_out_seeds(config, args.seeds, args.baseline, data)
        reporting.write_seed_sweep(out, per_seed, sweep)
        _print_sweep(sweep)
        return
    configs = [config] + ([fedavg_baseline(config)] if args.baseline else [])
    reports = []
    for each in configs:
        results = await simulation.leave_one_out_selections(each, [each.inference.selection], data)
        report, predictions = results[each.inference.selection]
        reporting.write_report(out, report)
        if args.explain:
            n_images = {site: len(masks) for site, masks in predictions.items()}
            (out / f"{reporting.file_stem(report.method)}.explain.jsonl").write_text(reporting.explain_lines(report, n_images))
        if args.masks:
            reporting.write_masks(out / "masks" / reporting.file_stem(report.method), predictions)
        reports.append(report)
    reporting.write_tables(out, reports)
    for report in reports:
        print(f"{report.method}: dice {report.overall_dice:.4f} std {report.overall_std:.4f} hd95 {report.overall_hd95:.2f}")


async def _ablate(args, config: ExperimentConfig, data) -> None:
    out = _out(args) / f"ablate-{args.axis}"
    if args.seeds:
        per_seed, sweep = await simulation.ablate_seeds(config, args.axis, args.seeds, data)
        reporting.write_seed_sweep(out, per_seed, sweep)
        _print_sweep(sweep)
        return
    reports = await simulation.ablate(config, args.axis, data)
    for report in reports:
        reporting.write_report(out, report)
    reporting.write_tables(out, reports)
    print(reporting.comparison_table(reports), end="")


async def _dump_tree(args, config: ExperimentConfig, data) -> None:
    data = data if data is not None else generate_all(config.data.domains)
    state = await simulation.run_federation(config, data)
    print(json.dumps(state.tree.to_dump().model_dump(mode="json"), indent=2, sort_keys=True))


def _serve(args) -> None:
    import uvicorn

    settings = get_settings()
    uvicorn.run("app.main:app", host=args.host or settings.host, port=args.port or settings.port)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.log_level)

    if args.command == "serve":
        _serve(args)
        return 0

    try:
        config, data = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    init_monitoring(get_settings())
    try:
        if args.command == "export-data":
            data = data if data is not None else generate_all(config.data.domains)
            export_domains(_out(args), config.data.domains, data)
        elif args.command == "run":
            asyncio.run(_run(args, config, data))
        elif args.command == "loo":
            asyncio.run(_loo(args, config, data))
        elif args.command == "ablate":
            asyncio.run(_ablate(args, config, data))
        elif args.command == "dump-tree":
            asyncio.run(_dump_tree(args, config, data))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TreeFedError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return 1
    except Exception:
        logger.exception("Run failed")
        return 1
    finally:
        shutdown_monitoring()
    return 0


if __name__ == "__main__":
    sys.exit(main())
