"""
Files written by the CLI: JSON reports, one-record-per-line metric files,
CSV comparison tables, tree dumps, decision logs and predicted masks.

Everything here is a pure function of its inputs (sorted keys, fixed float
formatting), so two runs with the same config and seed give identical files.
"""
import csv
import io
import json
import logging
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from app.schemas.schemas import MethodReport, MetricRecord, RoundLog, SeedSweepReport
from app.services.synthetic import write_mask_pgm
from app.services.tree import NodeTree

logger = logging.getLogger(__name__)

METRICS = ("dice", "hd95")


def metric_records(report: MethodReport) -> list[MetricRecord]:
    records = []
    for fold in report.folds:
        for cls in report.classes:
            records.append(MetricRecord(method=report.method, site=fold.site_id, cls=cls, metric="dice", value=fold.dice[cls]))
            records.append(MetricRecord(method=report.method, site=fold.site_id, cls=cls, metric="hd95", value=fold.hd95[cls]))
    return records


def _jsonl(models: Iterable) -> str:
    return "".join(json.dumps(m.model_dump(mode="json"), sort_keys=True) + "\n" for m in models)


def file_stem(method: str) -> str:
    return method.replace("/", "__").replace("=", "-")


def write_report(directory: Path, report: MethodReport) -> Path:
    """`<method>.json` (full report) and `<method>.records.jsonl` (one metric per line)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{file_stem(report.method)}.json"
    path.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    (directory / f"{file_stem(report.method)}.records.jsonl").write_text(_jsonl(metric_records(report)))
    logger.info(f"Report written: {path}")
    return path


def comparison_table(reports: Sequence[MethodReport], metric: str = "dice") -> str:
    """
    Methods as rows, held-out sites as columns, then Avg and STD.

    Site values are the mean over foreground classes; STD is the cross-site
    standard deviation of the mean Dice (blank for HD95).
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric '{metric}'")
    sites = [fold.site_id for fold in reports[0].folds] if reports else []
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["method", *sites, "Avg", "STD"])
    for report in reports:
        by_site = {f.site_id: (f.mean_dice if metric == "dice" else f.mean_hd95) for f in report.folds}
        if metric == "dice":
            avg, std = report.overall_dice, f"{report.overall_std:.4f}"
        else:
            avg, std = report.overall_hd95, ""
        writer.writerow([report.method, *(f"{by_site[s]:.4f}" for s in sites), f"{avg:.4f}", std])
    return buffer.getvalue()


def class_table(reports: Sequence[MethodReport]) -> str:
    """Per-class mean Dice, cross-site STD and mean HD95 for each method."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["method", "class", "dice", "std", "hd95"])
    for report in reports:
        for cls in report.classes:
            writer.writerow([
                report.method,
                cls,
                f"{report.mean_dice[cls]:.4f}",
                f"{report.std_dice[cls]:.4f}",
                f"{report.mean_hd95[cls]:.4f}",
            ])
    return buffer.getvalue()


def write_tables(directory: Path, reports: Sequence[MethodReport], stem: str = "summary") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for metric in METRICS:
        path = directory / f"{stem}_{metric}.csv"
        path.write_text(comparison_table(reports, metric))
        paths.append(path)
    path = directory / f"{stem}_classes.csv"
    path.write_text(class_table(reports))
    paths.append(path)
    return paths


def write_tree_dump(path: Path, tree: NodeTree) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(tree.to_dump().model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return path


def write_round_logs(path: Path, logs: Sequence[RoundLog]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_jsonl(logs))
    return path


def explain_lines(report: MethodReport, n_images: Mapping[str, int]) -> str:
    """One line per held-out image: matched domain, chain and vote weights."""
    lines = []
    for site in sorted(report.decisions):
        decision = report.decisions[site]
        for index in range(n_images.get(site, 0)):
            lines.append(json.dumps(
                {
                    "method": report.method,
                    "site": site,
                    "image": index,
                    "matched_domain": decision.matched_domain,
                    "chain": decision.chain_node_ids,
                    "weights": decision.weights,
                },
                sort_keys=True,
            ))
    return "".join(line + "\n" for line in lines)


def write_masks(directory: Path, predictions: Mapping[str, Sequence[np.ndarray]]) -> Path:
    """`<site>/pred_NNN.pgm` with raw label values."""
    directory = Path(directory)
    for site, masks in predictions.items():
        site_dir = directory / site
        site_dir.mkdir(parents=True, exist_ok=True)
        for i, mask in enumerate(masks):
            write_mask_pgm(site_dir / f"pred_{i:03d}.pgm", mask)
    return directory


def seed_table(sweep: SeedSweepReport) -> str:
    """Seed-averaged Dice: methods as rows, held-out sites, then Avg and STD."""
    sites = sweep.methods[0].sites if sweep.methods else []
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["method", *sites, "Avg", "STD"])
    for agg in sweep.methods:
        writer.writerow([
            agg.method,
            *(f"{agg.site_dice[s]:.4f}" for s in sites),
            f"{agg.overall_dice:.4f}",
            f"{agg.overall_std:.4f}",
        ])
    return buffer.getvalue()


def write_seed_sweep(
    directory: Path,
    per_seed: Mapping[int, Sequence[MethodReport]],
    sweep: SeedSweepReport,
) -> Path:
    """
    `seed-<n>/` holds each seed's reports and tables; `seeds.json` and
    `seeds_dice.csv` hold the seed averages and the ordering checks.
    """
    directory = Path(directory)
    for seed, reports in sorted(per_seed.items()):
        seed_dir = directory / f"seed-{seed}"
        for report in reports:
            write_report(seed_dir, report)
        write_tables(seed_dir, reports)
    path = directory / "seeds.json"
    path.write_text(json.dumps(sweep.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    (directory / "seeds_dice.csv").write_text(seed_table(sweep))
    return path
