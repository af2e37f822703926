"""
Round loop, leave-one-domain-out evaluation and ablation sweeps.

One communication round:
    1. server pairs clients for FedStyle from the current leaf parameters
    2. clients train locally (concurrently), optionally style-mixing
    3. server builds the aggregation tree (or the star)
    4. parameters are disseminated top-down per the fusion mode
    5. a RoundLog is appended

All randomness comes from streams derived from (seed, client id, round), so
running clients in parallel cannot change any result.
"""
import asyncio
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from app.core.config import get_settings
from app.core.errors import EmptyInput, TooFewDomains
from app.core.monitoring import record_duration
from app.schemas.schemas import (
    TASK_CLASSES,
    ExperimentConfig,
    FusionMode,
    InferenceDecision,
    MethodReport,
    OrderingCheck,
    RoundLog,
    SeedAggregate,
    SeedSweepReport,
    Selection,
    SiteResult,
    StyleRecord,
    Topology,
    fedavg_baseline,
)
from app.services.checkpoint import write_round_checkpoint
from app.services.fedstyle import StyleMixer, StyleStats, image_stats, pair_clients
from app.services.fusion import fuse_tree
from app.services.inference import RandomProjectionExtractor, extract_descriptor, infer_target
from app.services.metrics import evaluate_site, site_std
from app.services.params import FlatParams, similarity_matrix
from app.services.synthetic import SegSample, generate_all
from app.services.toy_model import ModelShape, ToyModel, cross_entropy, init_model, train_local
from app.services.tree import NodeTree, build_tree, star_tree

logger = logging.getLogger(__name__)


# ─── State ────────────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class FederationState:
    round_index: int
    data: Mapping[str, Sequence[SegSample]]
    leaf_params: Mapping[str, FlatParams]
    style_buffers: Mapping[str, tuple[StyleStats, ...]]
    tree: Optional[NodeTree] = None           # after dissemination
    aggregated: Optional[NodeTree] = None     # as built, before dissemination
    logs: tuple[RoundLog, ...] = ()

    @property
    def clients(self) -> list[str]:
        return sorted(self.data)

    @property
    def global_params(self) -> Optional[FlatParams]:
        return self.aggregated.root_node.params if self.aggregated else None


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    client_id: str
    params: FlatParams
    style_buffer: tuple[StyleStats, ...]
    loss: float


@dataclass(frozen=True, eq=False)
class FoldOutcome:
    site: SiteResult
    decision: InferenceDecision
    predictions: list[np.ndarray] = field(default_factory=list)


def model_shape(config: ExperimentConfig) -> ModelShape:
    return ModelShape(
        conv_filters=config.model.conv_filters,
        hidden_units=config.model.hidden_units,
        n_classes=len(TASK_CLASSES[config.data.task]),
    )


def client_streams(seed: int, client_id: str, round_index: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (training, style) generators for one client in one round."""
    client_key = int.from_bytes(hashlib.sha256(str(client_id).encode()).digest()[:8], "little")
    train_seq, style_seq = np.random.SeedSequence([seed, client_key, round_index]).spawn(2)
    return np.random.default_rng(train_seq), np.random.default_rng(style_seq)


def _raw_stats(samples: Sequence[SegSample]) -> tuple[StyleStats, ...]:
    return image_stats(np.stack([s.image for s in samples])[:, None])


def init_state(config: ExperimentConfig, data: Mapping[str, Sequence[SegSample]]) -> FederationState:
    """Every client starts from the same random model; buffers hold raw-data statistics."""
    if not data:
        raise TooFewDomains("a federation needs at least one client")
    init = init_model(model_shape(config), config.seed, config.model.init_scale).params
    leaf_params = {c: init.with_sample_count(len(data[c])) for c in sorted(data)}
    buffers = {c: _raw_stats(data[c]) for c in sorted(data)}
    return FederationState(0, dict(data), leaf_params, buffers)


# ─── One round ────────────────────────────────────────────────────────────────

def _train_client(
    client_id: str,
    params: FlatParams,
    samples: Sequence[SegSample],
    partner_buffer: Optional[Sequence[StyleStats]],
    config: ExperimentConfig,
    round_index: int,
) -> ClientUpdate:
    train_rng, style_rng = client_streams(config.seed, client_id, round_index)
    mixer = None
    if config.style.enabled and partner_buffer is not None:
        mixer = StyleMixer(partner_buffer, config.style, style_rng)
    buffer: list[StyleStats] = []
    model = train_local(
        ToyModel(params, model_shape(config)),
        samples,
        epochs=config.training.local_epochs,
        lr=config.training.lr,
        batch_size=config.training.batch_size,
        mixer=mixer,
        rng=train_rng,
        style_buffer=buffer,
    )
    return ClientUpdate(client_id, model.params, tuple(buffer), cross_entropy(model, samples))


async def run_round(
    state: FederationState,
    config: ExperimentConfig,
    log_style: bool = False,
    checkpoint_dir: Optional[Path] = None,
) -> FederationState:
    started = time.perf_counter()
    round_index = state.round_index + 1
    clients = state.clients

    pairings: dict[str, str] = {}
    if config.style.enabled and len(clients) > 1:
        pairings = pair_clients(state.leaf_params)
        logger.debug(f"Round {round_index} FedStyle pairings: {pairings}")

    updates: list[ClientUpdate] = await asyncio.gather(*[
        asyncio.to_thread(
            _train_client,
            client,
            state.leaf_params[client],
            state.data[client],
            state.style_buffers.get(pairings[client]) if client in pairings else None,
            config,
            round_index,
        )
        for client in clients
    ])
    trained = {u.client_id: u.params for u in updates}

    leaves = [(c, trained[c]) for c in clients]
    if config.topology == Topology.STAR:
        tree = star_tree(leaves)
    else:
        tree = build_tree(leaves, config.tree)
    fused = fuse_tree(tree, config.fusion)

    wall = time.perf_counter() - started
    log = RoundLog(
        round_index=round_index,
        client_ids=clients,
        clusters=[
            [sorted(str(c) for c in tree.nodes[nid].source_clients) for nid in level]
            for level in tree.levels
        ],
        similarity=similarity_matrix([trained[c] for c in clients]).tolist(),
        pairings=pairings,
        losses={u.client_id: u.loss for u in updates},
        tree_height=tree.height,
        tree_checksum=tree.checksum(),
        root_checksum=tree.root_node.params.checksum(),
        wall_time_s=wall,
        style={
            u.client_id: [StyleRecord(mean=s.mean.tolist(), std=s.std.tolist()) for s in u.style_buffer]
            for u in updates
        } if log_style else None,
    )
    record_duration("Round", wall)
    if wall > get_settings().slow_round_seconds:
        logger.warning(f"SLOW ROUND: {round_index} took {wall:.1f}s")
    logger.info(
        f"Round {round_index}: height={tree.height} root={log.root_checksum} "
        f"mean_loss={np.mean(list(log.losses.values())):.4f}"
    )

    leaf_params = {client: node.params for client, node in fused.leaves().items()}
    if checkpoint_dir is not None:
        write_round_checkpoint(checkpoint_dir, round_index, tree.root_node.params, leaf_params)

    return replace(
        state,
        round_index=round_index,
        leaf_params=leaf_params,
        style_buffers={u.client_id: u.style_buffer for u in updates},
        tree=fused,
        aggregated=tree,
        logs=state.logs + (log,),
    )


async def run_rounds(state: FederationState, config: ExperimentConfig, rounds: int, **kwargs) -> FederationState:
    for _ in range(rounds):
        state = await run_round(state, config, **kwargs)
    return state


async def run_federation(
    config: ExperimentConfig,
    data: Mapping[str, Sequence[SegSample]],
    **kwargs,
) -> FederationState:
    state = init_state(config, data)
    return await run_rounds(state, config, config.training.rounds, **kwargs)


# ─── Evaluation ───────────────────────────────────────────────────────────────

def domain_data(config: ExperimentConfig, data: Optional[Mapping[str, Sequence[SegSample]]] = None) -> dict:
    if data is None:
        return generate_all(config.data.domains)
    return {d.domain_id: data[d.domain_id] for d in config.data.domains}


async def evaluate_fold(
    config: ExperimentConfig,
    data: Mapping[str, Sequence[SegSample]],
    holdout: str,
    selections: Sequence[Selection],
) -> dict[Selection, FoldOutcome]:
    """Train on every domain but `holdout`, then score each selection strategy on it."""
    started = time.perf_counter()
    train = {d: samples for d, samples in data.items() if d != holdout}
    logger.info(f"Fold '{holdout}': training on {sorted(train)}")
    state = await run_federation(config, train)

    extractor = RandomProjectionExtractor(config.inference.extractor_seed, config.inference.extractor_filters)
    sources = {
        d: extract_descriptor([s.image for s in train[d]], extractor, config.inference.hist_bins)
        for d in sorted(train)
    }
    images = [s.image for s in data[holdout]]
    truths = [s.mask for s in data[holdout]]
    class_names = TASK_CLASSES[config.data.task]

    outcomes = {}
    for selection in selections:
        inference = config.inference.model_copy(update={"selection": selection})
        masks, decision = await asyncio.to_thread(
            infer_target, state.tree, sources, images, inference, model_shape(config), extractor
        )
        site = evaluate_site(holdout, masks, truths, class_names)
        logger.info(f"Fold '{holdout}' [{selection.value}]: mean dice {site.mean_dice:.4f}")
        outcomes[selection] = FoldOutcome(site, decision, masks)
    record_duration("Fold", time.perf_counter() - started)
    return outcomes


def summarize(method: str, config: ExperimentConfig, outcomes: Sequence[FoldOutcome]) -> MethodReport:
    classes = list(TASK_CLASSES[config.data.task][1:])
    folds = [o.site for o in outcomes]
    return MethodReport(
        method=method,
        seed=config.seed,
        classes=classes,
        folds=folds,
        mean_dice={c: float(np.mean([f.dice[c] for f in folds])) for c in classes},
        std_dice={c: site_std([f.dice[c] for f in folds]) for c in classes},
        mean_hd95={c: float(np.mean([f.hd95[c] for f in folds])) for c in classes},
        overall_dice=float(np.mean([f.mean_dice for f in folds])),
        overall_std=site_std([f.mean_dice for f in folds]),
        overall_hd95=float(np.mean([f.mean_hd95 for f in folds])),
        decisions={o.site.site_id: o.decision for o in outcomes},
    )


async def leave_one_out_selections(
    config: ExperimentConfig,
    selections: Sequence[Selection],
    data: Optional[Mapping[str, Sequence[SegSample]]] = None,
) -> dict[Selection, tuple[MethodReport, dict[str, list[np.ndarray]]]]:
    """Leave-one-domain-out, training once per fold and scoring several strategies."""
    if len(config.data.domains) < 3:
        raise TooFewDomains("leave-one-out needs at least three domains")
    data = domain_data(config, data)
    per_selection: dict[Selection, list[FoldOutcome]] = {s: [] for s in selections}
    for spec in config.data.domains:
        outcomes = await evaluate_fold(config, data, spec.domain_id, selections)
        for selection, outcome in outcomes.items():
            per_selection[selection].append(outcome)

    results = {}
    for selection, outcomes in per_selection.items():
        name = config.name if len(selections) == 1 else f"{config.name}/selection={selection.value}"
        predictions = {o.site.site_id: o.predictions for o in outcomes}
        results[selection] = (summarize(name, config, outcomes), predictions)
    return results


async def leave_one_out(
    config: ExperimentConfig,
    data: Optional[Mapping[str, Sequence[SegSample]]] = None,
) -> MethodReport:
    results = await leave_one_out_selections(config, [config.inference.selection], data)
    return results[config.inference.selection][0]


# ─── Ablations ────────────────────────────────────────────────────────────────

AXES = ("topology", "fedstyle", "fusion", "selection")


def ablation_variants(config: ExperimentConfig, axis: str) -> list[tuple[str, ExperimentConfig]]:
    """Configs that differ from `config` along one ablation axis."""
    def variant(name: str, **update) -> tuple[str, ExperimentConfig]:
        return name, config.model_copy(update={"name": name, **update})

    if axis == "topology":
        return [variant(f"topology={t.value}", topology=t) for t in Topology]
    if axis == "fedstyle":
        return [
            variant(
                f"topology={t.value}/fedstyle={'on' if on else 'off'}",
                topology=t,
                style=config.style.model_copy(update={"enabled": on}),
            )
            for t in Topology
            for on in (True, False)
        ]
    if axis == "fusion":
        return [
            variant(f"fusion={m.value}", fusion=config.fusion.model_copy(update={"mode": m}))
            for m in FusionMode
        ]
    if axis == "selection":
        return [
            variant(f"selection={s.value}", inference=config.inference.model_copy(update={"selection": s}))
            for s in Selection
        ]
    raise ValueError(f"unknown ablation axis '{axis}' (expected one of {', '.join(AXES)})")


async def ablate(
    config: ExperimentConfig,
    axis: str,
    data: Optional[Mapping[str, Sequence[SegSample]]] = None,
) -> list[MethodReport]:
    data = domain_data(config, data)
    if axis == "all":
        reports = []
        for each in AXES:
            reports.extend(await ablate(config, each, data))
        return reports
    if axis == "selection":
        # training does not depend on the selection strategy
        results = await leave_one_out_selections(config, list(Selection), data)
        return [
            report.model_copy(update={"method": f"selection={s.value}"})
            for s, (report, _) in results.items()
        ]
    reports = []
    for name, variant in ablation_variants(config, axis):
        logger.info(f"Ablation variant {name}")
        reports.append(await leave_one_out(variant, data))
    return reports


# ─── Seed sweeps ──────────────────────────────────────────────────────────────

# (check name, candidate method, baseline method, kind)
SWEEP_CHECKS = (
    ("tree-vs-star", "topology=tree", "topology=star", "ordering"),
    ("all-weighted-vs-root", "selection=all-weighted", "selection=root", "direction"),
    ("progressive-vs-direct", "fusion=progressive", "fusion=direct", "direction"),
)


def aggregate_seeds(reports: Sequence[MethodReport]) -> SeedAggregate:
    """Average one method's reports over the seeds they were run with."""
    if not reports:
        raise EmptyInput("no reports to aggregate")
    method = reports[0].method
    if any(r.method != method for r in reports):
        raise ValueError("reports of different methods cannot be averaged together")
    by_seed = sorted(reports, key=lambda r: r.seed)
    sites = [f.site_id for f in by_seed[0].folds]
    site_dice = {}
    for site in sites:
        values = []
        for report in by_seed:
            fold = next((f for f in report.folds if f.site_id == site), None)
            if fold is None:
                raise ValueError(f"seed {report.seed} has no fold for site '{site}'")
            values.append(fold.mean_dice)
        site_dice[site] = float(np.mean(values))
    return SeedAggregate(
        method=method,
        seeds=[r.seed for r in by_seed],
        sites=sites,
        site_dice=site_dice,
        overall_dice=float(np.mean([r.overall_dice for r in by_seed])),
        overall_std=float(np.mean([r.overall_std for r in by_seed])),
        overall_hd95=float(np.mean([r.overall_hd95 for r in by_seed])),
        per_seed_dice={r.seed: r.overall_dice for r in by_seed},
        per_seed_std={r.seed: r.overall_std for r in by_seed},
    )


def _check(name: str, candidate: SeedAggregate, baseline: SeedAggregate, passed: bool, **extra) -> OrderingCheck:
    check = OrderingCheck(
        name=name,
        candidate=candidate.method,
        baseline=baseline.method,
        passed=passed,
        candidate_dice=candidate.overall_dice,
        baseline_dice=baseline.overall_dice,
        candidate_std=candidate.overall_std,
        baseline_std=baseline.overall_std,
        per_seed_candidate=candidate.per_seed_dice,
        per_seed_baseline=baseline.per_seed_dice,
        **extra,
    )
    if not passed:
        logger.warning(
            f"Check '{name}' failed: {candidate.method} dice per seed {candidate.per_seed_dice} "
            f"(std {candidate.per_seed_std}) vs {baseline.method} {baseline.per_seed_dice} "
            f"(std {baseline.per_seed_std})"
        )
    return check


def ordering_check(candidate: SeedAggregate, baseline: SeedAggregate, name: str = "generalization") -> OrderingCheck:
    """
    Candidate beats the baseline when its seed-averaged Dice is at least the
    baseline's on three quarters of the held-out sites (rounded up) and its
    cross-site STD is no larger.
    """
    if candidate.sites != baseline.sites:
        raise ValueError("methods were evaluated on different sites")
    folds_won = sum(candidate.site_dice[s] >= baseline.site_dice[s] for s in candidate.sites)
    n_folds = len(candidate.sites)
    std_ok = candidate.overall_std <= baseline.overall_std
    passed = folds_won >= math.ceil(0.75 * n_folds) and std_ok
    return _check(name, candidate, baseline, passed, folds_won=folds_won, n_folds=n_folds, std_ok=std_ok)


def direction_check(candidate: SeedAggregate, baseline: SeedAggregate, name: str) -> OrderingCheck:
    """Seed-averaged mean Dice of `candidate` is at least the baseline's."""
    return _check(name, candidate, baseline, candidate.overall_dice >= baseline.overall_dice)


def sweep_report(per_seed: Mapping[int, Sequence[MethodReport]], checks: Sequence[tuple] = SWEEP_CHECKS) -> SeedSweepReport:
    by_method: dict[str, list[MethodReport]] = {}
    for seed in sorted(per_seed):
        for report in per_seed[seed]:
            by_method.setdefault(report.method, []).append(report)
    aggregates = {method: aggregate_seeds(reports) for method, reports in by_method.items()}

    results = []
    for name, candidate, baseline, kind in checks:
        if candidate not in aggregates or baseline not in aggregates:
            continue
        run = ordering_check if kind == "ordering" else direction_check
        results.append(run(aggregates[candidate], aggregates[baseline], name))
    return SeedSweepReport(seeds=sorted(per_seed), methods=list(aggregates.values()), checks=results)


def _seeded(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    return config.model_copy(update={"seed": seed})


async def leave_one_out_seeds(
    config: ExperimentConfig,
    seeds: Sequence[int],
    baseline: bool = True,
    data: Optional[Mapping[str, Sequence[SegSample]]] = None,
) -> tuple[dict[int, list[MethodReport]], SeedSweepReport]:
    """Leave-one-out for `config` (and the FedAvg baseline) once per seed."""
    if not seeds:
        raise ValueError("at least one seed is required")
    data = domain_data(config, data)
    per_seed = {}
    for seed in seeds:
        logger.info(f"Seed {seed}")
        configs = [_seeded(config, seed)] + ([fedavg_baseline(_seeded(config, seed))] if baseline else [])
        per_seed[seed] = [await leave_one_out(each, data) for each in configs]
    checks = [("generalization", config.name, "fedavg", "ordering")] if baseline else []
    return per_seed, sweep_report(per_seed, checks)


async def ablate_seeds(
    config: ExperimentConfig,
    axis: str,
    seeds: Sequence[int],
    data: Optional[Mapping[str, Sequence[SegSample]]] = None,
) -> tuple[dict[int, list[MethodReport]], SeedSweepReport]:
    if not seeds:
        raise ValueError("at least one seed is required")
    data = domain_data(config, data)
    per_seed = {}
    for seed in seeds:
        logger.info(f"Seed {seed}")
        per_seed[seed] = await ablate(_seeded(config, seed), axis, data)
    return per_seed, sweep_report(per_seed)
