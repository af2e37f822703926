from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# ─── Enumerations ─────────────────────────────────────────────────────────────

class Task(str, Enum):
    FUNDUS = "fundus"        # background / disc / cup
    PROSTATE = "prostate"    # background / gland


TASK_CLASSES = {
    Task.FUNDUS: ("background", "disc", "cup"),
    Task.PROSTATE: ("background", "gland"),
}


class Topology(str, Enum):
    TREE = "tree"
    STAR = "star"


class FusionMode(str, Enum):
    DIRECT = "direct"
    FULL = "full"
    PROGRESSIVE = "progressive"


class Selection(str, Enum):
    ROOT = "root"
    ROOT_MID = "root-mid"
    ALL_EQUAL = "all-equal"
    ALL_WEIGHTED = "all-weighted"
    BEST_LEAF = "best-leaf"


# ─── Data ─────────────────────────────────────────────────────────────────────

class DomainSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    domain_id: str = Field(..., min_length=1)
    brightness_shift: float = 0.0
    contrast_gain: float = Field(default=1.0, gt=0)
    gamma: float = Field(default=1.0, gt=0)
    noise_std: float = Field(default=0.0, ge=0)
    shape_eccentricity: float = Field(default=0.0, ge=0, lt=1)
    n_samples: int = Field(default=40, ge=1)
    seed: int = Field(default=0, ge=0)
    image_size: int = Field(default=32, ge=4)
    task: Task = Task.FUNDUS


_FUNDUS_STYLES = [
    # id, brightness, contrast, gamma, noise, eccentricity
    ("A", 0.00, 1.00, 1.0, 0.03, 0.20),
    ("B", 0.15, 0.80, 1.4, 0.05, 0.35),
    ("C", -0.10, 1.20, 0.7, 0.04, 0.10),
    ("D", 0.05, 0.60, 1.8, 0.08, 0.45),
]

_PROSTATE_STYLES = [
    ("A", 0.00, 1.00, 1.0, 0.04, 0.30),
    ("B", 0.10, 0.85, 1.3, 0.06, 0.40),
    ("C", -0.05, 1.10, 0.8, 0.03, 0.20),
    ("D", 0.20, 0.70, 1.6, 0.05, 0.50),
    ("E", -0.10, 1.25, 0.9, 0.07, 0.25),
    ("F", 0.05, 0.90, 1.2, 0.02, 0.35),
]


def default_domains(task: Task = Task.FUNDUS, n_samples: int = 40, image_size: int = 32) -> list[DomainSpec]:
    styles = _FUNDUS_STYLES if task == Task.FUNDUS else _PROSTATE_STYLES
    return [
        DomainSpec(
            domain_id=domain_id,
            brightness_shift=brightness,
            contrast_gain=contrast,
            gamma=gamma,
            noise_std=noise,
            shape_eccentricity=ecc,
            n_samples=n_samples,
            seed=101 + i,
            image_size=image_size,
            task=task,
        )
        for i, (domain_id, brightness, contrast, gamma, noise, ecc) in enumerate(styles)
    ]


class DataConfig(BaseModel):
    task: Task = Task.FUNDUS
    domains: list[DomainSpec] = Field(default_factory=list)

    @field_validator("domains", mode="before")
    @classmethod
    def domains_from_table(cls, v):
        # `domains.A.gamma = 1.2` in a config file arrives as {"A": {...}}
        if isinstance(v, dict):
            return [{"domain_id": key, **(spec or {})} for key, spec in sorted(v.items())]
        return v

    @model_validator(mode="after")
    def fill_domains(self):
        if not self.domains:
            self.domains = default_domains(self.task)
        self.domains = [
            d if d.task == self.task else d.model_copy(update={"task": self.task})
            for d in self.domains
        ]
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ValueError("domain ids must be unique")
        sizes = {d.image_size for d in self.domains}
        if len(sizes) != 1:
            raise ValueError("all domains must share one image_size")
        return self


# ─── Protocol sections ────────────────────────────────────────────────────────

class TrainingConfig(BaseModel):
    rounds: int = Field(default=15, ge=1)
    local_epochs: int = Field(default=5, ge=1)
    lr: float = Field(default=0.2, ge=0)
    batch_size: int = Field(default=8, ge=1)


class ModelConfig(BaseModel):
    conv_filters: int = Field(default=4, ge=1)
    hidden_units: int = Field(default=8, ge=1)
    init_scale: float = Field(default=0.5, gt=0)


class ThresholdSchedule(BaseModel):
    tau0: float = 0.85
    beta: float = 0.06
    height: int = Field(default=3, ge=1)


class MixConfig(BaseModel):
    enabled: bool = True
    phi: float = Field(default=0.1, gt=0)
    activation_prob: float = Field(default=0.5, ge=0, le=1)
    epsilon: float = Field(default=1e-6, ge=0)


class FusionConfig(BaseModel):
    epsilon0: float = Field(default=0.8, ge=0, le=1)
    omega: float = Field(default=0.5, gt=0, lt=1)
    mode: FusionMode = FusionMode.PROGRESSIVE
    fixed_layers: list[str] = Field(default_factory=lambda: ["head"])


class InferenceConfig(BaseModel):
    selection: Selection = Selection.ALL_WEIGHTED
    depth_coeff: float = 0.5
    hist_bins: int = Field(default=16, ge=1)
    extractor_seed: int = Field(default=1234, ge=0)
    extractor_filters: int = Field(default=8, ge=1)


class ExperimentConfig(BaseModel):
    data: DataConfig = Field(default_factory=DataConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    tree: ThresholdSchedule = Field(default_factory=ThresholdSchedule)
    style: MixConfig = Field(default_factory=MixConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    topology: Topology = Topology.TREE
    seed: int = Field(default=0, ge=0)
    name: str = "treefed"


def fedavg_baseline(config: ExperimentConfig) -> ExperimentConfig:
    """Star topology, direct distribution, no style mixing, root-only inference."""
    return config.model_copy(
        update={
            "name": "fedavg",
            "topology": Topology.STAR,
            "style": config.style.model_copy(update={"enabled": False}),
            "fusion": config.fusion.model_copy(update={"mode": FusionMode.DIRECT}),
            "inference": config.inference.model_copy(update={"selection": Selection.ROOT}),
        }
    )


# ─── Round logs and tree dumps ────────────────────────────────────────────────

class StyleRecord(BaseModel):
    mean: list[float]
    std: list[float]


class RoundLog(BaseModel):
    round_index: int
    client_ids: list[str]
    clusters: list[list[list[str]]]          # per level → clusters → client ids
    similarity: list[list[float]]
    pairings: dict[str, str] = Field(default_factory=dict)
    losses: dict[str, float]
    tree_height: int
    tree_checksum: str
    root_checksum: str
    wall_time_s: float
    style: Optional[dict[str, list[StyleRecord]]] = None


class TreeNodeRecord(BaseModel):
    id: str
    level: int
    top_level: int
    parent: Optional[str]
    children: list[str]
    source_clients: list[str]
    checksum: str


class TreeDump(BaseModel):
    root: str
    height: int
    checksum: str
    nodes: list[TreeNodeRecord]


# ─── Inference and evaluation ─────────────────────────────────────────────────

class InferenceDecision(BaseModel):
    matched_domain: str
    similarities: dict[str, float]
    selection: Selection
    chain_node_ids: list[str]
    weights: list[float]


class SiteResult(BaseModel):
    site_id: str
    dice: dict[str, float]
    hd95: dict[str, float]
    mean_dice: float
    mean_hd95: float
    n_images: int
    n_infinite_hd95: int = 0

    @field_validator("dice")
    @classmethod
    def dice_in_range(cls, v):
        for name, value in v.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"dice for '{name}' outside [0, 1]")
        return v


class MethodReport(BaseModel):
    method: str
    seed: int
    classes: list[str]
    folds: list[SiteResult]
    mean_dice: dict[str, float]
    std_dice: dict[str, float]
    mean_hd95: dict[str, float]
    overall_dice: float
    overall_std: float
    overall_hd95: float
    decisions: dict[str, InferenceDecision] = Field(default_factory=dict)


class SeedAggregate(BaseModel):
    """One method's leave-one-out results averaged over seeds."""
    method: str
    seeds: list[int]
    sites: list[str]
    site_dice: dict[str, float]          # per held-out site, mean over seeds
    overall_dice: float
    overall_std: float                   # mean over seeds of the cross-site STD
    overall_hd95: float
    per_seed_dice: dict[int, float]
    per_seed_std: dict[int, float]


class OrderingCheck(BaseModel):
    """`candidate` against `baseline` on seed-averaged results; per-seed numbers kept for failures."""
    name: str
    candidate: str
    baseline: str
    passed: bool
    candidate_dice: float
    baseline_dice: float
    candidate_std: float
    baseline_std: float
    folds_won: Optional[int] = None
    n_folds: Optional[int] = None
    std_ok: Optional[bool] = None
    per_seed_candidate: dict[int, float]
    per_seed_baseline: dict[int, float]


class SeedSweepReport(BaseModel):
    seeds: list[int]
    methods: list[SeedAggregate]
    checks: list[OrderingCheck] = Field(default_factory=list)


class MetricRecord(BaseModel):
    method: str
    site: str
    cls: str
    metric: str
    value: float


# ─── HTTP payloads ────────────────────────────────────────────────────────────

class RunRequest(BaseModel):
    config: ExperimentConfig = Field(default_factory=ExperimentConfig)
    holdout: Optional[str] = None


class RunResponse(BaseModel):
    rounds: list[RoundLog]
    tree: TreeDump


class LooRequest(BaseModel):
    config: ExperimentConfig = Field(default_factory=ExperimentConfig)
    baseline: bool = False


class LooResponse(BaseModel):
    reports: list[MethodReport]
