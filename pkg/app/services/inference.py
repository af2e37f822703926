"""
Feature-similarity-guided model selection.

A frozen, domain-agnostic extractor turns images into feature maps; each
domain is summarised by the mean over its images of [mean, std, histogram]
of those maps. The target domain is matched to the most similar source
domain, that client's leaf-to-root chain is pulled from the tree, and the
chain votes pixel by pixel with weights that decay towards the root.
"""
import logging
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np
from scipy.ndimage import correlate

from app.core.errors import EmptyInput, EmptySources, LengthMismatch
from app.schemas.schemas import InferenceConfig, InferenceDecision, Selection
from app.services.params import vector_cosine
from app.services.toy_model import ModelShape, ToyModel, predict
from app.services.tree import NodeTree, chain_to_root

logger = logging.getLogger(__name__)


class FeatureExtractor(Protocol):
    def __call__(self, image: np.ndarray) -> np.ndarray:
        """Return feature maps shaped (K, ...) for one image."""
        ...


class RandomProjectionExtractor:
    """A bank of seed-fixed random 5x5 filters followed by tanh. Never trained."""

    def __init__(self, seed: int = 1234, n_filters: int = 8, size: int = 5):
        rng = np.random.default_rng(seed)
        bank = rng.standard_normal((n_filters, size, size))
        self.filters = bank / np.linalg.norm(bank.reshape(n_filters, -1), axis=1)[:, None, None]
        self.filters.setflags(write=False)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        return np.stack([np.tanh(correlate(image, k, mode="nearest")) for k in self.filters])


@dataclass(frozen=True, eq=False)
class DomainDescriptor:
    vector: np.ndarray
    n_images: int
    hist_bins: int


@dataclass(frozen=True)
class EnsembleWeights:
    weights: tuple[float, ...]
    depth_coeff: float


def _image_descriptor(features: np.ndarray, bins: int) -> np.ndarray:
    flat = features.reshape(features.shape[0], -1)
    mean = flat.mean(axis=1)
    std = flat.std(axis=1)
    lo = flat.min(axis=1, keepdims=True)
    span = flat.max(axis=1, keepdims=True) - lo
    # constant channels normalise to 0
    normed = np.divide(flat - lo, span, out=np.zeros_like(flat), where=span > 0)
    counts, _ = np.histogram(normed, bins=bins, range=(0.0, 1.0))
    hist = counts / counts.sum()
    return np.concatenate([mean, std, hist])


def extract_descriptor(
    images: Sequence[np.ndarray],
    extractor: FeatureExtractor,
    hist_bins: int = 16,
) -> DomainDescriptor:
    if len(images) == 0:
        raise EmptyInput("a domain descriptor needs at least one image")
    per_image = np.stack([_image_descriptor(extractor(img), hist_bins) for img in images])
    return DomainDescriptor(per_image.mean(axis=0), len(images), hist_bins)


def match_domain(target: DomainDescriptor, sources: Mapping[str, DomainDescriptor]) -> str:
    ranked = domain_similarities(target, sources)
    best_id, best_sim = None, None
    for domain_id in sorted(ranked):
        if best_sim is None or ranked[domain_id] > best_sim:
            best_id, best_sim = domain_id, ranked[domain_id]
    return best_id


def domain_similarities(target: DomainDescriptor, sources: Mapping[str, DomainDescriptor]) -> dict[str, float]:
    if not sources:
        raise EmptySources("no source descriptors to match against")
    return {domain_id: vector_cosine(target.vector, d.vector) for domain_id, d in sources.items()}


def chain_weights(chain_length: int, depth_coeff: float) -> EnsembleWeights:
    """Softmax of -depth_coeff * h over chain positions; h = 0 is the leaf."""
    if chain_length < 1:
        raise ValueError("chain_length must be >= 1")
    logits = -depth_coeff * np.arange(chain_length, dtype=np.float64)
    exp = np.exp(logits - logits.max())
    weights = exp / exp.sum()
    return EnsembleWeights(tuple(float(w) for w in weights), depth_coeff)


def ensemble_predict(chain: Sequence[ToyModel], weights: EnsembleWeights, image: np.ndarray) -> np.ndarray:
    if not chain:
        raise EmptyInput("empty model chain")
    if len(weights.weights) != len(chain):
        raise LengthMismatch(f"{len(chain)} models but {len(weights.weights)} weights")
    n_classes = chain[0].shape.n_classes
    votes = np.zeros((n_classes,) + np.shape(image))
    rows, cols = np.indices(np.shape(image))
    for model, weight in zip(chain, weights.weights):
        votes[predict(model, image), rows, cols] += weight
    return np.argmax(votes, axis=0).astype(np.uint8)


def select_chain(
    tree: NodeTree,
    matched_client,
    selection: Selection,
    depth_coeff: float,
) -> tuple[list, EnsembleWeights]:
    """The nodes that vote under each selection strategy, leaf first."""
    full = chain_to_root(tree, matched_client)
    if selection == Selection.ROOT:
        nodes = [full[-1]]
        return nodes, chain_weights(1, 0.0)
    if selection == Selection.BEST_LEAF:
        return [full[0]], chain_weights(1, 0.0)
    if selection == Selection.ROOT_MID:
        nodes = full[1:]
        return nodes, chain_weights(len(nodes), 0.0)
    if selection == Selection.ALL_EQUAL:
        return full, chain_weights(len(full), 0.0)
    return full, chain_weights(len(full), depth_coeff)


def infer_target(
    tree: NodeTree,
    source_descriptors: Mapping[str, DomainDescriptor],
    target_images: Sequence[np.ndarray],
    config: InferenceConfig,
    shape: ModelShape,
    extractor: FeatureExtractor | None = None,
) -> tuple[list[np.ndarray], InferenceDecision]:
    extractor = extractor or RandomProjectionExtractor(config.extractor_seed, config.extractor_filters)
    target = extract_descriptor(target_images, extractor, config.hist_bins)
    similarities = domain_similarities(target, source_descriptors)
    matched = match_domain(target, source_descriptors)

    nodes, weights = select_chain(tree, matched, config.selection, config.depth_coeff)
    models = [ToyModel(node.params, shape) for node in nodes]
    masks = [ensemble_predict(models, weights, image) for image in target_images]

    decision = InferenceDecision(
        matched_domain=str(matched),
        similarities={str(k): v for k, v in sorted(similarities.items())},
        selection=config.selection,
        chain_node_ids=[node.id for node in nodes],
        weights=list(weights.weights),
    )
    logger.info(f"Target matched to '{matched}', chain {decision.chain_node_ids}")
    return masks, decision
