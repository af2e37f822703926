"""
FedStyle: style mixing between the clients whose parameters differ most.

Before local training the server pairs every client with the partner whose
parameter vector has the lowest cosine similarity to its own. Partners
publish per-image channel statistics (never images); during training a
client re-styles each input image towards a randomly drawn partner
statistic with a Beta-distributed mixing weight.
"""
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from app.core.errors import ChannelMismatch, EmptyBatch, EmptyBuffer, SingleClient
from app.schemas.schemas import MixConfig
from app.services.params import FlatParams, cosine_similarity

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class StyleStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        std = np.asarray(self.std, dtype=np.float64).ravel()
        if mean.shape != std.shape:
            raise ChannelMismatch("mean and std must have the same channel count")
        if np.any(std < 0):
            raise ValueError("std entries must be >= 0")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def channels(self) -> int:
        return int(self.mean.size)


def select_partner(client, all_params: Mapping[object, FlatParams]):
    """The other client with the least similar parameters; ties go to the smallest id."""
    if len(all_params) < 2:
        raise SingleClient("style pairing needs at least two clients")
    if client not in all_params:
        raise KeyError(client)
    own = all_params[client]
    best_id, best_sim = None, None
    for other in sorted(all_params):
        if other == client:
            continue
        sim = cosine_similarity(own, all_params[other])
        if best_sim is None or sim < best_sim:
            best_id, best_sim = other, sim
    return best_id


def pair_clients(all_params: Mapping[object, FlatParams]) -> dict:
    return {client: select_partner(client, all_params) for client in sorted(all_params)}


def _as_batch(x: np.ndarray) -> np.ndarray:
    """View an image, a channel stack or a batch as (B, C, H, W)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4:
        return x
    raise ValueError(f"expected 2-4 dimensions, got {x.ndim}")


def extract_stats(image: np.ndarray) -> StyleStats:
    """Per-channel spatial mean and population std of a single image."""
    x = _as_batch(image)
    if x.size == 0:
        raise EmptyBatch("cannot take statistics of an empty batch")
    if x.shape[0] != 1:
        raise ValueError(f"expected one image, got {x.shape[0]}; use image_stats for batches")
    return StyleStats(x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3)))


def image_stats(batch: np.ndarray) -> tuple[StyleStats, ...]:
    """One StyleStats per image of the batch."""
    x = _as_batch(batch)
    if x.size == 0:
        raise EmptyBatch("cannot take statistics of an empty batch")
    means, stds = x.mean(axis=(2, 3)), x.std(axis=(2, 3))
    return tuple(StyleStats(m, s) for m, s in zip(means, stds))


def _stacked(stats: Union[StyleStats, Sequence[StyleStats]], n_images: int, channels: int) -> tuple[np.ndarray, np.ndarray]:
    """(B or 1, C, 1, 1) mean and std arrays."""
    per_image = (stats,) if isinstance(stats, StyleStats) else tuple(stats)
    if len(per_image) not in (1, n_images):
        raise ValueError(f"{len(per_image)} statistics for {n_images} images")
    if any(s.channels != channels for s in per_image):
        raise ChannelMismatch(
            f"batch has {channels} channels, stats have {sorted({s.channels for s in per_image})}"
        )
    shape = (len(per_image), channels, 1, 1)
    return (
        np.stack([s.mean for s in per_image]).reshape(shape),
        np.stack([s.std for s in per_image]).reshape(shape),
    )


def mix(
    x_i: np.ndarray,
    stats_i: Union[StyleStats, Sequence[StyleStats]],
    stats_j: Union[StyleStats, Sequence[StyleStats]],
    lam: Union[float, Sequence[float]],
    epsilon: float,
) -> np.ndarray:
    """
    Re-style every image of `x_i` with statistics interpolated between its
    own and the partner's.

    Statistics and `lam` are either one value for the whole batch or one per
    image. They enter as constants: nothing downstream differentiates
    through them.
    """
    x = _as_batch(x_i)
    n_images, channels = x.shape[:2]
    mu_i, sigma_i = _stacked(stats_i, n_images, channels)
    mu_j, sigma_j = _stacked(stats_j, n_images, channels)
    lam = np.asarray(lam, dtype=np.float64).reshape(-1, 1, 1, 1)
    if lam.shape[0] not in (1, n_images):
        raise ValueError(f"{lam.shape[0]} mixing weights for {n_images} images")

    beta_mix = lam * mu_i + (1.0 - lam) * mu_j
    gamma_mix = lam * sigma_i + (1.0 - lam) * sigma_j
    denom = sigma_i + epsilon
    # constant channels normalise to zero instead of dividing by zero
    normed = np.divide(x - mu_i, denom, out=np.zeros_like(x), where=denom > 0)
    out = gamma_mix * normed + beta_mix
    return out.reshape(np.shape(x_i))


def sample_lambda(phi: float, rng: np.random.Generator) -> float:
    """Beta(phi, phi) from two gamma draws."""
    a = rng.gamma(phi)
    b = rng.gamma(phi)
    total = a + b
    if total == 0.0:
        return 0.5
    return float(a / total)


def maybe_mix(
    x_i: np.ndarray,
    stats_buffer_j: Sequence[StyleStats],
    config: MixConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Each image gets its own lambda and its own partner statistic."""
    if rng.random() >= config.activation_prob:
        return x_i
    own = image_stats(x_i)
    lam = [sample_lambda(config.phi, rng) for _ in own]
    try:
        if not stats_buffer_j:
            raise EmptyBuffer("partner has not published any style statistics")
        picks = rng.integers(len(stats_buffer_j), size=len(own))
    except EmptyBuffer as exc:
        logger.warning(f"FedStyle skipped: {exc}")
        return x_i
    return mix(x_i, own, [stats_buffer_j[int(k)] for k in picks], lam, config.epsilon)


@dataclass
class StyleMixer:
    """
    Per-client training hook around `maybe_mix`.

    `calls` counts invocations so tests can assert that evaluation paths
    never reach the mixer.
    """
    partner_buffer: Sequence[StyleStats]
    config: MixConfig
    rng: np.random.Generator
    training: bool = True
    calls: int = field(default=0)

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        if not self.training:
            return batch
        self.calls += 1
        return maybe_mix(batch, self.partner_buffer, self.config, self.rng)

    def eval(self) -> "StyleMixer":
        self.training = False
        return self
