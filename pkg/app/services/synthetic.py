"""
Synthetic multi-domain segmentation data.

Every image shows a randomly placed, rotated ellipse (the "disc") with a
concentric scaled copy inside it (the "cup"; fundus task only). A domain
differs from another only in how the clean rendering is turned into
intensities: gain, gamma, brightness shift, sensor noise and how elongated
the shapes are.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from app.schemas.schemas import DomainSpec, Task

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


@dataclass(frozen=True, eq=False)
class SegSample:
    image: np.ndarray   # (S, S) float64 in [0, 1]
    mask: np.ndarray    # (S, S) uint8 labels

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError("image and mask shapes differ")


@dataclass(frozen=True)
class _Geometry:
    cy: float
    cx: float
    radius: float
    theta: float
    cup_scale: float


def _draw_geometry(size: int, rng: np.random.Generator) -> _Geometry:
    cy, cx = size / 2 + rng.uniform(-0.1, 0.1, size=2) * size
    return _Geometry(
        cy=float(cy),
        cx=float(cx),
        radius=float(rng.uniform(0.22, 0.32) * size),
        theta=float(rng.uniform(0.0, np.pi)),
        cup_scale=float(rng.uniform(0.4, 0.6)),
    )


def _shape_field(size: int, geom: _Geometry, eccentricity: float) -> tuple[np.ndarray, np.ndarray]:
    """Normalised ellipse radius q (q <= 1 inside the disc) and radial coordinate."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - geom.cy, xx - geom.cx
    u = dx * np.cos(geom.theta) + dy * np.sin(geom.theta)
    v = -dx * np.sin(geom.theta) + dy * np.cos(geom.theta)
    minor = geom.radius * np.sqrt(1.0 - eccentricity ** 2)
    q = np.sqrt((u / geom.radius) ** 2 + (v / minor) ** 2)
    rho = np.hypot(dy, dx) / (np.sqrt(2.0) * size / 2)
    return q, rho


def render_base(spec: DomainSpec, geom: _Geometry) -> tuple[np.ndarray, np.ndarray]:
    """Clean intensities in [0, 1] and the label mask for one geometry."""
    q, rho = _shape_field(spec.image_size, geom, spec.shape_eccentricity)
    disc = q <= 1.0
    mask = np.zeros(q.shape, dtype=np.uint8)
    mask[disc] = 1
    base = 0.15 + 0.1 * (1.0 - np.clip(rho, 0.0, 1.0))
    if spec.task == Task.FUNDUS:
        cup = q <= geom.cup_scale
        mask[cup] = 2
        base = base + 0.4 * disc + 0.3 * cup
    else:
        base = base + 0.45 * disc
    return np.clip(base, 0.0, 1.0), mask


def _draws(spec: DomainSpec):
    rng = np.random.default_rng(spec.seed)
    for _ in range(spec.n_samples):
        geom = _draw_geometry(spec.image_size, rng)
        noise = rng.standard_normal((spec.image_size, spec.image_size))
        yield geom, noise


def render_clean(spec: DomainSpec) -> list[np.ndarray]:
    """The noise-free, untransformed renderings behind `generate_domain(spec)`."""
    return [render_base(spec, geom)[0] for geom, _ in _draws(spec)]


def generate_domain(spec: DomainSpec, clip: bool = True) -> list[SegSample]:
    """Deterministic in `spec.seed`; the style fields never change the geometry."""
    samples = []
    for geom, noise in _draws(spec):
        base, mask = render_base(spec, geom)
        image = spec.contrast_gain * base ** spec.gamma + spec.brightness_shift + spec.noise_std * noise
        if clip:
            image = np.clip(image, 0.0, 1.0)
        samples.append(SegSample(image, mask))
    return samples


def generate_all(specs: Sequence[DomainSpec]) -> dict[str, list[SegSample]]:
    return {spec.domain_id: generate_domain(spec) for spec in specs}


# ─── PGM export / import ──────────────────────────────────────────────────────

def _write_pgm(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array.astype(np.uint8)).save(path, format="PPM")


def _read_pgm(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"))


def to_pgm_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_mask_pgm(path: Path, mask: np.ndarray) -> None:
    _write_pgm(Path(path), mask)


def export_domains(
    directory: Path,
    specs: Sequence[DomainSpec],
    data: Mapping[str, Sequence[SegSample]],
) -> Path:
    """
    One sub-directory per domain with `img_NNN.pgm` (8-bit intensities) and
    `mask_NNN.pgm` (raw labels), plus a manifest listing the domain specs.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"domains": []}
    for spec in specs:
        domain_dir = directory / spec.domain_id
        domain_dir.mkdir(exist_ok=True)
        files = []
        for i, sample in enumerate(data[spec.domain_id]):
            image_name, mask_name = f"img_{i:03d}.pgm", f"mask_{i:03d}.pgm"
            _write_pgm(domain_dir / image_name, to_pgm_bytes(sample.image))
            _write_pgm(domain_dir / mask_name, sample.mask)
            files.append({"image": image_name, "mask": mask_name})
        manifest["domains"].append({"spec": spec.model_dump(mode="json"), "files": files})
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info(f"Exported {len(specs)} domains to {directory}")
    return directory


def import_domains(directory: Path) -> tuple[list[DomainSpec], dict[str, list[SegSample]]]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    specs, data = [], {}
    for entry in manifest["domains"]:
        spec = DomainSpec.model_validate(entry["spec"])
        domain_dir = directory / spec.domain_id
        samples = []
        for files in entry["files"]:
            image = _read_pgm(domain_dir / files["image"]).astype(np.float64) / 255.0
            mask = _read_pgm(domain_dir / files["mask"]).astype(np.uint8)
            samples.append(SegSample(image, mask))
        specs.append(spec)
        data[spec.domain_id] = samples
    return specs, data
