"""
Flat parameter vectors and the algebra every other service builds on.

A model is a single float64 vector plus a layer table. Aggregation,
similarity and the fixed/variable split all work on that vector, so the
tree, style-pairing and fusion code never needs to know what a layer is.
"""
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from app.core.errors import (
    EmptyInput,
    LayoutMismatch,
    PartitionMismatch,
    ZeroTotalWeight,
    ZeroVector,
)


@dataclass(frozen=True)
class LayerSlot:
    name: str
    offset: int
    length: int


@dataclass(frozen=True, eq=False)
class FlatParams:
    values: np.ndarray
    layout: tuple[LayerSlot, ...]
    sample_count: int = 0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple(self.layout))

        offset = 0
        for slot in self.layout:
            if slot.offset != offset or slot.length < 0:
                raise LayoutMismatch(f"layer '{slot.name}' is not contiguous at offset {offset}")
            offset += slot.length
        if offset != values.size:
            raise LayoutMismatch(f"layout covers {offset} values, vector has {values.size}")
        if len({slot.name for slot in self.layout}) != len(self.layout):
            raise LayoutMismatch("duplicate layer names in layout")
        if self.sample_count < 0:
            raise ValueError("sample_count must be >= 0")

    @classmethod
    def from_layers(cls, layers: Mapping[str, np.ndarray], sample_count: int = 0) -> "FlatParams":
        """Pack named arrays, in mapping order, into one vector."""
        slots, chunks, offset = [], [], 0
        for name, array in layers.items():
            flat = np.asarray(array, dtype=np.float64).ravel()
            slots.append(LayerSlot(name, offset, flat.size))
            chunks.append(flat)
            offset += flat.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, tuple(slots), sample_count)

    @property
    def layer_names(self) -> tuple[str, ...]:
        return tuple(slot.name for slot in self.layout)

    def slot(self, name: str) -> LayerSlot:
        for slot in self.layout:
            if slot.name == name:
                return slot
        raise KeyError(name)

    def layer(self, name: str) -> np.ndarray:
        slot = self.slot(name)
        return self.values[slot.offset:slot.offset + slot.length]

    def with_values(self, values: np.ndarray) -> "FlatParams":
        return FlatParams(values, self.layout, self.sample_count)

    def with_sample_count(self, sample_count: int) -> "FlatParams":
        return FlatParams(self.values, self.layout, sample_count)

    def same_layout(self, other: "FlatParams") -> bool:
        return self.layout == other.layout

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for slot in self.layout:
            digest.update(f"{slot.name}:{slot.offset}:{slot.length};".encode())
        digest.update(self.values.astype("<f8").tobytes())
        return digest.hexdigest()[:16]


@dataclass(frozen=True)
class LayerPartition:
    fixed_layers: frozenset[str] = field(default_factory=frozenset)
    variable_layers: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "fixed_layers", frozenset(self.fixed_layers))
        object.__setattr__(self, "variable_layers", frozenset(self.variable_layers))
        overlap = self.fixed_layers & self.variable_layers
        if overlap:
            raise PartitionMismatch(f"layers both fixed and variable: {sorted(overlap)}")

    @classmethod
    def with_fixed(cls, layer_names: Iterable[str], fixed: Iterable[str]) -> "LayerPartition":
        """Everything not named in `fixed` becomes variable."""
        names = list(layer_names)
        fixed_set = frozenset(fixed)
        unknown = fixed_set - set(names)
        if unknown:
            raise PartitionMismatch(f"unknown fixed layers: {sorted(unknown)}")
        return cls(fixed_set, frozenset(n for n in names if n not in fixed_set))

    def check(self, params: FlatParams) -> None:
        names = set(params.layer_names)
        covered = self.fixed_layers | self.variable_layers
        if covered - names:
            raise PartitionMismatch(f"partition names unknown layers: {sorted(covered - names)}")
        if names - covered:
            raise PartitionMismatch(f"layers not covered by partition: {sorted(names - covered)}")


@dataclass(frozen=True, eq=False)
class ParamView:
    """A read-only selection of whole layers out of a FlatParams vector."""
    layers: tuple[LayerSlot, ...]
    index: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return int(self.index.size)


def _require_same_layout(models: Sequence[FlatParams]) -> None:
    first = models[0]
    for other in models[1:]:
        if not first.same_layout(other):
            raise LayoutMismatch("parameter layouts differ")


def vector_cosine(a: np.ndarray, b: np.ndarray) -> float:
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    value = float(np.dot(a, b)) / (norm_a * norm_b)
    return min(1.0, max(-1.0, value))


def cosine_similarity(a: FlatParams, b: FlatParams) -> float:
    _require_same_layout([a, b])
    return vector_cosine(a.values, b.values)


def similarity_matrix(models: Sequence[FlatParams]) -> np.ndarray:
    """Pairwise cosine similarities; symmetric with an exact unit diagonal."""
    if not models:
        raise EmptyInput("no models to compare")
    _require_same_layout(models)
    n = len(models)
    sims = np.eye(n)
    for i in range(n):
        if not np.any(models[i].values):
            raise ZeroVector("cosine similarity of a zero vector is undefined")
        for j in range(i + 1, n):
            sims[i, j] = sims[j, i] = vector_cosine(models[i].values, models[j].values)
    return sims


def weighted_average(models: Sequence[FlatParams]) -> FlatParams:
    """
    Sample-count weighted mean (FedAvg rule).

    Inputs are put in a canonical order first and the mean is accumulated as
    offsets from the element-wise minimum, so the result does not depend on
    input order and N copies of one vector reproduce it bit for bit.
    """
    if not models:
        raise EmptyInput("cannot average an empty list of models")
    _require_same_layout(models)
    total = sum(m.sample_count for m in models)
    if total <= 0:
        raise ZeroTotalWeight("total sample_count must be positive")

    ordered = sorted(models, key=lambda m: (m.sample_count, m.values.tobytes()))
    base = np.min(np.vstack([m.values for m in ordered]), axis=0)
    acc = np.zeros_like(base)
    for model in ordered:
        if model.sample_count:
            acc += (model.sample_count / total) * (model.values - base)
    return FlatParams(base + acc, ordered[0].layout, total)


def _view(params: FlatParams, names: frozenset[str]) -> ParamView:
    slots = tuple(slot for slot in params.layout if slot.name in names)
    if slots:
        index = np.concatenate([np.arange(s.offset, s.offset + s.length) for s in slots])
    else:
        index = np.zeros(0, dtype=np.int64)
    values = params.values[index]
    values.setflags(write=False)
    return ParamView(slots, index, values)


def split(params: FlatParams, partition: LayerPartition) -> tuple[ParamView, ParamView]:
    partition.check(params)
    return _view(params, partition.fixed_layers), _view(params, partition.variable_layers)


def recombine(template: FlatParams, fixed: ParamView, variable: ParamView) -> FlatParams:
    """Inverse of `split`: write both views back into `template`'s layout."""
    if len(fixed) + len(variable) != template.values.size:
        raise PartitionMismatch("views do not cover the parameter vector")
    values = np.empty_like(template.values)
    values[fixed.index] = fixed.values
    values[variable.index] = variable.values
    return template.with_values(values)


def replace_view(params: FlatParams, view: ParamView, new_values: np.ndarray) -> FlatParams:
    values = params.values.copy()
    values[view.index] = new_values
    return params.with_values(values)
