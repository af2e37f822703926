import numpy as np
import pytest

from app.core.errors import (
    EmptyInput,
    LayoutMismatch,
    PartitionMismatch,
    ZeroTotalWeight,
    ZeroVector,
)
from app.services.params import (
    FlatParams,
    LayerPartition,
    LayerSlot,
    cosine_similarity,
    recombine,
    similarity_matrix,
    split,
    weighted_average,
)


def vec(values, count=1):
    return FlatParams.from_layers({"w": np.asarray(values, dtype=float)}, count)


def two_layer(body, head, count=1):
    return FlatParams.from_layers({"body": np.asarray(body, float), "head": np.asarray(head, float)}, count)


class TestFlatParams:
    def test_layout_must_cover_values(self):
        with pytest.raises(LayoutMismatch):
            FlatParams(np.zeros(3), (LayerSlot("w", 0, 2),))

    def test_layout_must_be_contiguous(self):
        with pytest.raises(LayoutMismatch):
            FlatParams(np.zeros(4), (LayerSlot("a", 0, 2), LayerSlot("b", 3, 1)))

    def test_negative_sample_count_rejected(self):
        with pytest.raises(ValueError):
            FlatParams(np.zeros(2), (LayerSlot("w", 0, 2),), -1)

    def test_values_are_read_only(self):
        p = vec([1.0, 2.0])
        with pytest.raises(ValueError):
            p.values[0] = 5.0

    def test_layer_lookup(self):
        p = two_layer([1, 2, 3], [4, 5])
        assert p.layer_names == ("body", "head")
        assert p.slot("head") == LayerSlot("head", 3, 2)
        assert list(p.layer("head")) == [4.0, 5.0]

    def test_checksum_tracks_values(self):
        assert vec([1, 2]).checksum() == vec([1, 2]).checksum()
        assert vec([1, 2]).checksum() != vec([1, 2.0000001]).checksum()


class TestCosineSimilarity:
    def test_identical(self):
        assert cosine_similarity(vec([1, 2, 3]), vec([1, 2, 3])) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine_similarity(vec([1, 0]), vec([0, 1])) == 0.0

    def test_diagonal(self):
        assert cosine_similarity(vec([1, 0]), vec([1, 1])) == pytest.approx(0.70710678, abs=1e-9)

    def test_symmetric_and_scale_invariant(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal(10), rng.standard_normal(10)
        ab = cosine_similarity(vec(a), vec(b))
        assert ab == pytest.approx(cosine_similarity(vec(b), vec(a)), abs=1e-15)
        assert ab == pytest.approx(cosine_similarity(vec(7.5 * a), vec(0.1 * b)), abs=1e-12)

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            cosine_similarity(vec([0, 0]), vec([1, 1]))

    def test_layout_mismatch(self):
        with pytest.raises(LayoutMismatch):
            cosine_similarity(vec([1, 2, 3]), two_layer([1, 2], [3]))

    def test_matrix_symmetric_unit_diagonal(self):
        rng = np.random.default_rng(1)
        models = [vec(rng.standard_normal(6)) for _ in range(5)]
        sims = similarity_matrix(models)
        assert np.array_equal(np.diag(sims), np.ones(5))
        assert np.array_equal(sims, sims.T)


class TestWeightedAverage:
    def test_singleton_unchanged(self):
        m = vec([0.3, -1.7], count=4)
        out = weighted_average([m])
        assert np.array_equal(out.values, m.values)
        assert out.sample_count == 4

    def test_symmetric_mean(self):
        out = weighted_average([vec([0, 0], 1), vec([2, 2], 1)])
        assert list(out.values) == [1.0, 1.0]
        assert out.sample_count == 2

    def test_weighted_mean(self):
        out = weighted_average([vec([0, 0], 1), vec([3, 3], 2)])
        assert out.values == pytest.approx([2.0, 2.0], abs=1e-15)
        assert out.sample_count == 3

    def test_copies_reproduce_vector_exactly(self):
        rng = np.random.default_rng(2)
        m = vec(rng.standard_normal(20), count=3)
        out = weighted_average([m] * 7)
        assert np.array_equal(out.values, m.values)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(3)
        models = [vec(rng.standard_normal(8), count=int(c)) for c in rng.integers(1, 9, size=5)]
        reference = weighted_average(models).values
        for perm in (rng.permutation(5) for _ in range(5)):
            assert np.array_equal(weighted_average([models[i] for i in perm]).values, reference)

    def test_errors(self):
        with pytest.raises(EmptyInput):
            weighted_average([])
        with pytest.raises(ZeroTotalWeight):
            weighted_average([vec([1, 2], 0), vec([3, 4], 0)])
        with pytest.raises(LayoutMismatch):
            weighted_average([vec([1, 2, 3]), two_layer([1, 2], [3])])


class TestPartition:
    def test_overlap_rejected(self):
        with pytest.raises(PartitionMismatch):
            LayerPartition({"head"}, {"head", "body"})

    def test_all_variable(self):
        p = two_layer([1, 2, 3], [4, 5])
        fixed, variable = split(p, LayerPartition(set(), {"body", "head"}))
        assert len(fixed) == 0
        assert list(variable.values) == [1, 2, 3, 4, 5]

    def test_all_fixed(self):
        p = two_layer([1, 2, 3], [4, 5])
        fixed, variable = split(p, LayerPartition({"body", "head"}, set()))
        assert len(variable) == 0
        assert len(fixed) == 5

    def test_fixed_head_views_follow_layout(self):
        p = two_layer([1, 2, 3], [4, 5])
        fixed, variable = split(p, LayerPartition.with_fixed(p.layer_names, ["head"]))
        assert list(fixed.index) == [3, 4]
        assert list(variable.index) == [0, 1, 2]
        assert fixed.layers == (LayerSlot("head", 3, 2),)

    def test_recombine_is_identity(self):
        p = two_layer([1.5, -2, 3], [4, 5.25], count=9)
        fixed, variable = split(p, LayerPartition({"head"}, {"body"}))
        back = recombine(p, fixed, variable)
        assert np.array_equal(back.values, p.values)
        assert back.layout == p.layout
        assert back.sample_count == 9

    def test_unknown_and_uncovered_layers(self):
        p = two_layer([1], [2])
        with pytest.raises(PartitionMismatch):
            split(p, LayerPartition({"head"}, set()))
        with pytest.raises(PartitionMismatch):
            split(p, LayerPartition({"head", "neck"}, {"body"}))
        with pytest.raises(PartitionMismatch):
            LayerPartition.with_fixed(p.layer_names, ["tail"])
