import numpy as np
import pytest

from app.core.errors import EmptyInput, EmptySources, LengthMismatch
from app.schemas.schemas import InferenceConfig, Selection, ThresholdSchedule
from app.services.inference import (
    DomainDescriptor,
    EnsembleWeights,
    RandomProjectionExtractor,
    chain_weights,
    ensemble_predict,
    extract_descriptor,
    infer_target,
    match_domain,
    select_chain,
)
from app.services.toy_model import ModelShape, ToyModel, init_model, pack, predict, unpack, zero_model
from app.services.tree import build_tree

SHAPE = ModelShape(conv_filters=1, hidden_units=1, n_classes=3)


def constant_model(label: int) -> ToyModel:
    layers = unpack(SHAPE, zero_model(SHAPE).params.values)
    bias = np.zeros(3)
    bias[label] = 1.0
    layers["head"] = (layers["head"][0], bias)
    return ToyModel(pack(SHAPE, layers), SHAPE)


def threshold_model() -> ToyModel:
    """Class 1 where intensity > 0.5, class 2 below."""
    layers = {
        "conv": (np.zeros((1, 9)), np.zeros(1)),
        "hidden": (np.array([[1.0, 0, 0, 0, 0, 0]]), np.array([-0.5])),
        "head": (np.array([[0.0], [10.0], [-10.0]]), np.array([-100.0, 0.0, 0.0])),
    }
    return ToyModel(pack(SHAPE, layers), SHAPE)


def descriptor(vector):
    return DomainDescriptor(np.asarray(vector, dtype=float), 1, 2)


class TestExtractDescriptor:
    def test_identical_images_average_to_one(self):
        extractor = RandomProjectionExtractor(seed=3)
        image = np.random.default_rng(0).uniform(0, 1, (10, 10))
        one = extract_descriptor([image], extractor)
        two = extract_descriptor([image, image], extractor)
        assert np.allclose(one.vector, two.vector, atol=1e-15)
        assert two.n_images == 2

    def test_constant_image(self):
        extractor = RandomProjectionExtractor(seed=3, n_filters=4)
        d = extract_descriptor([np.full((8, 8), 0.4)], extractor, hist_bins=16)
        std, hist = d.vector[4:8], d.vector[8:]
        assert np.all(np.abs(std) < 1e-12)
        assert hist.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.count_nonzero(hist) == 1

    def test_histogram_is_distribution(self):
        extractor = RandomProjectionExtractor(seed=3, n_filters=4)
        images = list(np.random.default_rng(1).uniform(0, 1, (3, 8, 8)))
        hist = extract_descriptor(images, extractor, hist_bins=16).vector[8:]
        assert np.all(hist >= 0)
        assert hist.sum() == pytest.approx(1.0, abs=1e-9)

    def test_frozen_extractor_is_deterministic(self):
        image = np.random.default_rng(2).uniform(0, 1, (8, 8))
        a = extract_descriptor([image], RandomProjectionExtractor(seed=9)).vector
        b = extract_descriptor([image], RandomProjectionExtractor(seed=9)).vector
        assert a.tobytes() == b.tobytes()

    def test_empty(self):
        with pytest.raises(EmptyInput):
            extract_descriptor([], RandomProjectionExtractor())


class TestMatchDomain:
    def test_self_match(self):
        sources = {"A": descriptor([1, 2, 3]), "B": descriptor([3, 2, 1])}
        assert match_domain(descriptor([1, 2, 3]), sources) == "A"

    def test_single_source(self):
        assert match_domain(descriptor([1, 0]), {"only": descriptor([0, 1])}) == "only"

    def test_mixture_matches_dominant(self):
        a, b = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
        sources = {"A": descriptor(a), "B": descriptor(b)}
        assert match_domain(descriptor(0.9 * a + 0.1 * b), sources) == "A"

    def test_scale_invariant(self):
        sources = {"A": descriptor([1, 0.1]), "B": descriptor([0.1, 1])}
        scaled = {k: descriptor(40 * d.vector) for k, d in sources.items()}
        target = descriptor([0.8, 0.3])
        assert match_domain(target, sources) == match_domain(descriptor(7 * target.vector), scaled) == "A"

    def test_no_sources(self):
        with pytest.raises(EmptySources):
            match_domain(descriptor([1]), {})


class TestChainWeights:
    def test_single(self):
        assert chain_weights(1, 0.5).weights == (1.0,)

    def test_uniform(self):
        assert chain_weights(3, 0.0).weights == pytest.approx((1 / 3, 1 / 3, 1 / 3))

    def test_decay(self):
        weights = chain_weights(3, 0.5).weights
        assert weights == pytest.approx((0.5065, 0.3072, 0.1863), abs=1e-4)
        assert sum(weights) == pytest.approx(1.0, abs=1e-12)
        assert weights[0] > weights[1] > weights[2]

    def test_invalid_length(self):
        with pytest.raises(ValueError):
            chain_weights(0, 0.5)


class TestEnsemblePredict:
    IMAGE = np.linspace(0.05, 0.95, 16).reshape(4, 4)

    def test_single_model(self):
        model = init_model(SHAPE, seed=1, scale=3.0)
        assert np.array_equal(ensemble_predict([model], chain_weights(1, 0), self.IMAGE), predict(model, self.IMAGE))

    def test_majority(self):
        chain = [constant_model(1), constant_model(2), constant_model(2)]
        assert np.all(ensemble_predict(chain, chain_weights(3, 0.0), self.IMAGE) == 2)

    def test_leaf_outvotes(self):
        chain = [constant_model(1), constant_model(2), constant_model(2)]
        assert np.all(ensemble_predict(chain, EnsembleWeights((0.51, 0.30, 0.19), 0.0), self.IMAGE) == 1)

    def test_identical_models_ignore_weights(self):
        model = init_model(SHAPE, seed=2, scale=3.0)
        out = ensemble_predict([model] * 3, EnsembleWeights((0.2, 0.5, 0.3), 0.0), self.IMAGE)
        assert np.array_equal(out, predict(model, self.IMAGE))

    def test_weighted_and_equal_differ_where_leaf_wins(self):
        chain = [threshold_model(), constant_model(2), constant_model(2)]
        equal = ensemble_predict(chain, chain_weights(3, 0.0), self.IMAGE)
        weighted = ensemble_predict(chain, chain_weights(3, 0.5), self.IMAGE)
        leaf_says_one = predict(chain[0], self.IMAGE) == 1
        assert np.all(equal == 2)
        assert np.array_equal(weighted != equal, leaf_says_one)
        assert leaf_says_one.any() and not leaf_says_one.all()

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            ensemble_predict([constant_model(0)], chain_weights(2, 0.5), self.IMAGE)


def small_tree():
    rng = np.random.default_rng(4)
    leaves = [(c, init_model(SHAPE, seed=int(rng.integers(1000)), scale=2.0).params.with_sample_count(5)) for c in "ABC"]
    return build_tree(leaves, ThresholdSchedule(tau0=2.0, beta=0.0, height=2))


class TestSelectChain:
    def test_strategies(self):
        tree = small_tree()
        full = [n.id for n in select_chain(tree, "B", Selection.ALL_WEIGHTED, 0.5)[0]]
        assert full == ["L0:B", tree.root]
        assert [n.id for n in select_chain(tree, "B", Selection.ROOT, 0.5)[0]] == [tree.root]
        assert [n.id for n in select_chain(tree, "B", Selection.BEST_LEAF, 0.5)[0]] == ["L0:B"]
        assert [n.id for n in select_chain(tree, "B", Selection.ROOT_MID, 0.5)[0]] == [tree.root]
        assert select_chain(tree, "B", Selection.ALL_EQUAL, 0.5)[1].weights == pytest.approx((0.5, 0.5))


class TestInferTarget:
    def sources(self, extractor):
        rng = np.random.default_rng(5)
        return {c: extract_descriptor(list(rng.uniform(0, 1, (2, 8, 8)) * (i + 1) / 3), extractor) for i, c in enumerate("ABC")}

    def test_root_only_is_global_inference(self):
        tree = small_tree()
        extractor = RandomProjectionExtractor(seed=1234, n_filters=8)
        images = list(np.random.default_rng(6).uniform(0, 1, (3, 8, 8)))
        masks, decision = infer_target(tree, self.sources(extractor), images, InferenceConfig(selection=Selection.ROOT), SHAPE, extractor)
        root_model = ToyModel(tree.root_node.params, SHAPE)
        for image, mask in zip(images, masks):
            assert np.array_equal(mask, predict(root_model, image))
        assert decision.chain_node_ids == [tree.root]

    def test_single_client_federation(self):
        params = init_model(SHAPE, seed=7).params.with_sample_count(3)
        tree = build_tree([("solo", params)], ThresholdSchedule())
        extractor = RandomProjectionExtractor()
        images = [np.random.default_rng(8).uniform(0, 1, (8, 8))]
        sources = {"solo": extract_descriptor(images, extractor)}
        masks, decision = infer_target(tree, sources, images, InferenceConfig(), SHAPE, extractor)
        assert decision.matched_domain == "solo"
        assert decision.chain_node_ids == ["L0:solo", "L1:0"]
        assert masks[0].shape == (8, 8)

    def test_deterministic(self):
        tree = small_tree()
        extractor = RandomProjectionExtractor()
        images = list(np.random.default_rng(9).uniform(0, 1, (2, 8, 8)))
        a = infer_target(tree, self.sources(extractor), images, InferenceConfig(), SHAPE, extractor)
        b = infer_target(tree, self.sources(extractor), images, InferenceConfig(), SHAPE, extractor)
        assert all(np.array_equal(x, y) for x, y in zip(a[0], b[0]))
        assert a[1] == b[1]
