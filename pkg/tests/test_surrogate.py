import numpy as np
import pytest

from advknn.core import autodiff as ad
from advknn.core.exceptions import DistributionError, FingerprintMismatchError
from advknn.models.neighbor_models import FeatureDatabase
from advknn.models.surrogate_models import SurrogateHead, SurrogateTrainConfig
from advknn.services import network, neighbors, surrogate


def _pairs(n, c, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(c, 0.5), size=n)
    q = rng.dirichlet(np.full(c, 0.5), size=n)
    return p, q


def test_consistency_loss_is_nonnegative_on_random_pairs():
    p, q = _pairs(100_000, 10, 0)
    p[::7, 3] = 0.0
    p /= p.sum(axis=1, keepdims=True)
    assert np.all(surrogate.loss_cl(p, q, reduction="none") >= -1e-12)


def test_consistency_loss_vanishes_on_identical_distributions():
    p, _ = _pairs(1000, 10, 1)
    assert np.max(surrogate.loss_cl(p, p, reduction="none")) <= 1e-12


def test_one_hot_target_example():
    q = np.array([0.7, 0.2, 0.1])
    assert surrogate.loss_cls(q, 0) == pytest.approx(-np.log(0.7))
    assert surrogate.loss_cl(np.array([1.0, 0.0, 0.0]), q) == pytest.approx(-np.log(0.7))


def test_zero_probability_is_clamped():
    q = np.array([1.0, 0.0])
    assert surrogate.loss_cls(q, 1) == pytest.approx(-np.log(1e-12))


def test_total_loss_is_affine_in_lambda():
    p, q = _pairs(50, 4, 2)
    t = np.argmax(p, axis=1)
    values = [surrogate.total_loss(p, q, t, lam) for lam in (0.0, 0.5, 1.0)]
    assert values[1] - values[0] == pytest.approx(values[2] - values[1], rel=1e-12, abs=1e-12)
    assert values[0] == pytest.approx(surrogate.loss_cl(p, q))


def test_invalid_distributions_are_rejected():
    with pytest.raises(DistributionError):
        surrogate.loss_cl(np.array([0.5, 0.6]), np.array([0.5, 0.5]))
    with pytest.raises(DistributionError):
        surrogate.loss_cl(np.array([0.5, 0.5]), np.array([1.0, 0.0, 0.0]))
    with pytest.raises(DistributionError):
        surrogate.total_loss(np.array([0.5, 0.5]), np.array([0.5, 0.5]), 0, -1.0)


@pytest.mark.parametrize("seed", range(100))
def test_objective_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((6, 5))
    weight = rng.standard_normal((5, 4)) * 0.5
    bias = rng.standard_normal(4) * 0.1
    p = rng.dirichlet(np.ones(4), size=6)
    t = np.argmax(p, axis=1)

    def value(f, w, b):
        with ad.inference():
            return surrogate.surrogate_objective(ad.Tensor(f), ad.Tensor(w), ad.Tensor(b), p, t, 0.3).item()

    with ad.Graph() as graph:
        leaves = [graph.leaf(a, dtype=np.float64) for a in (features, weight, bias)]
        grads = ad.backward(surrogate.surrogate_objective(*leaves, p, t, 0.3), leaves)

    arrays = [features, weight, bias]
    for i, leaf in enumerate(leaves):
        def fn(x, i=i):
            args = list(arrays)
            args[i] = x
            return value(*args)
        numeric = ad.numerical_gradient(fn, arrays[i])
        assert ad.relative_error(grads[leaf.node_id].numpy(), numeric) < 1e-4


@pytest.fixture(scope="module")
def layer2_db(trained_net, blob_train):
    return neighbors.build_database(trained_net, blob_train, 2)


@pytest.fixture(scope="module")
def head(trained_net, layer2_db, blob_train):
    cfg = SurrogateTrainConfig(epochs=30, batch_size=30, learning_rate=0.5, k=9)
    return surrogate.train_surrogate(trained_net, layer2_db, blob_train, cfg)


def test_neighbor_targets_leave_the_sample_out(layer2_db):
    counts = surrogate.neighbor_targets(layer2_db, 5)
    assert counts.shape == (layer2_db.size, layer2_db.num_classes)
    assert np.all(counts.sum(axis=1) == 5)
    rows = neighbors.knn_query_batch(layer2_db, layer2_db.features, 5, exclude=np.arange(layer2_db.size))
    assert not np.any(rows == np.arange(layer2_db.size)[:, None])


def test_trained_head_agrees_with_knn(trained_net, head, layer2_db, blob_test):
    report = surrogate.evaluate_surrogate(trained_net, head, layer2_db, blob_test, k=9)
    assert report.samples == len(blob_test)
    assert report.agreement >= 0.8


def test_head_records_its_provenance(head, trained_net, layer2_db):
    assert head.layer == 2
    assert head.network_fingerprint == trained_net.fingerprint
    assert head.database_fingerprint == layer2_db.fingerprint
    assert head.weight.shape == (layer2_db.width, 3)
    assert head.use_consistency


def test_training_is_deterministic(trained_net, layer2_db, blob_train):
    cfg = SurrogateTrainConfig(epochs=2, batch_size=30, k=9, seed=3)
    first = surrogate.train_surrogate(trained_net, layer2_db, blob_train, cfg)
    second = surrogate.train_surrogate(trained_net, layer2_db, blob_train, cfg)
    np.testing.assert_array_equal(first.weight, second.weight)


def test_classification_only_head_needs_positive_lambda():
    with pytest.raises(ValueError):
        SurrogateTrainConfig(use_consistency=False, lambda_weight=0.0)
    assert SurrogateTrainConfig.model_validate({"lambda": 0.7}).lambda_weight == 0.7


def test_database_of_another_network_is_rejected(trained_net, layer2_db, blob_train):
    foreign = FeatureDatabase(features=layer2_db.features, labels=layer2_db.labels, layer=2,
                              network_fingerprint="other", num_classes=3)
    with pytest.raises(FingerprintMismatchError):
        surrogate.train_surrogate(trained_net, foreign, blob_train, SurrogateTrainConfig(epochs=1, k=3))


@pytest.mark.parametrize("seed", range(100))
def test_attack_loss_gradient_through_network(random_net, seed):
    rng = np.random.default_rng(seed)
    width = random_net.config.feature_width(2)
    head = SurrogateHead(weight=rng.standard_normal((width, 3)), bias=rng.standard_normal(3), layer=2,
                         database_fingerprint="d", network_fingerprint=random_net.fingerprint)
    loss_head = surrogate.SurrogateLossHead(head)
    x = rng.uniform(0, 1, (1, 8, 8))
    analytic = network.input_gradient(random_net, loss_head, x, 1)

    def loss(image):
        feats = network.extract_features(random_net, image[None], 2)
        q = surrogate.head_probabilities(head, feats)
        return surrogate.loss_cls(q, 1)

    assert ad.relative_error(analytic, ad.numerical_gradient(loss, x)) < 1e-4


def test_surrogate_round_trip(tmp_path, head):
    loaded = surrogate.load_surrogate(surrogate.save_surrogate(head, tmp_path / "s.head"))
    np.testing.assert_array_equal(loaded.weight, head.weight)
    assert loaded.layer == head.layer
    assert loaded.database_fingerprint == head.database_fingerprint
    assert loaded.use_consistency == head.use_consistency


def test_total_loss_worked_example():
    p = np.array([0.6, 0.4])
    q = np.array([0.5, 0.5])
    kl = 0.6 * np.log(0.6 / 0.5) + 0.4 * np.log(0.4 / 0.5)
    assert surrogate.total_loss(p, q, 0, 0.3) == pytest.approx(0.3 * -np.log(0.5) + kl, abs=1e-12)


def test_consistency_loss_matches_direct_summation():
    p, q = _pairs(200, 5, 3)
    p[::5, 0] = 0.0
    p /= p.sum(axis=1, keepdims=True)
    values = surrogate.loss_cl(p, q, reduction="none")
    for row_p, row_q, value in zip(p, q, values):
        expected = sum(a * (np.log(a) - np.log(max(b, 1e-12))) for a, b in zip(row_p, row_q) if a > 0)
        assert value == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("lambda_weight", [0.0, 0.3, 1.0])
def test_lambda_settings_train_without_divergence(trained_net, layer2_db, blob_train, lambda_weight):
    cfg = SurrogateTrainConfig(epochs=3, batch_size=30, k=9, lambda_weight=lambda_weight)
    head = surrogate.train_surrogate(trained_net, layer2_db, blob_train, cfg)
    assert np.all(np.isfinite(head.weight)) and np.all(np.isfinite(head.bias))
