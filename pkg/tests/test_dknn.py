import numpy as np
import pytest

from advknn.core.exceptions import ContractError, FingerprintMismatchError
from advknn.models.dataset_models import Dataset
from advknn.models.neighbor_models import CalibrationTable, FeatureDatabase
from advknn.services import dknn, neighbors, network


@pytest.fixture(scope="module")
def model(trained_net, blob_train):
    dbs = [neighbors.build_database(trained_net, blob_train, layer) for layer in (1, 2, 3)]
    return dknn.build_dknn_model(trained_net, dbs, k=9)


@pytest.fixture(scope="module")
def table(model, blob_test):
    return dknn.build_calibration(model, blob_test.subset(np.arange(30)))


def test_scores_are_layer_summed_vote_fractions(model, blob_test):
    votes = dknn.dknn_predict_batch(model, blob_test.images[:5])
    assert votes.counts.shape == (5, 3, 3)
    np.testing.assert_array_equal(votes.counts.sum(axis=2), np.full((5, 3), 9))
    np.testing.assert_allclose(votes.scores.sum(axis=1), 3.0)
    np.testing.assert_array_equal(votes.labels, np.argmax(votes.counts.sum(axis=1), axis=1))


def test_single_layer_model_matches_plain_knn(trained_net, blob_train, blob_test):
    db = neighbors.build_database(trained_net, blob_train, 2)
    single = dknn.build_dknn_model(trained_net, [db], k=5)
    feats = network.extract_features(trained_net, blob_test.images, 2)
    np.testing.assert_array_equal(dknn.dknn_predict_batch(single, blob_test.images).labels,
                                  neighbors.knn_predict_batch(db, feats, 5))


def test_dknn_agrees_with_labels_on_separable_data(model, blob_test):
    assert np.mean(dknn.dknn_predict_batch(model, blob_test.images).labels == blob_test.labels) >= 0.9


def test_single_image_prediction_matches_batch(model, blob_test):
    batch = dknn.dknn_predict_batch(model, blob_test.images[:4])
    for i in range(4):
        single = dknn.dknn_predict(model, blob_test.images[i])
        assert single.label == batch.labels[i]
        np.testing.assert_array_equal(single.scores, batch.scores[i])


def test_results_do_not_depend_on_worker_count(model, blob_test):
    one = dknn.dknn_predict_batch(model, blob_test.images, workers=1)
    many = dknn.dknn_predict_batch(model, blob_test.images, workers=3)
    np.testing.assert_array_equal(one.counts, many.counts)


def test_foreign_database_is_a_fingerprint_mismatch(trained_net, blob_train):
    db = neighbors.build_database(trained_net, blob_train, 1)
    foreign = FeatureDatabase(features=db.features, labels=db.labels, layer=1, network_fingerprint="other",
                              num_classes=db.num_classes)
    with pytest.raises(FingerprintMismatchError):
        dknn.build_dknn_model(trained_net, [foreign], k=3)


def test_calibration_scores_are_true_class_scores(model, blob_test, table):
    calibration = blob_test.subset(np.arange(30))
    votes = dknn.dknn_vote_counts(model, calibration.images)
    np.testing.assert_array_equal(table.scores, votes.scores[np.arange(30), calibration.labels])
    assert table.num_layers == 3


def test_empty_calibration_set_is_rejected(model):
    empty = Dataset(images=np.zeros((0, 1, 8, 8)), labels=np.zeros(0, dtype=np.int64), num_classes=3)
    with pytest.raises(ContractError):
        dknn.build_calibration(model, empty)


def test_credibility_is_a_nondecreasing_step_function():
    scores = np.random.default_rng(0).integers(0, 31, size=100) / 10.0
    table = CalibrationTable(scores=scores, num_layers=3, k=10)
    grid = np.linspace(-0.1, 3.1, 3201)
    cred = dknn.credibility_from_scores(table, grid)
    assert np.all(np.diff(cred) >= 0)
    for value, c in zip(grid, cred):
        assert c == np.sum(scores < value) / 100


def test_credibility_counts_strictly_smaller_scores():
    table = CalibrationTable(scores=[0.5, 1.0, 1.0, 2.0], num_layers=3, k=4)
    np.testing.assert_array_equal(dknn.credibility_from_scores(table, [0.5, 1.0, 1.5, 3.0]),
                                  [0.0, 0.25, 0.75, 1.0])


def test_credibility_of_image_uses_predicted_class_score(model, table, blob_test):
    x = blob_test.images[40]
    prediction = dknn.dknn_predict(model, x)
    expected = np.sum(table.scores < prediction.scores[prediction.label]) / table.size
    assert dknn.credibility(model, table, x) == pytest.approx(expected)


def test_suite_classifies_with_all_three_classifiers(model, table, blob_test):
    suite = dknn.DefenseSuite(model, table, model.database(2))
    out = suite.classify(blob_test.images[:10])
    assert out.dnn.shape == out.knn.shape == out.dknn.shape == (10,)
    assert np.all((out.credibility >= 0) & (out.credibility <= 1))
    feats = network.extract_features(model.network, blob_test.images[:10], 2)
    np.testing.assert_array_equal(out.knn, neighbors.knn_predict_batch(model.database(2), feats, model.k))


def test_suite_rejects_table_of_another_ensemble(model, blob_test):
    table = CalibrationTable(scores=[0.5], num_layers=2, k=9)
    with pytest.raises(ContractError):
        dknn.DefenseSuite(model, table, model.database(2))


def test_calibration_round_trip(tmp_path, table, model):
    path = dknn.save_calibration(table, tmp_path / "t.cal", model.layers)
    loaded = dknn.load_calibration(path)
    np.testing.assert_array_equal(loaded.scores, table.scores)
    assert loaded.k == table.k and loaded.num_layers == table.num_layers


@pytest.mark.parametrize("score,expected", [(0.5, 0.0), (2.5, 0.5), (4.5, 1.0)])
def test_credibility_direct_counts(score, expected):
    table = CalibrationTable(scores=[1.0, 2.0, 3.0, 4.0], num_layers=4, k=5)
    assert dknn.credibility_from_scores(table, [score])[0] == expected
