"""Full-scale checks against real MNIST. Run with ``ADVKNN_DATASET_DIR=/path/to/mnist pytest -m dataset``."""
import os
from pathlib import Path

import pytest

from advknn.core.artifacts import ArtifactStore
from advknn.models.common_models import Architecture, AttackKind, Guidance
from advknn.models.run_models import RunConfig
from advknn.services import evaluation, surrogate
from advknn.services.experiment import ExperimentRunner

DATASET_DIR = os.environ.get("ADVKNN_DATASET_DIR")
ATTACK_SAMPLES = 1000

pytestmark = [
    pytest.mark.dataset,
    pytest.mark.skipif(not DATASET_DIR, reason="ADVKNN_DATASET_DIR not set"),
]


@pytest.fixture(scope="module")
def runner(tmp_path_factory):
    store = ArtifactStore(tmp_path_factory.mktemp("mnist-runs"))
    store.init()
    return ExperimentRunner(store, workers=os.cpu_count() or 1, build_missing=True)


def _config(**overrides) -> RunConfig:
    base = {"data_dir": Path(DATASET_DIR), "attack_limit": ATTACK_SAMPLES}
    return RunConfig.model_validate({**base, **overrides})


def _fgsm(guidance: Guidance, **extra) -> RunConfig:
    return _config(attack=AttackKind.FGSM, guidance=guidance, epsilon=0.25, alpha=0.25, steps=1, **extra)


def _bim(guidance: Guidance) -> RunConfig:
    return _config(attack=AttackKind.BIM, guidance=guidance)


def test_clean_accuracy_of_all_classifiers(runner):
    row = runner.clean_accuracy(_config())
    assert row["dnn"] >= 0.97
    for name in ("knn", "dknn"):
        assert abs(row[name] - row["dnn"]) <= 0.02
    head = runner.surrogate(_config())
    suite = runner.suite(_config())
    with_head = evaluation.clean_accuracy_row(suite, runner.splits(_config()).test, head, workers=runner.workers)
    assert abs(with_head["dknnb"] - row["dnn"]) <= 0.02


def test_surrogate_agrees_with_knn_on_held_out_data(runner):
    config = _config()
    report = surrogate.evaluate_surrogate(runner.checkpoint(config), runner.surrogate(config),
                                          runner._database(config, config.layer), runner.splits(config).test,
                                          config.k, workers=runner.workers)
    assert report.agreement >= 0.95


def test_guided_fgsm_beats_the_plain_gradient(runner):
    origin = runner.evaluate(_fgsm(Guidance.ORIGIN))
    guided = runner.evaluate(_fgsm(Guidance.DKNNB_CL))
    assert guided.accuracy("knn") <= origin.accuracy("knn") - 0.15
    assert guided.accuracy("dknn") <= origin.accuracy("dknn") - 0.15


def test_guided_bim_breaks_dknn(runner):
    report = runner.evaluate(_bim(Guidance.DKNNB_CL))
    assert report.accuracy("dknn") <= 0.15
    assert report.mean_l2 > 0


@pytest.mark.parametrize("kind", [AttackKind.FGSM, AttackKind.BIM])
def test_consistency_term_orders_the_guidances(runner, kind):
    make = _fgsm if kind == AttackKind.FGSM else _bim
    reports = {g: runner.evaluate(make(g)) for g in (Guidance.ORIGIN, Guidance.DKNNB, Guidance.DKNNB_CL)}
    for name in ("knn", "dknn"):
        assert reports[Guidance.DKNNB_CL].accuracy(name) <= reports[Guidance.DKNNB].accuracy(name) + 0.02
        assert reports[Guidance.DKNNB].accuracy(name) <= reports[Guidance.ORIGIN].accuracy(name) + 0.02


def test_guided_adversaries_transfer_better_to_lenet5(runner):
    target = runner.suite(_config(arch=Architecture.LENET5))
    origin = evaluation.transfer_eval(runner.records(_fgsm(Guidance.ORIGIN)), target, workers=runner.workers)
    guided = evaluation.transfer_eval(runner.records(_fgsm(Guidance.DKNNB_CL)), target, workers=runner.workers)
    assert guided.accuracy("knn") < origin.accuracy("knn")
    assert guided.accuracy("dknn") < origin.accuracy("dknn")


def test_credibility_threshold_trades_detection_for_clean_rejections(runner):
    records = runner.records(_bim(Guidance.DKNNB_CL))
    curve = evaluation.detection_tradeoff([r.credibility_clean for r in records], [r.credibility for r in records])
    point = curve.at(0.5)
    assert abs(point.detected - 0.7142) <= 0.15
    assert abs(point.rejected - 0.4754) <= 0.15
