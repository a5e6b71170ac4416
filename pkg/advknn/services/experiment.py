import logging
from typing import Callable, Dict, List, Optional, TypeVar

import pandas as pd

from advknn.config import settings
from advknn.core.artifacts import ArtifactStore
from advknn.core.exceptions import DependencyError
from advknn.core.reports import write_report_csv
from advknn.models.attack_models import AdversarialRecord, AttackConfig
from advknn.models.common_models import Guidance
from advknn.models.dataset_models import SplitSet
from advknn.models.metrics_models import MetricsReport
from advknn.models.neighbor_models import CalibrationTable, DknnModel, FeatureDatabase
from advknn.models.network_models import NetworkConfig, OptimizerSettings, TrainedNetwork
from advknn.models.run_models import RunConfig
from advknn.models.surrogate_models import SurrogateHead, SurrogateTrainConfig
from advknn.services import attacks, dataio, dknn, evaluation, neighbors, network, surrogate

logger = logging.getLogger(__name__)

T = TypeVar("T")


class ExperimentRunner:
    """Loads every artifact a run needs from the store, building what is missing when allowed.

    A command builds its own artifact; upstream artifacts must already exist
    unless ``build_missing`` is set (the sweep builds whole chains per grid point).
    """

    def __init__(self, store: ArtifactStore, workers: int = 1, build_missing: bool = False):
        self.store = store
        self.workers = workers
        self.build_missing = build_missing
        self._cache: Dict[tuple, object] = {}

    def _obtain(self, kind: str, config: RunConfig, command: str, load: Callable[[], T],
                build: Callable[[], T], save: Callable[[T, object], object], allow_build: Optional[bool]) -> T:
        key = (kind, self.store.path(kind, config))
        if key in self._cache:
            return self._cache[key]
        path = self.store.path(kind, config)
        if path.exists():
            value = load()
        elif allow_build or (allow_build is None and self.build_missing):
            logger.info(f"Building {kind} artifact {path.name}")
            value = build()
            self.store.write_once(path, lambda p: save(value, p))
        else:
            raise DependencyError(f"{command} needs the {kind} artifact {path.name}; run the command that builds it first",
                                  artifact=str(path))
        self._cache[key] = value
        return value

    def splits(self, config: RunConfig) -> SplitSet:
        key = ("splits", config.fingerprint("data"))
        if key not in self._cache:
            self._cache[key] = dataio.load_splits(config)
        return self._cache[key]

    def network_config(self, config: RunConfig) -> NetworkConfig:
        input_shape = self.splits(config).train.image_shape
        return network.network_config(config.arch, num_classes=config.num_classes, input_shape=input_shape)

    def checkpoint(self, config: RunConfig, build: Optional[bool] = None) -> TrainedNetwork:
        net_config = self.network_config(config)

        def train() -> TrainedNetwork:
            splits = self.splits(config)
            optimizer = OptimizerSettings(learning_rate=config.learning_rate, momentum=config.momentum,
                                          epochs=config.epochs, batch_size=config.batch_size, seed=config.seed)
            return network.train_base(splits.train, net_config, optimizer, test=splits.test,
                                      dtype=settings.default_dtype)

        return self._obtain(
            "checkpoint", config, "train-base",
            load=lambda: network.load_checkpoint(self.store.path("checkpoint", config), net_config),
            build=train,
            save=lambda net, p: network.save_checkpoint(net, p, config.echo(), config.fingerprint("checkpoint")),
            allow_build=build)

    def databases(self, config: RunConfig, build: Optional[bool] = None) -> List[FeatureDatabase]:
        def make() -> List[FeatureDatabase]:
            net = self.checkpoint(config)
            train = self.splits(config).train
            indices = neighbors.sample_indices(len(train), config.database_size, seed=config.seed)
            return [neighbors.build_database(net, train, layer, config.metric, indices, workers=self.workers)
                    for layer in range(1, net.config.num_capture_points + 1)]

        return self._obtain(
            "databases", config, "build-db",
            load=lambda: neighbors.load_databases(self.store.path("databases", config)),
            build=make,
            save=lambda dbs, p: neighbors.save_databases(dbs, p, config.echo(), config.fingerprint("databases")),
            allow_build=build)

    def dknn_model(self, config: RunConfig) -> DknnModel:
        return dknn.build_dknn_model(self.checkpoint(config), self.databases(config), config.k,
                                     layers=config.dknn_layers)

    def calibration(self, config: RunConfig, build: Optional[bool] = None) -> CalibrationTable:
        def make() -> CalibrationTable:
            return dknn.build_calibration(self.dknn_model(config), self.splits(config).calibration,
                                          workers=self.workers)

        return self._obtain(
            "calibration", config, "calibrate",
            load=lambda: dknn.load_calibration(self.store.path("calibration", config)),
            build=make,
            save=lambda table, p: dknn.save_calibration(table, p, self.dknn_model(config).layers, config.echo(),
                                                        config.fingerprint("calibration")),
            allow_build=build)

    def suite(self, config: RunConfig) -> dknn.DefenseSuite:
        model = self.dknn_model(config)
        knn_layer = network.last_conv_layer(model.network.config)
        return dknn.DefenseSuite(model, self.calibration(config), self._database(config, knn_layer))

    def _database(self, config: RunConfig, layer: int) -> FeatureDatabase:
        for db in self.databases(config):
            if db.layer == layer:
                return db
        raise DependencyError(f"no layer {layer} database for this run", artifact=str(self.store.path("databases", config)))

    def surrogate_config(self, config: RunConfig) -> SurrogateTrainConfig:
        return SurrogateTrainConfig(lambda_weight=config.lambda_weight, epochs=config.surrogate_epochs,
                                    batch_size=config.surrogate_batch_size,
                                    learning_rate=config.surrogate_learning_rate, seed=config.seed, k=config.k,
                                    use_consistency=config.guidance == Guidance.DKNNB_CL)

    def surrogate(self, config: RunConfig, build: Optional[bool] = None) -> Optional[SurrogateHead]:
        if config.guidance == Guidance.ORIGIN:
            return None

        def make() -> SurrogateHead:
            net = self.checkpoint(config)
            head = surrogate.train_surrogate(net, self._database(config, config.layer), self.splits(config).train,
                                             self.surrogate_config(config), workers=self.workers)
            surrogate.evaluate_surrogate(net, head, self._database(config, config.layer), self.splits(config).test,
                                         config.k, workers=self.workers)
            return head

        return self._obtain(
            "surrogate", config, "train-surrogate",
            load=lambda: surrogate.load_surrogate(self.store.path("surrogate", config)),
            build=make,
            save=lambda head, p: surrogate.save_surrogate(head, p, config.echo(), config.fingerprint("surrogate")),
            allow_build=build)

    def attack_config(self, config: RunConfig) -> AttackConfig:
        return AttackConfig(kind=config.attack, epsilon=config.epsilon, alpha=config.alpha, steps=config.steps,
                            guidance=config.guidance, layer=config.layer)

    def records(self, config: RunConfig, build: Optional[bool] = None) -> List[AdversarialRecord]:
        def make() -> List[AdversarialRecord]:
            return attacks.attack_batch(self.splits(config).test, self.checkpoint(config), self.attack_config(config),
                                        self.suite(config), head=self.surrogate(config), limit=config.attack_limit,
                                        workers=self.workers)

        return self._obtain(
            "records", config, "attack",
            load=lambda: attacks.load_records(self.store.path("records", config)),
            build=make,
            save=lambda recs, p: attacks.save_records(recs, p, config.echo(), config.fingerprint("records")),
            allow_build=build)

    def evaluate(self, config: RunConfig) -> MetricsReport:
        """Metrics and detection tradeoff of one attacked run, emitted as CSVs."""
        records = self.records(config)
        report = evaluation.evaluate_batch(records, config=config.echo())
        self.store.write_once(self.store.report("metrics", config, "records"),
                              lambda p: write_report_csv(pd.DataFrame([report.to_row()]), p, config.echo()))
        curve = evaluation.detection_tradeoff([r.credibility_clean for r in records], [r.credibility for r in records])
        self.store.write_once(self.store.report("detection", config, "records"),
                              lambda p: write_report_csv(evaluation.detection_frame(curve), p, config.echo()))
        return report

    def clean_accuracy(self, config: RunConfig) -> Dict[str, Optional[float]]:
        """Clean-accuracy row; the DkNNB column is filled when a head exists for this config."""
        head = None
        if config.guidance != Guidance.ORIGIN and self.store.exists("surrogate", config):
            head = self.surrogate(config)
        row = evaluation.clean_accuracy_row(self.suite(config), self.splits(config).test, head, workers=self.workers)
        self.store.write_once(self.store.report("clean", config, "clean"),
                              lambda p: write_report_csv(pd.DataFrame([row]), p, config.echo()))
        return row
