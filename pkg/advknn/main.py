import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import pandas as pd

from advknn.config import load_run_config, settings
from advknn.core.artifacts import ArtifactStore
from advknn.core.exceptions import ConfigurationError, InvalidGridError
from advknn.core.middleware import run_command
from advknn.core.reports import write_report_csv
from advknn.models.common_models import Architecture, AttackKind, Guidance, SweepAxis
from advknn.models.run_models import RunConfig
from advknn.services import dataio, evaluation
from advknn.services.experiment import ExperimentRunner

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level.upper()),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

# flag dest -> RunConfig key
FLAG_KEYS = {
    "seed": "seed",
    "k": "k",
    "layer": "layer",
    "lambda_weight": "lambda",
    "epsilon": "epsilon",
    "alpha": "alpha",
    "steps": "steps",
    "guidance": "guidance",
    "workers": "workers",
    "out": "out",
    "attack": "attack",
    "arch": "arch",
    "limit": "attack_limit",
    "axis": "sweep_axis",
    "grid": "sweep_grid",
    "index": "panel_index",
    "k_show": "panel_k_show",
    "data_dir": "data_dir",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value run configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--k", type=int)
    common.add_argument("--layer", type=int, help="capture point of the surrogate head")
    common.add_argument("--lambda", dest="lambda_weight", type=float, help="weight of the classification term")
    common.add_argument("--epsilon", type=float)
    common.add_argument("--alpha", type=float)
    common.add_argument("--steps", type=int)
    common.add_argument("--guidance", choices=[g.value for g in Guidance] + ["dknnb+cl"])
    common.add_argument("--workers", type=int)
    common.add_argument("--out", type=Path)
    common.add_argument("--attack", choices=[a.value for a in AttackKind])
    common.add_argument("--arch", choices=[a.value for a in Architecture])
    common.add_argument("--limit", type=int, help="number of test samples to attack")
    common.add_argument("--axis", choices=[a.value for a in SweepAxis])
    common.add_argument("--grid", help="comma-separated sweep values")
    common.add_argument("--index", type=int, help="test sample drawn in neighbor panels")
    common.add_argument("--k-show", dest="k_show", type=int)
    common.add_argument("--data-dir", dest="data_dir", type=Path)

    parser = argparse.ArgumentParser(prog="advknn", description="kNN/DkNN defenses and surrogate-guided attacks")
    commands = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMAND_HELP.items():
        commands.add_parser(name, parents=[common], help=help_text)
    return parser


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {key: getattr(args, dest) for dest, key in FLAG_KEYS.items() if getattr(args, dest, None) is not None}
    return load_run_config(args.config, overrides)


def _print(payload: Any) -> None:
    print(json.dumps(payload, indent=2, default=str))


class Commands:
    """One method per subcommand; each emits its artifact into the run's output directory."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.store = ArtifactStore(config.out)
        self.store.init()
        self.runner = ExperimentRunner(self.store, workers=config.workers)

    def train_base(self) -> None:
        self.store.require_for("train-base", self.config)
        net = self.runner.checkpoint(self.config, build=True)
        _print({"checkpoint": self.store.path("checkpoint", self.config), **net.metadata.model_dump()})

    def build_db(self) -> None:
        self.store.require_for("build-db", self.config)
        databases = self.runner.databases(self.config, build=True)
        _print({"databases": self.store.path("databases", self.config),
                "layers": {db.layer: [db.size, db.width] for db in databases}})

    def calibrate(self) -> None:
        self.store.require_for("calibrate", self.config)
        table = self.runner.calibration(self.config, build=True)
        _print({"calibration": self.store.path("calibration", self.config), "samples": table.size,
                "layers": table.num_layers})

    def train_surrogate(self) -> None:
        if self.config.guidance == Guidance.ORIGIN:
            raise ConfigurationError("origin guidance attacks the base network directly and needs no surrogate head")
        self.store.require_for("train-surrogate", self.config)
        head = self.runner.surrogate(self.config, build=True)
        _print({"surrogate": self.store.path("surrogate", self.config), "layer": head.layer,
                "use_consistency": head.use_consistency})

    def attack(self) -> None:
        self.store.require_for("attack", self.config)
        records = self.runner.records(self.config, build=True)
        _print({"records": self.store.path("records", self.config), "samples": len(records)})

    def evaluate(self) -> None:
        self.store.require_for("evaluate", self.config)
        report = self.runner.evaluate(self.config)
        clean = self.runner.clean_accuracy(self.config)
        _print({"clean": clean, "metrics": report.to_row()})

    def sweep(self) -> None:
        self.store.require_for("sweep", self.config)
        if not self.config.sweep_grid:
            raise InvalidGridError("sweep needs a grid (--grid or sweep_grid in the config file)")
        self.runner.build_missing = True
        reports = evaluation.sweep(self.config.sweep_axis, self.config.sweep_grid, self.config, self.runner)
        frame = evaluation.sweep_frame(self.config.sweep_axis, self.config.sweep_grid, reports)
        path = self.store.report(f"sweep-{self.config.sweep_axis.value}", self.config)
        self.store.write_once(path, lambda p: write_report_csv(frame, p, self.config.echo()))
        _print({"sweep": path, "points": len(reports)})

    def transfer(self) -> None:
        self.store.require_for("transfer", self.config)
        records = self.runner.records(self.config)
        target_config = RunConfig.model_validate({**self.config.model_dump(by_alias=True),
                                                  "arch": self.config.transfer_arch})
        target = self.runner.suite(target_config)
        echo = {**self.config.echo(), "target_arch": self.config.transfer_arch.value}
        report = evaluation.transfer_eval(records, target, workers=self.config.workers, config=echo)
        path = self.store.report(f"transfer-{self.config.transfer_arch.value}", self.config, "records")
        self.store.write_once(path, lambda p: write_report_csv(pd.DataFrame([report.to_row()]), p, echo))
        _print({"transfer": path, "metrics": report.to_row()})

    def panel(self) -> None:
        self.store.require_for("panel", self.config)
        splits = self.runner.splits(self.config)
        index = self.config.panel_index
        if index >= len(splits.test):
            raise ConfigurationError(f"panel index {index} outside the {len(splits.test)}-sample test split")
        model = self.runner.dknn_model(self.config)
        out_dir = self.store.out_dir / "panels"
        k_show = self.config.panel_k_show
        echo = self.config.echo()
        tag = f"{self.config.arch.value}-{self.config.fingerprint('calibration')}-{index}-k{k_show}"
        written = evaluation.export_neighbor_panel(model, splits.train, splits.test.images[index], k_show, out_dir,
                                                   tag=f"{tag}-clean", run_config=echo, emit=self.store.write_once)
        if self.store.exists("records", self.config):
            records = self.runner.records(self.config)
            matching = [r for r in records if r.index == index]
            if matching:
                records_tag = f"{self.config.arch.value}-{self.config.fingerprint('records')}-{index}-k{k_show}"
                written += evaluation.export_neighbor_panel(model, splits.train, matching[0].adversarial, k_show,
                                                            out_dir, tag=f"{records_tag}-adversarial",
                                                            run_config=echo, emit=self.store.write_once)
            written.append(evaluation.export_record_gallery(
                records, out_dir / f"gallery-{self.config.arch.value}-{self.config.fingerprint('records')}.pgm",
                emit=self.store.write_once))
        _print({"panels": written})

    def fetch(self) -> None:
        _print({"files": dataio.fetch_idx_dataset(self.config.dataset, self.config.data_dir)})

    def status(self) -> None:
        _print(self.store.check_all(self.config).model_dump(mode="json"))

    def tables(self) -> None:
        clean, attacks = evaluation.collate_tables(self.store.out_dir)
        echo = self.config.echo()
        written: List[Path] = []
        for name, frame in (("table-clean", clean), ("table-attacks", attacks)):
            path = self.store.out_dir / f"{name}-{self.config.fingerprint()}.csv"
            written.append(self.store.write_once(path, lambda p, f=frame: write_report_csv(f, p, echo)))
        _print({"tables": written, "clean_rows": len(clean), "attack_rows": len(attacks)})


COMMAND_HELP: Dict[str, str] = {
    "train-base": "train the base network",
    "build-db": "extract per-layer training features",
    "calibrate": "score the calibration split",
    "train-surrogate": "fit the differentiable kNN head",
    "attack": "generate adversarial records",
    "evaluate": "metrics and detection tradeoff of stored records",
    "sweep": "attack and evaluate over a grid of epsilon, k or layer",
    "transfer": "re-classify stored records with the transfer architecture",
    "panel": "export nearest-neighbor image panels",
    "fetch": "download the IDX dataset files",
    "status": "list present and missing artifacts",
    "tables": "collate emitted CSVs into summary tables",
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command

    def handler() -> None:
        config = run_config_from_args(args)
        action: Callable[[], None] = getattr(Commands(config), command.replace("-", "_"))
        action()

    return run_command(command, handler)


if __name__ == "__main__":
    sys.exit(main())
