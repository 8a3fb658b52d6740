""" Command-line entry point: ``stdec <command> [options]``. """

import json
import logging
import sys
from argparse import ArgumentParser, ArgumentTypeError, Namespace
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from .clustering import elbow, kmedoid_dtw, write_elbow_csv
from .config import RunConfig, load_run_config, seed_from_environment
from .dataio import (Anomaly, RasterSeries, Scaling, SyntheticSpec, WindowedDataset,
                     generate_synthetic, ingest_csv, normalize, sliding_window, split,
                     write_labels_csv, write_series_csv)
from .dec import TrainedModel, Trainer, anomaly_distance, encode, load_model, save_model
from .errors import DataError, StdecError
from .metrics import (assemble_report, band_stability, evaluate_run, latent_dtw_correlation,
                      rand_index)
from .spatial import load_lambda_csv

logger = logging.getLogger(__name__)


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise ArgumentTypeError(f"{value} is not a positive integer")
    return value


def anomaly(text: str) -> Anomaly:
    """ ``SENSOR:START:LENGTH[:DEPTH]`` """
    parts = text.split(":")
    if len(parts) not in (3, 4):
        raise ArgumentTypeError(f"{text!r} is not SENSOR:START:LENGTH[:DEPTH]")
    try:
        fields = dict(zip(("sensor", "start", "length"), map(int, parts[:3])))
        if len(parts) == 4:
            fields["depth"] = float(parts[3])
        return Anomaly(**fields)
    except ValueError as error:
        raise ArgumentTypeError(f"Invalid anomaly {text!r}: {error}") from error


def common_parser() -> ArgumentParser:
    parser = ArgumentParser(add_help=False)
    parser.add_argument('--verbose', '-v', action="store_true")
    parser.add_argument('--quiet', '-q', action="store_true")
    parser.add_argument('--seed', type=int)
    parser.add_argument('--out', type=Path, help="output directory")
    return parser


def data_parser() -> ArgumentParser:
    parser = ArgumentParser(add_help=False)
    parser.add_argument('--config', type=Path, help="YAML or JSON run configuration")
    parser.add_argument('--csv', type=Path, help="wide or long sensor CSV")
    parser.add_argument('--sensor-order', nargs="+")
    parser.add_argument('--sensors', type=positive_int, help="synthetic sensor count")
    parser.add_argument('--days', type=positive_int, default=14)
    parser.add_argument('--regions', type=positive_int, default=3)
    parser.add_argument('--noise', type=float, default=0.0)
    parser.add_argument('--anomaly', type=anomaly, action="append", default=[])
    parser.add_argument('--w', '--window', dest="window", type=positive_int)
    parser.add_argument('--band', type=positive_int)
    parser.add_argument('--point-cost', choices=["squared_diff", "abs_diff"])
    parser.add_argument('--train-fraction', type=float)
    parser.add_argument('--lambda-csv', type=Path)
    return parser


def model_parser() -> ArgumentParser:
    parser = ArgumentParser(add_help=False)
    parser.add_argument('--variant', choices=["kmeans", "kmeans-dtw", "dec", "sdec"])
    parser.add_argument('--alpha0', type=float)
    parser.add_argument('--alpha1', type=float)
    parser.add_argument('--alpha2', type=float)
    parser.add_argument('--k', type=positive_int)
    parser.add_argument('--batch', type=positive_int)
    parser.add_argument('--epochs', type=int)
    parser.add_argument('--pretrain-epochs', type=int)
    parser.add_argument('--lr', type=float)
    parser.add_argument('--restarts', type=positive_int)
    parser.add_argument('--dtw-sample-size', type=positive_int)
    return parser


def build_parser() -> ArgumentParser:
    common, data, model = common_parser(), data_parser(), model_parser()
    parser = ArgumentParser(prog="stdec",
                            description="Spatio-temporal clustering of sensor time series")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser('synth', parents=[common],
                                help="generate a planted-cluster dataset")
    synth.add_argument('--sensors', type=positive_int, required=True)
    synth.add_argument('--days', type=positive_int, required=True)
    synth.add_argument('--regions', type=positive_int, required=True)
    synth.add_argument('--noise', type=float, default=0.0)
    synth.add_argument('--period', type=positive_int, default=5, help="minutes per timestamp")
    synth.add_argument('--anomaly', type=anomaly, action="append", default=[])

    ingest = commands.add_parser('ingest', parents=[common],
                                 help="normalise and window a sensor CSV")
    ingest.add_argument('csv', type=Path)
    ingest.add_argument('--sensor-order', nargs="+")
    ingest.add_argument('--w', '--window', dest="window", type=positive_int, default=12)
    ingest.add_argument('--train-fraction', type=float)

    commands.add_parser('train', parents=[common, data, model], help="train one model")

    evaluate = commands.add_parser('evaluate', parents=[common, data],
                                   help="score and compare trained models")
    evaluate.add_argument('checkpoints', nargs="+", type=Path)
    evaluate.add_argument('--export-latent', action="store_true")
    evaluate.add_argument('--elbow', nargs="+", type=positive_int, metavar="K")

    elbow_command = commands.add_parser('elbow', parents=[common, data, model],
                                        help="inertia curve over candidate k")
    elbow_command.add_argument('--ks', nargs="+", type=positive_int, required=True)
    elbow_command.add_argument('--checkpoint', type=Path)

    export = commands.add_parser('export', parents=[common, data],
                                 help="write latents, assignments and grids of a model")
    export.add_argument('checkpoint', type=Path)

    analyze = commands.add_parser('analyze', parents=[common, data],
                                  help="latent/DTW correlation and band stability studies")
    analyze.add_argument('checkpoints', nargs="*", type=Path)
    analyze.add_argument('--bands', nargs="+", type=positive_int, default=[1, 2, 4, 6, 12])
    analyze.add_argument('--k', type=positive_int, default=6)
    analyze.add_argument('--pairs', type=positive_int, default=1000)
    analyze.add_argument('--dtw-sample-size', type=positive_int)
    analyze.add_argument('--latent-sizes', nargs="+", type=positive_int, default=[],
                         metavar="D", help="pretrain one autoencoder per latent size")
    analyze.add_argument('--pretrain-epochs', type=int)
    analyze.add_argument('--batch', type=positive_int)
    return parser


def configure_logging(arguments: Namespace):
    level = logging.DEBUG if arguments.verbose else logging.WARNING if arguments.quiet \
        else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def overrides_from(arguments: Namespace) -> dict[str, Any]:
    """ Run configuration values given on the command line. """
    values = vars(arguments)
    overrides: dict[str, Any] = {
        "csv": values.get("csv"),
        "sensor_order": values.get("sensor_order"),
        "window": values.get("window"),
        "band": values.get("band"),
        "point_cost": values.get("point_cost"),
        "train_fraction": values.get("train_fraction"),
        "lambda_csv": values.get("lambda_csv"),
        "output": values.get("out"),
        "seed": values.get("seed"),
        "variant": values.get("variant"),
        "dtw_sample_size": values.get("dtw_sample_size"),
        "weights": {"alpha0": values.get("alpha0"), "alpha1": values.get("alpha1"),
                    "alpha2": values.get("alpha2")},
        "train": {"k": values.get("k"), "batch_size": values.get("batch"),
                  "max_epochs": values.get("epochs"),
                  "pretrain_epochs": values.get("pretrain_epochs"),
                  "learning_rate": values.get("lr"), "kmeans_restarts": values.get("restarts")},
    }
    if values.get("sensors") is not None:
        # without --seed the synthetic data follows the resolved run seed
        spec = SyntheticSpec.even(values["sensors"], values["days"], values["regions"],
                                  values["noise"], anomalies=values.get("anomaly") or [])
        overrides["synthetic"] = {**spec.model_dump(exclude={"seed"}), "seed": values.get("seed")}
    return overrides


@dataclass
class PreparedData:
    raw: RasterSeries
    scaling: Scaling
    train: WindowedDataset
    test: WindowedDataset | None = None
    labels: np.ndarray | None = None

    @property
    def evaluation(self) -> WindowedDataset:
        return self.test if self.test is not None else self.train


def prepare_data(config: RunConfig) -> PreparedData:
    """ Load or generate the series, fit the scaling on the training part and window it. """
    labels = None
    if config.csv is not None:
        raw = ingest_csv(config.csv, config.sensor_order)
    else:
        raw, labels = generate_synthetic(config.synthetic)
    if config.train_fraction is None:
        scaled, scaling = normalize(raw)
        return PreparedData(raw, scaling, sliding_window(scaled, config.window), labels=labels)
    train_raw, test_raw = split(raw, config.train_fraction, config.window)
    train_scaled, scaling = normalize(train_raw)
    return PreparedData(raw, scaling, sliding_window(train_scaled, config.window),
                        sliding_window(scaling.transform(test_raw), config.window), labels)


def output_directory(config: RunConfig) -> Path:
    config.output.mkdir(parents=True, exist_ok=True)
    return config.output


def write_json(data: Any, path: Path):
    with open(path, "w") as json_file:
        json.dump(data, json_file, indent=2, sort_keys=True)


def assignment_frame(dataset: WindowedDataset, hard: np.ndarray,
                     q: np.ndarray | None) -> pd.DataFrame:
    frame = pd.DataFrame({"t": dataset.times, "i": dataset.locations, "hard": hard})
    if q is not None:
        for cluster in range(q.shape[1]):
            frame[f"q_{cluster}"] = q[:, cluster]
    return frame


def grid_frame(dataset: WindowedDataset, values: np.ndarray) -> pd.DataFrame:
    """ One row per timestamp, one column per sensor. """
    grid = np.asarray(values).reshape(dataset.n_blocks, dataset.n_sensors)
    frame = pd.DataFrame(grid, columns=[str(sensor) for sensor in range(dataset.n_sensors)])
    frame.insert(0, "t", dataset.times[::dataset.n_sensors])
    return frame


def latent_frame(dataset: WindowedDataset, latents: np.ndarray) -> pd.DataFrame:
    frame = pd.DataFrame(latents, columns=[f"z{j}" for j in range(latents.shape[1])])
    frame.insert(0, "i", dataset.locations)
    frame.insert(0, "t", dataset.times)
    return frame


def cmd_synth(arguments: Namespace) -> int:
    seed = arguments.seed if arguments.seed is not None else seed_from_environment()
    spec = SyntheticSpec.even(arguments.sensors, arguments.days, arguments.regions,
                              arguments.noise, seed or 0, arguments.anomaly, arguments.period)
    series, labels = generate_synthetic(spec)
    out = arguments.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    write_series_csv(series, out / "series.csv")
    write_labels_csv(series.sensor_ids, labels, out / "labels.csv")
    logger.info("Wrote %d sensors x %d timestamps to %s",
                series.n_sensors, series.n_timestamps, out)
    return 0


def cmd_ingest(arguments: Namespace) -> int:
    raw = ingest_csv(arguments.csv, arguments.sensor_order)
    out = arguments.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    if arguments.train_fraction is None:
        scaled, scaling = normalize(raw)
        sliding_window(scaled, arguments.window).to_csv(out / "windows.csv")
    else:
        train_raw, test_raw = split(raw, arguments.train_fraction, arguments.window)
        train_scaled, scaling = normalize(train_raw)
        sliding_window(train_scaled, arguments.window).to_csv(out / "windows_train.csv")
        sliding_window(scaling.transform(test_raw), arguments.window).to_csv(
            out / "windows_test.csv")
    write_json(scaling.to_dict(), out / "scaling.json")
    return 0


def cmd_train(arguments: Namespace) -> int:
    config = load_run_config(arguments.config, overrides_from(arguments))
    data = prepare_data(config)
    out = output_directory(config)
    write_json(config.model_dump(mode="json"), out / "config.json")
    write_json(data.scaling.to_dict(), out / "scaling.json")
    dataset = data.train
    metadata = {"config": config.model_dump(mode="json"),
                "dataset_fingerprint": dataset.fingerprint(),
                "window": config.window, "n_sensors": dataset.n_sensors}
    train = config.train_config

    if config.variant == "kmeans-dtw":
        result = kmedoid_dtw(dataset.series, train.k, config.dtw, train.kmeans_restarts,
                             train.seed, config.dtw_sample_size)
        save_model(out / "checkpoint.npz", config.variant, None, result.centroids, metadata)
        assignment_frame(dataset, result.assignments, None).to_csv(out / "assignments.csv",
                                                                   index=False)
        pd.DataFrame(columns=["phase", "epoch", "spatial", "kl", "reconstruction", "total",
                              "changed"]).to_csv(out / "losses.csv", index=False)
        hard = result.assignments
    else:
        spatial = load_lambda_csv(config.lambda_csv) if config.lambda_csv else None
        result = Trainer(train, config.weights, config.trainer_variant, spatial).fit(dataset)
        save_model(out / "checkpoint.npz", config.variant, result.network,
                   result.head.centroids, metadata)
        assignment_frame(dataset, result.assignments.hard, result.assignments.q).to_csv(
            out / "assignments.csv", index=False)
        pd.DataFrame([log.to_dict() for log in result.history],
                     columns=["phase", "epoch", "spatial", "kl", "reconstruction", "total",
                              "changed"]).to_csv(out / "losses.csv", index=False)
        hard = result.assignments.hard
    if data.labels is not None:
        truth = data.labels[dataset.locations]
        logger.info("Rand index against the planted regions: %.4f", rand_index(truth, hard))
    logger.info("Wrote %s model to %s", config.variant, out)
    return 0


def load_checked(path: Path, dataset: WindowedDataset) -> TrainedModel:
    """ Load a checkpoint and make sure it was trained on this dataset. """
    model = load_model(path)
    if model.dataset_fingerprint != dataset.fingerprint():
        raise DataError(f"{path} was trained on a different dataset.")
    return model


def model_names(models: Sequence[TrainedModel]) -> list[str]:
    names = [model.variant for model in models]
    return [name if names.count(name) == 1 else f"{name}-{index}"
            for index, name in enumerate(names)]


def cmd_evaluate(arguments: Namespace) -> int:
    config = load_run_config(arguments.config, overrides_from(arguments))
    data = prepare_data(config)
    out = output_directory(config)
    models = [load_checked(path, data.train) for path in arguments.checkpoints]
    dataset = data.evaluation
    reports = []
    metric_series = {}
    for name, model in zip(model_names(models), models):
        prediction = model.predict(dataset, config.dtw)
        reports.append(evaluate_run(name, prediction.hard, dataset, prediction.latents,
                                    len(model.centroids), config.dtw))
        metric_series[name] = reports[-1].spatial_metric_series
        grid_frame(dataset, prediction.hard).to_csv(out / f"grid_{name}.csv", index=False)
        distances = anomaly_distance(prediction.hard, prediction.latents, model.head,
                                     dataset.n_sensors)
        grid_frame(dataset, distances).to_csv(
            out / f"anomaly_{name}.csv", index=False)
        if arguments.export_latent:
            latent_frame(dataset, prediction.latents).to_csv(out / f"latent_{name}.csv",
                                                             index=False)

    comparison = assemble_report(reports)
    comparison.table.to_csv(out / "comparison.csv", index=False)
    series = pd.DataFrame(metric_series)
    series.insert(0, "t", dataset.times[::dataset.n_sensors])
    series.to_csv(out / "spatial_metric.csv", index=False)
    write_json({"reports": [report.to_dict() for report in reports],
                "t_tests": comparison.tests}, out / "report.json")
    if arguments.elbow:
        _write_elbow(models[0], dataset, arguments.elbow, config, out)
    return 0


def _write_elbow(model: TrainedModel, dataset: WindowedDataset, ks: Sequence[int],
                 config: RunConfig, out: Path):
    latents = model.predict(dataset, config.dtw).latents
    curve = elbow(latents, ks, config.train.kmeans_restarts, config.seed)
    write_elbow_csv(curve, out / "elbow.csv")
    if not curve.has_knee:
        logger.warning("The inertia curve has no knee; reporting k=%d", curve.knee)


def cmd_elbow(arguments: Namespace) -> int:
    config = load_run_config(arguments.config, overrides_from(arguments))
    data = prepare_data(config)
    out = output_directory(config)
    if arguments.checkpoint is not None:
        model = load_checked(arguments.checkpoint, data.train)
    else:
        result = Trainer(config.train_config, variant="kmeans-ae").fit(data.train)
        model = TrainedModel("kmeans", result.network, result.head.centroids)
    _write_elbow(model, data.train, arguments.ks, config, out)
    return 0


def cmd_export(arguments: Namespace) -> int:
    config = load_run_config(arguments.config, overrides_from(arguments))
    data = prepare_data(config)
    out = output_directory(config)
    model = load_checked(arguments.checkpoint, data.train)
    dataset = data.evaluation
    prediction = model.predict(dataset, config.dtw)
    latent_frame(dataset, prediction.latents).to_csv(out / "latent.csv", index=False)
    assignment_frame(dataset, prediction.hard, prediction.q).to_csv(out / "assignments.csv",
                                                                    index=False)
    grid_frame(dataset, prediction.hard).to_csv(out / "grid.csv", index=False)
    distances = anomaly_distance(prediction.hard, prediction.latents, model.head,
                                 dataset.n_sensors)
    grid_frame(dataset, distances).to_csv(out / "anomaly.csv", index=False)
    return 0


def cmd_analyze(arguments: Namespace) -> int:
    config = load_run_config(arguments.config, overrides_from(arguments))
    data = prepare_data(config)
    out = output_directory(config)
    dataset = data.evaluation
    models = [load_checked(path, data.train) for path in arguments.checkpoints]
    rows = []
    for name, model in zip(model_names(models), models):
        if model.network is None:
            continue
        latents = model.predict(dataset, config.dtw).latents
        rows.append({"model": name, "latent_dim": latents.shape[1],
                     "correlation": latent_dtw_correlation(dataset.series, latents, config.dtw,
                                                           arguments.pairs, config.seed)})
    for size in arguments.latent_sizes:
        trainer = Trainer(config.train_config.with_latent_size(size), variant="kmeans-ae")
        latents = encode(trainer.pretrain(data.train), dataset)
        rows.append({"model": f"autoencoder-{size}", "latent_dim": size,
                     "correlation": latent_dtw_correlation(dataset.series, latents, config.dtw,
                                                           arguments.pairs, config.seed)})
    pd.DataFrame(rows, columns=["model", "latent_dim", "correlation"]).to_csv(
        out / "latent_dtw_correlation.csv", index=False)
    bands = [band for band in arguments.bands if band <= config.window]
    band_stability(dataset.series, arguments.k, bands, config.point_cost, seed=config.seed,
                   sample_size=arguments.dtw_sample_size).to_csv(out / "band_stability.csv",
                                                                 index=False)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "elbow": cmd_elbow,
    "export": cmd_export,
    "analyze": cmd_analyze,
}


def process(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    arguments = parser.parse_args(argv)
    configure_logging(arguments)
    try:
        return COMMANDS[arguments.command](arguments)
    except (StdecError, ValidationError) as error:
        print(f"stdec {arguments.command}: {error}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(process())
