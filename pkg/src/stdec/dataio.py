""" Ingestion, scaling, windowing and synthetic generation of georeferenced series.

The raw data is a ``sensors x timestamps x features`` array. Sensor order defines the
line adjacency used by the spatial prior: sensor ``i`` neighbours ``i - 1`` and ``i + 1``.
"""

import hashlib
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, Field, model_validator

from .errors import DataError

logger = logging.getLogger(__name__)

MAX_MISSING_FRACTION = 0.1
DEFAULT_PERIOD = pd.Timedelta(minutes=5)


@dataclass
class RasterSeries:
    values: np.ndarray
    sensor_ids: list[str]
    times: pd.DatetimeIndex | None = None
    timestamp_period: pd.Timedelta = DEFAULT_PERIOD
    filled_cells: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3:
            raise DataError("Series values should be a (sensors, timestamps, features) array.")
        if len(self.sensor_ids) != self.values.shape[0]:
            raise DataError(
                f"{len(self.sensor_ids)} sensor ids given for {self.values.shape[0]} sensors.")
        if self.times is not None and len(self.times) != self.values.shape[1]:
            raise DataError(
                f"{len(self.times)} timestamps given for {self.values.shape[1]} columns.")

    @property
    def n_sensors(self) -> int:
        return self.values.shape[0]

    @property
    def n_timestamps(self) -> int:
        return self.values.shape[1]

    @property
    def n_features(self) -> int:
        return self.values.shape[2]

    def slice_time(self, start: int, stop: int) -> "RasterSeries":
        times = self.times[start:stop] if self.times is not None else None
        return replace(self, values=self.values[:, start:stop], times=times)


def ingest_csv(path: str | Path, sensor_order: Sequence[str] | None = None,
               timestamp_column: str = "timestamp") -> RasterSeries:
    """ Read a wide (``timestamp,s1,s2,...``) or long (``timestamp,sensor_id,flow``) CSV.

    Missing cells are filled by linear interpolation along time; a sensor with more
    than 10% missing cells is rejected, as are duplicated or decreasing timestamps.
    """
    frame = pd.read_csv(path)
    if timestamp_column not in frame.columns:
        raise DataError(f"{path} has no {timestamp_column!r} column.")
    frame[timestamp_column] = pd.to_datetime(frame[timestamp_column])

    if {"sensor_id", "flow"} <= set(frame.columns):
        frame["sensor_id"] = frame["sensor_id"].astype(str)
        if frame.duplicated([timestamp_column, "sensor_id"]).any():
            raise DataError(f"{path} repeats a (timestamp, sensor_id) pair.")
        if not frame[timestamp_column].drop_duplicates().is_monotonic_increasing:
            raise DataError(f"Timestamps in {path} are not increasing.")
        wide = frame.pivot(index=timestamp_column, columns="sensor_id", values="flow")
        found = list(pd.unique(frame["sensor_id"]))
    else:
        stamps = frame[timestamp_column]
        if stamps.duplicated().any():
            raise DataError(f"{path} has duplicated timestamps.")
        if not stamps.is_monotonic_increasing:
            raise DataError(f"Timestamps in {path} are not increasing.")
        wide = frame.set_index(timestamp_column)
        wide.columns = [str(column) for column in wide.columns]
        found = list(wide.columns)

    sensors = [str(sensor) for sensor in sensor_order] if sensor_order else found
    absent = [sensor for sensor in sensors if sensor not in wide.columns]
    if absent:
        raise DataError(f"Sensors {absent} are not present in {path}.")
    wide = wide[sensors].apply(pd.to_numeric, errors="coerce")

    missing = wide.isna().mean()
    too_sparse = missing[missing > MAX_MISSING_FRACTION]
    if not too_sparse.empty:
        raise DataError(
            f"Sensors {list(too_sparse.index)} have more than"
            f" {MAX_MISSING_FRACTION:.0%} missing values.")
    filled = int(wide.isna().sum().sum())
    if filled:
        logger.warning("Interpolated %d missing cells in %s", filled, path)
        wide = wide.interpolate(method="linear", limit_direction="both")

    times = pd.DatetimeIndex(wide.index)
    period = times.to_series().diff().median() if len(times) > 1 else DEFAULT_PERIOD
    return RasterSeries(wide.to_numpy(dtype=float).T[:, :, np.newaxis], sensors,
                        times, period, filled)


@dataclass
class Scaling:
    """ Per-feature min-max record; ``transform`` maps the fitted range onto [0, 1]. """

    minimum: np.ndarray
    maximum: np.ndarray

    def transform(self, series: RasterSeries) -> RasterSeries:
        self._check(series)
        scaled = (series.values - self.minimum) / (self.maximum - self.minimum)
        return replace(series, values=scaled)

    def inverse_transform(self, series: RasterSeries) -> RasterSeries:
        self._check(series)
        return replace(series, values=series.values * (self.maximum - self.minimum) + self.minimum)

    def _check(self, series: RasterSeries):
        if series.n_features != len(self.minimum):
            raise DataError(
                f"Scaling fitted on {len(self.minimum)} features, series has {series.n_features}.")

    def to_dict(self) -> dict[str, list[float]]:
        return {"minimum": self.minimum.tolist(), "maximum": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, data: dict[str, list[float]]) -> "Scaling":
        return cls(np.asarray(data["minimum"], dtype=float),
                   np.asarray(data["maximum"], dtype=float))


def fit_scaling(series: RasterSeries) -> Scaling:
    minimum = series.values.min(axis=(0, 1))
    maximum = series.values.max(axis=(0, 1))
    constant = np.flatnonzero(maximum <= minimum)
    if constant.size:
        raise DataError(f"Feature {int(constant[0])} is constant and cannot be rescaled.")
    return Scaling(minimum, maximum)


def normalize(raw: RasterSeries, fit_on: RasterSeries | None = None
              ) -> tuple[RasterSeries, Scaling]:
    """ Min-max rescale every feature; the range comes from ``fit_on`` (the training
    split) when given. Values outside the fitted range are not clipped. """
    scaling = fit_scaling(fit_on if fit_on is not None else raw)
    return scaling.transform(raw), scaling


@dataclass
class WindowedDataset:
    """ Window-mean-centred segments, ordered by (time, location).

    Point ``n`` covers timestamps ``times[n] - window + 1 .. times[n]`` of sensor
    ``locations[n]``; the ``n_sensors`` points of one timestamp are contiguous.
    """

    series: np.ndarray
    locations: np.ndarray
    times: np.ndarray
    window_means: np.ndarray
    window: int
    n_sensors: int
    n_features: int = 1

    def __len__(self) -> int:
        return len(self.series)

    @property
    def n_blocks(self) -> int:
        return len(self) // self.n_sensors

    def block(self, index: int) -> slice:
        """ Rows of the ``index``-th timestamp block. """
        return slice(index * self.n_sensors, (index + 1) * self.n_sensors)

    def restored(self) -> np.ndarray:
        """ Windows with their means added back. """
        means = np.repeat(self.window_means, self.window, axis=1)
        return self.series + means

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.series).tobytes())
        digest.update(np.asarray([self.window, self.n_sensors, self.n_features]).tobytes())
        return digest.hexdigest()

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.series, columns=[f"v{j}" for j in range(self.series.shape[1])])
        frame.insert(0, "i", self.locations)
        frame.insert(0, "t", self.times)
        if self.n_features == 1:
            frame["window_mean"] = self.window_means[:, 0]
        else:
            for feature in range(self.n_features):
                frame[f"window_mean_{feature}"] = self.window_means[:, feature]
        return frame

    def to_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path: str | Path) -> "WindowedDataset":
        frame = pd.read_csv(path, float_precision="round_trip")
        values = frame[[column for column in frame.columns if column.startswith("v")]]
        means = frame[[column for column in frame.columns if column.startswith("window_mean")]]
        n_features = means.shape[1]
        return cls(values.to_numpy(dtype=float), frame["i"].to_numpy(), frame["t"].to_numpy(),
                   means.to_numpy(dtype=float), values.shape[1] // n_features,
                   int(frame["i"].max()) + 1, n_features)


def sliding_window(series: RasterSeries, window: int) -> WindowedDataset:
    """ Stride-1 windows of every sensor, each minus its own mean.

    Multi-feature windows are flattened feature-major into ``window * features`` values.
    """
    sensors, timestamps, features = series.values.shape
    if not 1 <= window <= timestamps:
        raise DataError(f"Window {window} does not fit in {timestamps} timestamps.")
    # (sensors, blocks, features, window) -> (blocks, sensors, features, window)
    windows = sliding_window_view(series.values, window, axis=1).transpose(1, 0, 2, 3)
    blocks = windows.shape[0]
    means = windows.mean(axis=3)
    centred = windows - means[..., np.newaxis]
    return WindowedDataset(
        series=centred.reshape(blocks * sensors, features * window),
        locations=np.tile(np.arange(sensors), blocks),
        times=np.repeat(np.arange(blocks) + window - 1, sensors),
        window_means=means.reshape(blocks * sensors, features),
        window=window, n_sensors=sensors, n_features=features)


def split(series: RasterSeries, train_fraction: float, window: int
          ) -> tuple[RasterSeries, RasterSeries]:
    """ Split by time: the first ``train_fraction`` of timestamps trains, the rest tests. """
    if not 0.0 < train_fraction < 1.0:
        raise DataError("The training fraction should lie strictly between 0 and 1.")
    cut = int(np.floor(series.n_timestamps * train_fraction))
    if cut < window or series.n_timestamps - cut < window:
        raise DataError(
            f"Splitting {series.n_timestamps} timestamps at {cut} leaves a side"
            f" shorter than the window {window}.")
    return series.slice_time(0, cut), series.slice_time(cut, series.n_timestamps)


class Peak(BaseModel):
    hour: float = Field(ge=0.0, lt=24.0)
    width_hours: float = Field(1.5, gt=0.0)
    height: float = 50.0


class Prototype(BaseModel):
    """ Daily pattern: a sinusoid over the day plus Gaussian rush-hour peaks. """

    base: float = 100.0
    amplitude: float = 40.0
    phase_hours: float = 0.0
    peaks: list[Peak] = Field(default_factory=list)

    def evaluate(self, hours: np.ndarray) -> np.ndarray:
        curve = self.base + self.amplitude * np.sin(2.0 * np.pi * (hours - self.phase_hours) / 24.0)
        for peak in self.peaks:
            offset = (hours - peak.hour + 12.0) % 24.0 - 12.0
            curve = curve + peak.height * np.exp(-0.5 * (offset / peak.width_hours) ** 2)
        return curve


class Anomaly(BaseModel):
    """ Multiplicative drop of ``depth`` over ``length`` timestamps of one sensor. """

    sensor: int = Field(ge=0)
    start: int = Field(ge=0)
    length: int = Field(ge=1)
    depth: float = Field(0.8, gt=0.0, le=1.0)


def default_prototype(region: int, n_regions: int) -> Prototype:
    offset = 24.0 * region / n_regions
    return Prototype(
        base=80.0 + 20.0 * region,
        amplitude=30.0 + 10.0 * region,
        phase_hours=offset,
        peaks=[Peak(hour=(8.0 + offset) % 24.0, width_hours=1.0 + 0.5 * region, height=60.0),
               Peak(hour=(17.0 + offset / 2.0) % 24.0, width_hours=1.5,
                    height=40.0 + 15.0 * region)])


class SyntheticSpec(BaseModel):
    """ Sensors on a line, partitioned into contiguous regions sharing a daily prototype. """

    sensors: int = Field(ge=1)
    days: int = Field(ge=1)
    regions: list[tuple[int, int]]
    prototypes: list[Prototype]
    noise_std: float = Field(0.0, ge=0.0)
    seed: int = 0
    period_minutes: int = Field(5, ge=1)
    anomalies: list[Anomaly] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_partition(self) -> "SyntheticSpec":
        if len(self.regions) != len(self.prototypes):
            raise ValueError("Every region needs exactly one prototype.")
        expected = 0
        for start, stop in sorted(self.regions):
            if stop <= start:
                raise ValueError(f"Region [{start}, {stop}) is empty.")
            if start != expected:
                raise ValueError("Regions should partition the sensors into contiguous ranges.")
            expected = stop
        if expected != self.sensors:
            raise ValueError(f"Regions cover {expected} sensors, not {self.sensors}.")
        if (24 * 60) % self.period_minutes:
            raise ValueError("The sampling period should divide one day.")
        for anomaly in self.anomalies:
            if anomaly.sensor >= self.sensors:
                raise ValueError(f"Anomaly on sensor {anomaly.sensor} is outside the line.")
        return self

    @property
    def steps_per_day(self) -> int:
        return 24 * 60 // self.period_minutes

    @classmethod
    def even(cls, sensors: int, days: int, n_regions: int, noise_std: float = 0.0,
             seed: int = 0, anomalies: Sequence[Anomaly] = (),
             period_minutes: int = 5) -> "SyntheticSpec":
        """ Evenly sized contiguous regions with distinct default prototypes. """
        if not 1 <= n_regions <= sensors:
            raise DataError(f"Cannot split {sensors} sensors into {n_regions} regions.")
        bounds = np.linspace(0, sensors, n_regions + 1).round().astype(int)
        return cls(sensors=sensors, days=days,
                   regions=[(int(a), int(b)) for a, b in zip(bounds, bounds[1:])],
                   prototypes=[default_prototype(region, n_regions) for region in range(n_regions)],
                   noise_std=noise_std, seed=seed, anomalies=list(anomalies),
                   period_minutes=period_minutes)


def generate_synthetic(spec: SyntheticSpec) -> tuple[RasterSeries, np.ndarray]:
    """ Planted-cluster series and the region label of every sensor. """
    timestamps = spec.days * spec.steps_per_day
    hours = (np.arange(timestamps) * spec.period_minutes / 60.0) % 24.0
    values = np.empty((spec.sensors, timestamps))
    labels = np.empty(spec.sensors, dtype=int)
    for region, ((start, stop), prototype) in enumerate(zip(spec.regions, spec.prototypes)):
        values[start:stop] = prototype.evaluate(hours)
        labels[start:stop] = region
    if spec.noise_std > 0.0:
        rng = np.random.default_rng(spec.seed)
        values = values + rng.normal(0.0, spec.noise_std, values.shape)
    for anomaly in spec.anomalies:
        values[anomaly.sensor, anomaly.start:anomaly.start + anomaly.length] *= 1.0 - anomaly.depth

    period = pd.Timedelta(minutes=spec.period_minutes)
    times = pd.date_range("2016-01-01", periods=timestamps, freq=period)
    sensor_ids = [f"s{index}" for index in range(spec.sensors)]
    return RasterSeries(values[:, :, np.newaxis], sensor_ids, times, period), labels


def write_series_csv(series: RasterSeries, path: str | Path) -> None:
    """ Wide CSV ``timestamp,<sensor ids>`` of a single-feature series. """
    if series.n_features != 1:
        raise DataError("Only single-feature series can be written in wide format.")
    times = series.times if series.times is not None else pd.RangeIndex(series.n_timestamps)
    frame = pd.DataFrame(series.values[:, :, 0].T, columns=series.sensor_ids)
    frame.insert(0, "timestamp", times)
    frame.to_csv(path, index=False)


def write_labels_csv(sensor_ids: Sequence[str], labels: np.ndarray, path: str | Path) -> None:
    pd.DataFrame({"sensor": list(sensor_ids), "region": labels}).to_csv(path, index=False)
