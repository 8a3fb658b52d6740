""" Evaluation of clustering runs.

Temporal compactness measures how close, under DTW, the windows of a cluster are to
its medoid. Spatial connectivity and dis-connectivity score each timestamp's row of
labels along the sensor line: a location is connected to the maximal run of
neighbouring locations sharing its label, and dis-connected from the locations with
the same label outside that run.
"""

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Sequence

import numpy as np
import pandas as pd
from scipy.special import betainc
from scipy.stats import pearsonr, spearmanr
from sklearn.metrics import rand_score

from .clustering import kmedoid_dtw
from .dataio import WindowedDataset
from .distance import DtwConfig, dtw, dtw_to
from .errors import ConfigurationError, DataError
from .spatial import SpatialWeights

logger = logging.getLogger(__name__)


@dataclass
class Compactness:
    per_cluster: np.ndarray
    medoids: np.ndarray
    empty: list[int] = field(default_factory=list)

    @property
    def mean(self) -> float:
        values = self.per_cluster[~np.isnan(self.per_cluster)]
        return float(values.mean()) if values.size else 0.0

    def normalized(self, windows: np.ndarray, cfg: DtwConfig | None = None) -> float:
        """ Mean compactness over the largest DTW cost a window of ``windows`` can have.

        The diagonal warping path always lies in the band, so no cost exceeds one point
        cost of the value range per window position and the result lies in [0, 1].
        """
        cfg = cfg or DtwConfig()
        windows = np.asarray(windows, dtype=float)
        spread = float(np.ptp(windows)) if windows.size else 0.0
        if spread == 0.0:
            return 0.0
        worst = spread ** 2 if cfg.point_cost == "squared_diff" else spread
        return self.mean / (windows.shape[1] * worst)


def temporal_compactness(hard: np.ndarray, windows: np.ndarray, latents: np.ndarray, k: int,
                         cfg: DtwConfig | None = None) -> Compactness:
    """ Mean DTW from the members of each cluster to its medoid.

    The medoid is the member whose latent lies nearest the mean latent of the cluster.
    Empty clusters get NaN and are listed in ``empty``.
    """
    hard = np.asarray(hard)
    if not len(hard) == len(windows) == len(latents):
        raise ConfigurationError("Assignments, windows and latents should have one row per point.")
    per_cluster = np.full(k, np.nan)
    medoids = np.full(k, -1)
    empty = []
    for cluster in range(k):
        members = np.flatnonzero(hard == cluster)
        if not members.size:
            empty.append(cluster)
            continue
        centre = latents[members].mean(axis=0)
        medoid = members[np.argmin(((latents[members] - centre) ** 2).sum(axis=1))]
        medoids[cluster] = medoid
        per_cluster[cluster] = dtw_to(windows[members], windows[medoid], cfg)[:, 0].mean()
    if empty:
        logger.warning("Clusters %s are empty and were left out of the compactness", empty)
    return Compactness(per_cluster, medoids, empty)


def _check_grid(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.shape[1] == 0:
        raise ConfigurationError("Assignment grid should be a (timestamps, locations) matrix.")
    return grid


def spatial_scores(grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ Connectivity and dis-connectivity of every timestamp row.

    A run of length ``m`` adds ``m`` for each of its ``m`` locations to the
    connectivity; each location adds to the dis-connectivity the number of same-label
    locations outside its run.
    """
    grid = _check_grid(grid)
    rows, s = grid.shape
    _, labels = np.unique(grid, return_inverse=True)
    labels = labels.reshape(rows, s)
    starts = np.ones((rows, s), dtype=bool)
    starts[:, 1:] = labels[:, 1:] != labels[:, :-1]
    runs = np.cumsum(starts, axis=1) - 1 + s * np.arange(rows)[:, np.newaxis]
    run_length = np.bincount(runs.ravel())[runs]
    label_keys = labels + (labels.max() + 1) * np.arange(rows)[:, np.newaxis]
    label_count = np.bincount(label_keys.ravel())[label_keys]
    return run_length.sum(axis=1), (label_count - run_length).sum(axis=1)


def connectivity(grid: np.ndarray) -> int:
    """ Total size of the connected runs containing each (timestamp, location).

    Examples
    --------
    >>> connectivity([["A", "A", "B", "B", "B"]])
    13
    """
    return int(spatial_scores(grid)[0].sum())


def disconnectivity(grid: np.ndarray) -> int:
    """ Total number of same-label locations outside each location's run.

    Examples
    --------
    >>> disconnectivity([["A", "B", "A"]])
    2
    """
    return int(spatial_scores(grid)[1].sum())


def spatial_metric_series(grid: np.ndarray) -> tuple[np.ndarray, float]:
    """ Per-timestamp connectivity minus dis-connectivity, both divided by ``s**2``,
    and their mean over timestamps. """
    connected, disconnected = spatial_scores(grid)
    s = np.shape(grid)[1]
    series = (connected - disconnected) / s ** 2
    return series, float(series.mean())


@dataclass
class WelchResult:
    t: float
    df: float
    p: float

    def to_dict(self) -> dict[str, float]:
        return {"t": self.t, "df": self.df, "p": self.p}


def welch_t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> WelchResult:
    """ Two-sided Welch t-test for a difference of means.

    The degrees of freedom follow Welch-Satterthwaite; the p-value is the regularised
    incomplete beta function ``I_x(df / 2, 1 / 2)`` with ``x = df / (df + t**2)``.
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise DataError("Each sample of a t-test needs at least two values.")
    spread_a = a.var(ddof=1) / len(a)
    spread_b = b.var(ddof=1) / len(b)
    spread = spread_a + spread_b
    if spread == 0.0:
        raise DataError("Both samples of the t-test have zero variance.")
    t = (a.mean() - b.mean()) / np.sqrt(spread)
    df = spread ** 2 / (spread_a ** 2 / (len(a) - 1) + spread_b ** 2 / (len(b) - 1))
    p = betainc(df / 2.0, 0.5, df / (df + t ** 2))
    return WelchResult(float(t), float(df), float(p))


def rand_index(labels_a: Sequence[int], labels_b: Sequence[int]) -> float:
    """ Rand index between two labelings; only meaningful against planted ground truth. """
    return float(rand_score(labels_a, labels_b))


def location_order_correlation(latents: np.ndarray, locations: np.ndarray,
                               spatial: SpatialWeights) -> float:
    """ Spearman correlation between per-location latent centroid distances and ``1 - lambda``.

    Close to one when the mean latents of the locations are laid out in line order.
    """
    centroids = np.vstack([latents[locations == location].mean(axis=0)
                           for location in range(spatial.s)])
    first, second = np.triu_indices(spatial.s, k=1)
    distances = np.linalg.norm(centroids[first] - centroids[second], axis=1)
    return float(spearmanr(distances, 1.0 - spatial.weights[first, second])[0])


def latent_dtw_correlation(windows: np.ndarray, latents: np.ndarray, cfg: DtwConfig | None = None,
                           pairs: int = 1000, seed: int = 0) -> float:
    """ Pearson correlation between latent Euclidean distance and window DTW over random pairs. """
    if len(windows) < 2 or len(latents) != len(windows):
        raise ConfigurationError("Need at least two windows, each with a latent.")
    rng = np.random.default_rng(seed)
    first = rng.integers(len(windows), size=pairs)
    second = (first + rng.integers(1, len(windows), size=pairs)) % len(windows)
    warped = np.array([dtw(windows[a], windows[b], cfg) for a, b in zip(first, second)])
    latent = np.linalg.norm(latents[first] - latents[second], axis=1)
    return float(pearsonr(latent, warped)[0])


def band_stability(windows: np.ndarray, k: int, bands: Sequence[int],
                   point_cost: str = "squared_diff", restarts: int = 5, seed: int = 0,
                   sample_size: int | None = None) -> pd.DataFrame:
    """ Rand index of k-medoid DTW labels at each band radius against the widest band. """
    bands = sorted(bands)
    labels = {band: kmedoid_dtw(windows, k, DtwConfig(band=band, point_cost=point_cost),
                                restarts, seed, sample_size).assignments
              for band in bands}
    reference = labels[bands[-1]]
    return pd.DataFrame({"band": bands,
                         "rand_index": [rand_index(labels[band], reference) for band in bands]})


@dataclass
class ClusterReport:
    """ Table-style scores of one run; sums are normalised by ``timestamps * s**2`` and
    compactness by the largest DTW cost a window can have, so every normalised score
    lies in [0, 1]. """

    model: str
    dataset_id: str
    compactness_per_cluster: np.ndarray
    compactness: float
    connectivity_raw: int
    connectivity: float
    disconnectivity_raw: int
    disconnectivity: float
    spatial_metric: float
    spatial_metric_series: np.ndarray
    empty_clusters: list[int] = field(default_factory=list)
    t_test: WelchResult | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "dataset_id": self.dataset_id,
            "compactness_per_cluster": [None if np.isnan(value) else float(value)
                                        for value in self.compactness_per_cluster],
            "compactness": self.compactness,
            "connectivity_raw": self.connectivity_raw,
            "connectivity": self.connectivity,
            "disconnectivity_raw": self.disconnectivity_raw,
            "disconnectivity": self.disconnectivity,
            "spatial_metric": self.spatial_metric,
            "empty_clusters": self.empty_clusters,
            "t_test": self.t_test.to_dict() if self.t_test is not None else None,
        }


def evaluate_run(model: str, hard: np.ndarray, dataset: WindowedDataset, latents: np.ndarray,
                 k: int, cfg: DtwConfig | None = None) -> ClusterReport:
    """ Score one run's hard assignments on the windowed dataset they were computed from. """
    hard = np.asarray(hard)
    grid = hard.reshape(dataset.n_blocks, dataset.n_sensors)
    compact = temporal_compactness(hard, dataset.series, latents, k, cfg)
    connected, disconnected = spatial_scores(grid)
    series, metric = spatial_metric_series(grid)
    scale = grid.size * dataset.n_sensors
    report = ClusterReport(
        model=model, dataset_id=dataset.fingerprint(),
        compactness_per_cluster=compact.per_cluster,
        compactness=compact.normalized(dataset.series, cfg),
        connectivity_raw=int(connected.sum()), connectivity=float(connected.sum() / scale),
        disconnectivity_raw=int(disconnected.sum()),
        disconnectivity=float(disconnected.sum() / scale),
        spatial_metric=metric, spatial_metric_series=series, empty_clusters=compact.empty)
    logger.info("%s: compactness %.4f, connectivity %.4f, dis-connectivity %.4f",
                model, report.compactness, report.connectivity, report.disconnectivity)
    return report


@dataclass
class Comparison:
    table: pd.DataFrame
    tests: list[dict[str, Any]] = field(default_factory=list)


def assemble_report(reports: Sequence[ClusterReport]) -> Comparison:
    """ One table row per run, plus a Welch t-test on the spatial metric series of every
    pair of runs. All runs must share a dataset. """
    if not reports:
        raise ConfigurationError("At least one run is needed for a report.")
    datasets = {report.dataset_id for report in reports}
    if len(datasets) > 1:
        raise DataError("Runs were evaluated on different datasets and cannot be compared.")
    table = pd.DataFrame({
        "model": [report.model for report in reports],
        "compactness": [report.compactness for report in reports],
        "connectivity": [report.connectivity for report in reports],
        "disconnectivity": [report.disconnectivity for report in reports],
    })
    tests = []
    for first, second in combinations(reports, 2):
        try:
            result = welch_t_test(first.spatial_metric_series, second.spatial_metric_series)
        except DataError as error:
            logger.warning("No t-test between %s and %s: %s", first.model, second.model, error)
            continue
        tests.append({"first": first.model, "second": second.model, **result.to_dict()})
        if len(reports) == 2:
            first.t_test = second.t_test = result
    return Comparison(table, tests)
