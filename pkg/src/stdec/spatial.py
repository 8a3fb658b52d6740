""" Geographic prior for the spatial loss.

Locations lie on a line. ``line_lambda`` gives every pair of locations a weight in
[-1, 1]: positive weights pull latent features together, negative ones push them apart.
Training pairs each point ``x_i`` with the latent snapshot ``z_k`` of every location at
the same timestamp, one timestamp block at a time.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd

from .errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

SYMMETRY_TOLERANCE = 1e-9


@dataclass
class SpatialWeights:
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        weights = self.weights
        if weights.ndim != 2 or weights.shape[0] != weights.shape[1]:
            raise ConfigurationError("Spatial weights should be a square matrix.")
        if not np.allclose(weights, weights.T, rtol=0.0, atol=SYMMETRY_TOLERANCE):
            raise ConfigurationError("Spatial weights should be symmetric.")
        if np.any(np.diag(weights) != 0.0):
            raise ConfigurationError("Spatial weights should be zero on the diagonal.")
        if np.any(np.abs(weights) > 1.0):
            raise ConfigurationError("Spatial weights should lie in [-1, 1].")
        for row, values in enumerate(weights):
            # strictly decreasing with line distance, on both sides of the diagonal
            if np.any(np.diff(values[row + 1:]) >= 0.0) or np.any(np.diff(values[:row]) <= 0.0):
                raise ConfigurationError(
                    f"Row {row} of the spatial weights does not decrease with distance.")

    @property
    def s(self) -> int:
        return self.weights.shape[0]


def one_hot(location: int, s: int) -> np.ndarray:
    if not 0 <= location < s:
        raise ConfigurationError(f"Location {location} is outside 0..{s - 1}.")
    encoding = np.zeros(s)
    encoding[location] = 1.0
    return encoding


def one_hot_rows(locations: np.ndarray, s: int) -> np.ndarray:
    locations = np.asarray(locations)
    if locations.size and (locations.min() < 0 or locations.max() >= s):
        raise ConfigurationError(f"Locations should lie in 0..{s - 1}.")
    return np.eye(s)[locations]


def line_lambda(s: int) -> SpatialWeights:
    """ ``1 - 2 |i - k| / (s + 1)`` off the diagonal, zero on it. """
    if s < 2:
        raise ConfigurationError("A line prior needs at least two locations.")
    labels = np.arange(1, s + 1)
    weights = 1.0 - 2.0 * np.abs(labels[:, np.newaxis] - labels[np.newaxis, :]) / (s + 1)
    np.fill_diagonal(weights, 0.0)
    return SpatialWeights(weights)


def load_lambda_csv(path: str | Path) -> SpatialWeights:
    """ Read an ``s x s`` weight matrix without header; it must satisfy the line invariants. """
    try:
        weights = pd.read_csv(path, header=None).to_numpy(dtype=float)
    except ValueError as error:
        raise DataError(f"{path} is not a numeric matrix: {error}") from error
    return SpatialWeights(weights)


@dataclass
class PairBatch:
    """ All ``s * s`` (i, k) pairs of one timestamp.

    Row ``i * s + k`` pairs window ``x_i`` with the detached latent ``z_k``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    pair_index: np.ndarray

    @property
    def sources(self) -> np.ndarray:
        return self.pair_index[:, 0]


def expand_pairs(points: np.ndarray, snapshot: np.ndarray, spatial: SpatialWeights,
                 time: int = 0) -> PairBatch:
    """ Pair every window of one timestamp block with the latent snapshot of every location.

    ``points`` holds the ``s`` windows of timestamp ``time`` in location order and
    ``snapshot`` the matching ``s`` detached latent rows.
    """
    s = spatial.s
    points = np.asarray(points, dtype=float)
    snapshot = np.asarray(snapshot, dtype=float)
    if points.shape[0] != s:
        raise ConfigurationError(
            f"Expected {s} points for timestamp {time}, got {points.shape[0]}.")
    if snapshot.shape[0] != s:
        raise ConfigurationError(
            f"Latent snapshot for timestamp {time} has {snapshot.shape[0]} rows, expected {s}.")
    sources = np.repeat(np.arange(s), s)
    others = np.tile(np.arange(s), s)
    inputs = np.hstack([points[sources], np.eye(s)[sources]])
    return PairBatch(inputs=inputs,
                     targets=snapshot[others],
                     weights=spatial.weights[sources, others],
                     pair_index=np.column_stack([sources, others, np.full(s * s, time)]))


def iter_pair_batches(series: np.ndarray, times: np.ndarray, snapshot: np.ndarray,
                      spatial: SpatialWeights) -> Iterator[PairBatch]:
    """ Lazily expand consecutive timestamp blocks of ``s`` rows. """
    s = spatial.s
    if len(series) % s or len(snapshot) != len(series):
        raise ConfigurationError("Series and snapshot should hold whole timestamp blocks.")
    for start in range(0, len(series), s):
        rows = slice(start, start + s)
        yield expand_pairs(series[rows], snapshot[rows], spatial, int(times[start]))
