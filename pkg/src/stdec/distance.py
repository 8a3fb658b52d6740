""" Temporal distances between windows: banded DTW and squared Euclidean distance.

DTW returns the raw accumulated point cost of the cheapest monotone warping path
within a Sakoe-Chiba band; no square root and no path-length normalisation.
"""

import logging
from typing import Literal

import numpy as np
from numba import njit
from pydantic import BaseModel, Field

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

PointCost = Literal["squared_diff", "abs_diff"]
BRUTEFORCE_MAX_LENGTH = 8


class DtwConfig(BaseModel):
    band: int = Field(6, ge=1)
    point_cost: PointCost = "squared_diff"

    @property
    def cost_code(self) -> int:
        return 0 if self.point_cost == "squared_diff" else 1


@njit(cache=True)
def _point_cost(a, b, cost_code):
    difference = a - b
    if cost_code == 0:
        return difference * difference
    return abs(difference)


@njit(cache=True)
def _banded_dtw(a, b, band, cost_code):
    n = a.shape[0]
    accumulated = np.full((n + 1, n + 1), np.inf)
    accumulated[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(max(1, i - band), min(n, i + band) + 1):
            best = min(accumulated[i - 1, j - 1], accumulated[i - 1, j], accumulated[i, j - 1])
            accumulated[i, j] = _point_cost(a[i - 1], b[j - 1], cost_code) + best
    return accumulated[n, n]


@njit(cache=True)
def _dtw_matrix(windows, band, cost_code):
    count = windows.shape[0]
    result = np.zeros((count, count))
    for first in range(count):
        for second in range(first + 1, count):
            value = _banded_dtw(windows[first], windows[second], band, cost_code)
            result[first, second] = value
            result[second, first] = value
    return result


@njit(cache=True)
def _dtw_cross(windows, references, band, cost_code):
    result = np.empty((windows.shape[0], references.shape[0]))
    for row in range(windows.shape[0]):
        for column in range(references.shape[0]):
            result[row, column] = _banded_dtw(windows[row], references[column], band, cost_code)
    return result


def _as_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.ascontiguousarray(a, dtype=float).ravel()
    b = np.ascontiguousarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ConfigurationError(f"Series lengths differ: {a.size} and {b.size}.")
    return a, b


def _check_band(cfg: DtwConfig, length: int):
    if cfg.band > length:
        raise ConfigurationError(f"Band {cfg.band} is wider than the series length {length}.")


def dtw(a: np.ndarray, b: np.ndarray, cfg: DtwConfig | None = None) -> float:
    """ Banded dynamic time warping cost between two equal-length series. """
    cfg = cfg or DtwConfig()
    a, b = _as_pair(a, b)
    if a.size == 0:
        return 0.0
    _check_band(cfg, a.size)
    return float(_banded_dtw(a, b, cfg.band, cfg.cost_code))


def dtw_bruteforce(a: np.ndarray, b: np.ndarray, cfg: DtwConfig | None = None) -> float:
    """ Minimum over an explicit enumeration of every monotone path inside the band.

    Only meant as a test oracle; refuses series longer than 8 points.
    """
    cfg = cfg or DtwConfig()
    a, b = _as_pair(a, b)
    n = a.size
    if n > BRUTEFORCE_MAX_LENGTH:
        raise ConfigurationError(
            f"Path enumeration is limited to {BRUTEFORCE_MAX_LENGTH} points, got {n}.")
    if n == 0:
        return 0.0
    _check_band(cfg, n)

    def cost(i, j):
        return float(_point_cost(a[i], b[j], cfg.cost_code))

    def paths(i, j, total):
        """ Totals of every path through (i, j), accumulated from the start like the recurrence. """
        total = total + cost(i, j)
        if i == n - 1 and j == n - 1:
            yield total
            return
        for step_i, step_j in ((1, 1), (1, 0), (0, 1)):
            next_i, next_j = i + step_i, j + step_j
            if next_i < n and next_j < n and abs(next_i - next_j) <= cfg.band:
                yield from paths(next_i, next_j, total)

    return min(paths(0, 0, 0.0))


def euclidean_sq(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _as_pair(a, b)
    return float(np.sum((a - b) ** 2))


def dtw_matrix(windows: np.ndarray, cfg: DtwConfig | None = None) -> np.ndarray:
    """ Symmetric matrix of pairwise DTW costs between rows of ``windows``. """
    cfg = cfg or DtwConfig()
    windows = np.ascontiguousarray(windows, dtype=float)
    _check_band(cfg, windows.shape[1])
    logger.debug("DTW matrix over %d windows", len(windows))
    return _dtw_matrix(windows, cfg.band, cfg.cost_code)


def dtw_to(windows: np.ndarray, references: np.ndarray, cfg: DtwConfig | None = None) -> np.ndarray:
    """ DTW cost from every row of ``windows`` to every row of ``references``. """
    cfg = cfg or DtwConfig()
    windows = np.ascontiguousarray(np.atleast_2d(windows), dtype=float)
    references = np.ascontiguousarray(np.atleast_2d(references), dtype=float)
    if windows.shape[1] != references.shape[1]:
        raise ConfigurationError("Windows and references should have the same length.")
    _check_band(cfg, windows.shape[1])
    return _dtw_cross(windows, references, cfg.band, cfg.cost_code)
