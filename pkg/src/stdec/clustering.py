""" K-means in latent or raw space, k-medoids under DTW and elbow selection of k. """

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .distance import DtwConfig, dtw_matrix, dtw_to
from .errors import ConfigurationError

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 300


@dataclass
class KmeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations: int
    history: list[float] = field(default_factory=list)
    medoids: np.ndarray | None = None


@dataclass
class ElbowCurve:
    ks: np.ndarray
    inertias: np.ndarray
    knee: int
    has_knee: bool = True

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"k": self.ks, "inertia": self.inertias,
                             "knee_flag": (self.ks == self.knee).astype(int)})


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, np.newaxis, :] - centroids[np.newaxis, :, :]) ** 2).sum(axis=2)


def _check_k(count: int, k: int):
    if k < 1:
        raise ConfigurationError("The number of clusters should be positive.")
    if k > count:
        raise ConfigurationError(f"Cannot form {k} clusters from {count} points.")


def _plus_plus(distances_to: np.ndarray, count: int, k: int, rng: np.random.Generator
               ) -> list[int]:
    """ k-means++ seeding from a ``count x count`` matrix of (squared) distances. """
    chosen = [int(rng.integers(count))]
    closest = distances_to[chosen[0]].copy()
    while len(chosen) < k:
        total = closest.sum()
        if total > 0.0:
            candidate = int(rng.choice(count, p=closest / total))
        else:
            remaining = np.setdiff1d(np.arange(count), chosen)
            candidate = int(rng.choice(remaining))
        chosen.append(candidate)
        closest = np.minimum(closest, distances_to[candidate])
    return chosen


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iterations: int) -> KmeansResult:
    history = []
    assignments = np.full(len(points), -1)
    for iteration in range(1, max_iterations + 1):
        distances = squared_distances(points, centroids)
        new_assignments = distances.argmin(axis=1)
        history.append(float(distances[np.arange(len(points)), new_assignments].sum()))
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for cluster in range(len(centroids)):
            members = assignments == cluster
            if members.any():
                centroids[cluster] = points[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its centroid
                own = distances[np.arange(len(points)), assignments]
                farthest = int(own.argmax())
                logger.debug("Re-seeding empty cluster %d at point %d", cluster, farthest)
                centroids[cluster] = points[farthest]
                assignments[farthest] = cluster
                distances[farthest] = 0.0
    distances = squared_distances(points, centroids)
    assignments = distances.argmin(axis=1)
    inertia = float(distances[np.arange(len(points)), assignments].sum())
    return KmeansResult(centroids, assignments, inertia, iteration, history)


def kmeans(points: np.ndarray, k: int, restarts: int = 5, seed: int = 0,
           max_iterations: int = MAX_ITERATIONS) -> KmeansResult:
    """ Lloyd's algorithm from k-means++ seeds; the best of ``restarts`` runs is returned. """
    points = np.asarray(points, dtype=float)
    _check_k(len(points), k)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        chosen = _plus_plus_points(points, k, rng)
        result = _lloyd(points, points[chosen].copy(), max_iterations)
        if best is None or result.inertia < best.inertia:
            best = result
    logger.debug("k-means with k=%d: inertia %.6g after %d iterations",
                 k, best.inertia, best.iterations)
    return best


def _plus_plus_points(points: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    """ k-means++ seeding without the full distance matrix. """
    count = len(points)
    chosen = [int(rng.integers(count))]
    closest = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        total = closest.sum()
        if total > 0.0:
            candidate = int(rng.choice(count, p=closest / total))
        else:
            candidate = int(rng.choice(np.setdiff1d(np.arange(count), chosen)))
        chosen.append(candidate)
        closest = np.minimum(closest, ((points - points[candidate]) ** 2).sum(axis=1))
    return chosen


def _pam(costs: np.ndarray, medoids: list[int], max_iterations: int
         ) -> tuple[np.ndarray, np.ndarray, float, int, list[float]]:
    medoids_array = np.asarray(medoids)
    history = []
    for iteration in range(1, max_iterations + 1):
        assignments = costs[:, medoids_array].argmin(axis=1)
        history.append(float(costs[np.arange(len(costs)), medoids_array[assignments]].sum()))
        updated = medoids_array.copy()
        for cluster in range(len(medoids_array)):
            members = np.flatnonzero(assignments == cluster)
            if members.size:
                within = costs[np.ix_(members, members)].sum(axis=1)
                updated[cluster] = members[within.argmin()]
        if np.array_equal(updated, medoids_array):
            break
        medoids_array = updated
    assignments = costs[:, medoids_array].argmin(axis=1)
    total = float(costs[np.arange(len(costs)), medoids_array[assignments]].sum())
    return medoids_array, assignments, total, iteration, history


def kmedoid_dtw(windows: np.ndarray, k: int, cfg: DtwConfig | None = None, restarts: int = 5,
                seed: int = 0, sample_size: int | None = None,
                max_iterations: int = MAX_ITERATIONS) -> KmeansResult:
    """ PAM k-medoids under DTW (the k-means-DTW baseline).

    Medoids are fitted on a seeded subsample of ``sample_size`` windows when given;
    every window is then assigned to its nearest medoid.
    """
    cfg = cfg or DtwConfig()
    windows = np.asarray(windows, dtype=float)
    _check_k(len(windows), k)
    rng = np.random.default_rng(seed)
    if sample_size is not None and sample_size < len(windows):
        _check_k(sample_size, k)
        sample = np.sort(rng.choice(len(windows), size=sample_size, replace=False))
    else:
        sample = np.arange(len(windows))
    costs = dtw_matrix(windows[sample], cfg)

    best = None
    for _ in range(max(1, restarts)):
        seeds = _plus_plus(costs, len(sample), k, rng)
        fitted = _pam(costs, seeds, max_iterations)
        if best is None or fitted[2] < best[2]:
            best = fitted
    medoids, assignments, inertia, iterations, history = best
    medoids = sample[medoids]
    if len(sample) < len(windows):
        assignments, inertia = assign_medoids(windows, windows[medoids], cfg)
    logger.debug("k-medoids with k=%d: total DTW %.6g", k, inertia)
    return KmeansResult(windows[medoids].copy(), assignments, inertia, iterations, history, medoids)


def assign_medoids(windows: np.ndarray, medoid_windows: np.ndarray, cfg: DtwConfig | None = None
                   ) -> tuple[np.ndarray, float]:
    """ Nearest medoid of every window under DTW and the summed cost. """
    costs = dtw_to(windows, medoid_windows, cfg)
    assignments = costs.argmin(axis=1)
    return assignments, float(costs[np.arange(len(costs)), assignments].sum())


def elbow(points: np.ndarray, k_candidates: Sequence[int], restarts: int = 5,
          seed: int = 0) -> ElbowCurve:
    """ Inertia for each candidate k and the knee of the curve.

    The knee is the candidate farthest from the chord joining the first and last
    points once both axes are min-max scaled; a straight curve has no knee and the
    smallest k is returned with ``has_knee`` False.
    A restart can land in a worse local optimum than the one found for a smaller k, so
    each inertia is capped by those before it to keep the curve non-increasing.
    """
    ks = np.asarray(sorted(set(k_candidates)), dtype=int)
    if len(ks) < 3:
        raise ConfigurationError(
            "The elbow method needs at least three distinct candidate values of k.")
    inertias = np.array([kmeans(points, int(k), restarts, seed).inertia for k in ks])
    raised = np.flatnonzero(np.diff(inertias) > 0.0) + 1
    if raised.size:
        logger.warning("k-means inertia rose at k=%s; keeping the lower value from smaller k",
                       ks[raised].tolist())
        inertias = np.minimum.accumulate(inertias)
    knee, has_knee = find_knee(ks, inertias)
    logger.info("Elbow over k=%s: knee at %d", ks.tolist(), knee)
    return ElbowCurve(ks, inertias, knee, has_knee)


def find_knee(ks: np.ndarray, inertias: np.ndarray, tolerance: float = 1e-12) -> tuple[int, bool]:
    ks = np.asarray(ks, dtype=float)
    inertias = np.asarray(inertias, dtype=float)
    x = (ks - ks.min()) / (ks.max() - ks.min())
    spread = inertias.max() - inertias.min()
    y = (inertias - inertias.min()) / spread if spread > 0.0 else np.zeros_like(inertias)
    chord = np.array([x[-1] - x[0], y[-1] - y[0]])
    length = np.linalg.norm(chord)
    distances = np.abs(chord[0] * (y - y[0]) - chord[1] * (x - x[0])) / length
    if distances.max() <= tolerance:
        return int(ks[0]), False
    return int(ks[distances.argmax()]), True


def write_elbow_csv(curve: ElbowCurve, path: str | Path) -> None:
    curve.to_frame().to_csv(path, index=False)
