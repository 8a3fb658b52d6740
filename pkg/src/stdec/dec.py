""" Deep embedded clustering with an optional spatial loss.

The clustering head holds ``k`` centroids in latent space. Training follows the
usual three stages: pretrain the autoencoder on reconstruction alone, initialise the
centroids with k-means on the latents, then jointly minimise

    alpha0 * spatial + alpha1 * KL(P || Q) + alpha2 * reconstruction

where ``Q`` is the Student-t soft assignment and ``P`` the sharpened target
distribution, refreshed once per epoch together with the latent snapshot used as the
detached target of the spatial loss.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Literal, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.special import rel_entr

from .clustering import assign_medoids, kmeans, squared_distances
from .dataio import WindowedDataset
from .distance import DtwConfig
from .errors import ConfigurationError, DataError
from .network import (HIDDEN_UNITS, Activation, AdamState, Network, adam_step, backward,
                      build_network, forward, load_checkpoint, save_checkpoint)
from .spatial import PairBatch, SpatialWeights, expand_pairs, line_lambda, one_hot_rows

logger = logging.getLogger(__name__)

Variant = Literal["kmeans-ae", "dec", "sdec"]


@dataclass
class ClusterHead:
    centroids: np.ndarray

    def __post_init__(self):
        self.centroids = np.array(self.centroids, dtype=float)
        if self.centroids.ndim != 2:
            raise ConfigurationError("Centroids should be a (clusters, latent) matrix.")
        if not np.all(np.isfinite(self.centroids)):
            raise ConfigurationError("Centroids should be finite.")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.centroids.shape[1]


class LossWeights(BaseModel):
    """ Weights of the spatial, clustering and reconstruction losses. """

    alpha0: float = Field(0.1, ge=0.0)
    alpha1: float = Field(0.2, ge=0.0)
    alpha2: float = Field(1.0, ge=0.0)

    @model_validator(mode="after")
    def check_not_all_zero(self) -> "LossWeights":
        if self.alpha0 == self.alpha1 == self.alpha2 == 0.0:
            raise ValueError("At least one loss weight should be positive.")
        return self

    @classmethod
    def autoencoder(cls) -> "LossWeights":
        return cls(alpha0=0.0, alpha1=0.0, alpha2=1.0)

    @classmethod
    def dec(cls) -> "LossWeights":
        return cls(alpha0=0.0, alpha1=0.2, alpha2=1.0)

    @classmethod
    def sdec(cls) -> "LossWeights":
        return cls(alpha0=0.1, alpha1=0.2, alpha2=1.0)


class TrainConfig(BaseModel):
    k: int = Field(6, ge=1)
    max_epochs: int = Field(100, ge=0)
    pretrain_epochs: int = Field(50, ge=0)
    batch_size: int = Field(288, ge=1)
    early_stop_assignment_change: float | None = Field(0.001, ge=0.0, le=1.0)
    learning_rate: float = Field(1e-3, gt=0.0)
    kmeans_restarts: int = Field(5, ge=1)
    hidden_units: tuple[int, ...] = HIDDEN_UNITS
    latent_position: int | None = Field(None, ge=0)
    dropout_rate: float = Field(0.2, ge=0.0, lt=1.0)
    latent_activation: Activation = "linear"
    latent_dropout_rate: float = Field(0.0, ge=0.0, lt=1.0)
    seed: int = 0

    def with_latent_size(self, size: int) -> "TrainConfig":
        """ The same autoencoder with the latent layer resized to ``size`` units. """
        position = self.latent_position
        if position is None:
            position = int(np.argmin(self.hidden_units))
        if size < 1 or position >= len(self.hidden_units):
            raise ConfigurationError(f"Cannot resize latent layer {position} to {size} units.")
        units = list(self.hidden_units)
        units[position] = size
        return self.model_copy(update={"hidden_units": tuple(units), "latent_position": position})


@dataclass
class Assignments:
    """ Soft assignments ``q``, targets ``p`` and hard labels, one row per (t, i) point. """

    q: np.ndarray
    p: np.ndarray
    hard: np.ndarray
    point_index: np.ndarray

    @classmethod
    def from_soft(cls, q: np.ndarray, point_index: np.ndarray) -> "Assignments":
        return cls(q, target_distribution(q), q.argmax(axis=1), point_index)

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.hard, minlength=self.q.shape[1])


def soft_assign(z: np.ndarray, head: ClusterHead) -> np.ndarray:
    """ Student-t similarity (one degree of freedom) of each latent to each centroid. """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] != head.d:
        raise ConfigurationError(
            f"Latents of width {z.shape[1]} do not match centroids of width {head.d}.")
    kernel = 1.0 / (1.0 + squared_distances(z, head.centroids))
    return kernel / kernel.sum(axis=1, keepdims=True)


def target_distribution(q: np.ndarray) -> np.ndarray:
    """ Square ``q`` and divide by the soft cluster frequencies, then renormalise each row.

    Examples
    --------
    >>> target_distribution(np.array([[0.6, 0.4], [0.4, 0.6]])).round(4)
    array([[0.6923, 0.3077],
           [0.3077, 0.6923]])
    """
    frequencies = q.sum(axis=0)
    if np.any(frequencies <= 0.0):
        raise DataError("A cluster has zero soft frequency.")
    weight = q ** 2 / frequencies
    return weight / weight.sum(axis=1, keepdims=True)


def kl_loss_and_grad(q: np.ndarray, p: np.ndarray, z: np.ndarray, centroids: np.ndarray
                     ) -> tuple[float, np.ndarray, np.ndarray]:
    """ ``sum p log(p / q)`` with its gradients with respect to the latents and the centroids.

    ``p`` is a constant target; ``q`` must be the soft assignment of ``z`` to ``centroids``.
    """
    if q.shape != p.shape:
        raise ConfigurationError(
            f"Soft assignments {q.shape} and targets {p.shape} differ in shape.")
    loss = float(rel_entr(p, q).sum())
    offsets = z[:, np.newaxis, :] - centroids[np.newaxis, :, :]
    kernel = 1.0 / (1.0 + (offsets ** 2).sum(axis=2))
    scaled = 2.0 * ((p - q) * kernel)[:, :, np.newaxis] * offsets
    return loss, scaled.sum(axis=1), -scaled.sum(axis=0)


def spatial_loss_and_grad(z_rows: np.ndarray, targets: np.ndarray, weights: np.ndarray
                          ) -> tuple[float, np.ndarray]:
    """ ``sum lambda / 2 * |z - z_bar|^2`` over pair rows, and its gradient for every row.

    Examples
    --------
    >>> spatial_loss_and_grad(np.array([[1.0, 0.0]]), np.zeros((1, 2)), np.array([0.5]))
    (0.25, array([[0.5, 0. ]]))
    """
    if z_rows.shape != targets.shape or len(weights) != len(z_rows):
        raise ConfigurationError("Pair rows, targets and weights are not aligned.")
    offsets = z_rows - targets
    loss = float(0.5 * np.sum(weights * (offsets ** 2).sum(axis=1)))
    return loss, weights[:, np.newaxis] * offsets


@dataclass
class SpatialTargets:
    """ Pair rows of a minibatch: ``rows`` index the batch, ``targets`` are detached latents. """

    rows: np.ndarray
    targets: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_pairs(cls, batches: Sequence[PairBatch], block_size: int) -> "SpatialTargets":
        return cls(rows=np.concatenate([batch.sources + position * block_size
                                        for position, batch in enumerate(batches)]),
                   targets=np.vstack([batch.targets for batch in batches]),
                   weights=np.concatenate([batch.weights for batch in batches]))


def encoder_inputs(dataset: WindowedDataset) -> np.ndarray:
    """ Each window concatenated with the one-hot code of its location. """
    return np.hstack([dataset.series, one_hot_rows(dataset.locations, dataset.n_sensors)])


def encode(net: Network, dataset: WindowedDataset, chunk: int = 65536) -> np.ndarray:
    """ Latents of every point, dropout off. """
    inputs = encoder_inputs(dataset)
    parts = [forward(net, inputs[start:start + chunk])[0] for start in range(0, len(inputs), chunk)]
    return np.vstack(parts) if parts else np.empty((0, net.latent_dim))


@dataclass
class LossBreakdown:
    spatial: float = 0.0
    kl: float = 0.0
    reconstruction: float = 0.0
    total: float = 0.0


def joint_loss(net: Network, inputs: np.ndarray, windows: np.ndarray, head: ClusterHead | None,
               weights: LossWeights, p: np.ndarray | None = None,
               spatial: SpatialTargets | None = None, training: bool = False
               ) -> tuple[LossBreakdown, list[np.ndarray]]:
    """ Weighted sum of the three losses over one batch, with every gradient.

    Every term is summed within a point and averaged over the batch points; the
    reconstruction term of a point is half the squared norm of its window residual.

    Returns
    -------
    breakdown: LossBreakdown
        Unweighted terms and the weighted total.
    grads: list of numpy.ndarray
        Gradients aligned with ``net.parameters()``, followed by the centroid gradient
        when ``head`` is given.
    """
    if weights.alpha1 > 0.0 and (head is None or p is None):
        raise ConfigurationError("The clustering loss needs centroids and target assignments.")
    if weights.alpha0 > 0.0 and spatial is None:
        raise ConfigurationError("The spatial loss needs spatial weights and latent snapshots.")
    latent, output, cache = forward(net, inputs, training)
    count = len(inputs)
    breakdown = LossBreakdown()

    residual = output - windows
    breakdown.reconstruction = float(0.5 * np.sum(residual ** 2) / count)
    output_grad = weights.alpha2 * residual / count

    latent_grad = np.zeros_like(latent)
    centroid_grad = np.zeros_like(head.centroids) if head is not None else None
    if weights.alpha1 > 0.0:
        q = soft_assign(latent, head)
        kl, kl_latent, kl_centroids = kl_loss_and_grad(q, p, latent, head.centroids)
        breakdown.kl = kl / count
        latent_grad += weights.alpha1 * kl_latent / count
        centroid_grad += weights.alpha1 * kl_centroids / count
    if weights.alpha0 > 0.0:
        loss, row_grads = spatial_loss_and_grad(latent[spatial.rows], spatial.targets,
                                                spatial.weights)
        breakdown.spatial = loss / count
        scattered = np.zeros_like(latent)
        np.add.at(scattered, spatial.rows, row_grads)
        latent_grad += weights.alpha0 * scattered / count

    breakdown.total = (weights.alpha0 * breakdown.spatial + weights.alpha1 * breakdown.kl
                       + weights.alpha2 * breakdown.reconstruction)
    has_latent_loss = weights.alpha0 > 0.0 or weights.alpha1 > 0.0
    grads = backward(net, cache, output_grad, latent_grad if has_latent_loss else None)
    if centroid_grad is not None:
        grads.append(centroid_grad)
    return breakdown, grads


@dataclass
class EpochLog:
    phase: Literal["pretrain", "joint"]
    epoch: int
    spatial: float
    kl: float
    reconstruction: float
    total: float
    changed: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class TrainResult:
    variant: Variant
    network: Network
    head: ClusterHead
    assignments: Assignments
    latents: np.ndarray
    history: list[EpochLog] = field(default_factory=list)


class Trainer:
    """ Pretraining, k-means initialisation and joint training of one clustering model.

    Override or mock :meth:`observe` to watch the run; returning False from it ends the
    current phase.
    """

    def __init__(self, config: TrainConfig | None = None, weights: LossWeights | None = None,
                 variant: Variant = "sdec", spatial: SpatialWeights | None = None):
        self.config = config or TrainConfig()
        self.weights = weights or (LossWeights.dec() if variant == "dec" else LossWeights.sdec())
        if variant not in ("kmeans-ae", "dec", "sdec"):
            raise ConfigurationError(f"Unknown variant {variant!r}.")
        if variant == "dec" and self.weights.alpha0 != 0.0:
            raise ConfigurationError("alpha0 must be 0 for dec.")
        self.variant = variant
        self.spatial = spatial
        self.history: list[EpochLog] = []
        self.rng = np.random.default_rng(self.config.seed)

    def observe(self, epoch: int, log: EpochLog) -> bool:
        """ Called after every epoch.

        :returns: True if training should keep going.
        """
        return True

    def pretrain(self, dataset: WindowedDataset, net: Network | None = None) -> Network:
        """ Train the autoencoder on reconstruction alone; starts a new history. """
        config = self.config
        width = dataset.series.shape[1]
        if net is None:
            net = build_network(width + dataset.n_sensors, width, config.hidden_units,
                                config.latent_position, config.dropout_rate, config.seed,
                                config.latent_activation, config.latent_dropout_rate)
        self.rng = np.random.default_rng(config.seed)
        self.history = []
        logger.info("Pretraining the autoencoder for %d epochs", config.pretrain_epochs)
        optimizer = AdamState(learning_rate=config.learning_rate)
        for epoch in range(1, config.pretrain_epochs + 1):
            breakdown = self._run_epoch(net, None, dataset, LossWeights.autoencoder(),
                                        optimizer, self.rng)
            if not self._record("pretrain", epoch, breakdown):
                break
        return net

    def fit(self, dataset: WindowedDataset, net: Network | None = None) -> TrainResult:
        config = self.config
        if config.k > len(dataset):
            raise ConfigurationError(f"Cannot form {config.k} clusters from {len(dataset)} points.")
        spatial = self._spatial_weights(dataset)
        net = self.pretrain(dataset, net)
        rng = self.rng

        latents = encode(net, dataset)
        initial = kmeans(latents, config.k, config.kmeans_restarts, config.seed)
        head = ClusterHead(initial.centroids)
        logger.info("Initialised %d centroids by k-means (inertia %.6g)", config.k, initial.inertia)
        if self.variant == "kmeans-ae":
            q = soft_assign(latents, head)
            assignments = Assignments(q, target_distribution(q), initial.assignments,
                                      _point_index(dataset))
            return TrainResult(self.variant, net, head, assignments, latents, self.history)

        optimizer = AdamState(learning_rate=config.learning_rate)
        previous = initial.assignments
        for epoch in range(1, config.max_epochs + 1):
            snapshot = encode(net, dataset)
            q = soft_assign(snapshot, head)
            p = target_distribution(q)
            hard = q.argmax(axis=1)
            changed = float(np.mean(hard != previous))
            previous = hard
            threshold = config.early_stop_assignment_change
            if epoch > 1 and threshold is not None and changed < threshold:
                logger.info("Stopping at epoch %d: %.4f of assignments changed", epoch, changed)
                break
            breakdown = self._run_epoch(net, head, dataset, self.weights, optimizer, rng,
                                        p, snapshot, spatial)
            if not self._record("joint", epoch, breakdown, changed):
                break

        latents = encode(net, dataset)
        assignments = Assignments.from_soft(soft_assign(latents, head), _point_index(dataset))
        empty = np.flatnonzero(assignments.cluster_sizes() == 0)
        if empty.size:
            logger.warning("Clusters %s have no assigned points", empty.tolist())
        return TrainResult(self.variant, net, head, assignments, latents, self.history)

    def _spatial_weights(self, dataset: WindowedDataset) -> SpatialWeights | None:
        if self.weights.alpha0 == 0.0 or self.variant != "sdec":
            return None
        spatial = self.spatial or line_lambda(dataset.n_sensors)
        if spatial.s != dataset.n_sensors:
            raise ConfigurationError(
                f"Spatial weights cover {spatial.s} locations, the data has {dataset.n_sensors}.")
        return spatial

    def _run_epoch(self, net: Network, head: ClusterHead | None, dataset: WindowedDataset,
                   weights: LossWeights, optimizer: AdamState, rng: np.random.Generator,
                   p: np.ndarray | None = None, snapshot: np.ndarray | None = None,
                   spatial: SpatialWeights | None = None) -> LossBreakdown:
        """ One pass over shuffled minibatches of whole timestamp blocks. """
        inputs = encoder_inputs(dataset)
        s = dataset.n_sensors
        blocks_per_batch = max(1, self.config.batch_size // s)
        order = rng.permutation(dataset.n_blocks)
        totals = np.zeros(4)
        for start in range(0, len(order), blocks_per_batch):
            blocks = order[start:start + blocks_per_batch]
            rows = (blocks[:, np.newaxis] * s + np.arange(s)).ravel()
            targets = None
            if spatial is not None:
                pairs = [expand_pairs(dataset.series[block * s:(block + 1) * s],
                                      snapshot[block * s:(block + 1) * s], spatial,
                                      int(dataset.times[block * s]))
                         for block in blocks]
                targets = SpatialTargets.from_pairs(pairs, s)
            breakdown, grads = joint_loss(net, inputs[rows], dataset.series[rows], head, weights,
                                          p[rows] if p is not None else None, targets,
                                          training=True)
            params = net.parameters() + ([head.centroids] if head is not None else [])
            updated = adam_step(optimizer, params, grads)
            if head is not None:
                head.centroids = updated.pop()
            net.set_parameters(updated)
            totals += len(rows) * np.array([breakdown.spatial, breakdown.kl,
                                            breakdown.reconstruction, breakdown.total])
            logger.debug("Batch of %d points: total loss %.6g", len(rows), breakdown.total)
        return LossBreakdown(*(totals / len(dataset)))

    def _record(self, phase: Literal["pretrain", "joint"], epoch: int, breakdown: LossBreakdown,
                changed: float | None = None) -> bool:
        log = EpochLog(phase, epoch, breakdown.spatial, breakdown.kl, breakdown.reconstruction,
                       breakdown.total, changed)
        self.history.append(log)
        level = logging.INFO if phase == "joint" else logging.DEBUG
        logger.log(level, "%s epoch %d: spatial %.6g, kl %.6g, reconstruction %.6g",
                   phase, epoch, log.spatial, log.kl, log.reconstruction)
        return self.observe(epoch, log)


def _point_index(dataset: WindowedDataset) -> np.ndarray:
    return np.column_stack([dataset.locations, dataset.times])


def train(dataset: WindowedDataset, spatial: SpatialWeights | None = None,
          config: TrainConfig | None = None, weights: LossWeights | None = None,
          variant: Variant = "sdec") -> TrainResult:
    """ Train one model with a default :class:`Trainer`. """
    return Trainer(config, weights, variant, spatial).fit(dataset)


def anomaly_distance(hard: np.ndarray, latents: np.ndarray, head: ClusterHead,
                     n_sensors: int) -> np.ndarray:
    """ Latent distance of every point to its assigned centroid, as a (timestamps, sensors) grid.

    Rows of ``latents`` are in (time, location) order with ``n_sensors`` points per timestamp.
    """
    distances = np.linalg.norm(latents - head.centroids[np.asarray(hard)], axis=1)
    if len(distances) % n_sensors:
        raise ConfigurationError("Points do not form whole timestamp blocks.")
    return distances.reshape(-1, n_sensors)


@dataclass
class Prediction:
    hard: np.ndarray
    q: np.ndarray | None
    latents: np.ndarray


@dataclass
class TrainedModel:
    """ What a checkpoint holds: the variant, its parameters and where it came from. """

    variant: str
    network: Network | None
    centroids: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def head(self) -> ClusterHead:
        return ClusterHead(self.centroids)

    @property
    def dataset_fingerprint(self) -> str | None:
        return self.metadata.get("dataset_fingerprint")

    def predict(self, dataset: WindowedDataset, cfg: DtwConfig | None = None) -> Prediction:
        """ Labels of every point; models without a network assign windows to DTW medoids. """
        if self.network is None:
            hard, _ = assign_medoids(dataset.series, self.centroids, cfg)
            return Prediction(hard, None, dataset.series)
        latents = encode(self.network, dataset)
        q = soft_assign(latents, self.head)
        return Prediction(q.argmax(axis=1), q, latents)


def save_model(path: str | Path, variant: str, network: Network | None, centroids: np.ndarray,
               metadata: dict[str, Any] | None = None) -> Path:
    """ Write a model checkpoint; ``centroids`` are DTW medoid windows for k-medoid runs. """
    return save_checkpoint(path, network, {"centroids": np.asarray(centroids, dtype=float)},
                           {"variant": variant, **(metadata or {})})


def load_model(path: str | Path) -> TrainedModel:
    checkpoint = load_checkpoint(path)
    if "centroids" not in checkpoint.arrays or "variant" not in checkpoint.metadata:
        raise DataError(f"{path} is not a clustering model checkpoint.")
    metadata = dict(checkpoint.metadata)
    variant = metadata.pop("variant")
    return TrainedModel(variant, checkpoint.network, checkpoint.arrays["centroids"], metadata)
