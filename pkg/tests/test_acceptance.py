""" End-to-end runs on planted synthetic data; deselect with ``-m "not slow"``. """

import numpy as np
import pytest

from stdec.dataio import Anomaly, SyntheticSpec, generate_synthetic, normalize, sliding_window
from stdec.dec import LossWeights, TrainConfig, anomaly_distance, train
from stdec.distance import DtwConfig
from stdec.metrics import assemble_report, evaluate_run, location_order_correlation
from stdec.spatial import line_lambda

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


def windows_of(spec, window=12):
    raw, _ = generate_synthetic(spec)
    scaled, _ = normalize(raw)
    return sliding_window(scaled, window)


def config(seed, k, pretrain_epochs=20, max_epochs=20, batch_size=288):
    return TrainConfig(k=k, seed=seed, pretrain_epochs=pretrain_epochs, max_epochs=max_epochs,
                       batch_size=batch_size, early_stop_assignment_change=None,
                       kmeans_restarts=3)


def test_spatial_loss_orders_latents_along_the_line():
    dataset = windows_of(SyntheticSpec.even(6, 3, 1, noise_std=5.0, seed=11))
    spatial = line_lambda(6)
    with_prior, without_prior = [], []
    for seed in SEEDS:
        for alpha0, scores in ((10.0, with_prior), (0.0, without_prior)):
            # autoencoders with and without the spatial term, no clustering term
            weights = LossWeights(alpha0=alpha0, alpha1=0.0, alpha2=1.0)
            run = config(seed, k=6, max_epochs=40, batch_size=72)
            result = train(dataset, spatial, run, weights, "sdec")
            scores.append(location_order_correlation(result.latents, dataset.locations, spatial))
    assert min(with_prior) > 0.8
    assert np.mean(without_prior) < 0.5


@pytest.fixture(scope="module")
def planted_runs():
    dataset = windows_of(SyntheticSpec.even(12, 14, 3, noise_std=10.0, seed=5))
    cfg = DtwConfig(band=6)
    runs = {"sdec": [], "dec": []}
    for seed in SEEDS:
        for variant in runs:
            result = train(dataset, config=config(seed, k=6, max_epochs=10), variant=variant)
            runs[variant].append(evaluate_run(variant, result.assignments.hard, dataset,
                                              result.latents, 6, cfg))
    return runs


def test_spatial_runs_are_better_connected(planted_runs):
    def average(variant, score):
        return np.mean([getattr(report, score) for report in planted_runs[variant]])

    assert average("sdec", "connectivity") > average("dec", "connectivity")
    assert average("sdec", "disconnectivity") < average("dec", "disconnectivity")
    assert average("sdec", "compactness") <= 1.15 * average("dec", "compactness")


def test_spatial_metric_difference_is_significant(planted_runs):
    comparison = assemble_report([planted_runs["sdec"][0], planted_runs["dec"][0]])
    assert comparison.tests[0]["p"] < 0.05


def test_planted_drop_stands_out():
    drop = Anomaly(sensor=3, start=720, length=12, depth=0.8)
    spec = SyntheticSpec.even(6, 4, 2, noise_std=2.0, seed=2, anomalies=[drop])
    dataset = windows_of(spec)
    result = train(dataset, config=config(0, k=4, max_epochs=10), variant="sdec")
    grid = anomaly_distance(result.assignments.hard, result.latents, result.head,
                            dataset.n_sensors)
    # grid row r holds the windows ending at timestamp r + window - 1; only windows that
    # straddle the onset carry the step, the one wholly inside the drop is a scaled copy
    # of a normal window once its mean is removed
    ending = np.arange(drop.start, drop.start + drop.length - 1) - (dataset.window - 1)
    assert np.all(grid[ending, drop.sensor] >= np.quantile(grid, 0.95))
