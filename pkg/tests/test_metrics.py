from pathlib import Path

import numpy as np
import pytest
import yaml
from pytest import approx, raises

from stdec.dataio import RasterSeries, sliding_window
from stdec.distance import DtwConfig
from stdec.errors import DataError
from stdec.metrics import (assemble_report, band_stability, connectivity, disconnectivity,
                           evaluate_run, latent_dtw_correlation, location_order_correlation,
                           rand_index, spatial_metric_series, spatial_scores,
                           temporal_compactness, welch_t_test)
from stdec.spatial import line_lambda


def read_fixture(name):
    with open(Path(__file__).parent / 'fixtures' / f'{name}.yaml') as fixtures_file:
        fixtures = yaml.safe_load(fixtures_file)
    return fixtures


def brute_force_scores(row):
    """ Walk outwards from every location to find its run. """
    connected = disconnected = 0
    for position, label in enumerate(row):
        left = position
        while left > 0 and row[left - 1] == label:
            left -= 1
        right = position
        while right < len(row) - 1 and row[right + 1] == label:
            right += 1
        run = right - left + 1
        connected += run
        disconnected += list(row).count(label) - run
    return connected, disconnected


@pytest.mark.parametrize("fixture", read_fixture('connectivity'))
def test_connectivity_by_hand(fixture):
    assert connectivity(fixture['grid']) == fixture['connectivity']
    assert disconnectivity(fixture['grid']) == fixture['disconnectivity']


def test_spatial_scores_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        rows, s = rng.integers(1, 5), rng.integers(1, 10)
        grid = rng.integers(0, rng.integers(1, 5), size=(rows, s))
        connected, disconnected = spatial_scores(grid)
        expected = np.array([brute_force_scores(row) for row in grid])
        assert connected.tolist() == expected[:, 0].tolist()
        assert disconnected.tolist() == expected[:, 1].tolist()


def test_scores_ignore_label_names():
    grid = np.random.default_rng(1).integers(0, 3, size=(20, 8))
    relabelled = np.array([7, 2, 5])[grid]
    assert connectivity(grid) == connectivity(relabelled)
    assert disconnectivity(grid) == disconnectivity(relabelled)


def test_spatial_metric_series():
    series, mean = spatial_metric_series([["A", "B", "A"]])
    assert mean == approx(1.0 / 9.0)
    _, mean = spatial_metric_series([["A"] * 5])
    assert mean == approx(1.0)
    _, mean = spatial_metric_series([["A", "B", "C", "D"]])
    assert mean == approx(1.0 / 4.0)
    series, mean = spatial_metric_series([[0, 0], [0, 1]])
    assert series == approx([1.0, 0.5])
    assert mean == approx(0.75)


@pytest.mark.parametrize("fixture", read_fixture('welch'))
def test_welch_t_test(fixture):
    result = welch_t_test(fixture['a'], fixture['b'])
    assert result.t == approx(fixture['t'])
    assert result.df == approx(fixture['df'])
    assert result.p == approx(fixture['p'], abs=1e-4)


def test_welch_is_antisymmetric():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=12), rng.normal(1.0, 2.0, size=20)
    forward, reverse = welch_t_test(a, b), welch_t_test(b, a)
    assert forward.t == approx(-reverse.t)
    assert forward.df == approx(reverse.df)
    assert forward.p == approx(reverse.p)
    assert 0.0 < forward.p < 1.0


def test_welch_degenerate_samples():
    with raises(DataError):
        welch_t_test([1.0], [1.0, 2.0])
    with raises(DataError):
        welch_t_test([3.0, 3.0, 3.0], [3.0, 3.0])


def test_compactness():
    windows = np.array([[0.0], [1.0], [2.0], [5.0]])
    latents = np.array([[1.0], [0.0], [2.0], [9.0]])
    hard = np.array([0, 0, 0, 1])
    compact = temporal_compactness(hard, windows, latents, k=3, cfg=DtwConfig(band=1))
    assert compact.per_cluster[0] == approx(5.0 / 3.0)
    assert compact.per_cluster[1] == 0.0
    assert np.isnan(compact.per_cluster[2])
    assert compact.medoids.tolist() == [0, 3, -1]
    assert compact.empty == [2]
    assert compact.mean == approx(5.0 / 6.0)


@pytest.mark.parametrize("point_cost", ["squared_diff", "abs_diff"])
def test_normalized_compactness_is_bounded(point_cost):
    windows = np.array([[0.0, 0.0], [3.0, 3.0]])
    latents = np.array([[0.0], [1.0]])
    cfg = DtwConfig(band=1, point_cost=point_cost)
    compact = temporal_compactness(np.zeros(2, dtype=int), windows, latents, k=1, cfg=cfg)
    assert compact.mean > windows.shape[1]
    assert compact.normalized(windows, cfg) == approx(0.5)
    assert compact.normalized(np.zeros((2, 2)), cfg) == 0.0


def test_identical_windows_are_compact():
    windows = np.tile(np.sin(np.linspace(0.0, 3.0, 12)), (6, 1))
    latents = np.random.default_rng(3).normal(size=(6, 2))
    compact = temporal_compactness(np.zeros(6, dtype=int), windows, latents, k=1)
    assert compact.per_cluster.tolist() == [0.0]


def test_rand_index():
    assert rand_index([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert rand_index([0, 0, 1, 1], [0, 1, 0, 1]) == approx(2.0 / 6.0)


def test_location_order_correlation():
    s = 6
    locations = np.tile(np.arange(s), 10)
    latents = np.column_stack([locations, np.zeros(len(locations))]).astype(float)
    assert location_order_correlation(latents, locations, line_lambda(s)) == approx(1.0)
    assert location_order_correlation(-latents, locations, line_lambda(s)) == approx(1.0)


def test_latent_dtw_correlation():
    rng = np.random.default_rng(4)
    scales = rng.uniform(0.0, 1.0, size=200)
    windows = scales[:, np.newaxis] * np.sin(np.linspace(0.0, 2.0 * np.pi, 12))
    correlation = latent_dtw_correlation(windows, scales[:, np.newaxis], DtwConfig(band=1))
    assert correlation > 0.5
    with raises(ValueError):
        latent_dtw_correlation(windows[:1], scales[:1, np.newaxis])


def test_band_stability_reference_is_the_widest_band():
    rng = np.random.default_rng(5)
    windows = np.repeat(rng.normal(size=(3, 6)), 5, axis=0) + rng.normal(scale=0.05,
                                                                         size=(15, 6))
    frame = band_stability(windows, 3, [4, 1, 2], restarts=2)
    assert frame.band.tolist() == [1, 2, 4]
    assert frame.rand_index.iloc[-1] == 1.0
    assert frame.rand_index.between(0.0, 1.0).all()


def small_dataset(seed=6, sensors=4, timestamps=20):
    values = np.random.default_rng(seed).normal(size=(sensors, timestamps, 1))
    return sliding_window(RasterSeries(values, [f"s{i}" for i in range(sensors)]), window=4)


def test_evaluate_and_compare_runs():
    dataset = small_dataset()
    rng = np.random.default_rng(7)
    latents = rng.normal(size=(len(dataset), 3))
    cfg = DtwConfig(band=2)
    one_label = evaluate_run("flat", np.zeros(len(dataset), dtype=int), dataset, latents, 2, cfg)
    assert one_label.connectivity == approx(1.0)
    assert one_label.disconnectivity == 0.0
    assert one_label.empty_clusters == [1]

    mixed = evaluate_run("mixed", rng.integers(0, 2, size=len(dataset)), dataset, latents, 2, cfg)
    for value in (mixed.connectivity, mixed.disconnectivity):
        assert 0.0 <= value <= 1.0
    assert mixed.spatial_metric == approx(mixed.spatial_metric_series.mean())
    assert 0.0 <= mixed.compactness <= 1.0

    single = assemble_report([mixed])
    assert len(single.table) == 1
    assert single.tests == []

    comparison = assemble_report([one_label, mixed])
    assert comparison.table.model.tolist() == ["flat", "mixed"]
    assert len(comparison.tests) == 1
    assert mixed.t_test is not None
    assert mixed.to_dict()["t_test"]["p"] == comparison.tests[0]["p"]


def test_runs_on_other_data_are_not_compared():
    first, second = small_dataset(8), small_dataset(9)
    latents = np.zeros((len(first), 2))
    hard = np.zeros(len(first), dtype=int)
    with raises(DataError):
        assemble_report([evaluate_run("a", hard, first, latents, k=1, cfg=DtwConfig(band=2)),
                         evaluate_run("b", hard, second, latents, k=1, cfg=DtwConfig(band=2))])
    with raises(ValueError):
        assemble_report([])
