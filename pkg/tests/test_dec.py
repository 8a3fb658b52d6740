from pathlib import Path
from unittest.mock import Mock, patch

import numpy as np
import pytest
import yaml
from pytest import approx, raises

from stdec.dataio import SyntheticSpec, generate_synthetic, normalize, sliding_window
from stdec.dec import (Assignments, ClusterHead, LossWeights, SpatialTargets, TrainConfig,
                       Trainer, anomaly_distance, encode, encoder_inputs, joint_loss,
                       kl_loss_and_grad, load_model, save_model, soft_assign,
                       spatial_loss_and_grad, target_distribution, train)
from stdec.errors import DataError
from stdec.network import build_network, finite_diff_check, forward
from stdec.spatial import expand_pairs, line_lambda, one_hot_rows


def read_fixture(section):
    with open(Path(__file__).parent / 'fixtures' / 'formulas.yaml') as fixtures_file:
        fixtures = yaml.safe_load(fixtures_file)
    return fixtures[section]


@pytest.mark.parametrize("fixture", read_fixture('soft_assign'))
def test_soft_assign(fixture):
    q = soft_assign(np.array(fixture['z']), ClusterHead(fixture['centroids']))
    assert q == approx(np.array(fixture['q']), abs=1e-12)


@pytest.mark.parametrize("fixture", read_fixture('target_distribution'))
def test_target_distribution(fixture):
    p = target_distribution(np.array(fixture['q']))
    assert p == approx(np.array(fixture['p']), abs=1e-4)
    assert p.sum(axis=1) == approx(np.ones(len(p)), abs=1e-9)


@pytest.mark.parametrize("fixture", read_fixture('spatial'))
def test_spatial_loss(fixture):
    loss, grad = spatial_loss_and_grad(np.array(fixture['z']), np.array(fixture['targets']),
                                       np.array(fixture['weights']))
    assert loss == approx(fixture['loss'])
    assert grad == approx(np.array(fixture['grad']))


def test_assignment_rows_are_distributions():
    rng = np.random.default_rng(0)
    head = ClusterHead(rng.normal(size=(5, 4)))
    q = soft_assign(rng.normal(size=(50, 4)), head)
    assignments = Assignments.from_soft(q, np.zeros((50, 2), dtype=int))
    assert q.sum(axis=1) == approx(np.ones(50), abs=1e-9)
    assert np.all((q > 0.0) & (q < 1.0))
    assert assignments.p.sum(axis=1) == approx(np.ones(50), abs=1e-9)
    assert np.array_equal(assignments.hard, q.argmax(axis=1))


def test_target_sharpens_when_frequencies_are_equal():
    q = np.array([[0.6, 0.4], [0.4, 0.6]])
    p = target_distribution(q)

    def entropy(rows):
        return -(rows * np.log(rows)).sum(axis=1)

    assert np.all(entropy(p) <= entropy(q))


def test_empty_cluster_has_no_target():
    with raises(DataError):
        target_distribution(np.array([[1.0, 0.0], [1.0, 0.0]]))


def test_kl_identities():
    z = np.zeros((1, 2))
    centroids = np.array([[1.0, 0.0], [-1.0, 0.0]])
    q = soft_assign(z, ClusterHead(centroids))
    loss, _, _ = kl_loss_and_grad(q, np.array([[1.0, 0.0]]), z, centroids)
    assert loss == approx(np.log(2.0), abs=1e-9)

    rng = np.random.default_rng(1)
    z = rng.normal(size=(10, 3))
    centroids = rng.normal(size=(4, 3))
    q = soft_assign(z, ClusterHead(centroids))
    loss, latent_grad, centroid_grad = kl_loss_and_grad(q, q, z, centroids)
    assert loss == approx(0.0, abs=1e-12)
    assert latent_grad == approx(np.zeros_like(z), abs=1e-12)
    assert centroid_grad == approx(np.zeros_like(centroids), abs=1e-12)


def small_problem(seed, s=6, window=12, k=5, blocks=2):
    """ Small net with dropout off, two timestamp blocks, centroids and fixed targets. """
    rng = np.random.default_rng(seed)
    net = build_network(window + s, window, hidden_units=(8, 4, 8), dropout_rate=0.0, seed=seed)
    windows = rng.normal(size=(blocks * s, window))
    inputs = np.hstack([windows, one_hot_rows(np.tile(np.arange(s), blocks), s)])
    head = ClusterHead(rng.normal(size=(k, 4)))
    latents = forward(net, inputs)[0]
    p = target_distribution(soft_assign(latents, head))
    snapshot = latents + rng.normal(scale=0.3, size=latents.shape)
    spatial = line_lambda(s)
    pairs = [expand_pairs(windows[block * s:(block + 1) * s],
                          snapshot[block * s:(block + 1) * s], spatial, block)
             for block in range(blocks)]
    return net, inputs, windows, head, p, SpatialTargets.from_pairs(pairs, s)


@pytest.mark.parametrize("weights", [
    LossWeights(alpha0=0.0, alpha1=0.0, alpha2=1.0),
    LossWeights(alpha0=0.0, alpha1=1.0, alpha2=0.0),
    LossWeights(alpha0=1.0, alpha1=0.0, alpha2=0.0),
    LossWeights(alpha0=0.1, alpha1=0.2, alpha2=1.0),
])
def test_joint_gradients_match_finite_differences(weights):
    for seed in range(2):
        net, inputs, windows, head, p, targets = small_problem(seed)

        def loss_fn(net, inputs):
            breakdown, grads = joint_loss(net, inputs, windows, head, weights, p, targets)
            return breakdown.total, grads

        report = finite_diff_check(net, loss_fn, inputs, extra_params=[head.centroids])
        assert report.passed, report.max_rel_err


def test_snapshot_does_not_touch_other_terms():
    net, inputs, windows, head, p, targets = small_problem(3)
    weights = LossWeights(alpha0=0.0, alpha1=0.2, alpha2=1.0)
    moved = SpatialTargets(targets.rows, targets.targets + 5.0, targets.weights)
    _, grads = joint_loss(net, inputs, windows, head, weights, p, targets)
    _, moved_grads = joint_loss(net, inputs, windows, head, weights, p, moved)
    for grad, moved_grad in zip(grads, moved_grads):
        assert np.array_equal(grad, moved_grad)


def test_joint_loss_needs_its_inputs():
    net, inputs, windows, head, p, _ = small_problem(4)
    with raises(ValueError):
        joint_loss(net, inputs, windows, head, LossWeights.sdec(), p, None)
    with raises(ValueError):
        joint_loss(net, inputs, windows, None, LossWeights.dec())


def test_loss_weights_validation():
    with raises(ValueError):
        LossWeights(alpha0=0.0, alpha1=0.0, alpha2=0.0)
    with raises(ValueError):
        LossWeights(alpha0=-0.1)
    with raises(ValueError):
        Trainer(variant="dec", weights=LossWeights(alpha0=0.5))


@pytest.fixture
def dataset():
    spec = SyntheticSpec.even(sensors=4, days=2, n_regions=2, noise_std=1.0, seed=3,
                              period_minutes=30)
    raw, _ = generate_synthetic(spec)
    scaled, _ = normalize(raw)
    return sliding_window(scaled, 6)


def quick_config(**changes):
    settings = dict(k=2, pretrain_epochs=3, max_epochs=4, batch_size=16,
                    early_stop_assignment_change=None, hidden_units=(8, 4, 8), seed=1)
    settings.update(changes)
    return TrainConfig(**settings)


def test_observe_sees_every_epoch(dataset):
    trainer = Trainer(quick_config(), variant="sdec")
    with patch.object(trainer, 'observe', Mock(return_value=True)) as observe:
        result = trainer.fit(dataset)
    assert observe.call_count == 7
    phases = [call.args[1].phase for call in observe.call_args_list]
    assert phases == ["pretrain"] * 3 + ["joint"] * 4
    assert [call.args[0] for call in observe.call_args_list] == [1, 2, 3, 1, 2, 3, 4]
    assert result.history == [call.args[1] for call in observe.call_args_list]
    assert result.assignments.q.shape == (len(dataset), 2)
    assert result.history[-1].spatial != 0.0


def test_observe_can_stop_each_phase(dataset):
    trainer = Trainer(quick_config(), variant="dec")
    trainer.observe = Mock(return_value=False)
    result = trainer.fit(dataset)
    assert [log.phase for log in result.history] == ["pretrain", "joint"]
    assert result.history[-1].spatial == 0.0


def test_kmeans_variant_skips_joint_phase(dataset):
    result = train(dataset, config=quick_config(), variant="kmeans-ae")
    assert {log.phase for log in result.history} == {"pretrain"}
    latents = encode(result.network, dataset)
    distances = ((latents[:, None, :] - result.head.centroids[None]) ** 2).sum(axis=2)
    assert np.array_equal(result.assignments.hard, distances.argmin(axis=1))


def test_early_stop_on_stable_assignments(dataset):
    config = quick_config(max_epochs=50, early_stop_assignment_change=1.0)
    result = train(dataset, config=config, weights=LossWeights.dec(), variant="dec")
    assert [log.epoch for log in result.history if log.phase == "joint"] == [1]


def test_sdec_without_spatial_weight_is_dec(dataset):
    config = quick_config()
    weights = LossWeights(alpha0=0.0, alpha1=0.2, alpha2=1.0)
    sdec = train(dataset, config=config, weights=weights, variant="sdec")
    dec = train(dataset, config=config, weights=weights, variant="dec")
    assert np.array_equal(sdec.assignments.q, dec.assignments.q)
    assert np.array_equal(sdec.head.centroids, dec.head.centroids)


def test_training_is_seeded(dataset):
    first = train(dataset, config=quick_config())
    second = train(dataset, config=quick_config())
    assert np.array_equal(first.assignments.q, second.assignments.q)


def test_encoder_inputs_carry_location(dataset):
    inputs = encoder_inputs(dataset)
    assert inputs.shape == (len(dataset), dataset.series.shape[1] + dataset.n_sensors)
    assert np.array_equal(inputs[:, -dataset.n_sensors:].argmax(axis=1), dataset.locations)


def test_anomaly_distance_grid():
    head = ClusterHead(np.array([[0.0, 0.0], [1.0, 1.0]]))
    latents = np.array([[0.0, 0.0], [1.0, 1.0], [3.0, 4.0], [1.0, 2.0], [0.0, 0.0], [1.0, 1.0]])
    hard = np.array([0, 1, 0, 1, 0, 1])
    grid = anomaly_distance(hard, latents, head, n_sensors=2)
    assert grid.shape == (3, 2)
    assert grid == approx(np.array([[0.0, 0.0], [5.0, 1.0], [0.0, 0.0]]))
    with raises(ValueError):
        anomaly_distance(hard[:5], latents[:5], head, n_sensors=2)


def test_model_checkpoint(dataset, tmp_path):
    result = train(dataset, config=quick_config(max_epochs=1))
    save_model(tmp_path / "model.npz", "sdec", result.network, result.head.centroids,
               {"dataset_fingerprint": dataset.fingerprint()})
    model = load_model(tmp_path / "model.npz")
    assert model.variant == "sdec"
    assert model.dataset_fingerprint == dataset.fingerprint()
    prediction = model.predict(dataset)
    assert np.array_equal(prediction.hard, result.assignments.hard)
    assert prediction.q == approx(result.assignments.q)


def test_medoid_checkpoint_predicts_by_dtw(dataset, tmp_path):
    from stdec.clustering import kmedoid_dtw
    from stdec.distance import DtwConfig
    cfg = DtwConfig(band=2)
    fitted = kmedoid_dtw(dataset.series, 2, cfg, restarts=1)
    save_model(tmp_path / "medoids.npz", "kmeans-dtw", None, fitted.centroids)
    model = load_model(tmp_path / "medoids.npz")
    prediction = model.predict(dataset, cfg)
    assert prediction.q is None
    assert np.array_equal(prediction.hard, fitted.assignments)


def test_reconstruction_term_sums_each_window():
    net, inputs, windows, _, _, _ = small_problem(5)
    breakdown, _ = joint_loss(net, inputs, windows, None, LossWeights.autoencoder())
    per_window = 0.5 * ((forward(net, inputs)[1] - windows) ** 2).sum(axis=1)
    assert breakdown.reconstruction == approx(per_window.mean())
    assert breakdown.total == approx(per_window.mean())


def test_pretraining_with_a_resized_latent_layer(dataset):
    config = quick_config().with_latent_size(10)
    assert config.hidden_units == (8, 10, 8)
    assert config.latent_position == 1
    trainer = Trainer(config, variant="kmeans-ae")
    net = trainer.pretrain(dataset)
    assert net.latent_dim == 10
    assert encode(net, dataset).shape == (len(dataset), 10)
    assert [log.phase for log in trainer.history] == ["pretrain"] * 3
    with raises(ValueError):
        quick_config().with_latent_size(0)


def test_latent_layer_dropout_is_configurable(dataset):
    config = quick_config(latent_activation="relu", latent_dropout_rate=0.2, max_epochs=1)
    result = train(dataset, config=config, variant="kmeans-ae")
    latent_layer = result.network.layers[result.network.latent_index]
    assert (latent_layer.activation, latent_layer.dropout_rate) == ("relu", 0.2)
    assert np.all(result.latents >= 0.0)
