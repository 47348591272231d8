import numpy as np
import pytest

from src.curvature.dense import dense_ggn
from src.curvature.kfac import accumulate_kfac
from src.curvature.precondition import precondition
from src.curvature.projected import projected_ef
from src.data.toy import gaussian_mixture
from src.diffusion.measurements import ELBO, SIMPLE_LOSS, MeasurementFn, measure
from src.diffusion.sampling import ddpm_sample_batch
from src.evaluation.metrics import spearman
from src.evaluation.retraining import TrainSetup
from src.influence.cache import TrainCache, build_train_cache, score_queries
from src.influence.compression import dequantize, quantize, roundtrip
from src.influence.gradients import query_gradient, train_gradients
from src.influence.prediction import predict_lds_deltas, predict_subset_delta, top_k
from src.influence.scores import ScoreMatrix, influence_scores, random_scores
from src.nn.gradients import per_example_train_gradient
from src.nn.training import OptimizerConfig
from src.utils.container import ArtifactContainer
from src.utils.errors import NumericInputError, ProvenanceError, UnknownIndexError
from src.utils.rng import RngStream
from tests.conftest import central_difference, relative_error

QUERIES = [np.array([0.5, -0.2]), np.array([-1.0, 1.3]), np.array([0.0, 0.1])]


@pytest.fixture
def measurement(stream):
    return MeasurementFn(SIMPLE_LOSS, 8, stream.child("measurement"))


@pytest.fixture
def kfac_state(net, schedule, dataset, stream):
    return accumulate_kfac(net, schedule, dataset, "model", "expand", 4, stream.child("curvature"))


def test_all_zero_vector_compresses_exactly():
    compressed = quantize(np.zeros((2, 5)))
    assert np.all(compressed.scales == 0)
    np.testing.assert_array_equal(dequantize(compressed), np.zeros((2, 5)))


def test_compression_error_is_half_a_step(net):
    vecs = RngStream(1).generator().standard_normal((4, net.param_count)) * np.linspace(0.01, 10, net.param_count)
    compressed = quantize(vecs, net.layer_slices())
    error = np.abs(dequantize(compressed) - vecs)
    for l, s in enumerate(net.layer_slices()):
        bound = compressed.scales[:, l][:, None] / 2
        assert np.all(error[:, s] <= bound * (1 + 1e-12))
        assert np.all(np.abs(compressed.payload[:, s]).max(axis=1) == 127)


def test_compression_rejects_non_finite():
    with pytest.raises(NumericInputError):
        quantize(np.array([1.0, np.inf]))


def test_roundtrip_keeps_vector_shape():
    v = np.array([0.3, -1.0, 0.25])
    assert roundtrip(v).shape == (3,)


def test_scores_match_naive_loop(net, schedule, dataset, stream, kfac_state, measurement):
    damping = 1e-3
    sm = influence_scores(net, schedule, kfac_state, damping, QUERIES, measurement, dataset, 2, stream)
    assert sm.shape == (3, 8)
    for q, query in enumerate(QUERIES):
        y = precondition(kfac_state, damping, query_gradient(net, schedule, measurement.for_query(q), query))
        for j in range(len(dataset)):
            g = per_example_train_gradient(net, schedule, dataset.points[j], 2, stream.child("example", j))
            assert sm.scores[q, j] == np.dot(y, g)


def test_scores_ignore_worker_count(net, schedule, dataset, stream, kfac_state, measurement):
    a = influence_scores(net, schedule, kfac_state, 1e-2, QUERIES, measurement, dataset, 2, stream, workers=1)
    b = influence_scores(net, schedule, kfac_state, 1e-2, QUERIES, measurement, dataset, 2, stream, workers=2)
    np.testing.assert_array_equal(a.scores, b.scores)


def test_large_damping_approaches_gradient_inner_products(net, schedule, dataset, stream, kfac_state, measurement):
    damping = 1e8
    sm = influence_scores(net, schedule, kfac_state, damping, QUERIES, measurement, dataset, 2, stream)
    G = train_gradients(net, schedule, dataset, 2, stream)
    Q = np.stack([query_gradient(net, schedule, measurement.for_query(q), x) for q, x in enumerate(QUERIES)])
    expected = Q @ G.T
    np.testing.assert_allclose(damping * sm.scores, expected, rtol=1e-5, atol=1e-5 * np.abs(expected).max())


def test_compressed_scores_within_quantisation_bound(net, schedule, dataset, stream, kfac_state, measurement):
    damping = 1e-2
    exact = influence_scores(net, schedule, kfac_state, damping, QUERIES, measurement, dataset, 2, stream)
    packed = influence_scores(
        net, schedule, kfac_state, damping, QUERIES, measurement, dataset, 2, stream, compress=True
    )
    assert packed.meta["compression"] == "int8-absmax-per-layer"
    G = train_gradients(net, schedule, dataset, 2, stream)
    for q, query in enumerate(QUERIES):
        y = precondition(kfac_state, damping, query_gradient(net, schedule, measurement.for_query(q), query))
        scales = quantize(y, net.layer_slices()).scales[0]
        for j in range(len(dataset)):
            bound = sum(scales[l] / 2 * np.abs(G[j, s]).sum() for l, s in enumerate(net.layer_slices()))
            assert abs(packed.scores[q, j] - exact.scores[q, j]) <= bound * (1 + 1e-9) + 1e-12


def test_compression_keeps_score_rankings_on_trained_model(schedule, stream):
    arch = {
        "data_dim": 2,
        "time_embed_dim": 2,
        "layers": [{"out_dim": 8}, {"out_dim": 8}, {"out_dim": 2, "activation": "identity"}],
    }
    data = gaussian_mixture(16, data_dim=2, seed=2)
    optimizer = OptimizerConfig(name="adam", lr=1e-2, batch_size=8, log_every=100)
    trained = TrainSetup(arch, schedule, data, optimizer, steps=300, seed=0).fit()
    samples, _ = ddpm_sample_batch(trained, schedule, range(20), 2)
    queries = list(samples)
    state = accumulate_kfac(trained, schedule, data, "model", "expand", 4, stream.child("curvature"))
    fn = MeasurementFn(SIMPLE_LOSS, 8, stream.child("measurement"))

    exact = influence_scores(trained, schedule, state, 1e-3, queries, fn, data, 4, stream)
    packed = influence_scores(trained, schedule, state, 1e-3, queries, fn, data, 4, stream, compress=True)
    for a, b in zip(exact.scores, packed.scores):
        assert np.corrcoef(a, b)[0, 1] > 0.99
        assert spearman(a, b) > 0.99
    same_top = np.argmax(exact.scores, axis=1) == np.argmax(packed.scores, axis=1)
    assert same_top.mean() >= 0.95


def test_self_influence_is_symmetric(net, schedule, dataset, stream, kfac_state):
    # each query is a training point measured on that example's own stream
    fns = [MeasurementFn(SIMPLE_LOSS, 3, stream.child("example", j)) for j in range(len(dataset))]
    sm = influence_scores(net, schedule, kfac_state, 1e-2, list(dataset.points), fns, dataset, 3, stream)
    np.testing.assert_allclose(sm.scores, sm.scores.T, rtol=1e-8, atol=1e-12 * np.abs(sm.scores).max())


def test_simple_loss_query_gradient_is_training_gradient(net, schedule, stream):
    x0 = np.array([0.3, 0.9])
    fn = MeasurementFn(SIMPLE_LOSS, 5, stream)
    np.testing.assert_array_equal(
        query_gradient(net, schedule, fn, x0), per_example_train_gradient(net, schedule, x0, 5, stream)
    )


def test_elbo_query_gradient_matches_finite_differences(net, schedule, stream):
    fn = MeasurementFn(ELBO, 6, stream)
    x0 = np.array([-0.4, 0.7])

    def value(params):
        return measure(net.with_flat_params(params), schedule, fn, x0)

    grad = query_gradient(net, schedule, fn, x0)
    assert relative_error(grad, central_difference(value, net.flat_params())) < 1e-5


def test_scores_refuse_foreign_state(linear_net, schedule, dataset, stream, kfac_state, measurement):
    with pytest.raises(ProvenanceError):
        influence_scores(linear_net, schedule, kfac_state, 1e-2, QUERIES, measurement, dataset, 1, stream)


def test_identity_projection_matches_dense_backend(net, schedule, dataset, stream, measurement):
    curvature = stream.child("curvature")
    dense = dense_ggn(net, schedule, dataset, "loss", 2, curvature)
    projected = projected_ef(net, schedule, dataset, net.param_count, 0, 2, curvature, projection="identity")
    a = influence_scores(net, schedule, dense, 1e-2, QUERIES, measurement, dataset, 2, stream)
    b = influence_scores(net, schedule, projected, 1e-2, QUERIES, measurement, dataset, 2, stream)
    np.testing.assert_allclose(a.scores, b.scores, rtol=1e-7, atol=1e-10 * np.abs(a.scores).max())


def test_cache_agrees_with_single_use_scores(net, schedule, dataset, stream, kfac_state, measurement):
    damping = 1e-3
    direct = influence_scores(net, schedule, kfac_state, damping, QUERIES, measurement, dataset, 2, stream)
    cache = build_train_cache(net, schedule, kfac_state, damping, dataset, 2, stream, compress=False)
    cached = score_queries(cache, net, schedule, QUERIES, measurement)
    # the two orders differ only by floating point, the operator is symmetric
    np.testing.assert_allclose(cached.scores, direct.scores, rtol=1e-8, atol=1e-10 * np.abs(direct.scores).max())


def test_projected_cache_agrees_with_single_use_scores(net, schedule, dataset, stream, measurement):
    state = projected_ef(net, schedule, dataset, 12, 4, 2, stream.child("curvature"))
    direct = influence_scores(net, schedule, state, 1e-2, QUERIES, measurement, dataset, 2, stream)
    cache = build_train_cache(net, schedule, state, 1e-2, dataset, 2, stream, compress=False)
    cached = score_queries(cache, net, schedule, QUERIES, measurement)
    np.testing.assert_allclose(cached.scores, direct.scores, rtol=1e-8, atol=1e-10 * np.abs(direct.scores).max())


def test_full_width_gaussian_sketch_projects_every_gradient(net, schedule, dataset, stream, measurement):
    damping = 1e-2
    state = projected_ef(net, schedule, dataset, net.param_count, 3, 2, stream.child("curvature"))
    P = state.projected.matrix
    H = state.projected.second_moment
    G = train_gradients(net, schedule, dataset, 2, stream) @ P.T
    Q = np.stack([P @ query_gradient(net, schedule, measurement.for_query(q), x) for q, x in enumerate(QUERIES)])
    expected = Q @ np.linalg.solve(H + damping * np.eye(len(H)), G.T)
    atol = 1e-10 * np.abs(expected).max()

    direct = influence_scores(net, schedule, state, damping, QUERIES, measurement, dataset, 2, stream)
    np.testing.assert_allclose(direct.scores, expected, rtol=1e-7, atol=atol)
    cache = build_train_cache(net, schedule, state, damping, dataset, 2, stream, compress=False)
    cached = score_queries(cache, net, schedule, QUERIES, measurement)
    np.testing.assert_allclose(cached.scores, expected, rtol=1e-7, atol=atol)

def test_cache_survives_container_roundtrip(net, schedule, dataset, stream, kfac_state, measurement):
    cache = build_train_cache(net, schedule, kfac_state, 1e-2, dataset, 2, stream, compress=True)
    restored = TrainCache.from_container(ArtifactContainer.from_bytes(cache.to_container({"k": 1}).to_bytes()))
    assert restored.meta == cache.meta
    np.testing.assert_array_equal(restored.vectors(), cache.vectors())
    a = score_queries(cache, net, schedule, QUERIES, measurement)
    b = score_queries(restored, net, schedule, QUERIES, measurement)
    np.testing.assert_array_equal(a.scores, b.scores)


def test_cache_refuses_foreign_network(net, linear_net, schedule, dataset, stream, kfac_state, measurement):
    cache = build_train_cache(net, schedule, kfac_state, 1e-2, dataset, 1, stream)
    with pytest.raises(ProvenanceError):
        score_queries(cache, linear_net, schedule, QUERIES, measurement)


def test_score_matrix_container_roundtrip(net, schedule, dataset, stream, kfac_state, measurement):
    sm = influence_scores(net, schedule, kfac_state, 1e-2, QUERIES[:2], measurement, dataset, 1, stream)
    restored = ScoreMatrix.from_container(ArtifactContainer.from_bytes(sm.to_container().to_bytes()))
    np.testing.assert_array_equal(restored.scores, sm.scores)
    np.testing.assert_array_equal(restored.train_ids, sm.train_ids)
    assert restored.meta_hash() == sm.meta_hash()


@pytest.fixture
def toy_scores():
    scores = np.array([[1.0, -2.0, 0.5, 4.0], [0.0, 3.0, -1.0, 1.0]])
    return ScoreMatrix(scores, np.arange(2), np.array([0, 1, 2, 3]))


def test_empty_removal_predicts_no_change(toy_scores):
    np.testing.assert_array_equal(predict_subset_delta(toy_scores, [], 4), np.zeros(2))


def test_prediction_is_additive(toy_scores):
    a = predict_subset_delta(toy_scores, [0, 2], 4)
    b = predict_subset_delta(toy_scores, [3], 4)
    np.testing.assert_allclose(predict_subset_delta(toy_scores, [0, 2, 3], 4), a + b, rtol=1e-15)
    np.testing.assert_allclose(a, [1.5 / 4, -1.0 / 4])


def test_prediction_scales_with_fraction(toy_scores):
    full = predict_subset_delta(toy_scores, [1, 3], 4)
    np.testing.assert_allclose(predict_subset_delta(toy_scores, [1, 3], 4, 0.5), full / 2, rtol=1e-15)


def test_prediction_counts_duplicates_once(toy_scores):
    np.testing.assert_array_equal(predict_subset_delta(toy_scores, [1, 1], 4), predict_subset_delta(toy_scores, [1], 4))


def test_prediction_rejects_unknown_index(toy_scores):
    with pytest.raises(UnknownIndexError):
        predict_subset_delta(toy_scores, [9], 4)


def test_lds_predictions_remove_complement(toy_scores):
    deltas = predict_lds_deltas(toy_scores, [np.array([0, 1]), np.array([0, 1, 2, 3])], 4)
    np.testing.assert_allclose(deltas[0], predict_subset_delta(toy_scores, [2, 3], 4))
    np.testing.assert_array_equal(deltas[1], np.zeros(2))


def test_top_k_breaks_ties_by_index():
    np.testing.assert_array_equal(top_k(np.array([1.0, 3.0, 3.0, 2.0]), 2), [1, 2])
    np.testing.assert_array_equal(top_k(np.array([5.0, 5.0, 5.0]), 3), [0, 1, 2])


def test_random_scores_are_seeded():
    np.testing.assert_array_equal(random_scores(2, 5, 7).scores, random_scores(2, 5, 7).scores)
    assert random_scores(2, 5, 7).shape == (2, 5)


def test_score_matrix_rejects_non_finite():
    with pytest.raises(NumericInputError):
        ScoreMatrix(np.array([[np.nan]]), [0], [0])
