import numpy as np
import pytest
import tensorflow as tf

from definitions import RngStream
from models.hvq import HvqModel, HvqSettings, hvq_loss
from models.layers import DecoderBlock, MultiHeadAttention
from models.quantizer import QuantizationResult, nearest_code
from tensor_core import ops
from tensor_core.graph import Graph, finite_difference_check
from tensor_core.rng import Rng
from training.hvq_training import structural_scores, train_hvq
from utility.errors import ShapeError

SMALL = HvqSettings(feature_dim=6, embed_dim=8, layers=2, codebook_size=4, codebook_dim=3, heads=2, mlp_ratio=2,
                    token_count=9)


def features_for(settings: HvqSettings, batch: int, seed: int = 0, dtype=np.float32) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(size=(batch, settings.token_count, settings.feature_dim)).astype(dtype)


def zero_residual_branches(model: HvqModel) -> None:
    for block in model.encoder_blocks:
        for layer in (block.attention.output_projection, block.ffn.contract):
            layer.weight.assign(tf.zeros_like(layer.weight))
            layer.bias.assign(tf.zeros_like(layer.bias))


def test_encoder_produces_one_state_per_layer():
    model = HvqModel(SMALL)
    hidden = model.encode(model.embed(features_for(SMALL, 2)))
    assert len(hidden) == SMALL.layers
    assert all(state.shape == (2, SMALL.token_count, SMALL.embed_dim) for state in hidden)


def test_zeroed_residual_branches_keep_the_embedding():
    model = HvqModel(SMALL)
    zero_residual_branches(model)
    embedded = model.embed(features_for(SMALL, 2))
    np.testing.assert_array_equal(model.encode(embedded)[-1].numpy(), embedded.numpy())


def test_wrong_feature_shape_is_rejected():
    with pytest.raises(ShapeError):
        HvqModel(SMALL).forward(np.zeros((1, SMALL.token_count, SMALL.feature_dim + 1), dtype=np.float32))


def test_same_seed_gives_identical_parameters():
    assert HvqModel(SMALL, seed=3).parameter_hash() == HvqModel(SMALL, seed=3).parameter_hash()
    assert HvqModel(SMALL, seed=3).parameter_hash() != HvqModel(SMALL, seed=4).parameter_hash()


def test_final_quantization_matches_nearest_code():
    model = HvqModel(SMALL)
    hidden = model.encode(model.embed(features_for(SMALL, 2)))
    result = model.quantize_final(hidden[-1])
    reference = nearest_code(model.codebooks[-1].project(hidden[-1]), model.codebooks[-1].entries)
    np.testing.assert_array_equal(result.indices.numpy(), reference.indices.numpy())
    rows = tf.gather(model.codebooks[-1].entries, result.indices).numpy()
    np.testing.assert_array_equal(result.quantized.numpy(), rows)


def test_intermediate_quantization_ignores_zeroed_final_code_half():
    model = HvqModel(SMALL)
    embedded = model.embed(features_for(SMALL, 2))
    hidden = model.encode(embedded)
    final_codes = model.quantize_final(hidden[-1]).quantized
    psi = model.codebooks[0].projection
    weight = psi.weight.numpy()
    weight[SMALL.embed_dim:] = 0.0
    psi.weight.assign(weight)
    result = model.quantize_intermediate(embedded, final_codes, 1)
    plain = nearest_code(ops.linear(embedded, psi.weight[:SMALL.embed_dim], psi.bias), model.codebooks[0].entries)
    np.testing.assert_array_equal(result.indices.numpy(), plain.indices.numpy())


def test_intermediate_layer_range_is_checked():
    model = HvqModel(SMALL)
    embedded = model.embed(features_for(SMALL, 1))
    codes = tf.zeros((1, SMALL.token_count, SMALL.codebook_dim))
    with pytest.raises(ShapeError):
        model.quantize_intermediate(embedded, codes, SMALL.layers)


def test_single_key_attention_returns_the_value_projection():
    attention = MultiHeadAttention(4, 1, Rng(0, RngStream.INIT), context_dim=3)
    x = tf.constant(np.random.default_rng(0).normal(size=(1, 5, 4)), dtype=tf.float32)
    context = tf.constant([[[0.5, -1.0, 2.0]]])
    expected = attention.output_projection(attention.value(context)).numpy()
    np.testing.assert_allclose(attention(x, context).numpy(), np.repeat(expected, 5, axis=1), rtol=1e-6, atol=1e-6)


def test_zero_cross_attention_values_ignore_the_memory():
    block = DecoderBlock(8, 2, 2, Rng(0, RngStream.INIT), memory_dim=3)
    block.cross_attention.value.weight.assign(tf.zeros_like(block.cross_attention.value.weight))
    x = tf.constant(np.random.default_rng(1).normal(size=(2, 4, 8)), dtype=tf.float32)
    first = block(x, tf.ones((2, 4, 3)))
    second = block(x, tf.constant(np.random.default_rng(2).normal(size=(2, 4, 3)), dtype=tf.float32))
    np.testing.assert_array_equal(first.numpy(), second.numpy())


def test_decoder_block_is_three_plain_residuals():
    block = DecoderBlock(8, 2, 2, Rng(5, RngStream.INIT), memory_dim=3)
    x = tf.constant(np.random.default_rng(3).normal(size=(2, 4, 8)), dtype=tf.float32)
    memory = tf.constant(np.random.default_rng(4).normal(size=(2, 4, 3)), dtype=tf.float32)
    queries = block.self_attention(x, x) + x
    attended = block.cross_attention(queries, memory) + queries
    expected = block.ffn(attended) + attended
    np.testing.assert_allclose(block(x, memory).numpy(), expected.numpy(), rtol=0, atol=1e-6)
    assert not any('norm' in name for name in block.named_parameters())


def test_decoder_block_without_cross_values_is_attention_and_ffn():
    block = DecoderBlock(8, 2, 2, Rng(6, RngStream.INIT), memory_dim=3)
    for variable in (block.cross_attention.value.weight, block.cross_attention.value.bias,
                     block.cross_attention.output_projection.bias):
        variable.assign(tf.zeros_like(variable))
    x = tf.constant(np.random.default_rng(5).normal(size=(1, 4, 8)), dtype=tf.float32)
    queries = x + block.self_attention(x, x)
    expected = queries + block.ffn(queries)
    np.testing.assert_allclose(block(x, tf.ones((1, 4, 3))).numpy(), expected.numpy(), rtol=0, atol=1e-6)


def test_decoder_is_seeded_by_one_query_tensor():
    model = HvqModel(SMALL)
    assert list(model.parameter_names) == ['decoder_queries']
    assert model.decoder_queries.shape == (SMALL.token_count, SMALL.embed_dim)


def test_reconstruction_has_feature_shape():
    model = HvqModel(SMALL)
    result = model.forward(features_for(SMALL, 3))
    assert result.reconstruction.shape == (3, SMALL.token_count, SMALL.feature_dim)
    assert len(result.codes) == SMALL.layers


def test_loss_is_zero_for_perfect_reconstruction_and_quantization():
    features = tf.constant(features_for(SMALL, 2))
    vectors = tf.ones((2, SMALL.token_count, SMALL.codebook_dim))
    result = QuantizationResult(vectors, vectors, tf.zeros((2, SMALL.token_count), tf.int32),
                                tf.zeros((2, SMALL.token_count)))
    losses = hvq_loss(features, features, [result, result])
    assert all(float(value) == 0.0 for value in losses.values())


def test_loss_terms_are_per_token_squared_norms():
    features = tf.zeros((1, 2, 3))
    reconstruction = tf.constant([[[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]]])
    projected = tf.constant([[[1.0, 0.0], [0.0, 0.0]]])
    quantized = tf.constant([[[0.0, 0.0], [0.0, 2.0]]])
    result = QuantizationResult(projected, quantized, tf.zeros((1, 2), tf.int32), tf.constant([[1.0, 4.0]]))
    losses = hvq_loss(features, reconstruction, [result, result])
    assert float(losses['reconstruction']) == 1.5
    assert float(losses['codebook']) == 5.0
    assert float(losses['commitment']) == 5.0
    assert float(losses['loss']) == 11.5


def test_structural_score_averages_token_distances():
    model = HvqModel(SMALL)
    features = features_for(SMALL, 3)
    result = model.forward(features)
    difference = result.features.numpy() - result.reconstruction.numpy()
    expected = np.mean(np.sum(difference ** 2, axis=-1), axis=1)
    np.testing.assert_allclose(model.structural_score(features).numpy(), expected, rtol=1e-5)


def test_codebook_gradient_comes_only_from_the_codebook_term():
    model = HvqModel(SMALL)
    features = features_for(SMALL, 2)
    parameters = model.trainable_parameters()
    graph = Graph(parameters)
    values = graph.forward(lambda: tuple(model.forward(features).losses[name]
                                         for name in ['loss', 'codebook', 'commitment', 'reconstruction']))
    total = graph.backward(values[0])
    codebook = graph.backward(values[1])
    commitment = graph.backward(values[2])
    reconstruction = graph.backward(values[3])
    for layer in range(1, SMALL.layers + 1):
        name = f'hvq.codebook.{layer}.entries'
        np.testing.assert_array_equal(total[name].numpy(), codebook[name].numpy())
        assert np.all(commitment[name].numpy() == 0.0)
        assert np.all(reconstruction[name].numpy() == 0.0)
    for name, gradient in codebook.items():
        if not name.endswith('.entries'):
            assert np.all(gradient.numpy() == 0.0), name


@pytest.mark.parametrize('exact', [False, True])
def test_exact_forward_cuts_the_reconstruction_path_to_the_final_projection(exact):
    model = HvqModel(SMALL)
    features = features_for(SMALL, 2)
    graph = Graph(model.trainable_parameters())
    graph.forward(lambda: model.forward(features, exact=exact).losses['reconstruction'])
    gradient = graph.backward()[f'hvq.codebook.{SMALL.layers}.psi.weight'].numpy()
    assert np.any(gradient != 0.0) != exact


def test_straight_through_holds_at_every_quantization_site():
    model = HvqModel(SMALL)
    features = features_for(SMALL, 2)
    graph = Graph(model.trainable_parameters())
    forward = graph.forward(lambda: _reconstruction_and_forward(model, features))[1]
    pre = graph.gradient_of(forward.losses['reconstruction'], [q.projected for q in forward.quantizations])
    post = graph.gradient_of(forward.losses['reconstruction'], forward.codes)
    assert len(pre) == SMALL.layers
    for pre_gradient, post_gradient in zip(pre, post):
        np.testing.assert_array_equal(pre_gradient.numpy(), post_gradient.numpy())


def _reconstruction_and_forward(model: HvqModel, features: np.ndarray):
    forward = model.forward(features)
    return forward.losses['reconstruction'], forward


@pytest.mark.parametrize('seed', [seed if seed < 20 else pytest.param(seed, marks=pytest.mark.slow)
                                  for seed in range(100)])
def test_gradients_match_finite_differences(seed):
    settings = HvqSettings(feature_dim=2, embed_dim=4, layers=2, codebook_size=2, codebook_dim=2, heads=1,
                           mlp_ratio=1, token_count=2)
    model = HvqModel(settings, seed=seed, dtype='float64')
    for codebook in model.codebooks:
        codebook.entries.assign(Rng(seed, RngStream.INIT).child(99).normal(0.5, codebook.entries.shape))
    features = tf.constant(features_for(settings, 1, seed, np.float64))
    graph = Graph(model.trainable_parameters())
    error = finite_difference_check(graph, lambda: model.forward(features, exact=True).losses['loss'], 1e-6,
                                    Rng(seed, RngStream.INIT).child(7), samples_per_parameter=2,
                                    guard=lambda: model.tokenize(features))
    assert error < 1e-4


def test_structural_score_is_non_negative_and_order_invariant():
    model = HvqModel(SMALL)
    features = features_for(SMALL, 6)
    scores = structural_scores(model, features, 4)
    assert scores.shape == (6,)
    assert np.all(scores >= 0.0)
    order = np.array([5, 2, 0, 4, 1, 3])
    np.testing.assert_allclose(structural_scores(model, features[order], 4), scores[order], rtol=1e-6)


def test_tokenize_returns_all_layer_code_maps():
    model = HvqModel(SMALL)
    codes = model.tokenize(features_for(SMALL, 3))
    assert codes.shape == (3, SMALL.layers, SMALL.token_count)
    assert codes.min() >= 0 and codes.max() < SMALL.codebook_size


def hvq_training_config(epochs: int) -> dict:
    return {'hvq_epochs': epochs, 'batch_size': 5, 'seed_init': 0, 'hvq_learning_rate': 1e-3,
            'hvq_weight_decay': 1e-4}


def test_zero_epochs_leave_the_model_unchanged():
    model = HvqModel(SMALL)
    before = model.parameter_hash()
    history = train_hvq(model, features_for(SMALL, 10), hvq_training_config(0), progress=False)
    assert history.epochs == []
    assert model.parameter_hash() == before


@pytest.mark.slow
def test_training_reduces_the_loss_and_is_reproducible():
    features = features_for(SMALL, 10)
    first = HvqModel(SMALL)
    history = train_hvq(first, features, hvq_training_config(25), progress=False)
    curve = history.curve('loss')
    assert len(curve) == 25
    assert curve[-1] < curve[0]
    second = HvqModel(SMALL)
    assert train_hvq(second, features, hvq_training_config(25), progress=False).curve('loss') == curve
    assert first.parameter_hash() == second.parameter_hash()


@pytest.mark.slow
def test_full_batch_loss_falls_at_every_early_step():
    features = features_for(SMALL, 10)
    falling = 0
    for seed in range(10):
        config = dict(hvq_training_config(50), batch_size=10, seed_init=seed)
        curve = np.array(train_hvq(HvqModel(SMALL, seed=seed), features, config, progress=False).curve('loss'))
        assert len(curve) == 50
        falling += int(np.all(np.diff(curve) < 0.0))
    assert falling >= 0.95 * 10
