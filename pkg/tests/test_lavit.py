import math
from dataclasses import replace

import numpy as np
import pytest
import tensorflow as tf

from definitions import RngStream, TargetMode
from models.hvq import HvqModel, HvqSettings
from models.lavit import (LavitModel, LavitSettings, LavitTargets,
                          alternative_target_forward, apply_mask,
                          compute_target_histogram, lavit_loss, logical_score,
                          score_masks)
from tensor_core.graph import Graph, finite_difference_check
from tensor_core.rng import Rng
from training.lavit_training import step_masks, train_lavit
from utility.errors import MaskError, TargetModeError

SETTINGS = LavitSettings(feature_dim=4, embed_dim=8, layers=1, heads=2, mlp_ratio=2, token_count=16, hvq_layers=2,
                         codebook_size=8, pixel_dim=12)
HVQ_SETTINGS = HvqSettings(feature_dim=4, embed_dim=8, layers=2, codebook_size=8, codebook_dim=3, heads=2,
                           mlp_ratio=2, token_count=16)
GRID = (4, 4)


def lavit_for(mode: TargetMode) -> LavitModel:
    return LavitModel(replace(SETTINGS, target_mode=mode), seed=1)


def features_for(batch: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(batch, 16, 4)).astype(np.float32)


def codes_for(batch: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 8, size=(batch, 2, 16)).astype(np.int32)


def masks_for(batch: int) -> np.ndarray:
    return score_masks(list(range(batch)), GRID, 0.4, 1, 0)[0]


def zero_heads(model: LavitModel) -> None:
    for head in model.heads:
        head.weight.assign(tf.zeros_like(head.weight))
        head.bias.assign(tf.zeros_like(head.bias))


def test_full_mask_sequence_is_mask_embeddings_then_prediction_token():
    e = tf.constant([1.0, -1.0])
    p = tf.constant([5.0, 7.0])
    embedded = tf.constant(np.arange(8, dtype=np.float32).reshape(1, 4, 2))
    sequence = apply_mask(embedded, np.ones((1, 4), dtype=bool), e, p).numpy()[0]
    np.testing.assert_array_equal(sequence, [[1, -1], [1, -1], [1, -1], [1, -1], [5, 7]])


def test_visible_tokens_are_untouched():
    embedded = tf.constant(np.arange(8, dtype=np.float32).reshape(1, 4, 2))
    mask = np.array([[False, True, False, True]])
    sequence = apply_mask(embedded, mask, tf.zeros(2), tf.ones(2)).numpy()[0]
    np.testing.assert_array_equal(sequence[[0, 2]], embedded.numpy()[0, [0, 2]])
    assert sequence.shape == (5, 2)


def test_mask_shape_must_match_tokens():
    with pytest.raises(MaskError):
        apply_mask(tf.zeros((1, 4, 2)), np.ones((1, 3), dtype=bool), tf.zeros(2), tf.zeros(2))


def test_target_histogram_counts_masked_codes():
    histogram = compute_target_histogram(tf.constant([[3, 3, 1, 3]]), np.ones((1, 4), dtype=bool), 4)
    np.testing.assert_array_equal(histogram.numpy(), [[0.0, 0.25, 0.0, 0.75]])


def test_identical_masked_codes_give_one_hot():
    histogram = compute_target_histogram(tf.constant([[2, 2, 0, 1]]), np.array([[True, True, False, False]]), 4)
    np.testing.assert_array_equal(histogram.numpy(), [[0.0, 0.0, 1.0, 0.0]])


def test_target_histogram_matches_counting(numpy_rng):
    for _ in range(1000):
        codes = numpy_rng.integers(0, 8, size=16)
        mask = numpy_rng.random(16) < 0.4
        mask[numpy_rng.integers(0, 16)] = True
        expected = np.bincount(codes[mask], minlength=8) / mask.sum()
        histogram = compute_target_histogram(tf.constant(codes[None]), mask[None], 8, tf.float64).numpy()[0]
        np.testing.assert_allclose(histogram, expected, rtol=1e-12)
        order = numpy_rng.permutation(16)
        permuted = compute_target_histogram(tf.constant(codes[order][None]), mask[order][None], 8, tf.float64)
        np.testing.assert_array_equal(permuted.numpy()[0], histogram)


def test_empty_mask_has_no_histogram():
    with pytest.raises(MaskError):
        compute_target_histogram(tf.constant([[1, 2]]), np.zeros((1, 2), dtype=bool), 4)


def test_loss_examples():
    same = [tf.constant([[0.2, 0.8]])]
    assert float(lavit_loss(same, same)[0]) == 0.0
    assert float(lavit_loss([tf.constant([[1.0, 0.0]])], [tf.constant([[0.0, 1.0]])])[0]) == 2.0


def test_loss_is_bounded_by_twice_the_layer_count(numpy_rng):
    layers = 3
    predictions = [tf.nn.softmax(tf.constant(numpy_rng.normal(0, 4, size=(50, 8)))) for _ in range(layers)]
    targets = [tf.nn.softmax(tf.constant(numpy_rng.normal(0, 4, size=(50, 8)))) for _ in range(layers)]
    assert np.all(lavit_loss(predictions, targets).numpy() <= 2 * layers + 1e-9)


def test_predicted_histograms_are_distributions():
    model = lavit_for(TargetMode.HISTOGRAM)
    predictions = model.predict_histogram(model.build_sequence(features_for(3), masks_for(3)))
    assert len(predictions) == SETTINGS.hvq_layers
    for prediction in predictions:
        assert prediction.shape == (3, SETTINGS.codebook_size)
        np.testing.assert_allclose(prediction.numpy().sum(axis=-1), 1.0, atol=1e-6)


def test_zero_head_predicts_uniform_histogram():
    model = lavit_for(TargetMode.HISTOGRAM)
    zero_heads(model)
    for prediction in model.predict_histogram(model.build_sequence(features_for(2), masks_for(2))):
        np.testing.assert_allclose(prediction.numpy(), 1.0 / SETTINGS.codebook_size, rtol=1e-6)


def test_histogram_prediction_needs_histogram_heads():
    model = lavit_for(TargetMode.CODES)
    with pytest.raises(TargetModeError):
        model.predict_histogram(model.build_sequence(features_for(1), masks_for(1)))


def test_codes_mode_with_uniform_logits():
    model = lavit_for(TargetMode.CODES)
    zero_heads(model)
    mask = masks_for(2)
    losses = model.target_loss(features_for(2), mask, LavitTargets(tf.constant(codes_for(2)))).numpy()
    expected = mask.sum(axis=1) * SETTINGS.hvq_layers * math.log(SETTINGS.codebook_size)
    np.testing.assert_allclose(losses, expected, rtol=1e-5)


def test_features_mode_with_perfect_prediction():
    model = lavit_for(TargetMode.FEATURES)
    zero_heads(model)
    targets = LavitTargets(tf.constant(codes_for(2)), features=tf.zeros((2, 16, 4)))
    assert np.all(model.target_loss(features_for(2), masks_for(2), targets).numpy() == 0.0)


def test_pixels_mode_needs_patches():
    model = lavit_for(TargetMode.PIXELS)
    with pytest.raises(TargetModeError):
        model.target_loss(features_for(1), masks_for(1), LavitTargets(tf.constant(codes_for(1))))


def test_unknown_or_mismatched_mode_is_rejected():
    model = lavit_for(TargetMode.HISTOGRAM)
    sequence = model.build_sequence(features_for(1), masks_for(1))
    targets = LavitTargets(tf.constant(codes_for(1)))
    with pytest.raises(TargetModeError):
        alternative_target_forward(model, sequence, masks_for(1), targets, 'bogus')
    with pytest.raises(TargetModeError):
        alternative_target_forward(model, sequence, masks_for(1), targets, TargetMode.CODES)


@pytest.mark.parametrize('mode', list(TargetMode))
def test_every_mode_gives_finite_per_image_losses(mode):
    model = lavit_for(mode)
    features = features_for(3)
    targets = LavitTargets(tf.constant(codes_for(3)), tf.constant(features),
                           tf.constant(np.ones((3, 16, 12), dtype=np.float32)))
    losses = model.target_loss(features, masks_for(3), targets).numpy()
    assert losses.shape == (3,)
    assert np.all(np.isfinite(losses)) and np.all(losses >= 0.0)


@pytest.mark.parametrize('mode', list(TargetMode))
def test_only_the_histogram_target_ignores_where_masked_codes_sit(mode):
    model = lavit_for(mode)
    features = features_for(1)
    mask = masks_for(1)
    positions = np.flatnonzero(mask[0])
    assert 2 <= len(positions) <= SETTINGS.codebook_size
    rolled = np.roll(positions, 1)

    codes = codes_for(1)
    codes[:, :, positions] = np.arange(len(positions))
    patches = np.random.default_rng(3).normal(size=(1, 16, SETTINGS.pixel_dim)).astype(np.float32)
    moved_codes, moved_features, moved_patches = codes.copy(), features.copy(), patches.copy()
    moved_codes[:, :, positions] = codes[:, :, rolled]
    moved_features[:, positions] = features[:, rolled]
    moved_patches[:, positions] = patches[:, rolled]

    before = model.target_loss(features, mask, LavitTargets(tf.constant(codes), tf.constant(features),
                                                            tf.constant(patches))).numpy()
    after = model.target_loss(features, mask, LavitTargets(tf.constant(moved_codes), tf.constant(moved_features),
                                                           tf.constant(moved_patches))).numpy()
    if mode == TargetMode.HISTOGRAM:
        np.testing.assert_array_equal(after, before)
    else:
        assert np.all(np.abs(after - before) > 1e-6)


def test_every_visible_token_reaches_the_prediction_token():
    model = LavitModel(SETTINGS, seed=1, dtype='float64')
    features = tf.constant(features_for(1).astype(np.float64))
    mask = masks_for(1)
    for token in range(SETTINGS.token_count):
        tangent = np.zeros((1, SETTINGS.token_count, SETTINGS.feature_dim))
        tangent[0, token] = 1.0
        with tf.autodiff.ForwardAccumulator(features, tf.constant(tangent)) as accumulator:
            prediction_state = model.encode(model.build_sequence(features, mask))[:, -1, :]
        change = np.abs(accumulator.jvp(prediction_state).numpy()).max()
        if mask[0, token]:
            assert change == 0.0
        else:
            assert change > 1e-8


def test_single_mask_score_is_the_target_loss():
    model = lavit_for(TargetMode.HISTOGRAM)
    features = features_for(3)
    targets = LavitTargets(tf.constant(codes_for(3)))
    mean, spread = logical_score(model, features, targets, [4, 5, 6], GRID, 0.4, 1, 9)
    mask = score_masks([4, 5, 6], GRID, 0.4, 1, 9)[0]
    np.testing.assert_array_equal(mean, model.target_loss(features, mask, targets).numpy().astype(np.float64))
    assert np.all(spread == 0.0)


def test_logical_score_depends_only_on_image_index():
    model = lavit_for(TargetMode.HISTOGRAM)
    features = features_for(3)
    targets = LavitTargets(tf.constant(codes_for(3)))
    together, _ = logical_score(model, features, targets, [10, 11, 12], GRID, 0.4, 3, 9)
    alone, _ = logical_score(model, features[1:2], LavitTargets(targets.codes[1:2]), [11], GRID, 0.4, 3, 9)
    np.testing.assert_allclose(alone, together[1:2], rtol=1e-6)


def test_logical_score_needs_a_mask():
    with pytest.raises(MaskError):
        logical_score(lavit_for(TargetMode.HISTOGRAM), features_for(1), LavitTargets(tf.constant(codes_for(1))),
                      [0], GRID, 0.4, 0, 0)


def lavit_training_config(epochs: int) -> dict:
    return {'lavit_epochs': epochs, 'batch_size': 4, 'seed_init': 0, 'seed_mask': 3, 'mask_ratio': 0.4,
            'lavit_learning_rate': 1e-3, 'lavit_weight_decay': 1e-4}


def test_step_masks_are_reproducible():
    config = lavit_training_config(1)
    np.testing.assert_array_equal(step_masks(config, GRID, 7, 4), step_masks(config, GRID, 7, 4))
    assert step_masks(config, GRID, 7, 4).shape == (4, 16)


def test_training_leaves_the_tokenizer_untouched():
    hvq = HvqModel(HVQ_SETTINGS)
    before = hvq.parameter_hash()
    model = lavit_for(TargetMode.HISTOGRAM)
    initial = model.parameter_hash()
    history = train_lavit(model, hvq, features_for(8), lavit_training_config(2), progress=False)
    assert len(history.curve('loss')) == 2
    assert hvq.parameter_hash() == before
    assert model.parameter_hash() != initial


def test_zero_epochs_return_an_empty_history():
    hvq = HvqModel(HVQ_SETTINGS)
    model = lavit_for(TargetMode.FEATURES)
    initial = model.parameter_hash()
    assert train_lavit(model, hvq, features_for(4), lavit_training_config(0), progress=False).epochs == []
    assert model.parameter_hash() == initial


def test_pixel_training_needs_patches():
    with pytest.raises(TargetModeError):
        train_lavit(lavit_for(TargetMode.PIXELS), HvqModel(HVQ_SETTINGS), features_for(4),
                    lavit_training_config(1), progress=False)


@pytest.mark.parametrize('seed', [seed if seed < 10 else pytest.param(seed, marks=pytest.mark.slow)
                                  for seed in range(100)])
def test_histogram_loss_gradients_match_finite_differences(seed):
    settings = LavitSettings(feature_dim=2, embed_dim=4, layers=1, heads=1, mlp_ratio=1, token_count=4, hvq_layers=2,
                             codebook_size=4, pixel_dim=3)
    model = LavitModel(settings, seed=seed, dtype='float64')
    for head in model.heads:
        head.weight.assign(Rng(seed, RngStream.INIT).child(head.out_dim).normal(1.0, head.weight.shape))
    features = tf.constant(np.random.default_rng(seed).normal(size=(1, 4, 2)))
    mask = np.array([[True, True, False, False]])
    targets = LavitTargets(tf.constant(np.random.default_rng(seed).integers(0, 4, size=(1, 2, 4)), dtype=tf.int32))
    graph = Graph(model.trainable_parameters())
    error = finite_difference_check(graph, lambda: model.target_loss(features, mask, targets)[0], 1e-6,
                                    Rng(seed, RngStream.INIT).child(3), samples_per_parameter=2)
    assert error < 1e-4
