import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import tensorflow as tf

from definitions import RngStream, TargetMode
from models.layers import LayerNorm, Linear, ParameterLayer, TransformerBlock
from models.masking import batch_masks
from tensor_core import ops
from tensor_core.rng import Rng
from utility.errors import MaskError, ShapeError, TargetModeError


@dataclass(frozen=True)
class LavitSettings:
    feature_dim: int = 64
    embed_dim: int = 128
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    token_count: int = 64
    hvq_layers: int = 4
    codebook_size: int = 64
    pixel_dim: int = 48
    target_mode: TargetMode = TargetMode.HISTOGRAM

    @classmethod
    def from_config(cls, config: Dict[str, Any], token_count: int, pixel_dim: int,
                    target_mode: Optional[TargetMode] = None) -> 'LavitSettings':
        return cls(config['feature_dim'], config['embed_dim'], config['lavit_layers'], config['heads'],
                   config['mlp_ratio'], token_count, config['hvq_layers'], config['codebook_size'], pixel_dim,
                   TargetMode(target_mode or config['target_mode']))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class LavitTargets:
    """Everything a prediction target can be built from for one batch."""
    codes: tf.Tensor  # (B, L, N) int32 code maps of the frozen tokenizer
    features: Optional[tf.Tensor] = None  # (B, N, d0) backbone tokens
    patches: Optional[tf.Tensor] = None  # (B, N, pixel_dim) raw image patches


def apply_mask(embedded: tf.Tensor, mask: tf.Tensor, mask_embedding: tf.Tensor,
               prediction_token: tf.Tensor) -> tf.Tensor:
    """Replaces masked tokens by `mask_embedding` and appends the prediction token, (B, N + 1, d)."""
    mask = tf.convert_to_tensor(mask, dtype=tf.bool)
    if mask.shape.rank != 2 or mask.shape[1] != embedded.shape[1]:
        raise MaskError(f'Mask shape {mask.shape} does not index {embedded.shape[1]} tokens.')
    mask_tokens = tf.broadcast_to(tf.cast(mask_embedding, embedded.dtype), tf.shape(embedded))
    sequence = tf.where(mask[..., None], mask_tokens, embedded)
    batch = tf.shape(embedded)[0]
    prediction = tf.tile(tf.cast(prediction_token, embedded.dtype)[None, None, :], tf.stack([batch, 1, 1]))
    return ops.concat([sequence, prediction], axis=1)


def compute_target_histogram(codes: tf.Tensor, mask: tf.Tensor, codebook_size: int,
                             dtype: tf.DType = tf.float32) -> tf.Tensor:
    """Normalized code counts over the masked positions, (B, K)."""
    mask = tf.convert_to_tensor(mask, dtype=tf.bool)
    counts = tf.reduce_sum(tf.cast(mask, dtype), axis=-1, keepdims=True)
    if tf.executing_eagerly() and bool(tf.reduce_any(counts == 0)):
        raise MaskError('The target histogram needs at least one masked position.')
    one_hot = tf.one_hot(tf.cast(codes, tf.int32), codebook_size, dtype=dtype)
    histogram = tf.reduce_sum(one_hot * tf.cast(mask, dtype)[..., None], axis=-2)
    return histogram / counts


def lavit_loss(predictions: List[tf.Tensor], targets: List[tf.Tensor]) -> tf.Tensor:
    """Sum over layers and entries of |P - Q|; one value per leading batch index."""
    if len(predictions) != len(targets):
        raise ShapeError(f'{len(predictions)} predicted histograms against {len(targets)} targets.')
    if not predictions:
        raise ShapeError('lavit_loss needs at least one layer.')
    return tf.add_n([ops.l1(prediction, target, axis=-1) for prediction, target in zip(predictions, targets)])


def _masked_mean(values: tf.Tensor, mask: tf.Tensor) -> tf.Tensor:
    weights = tf.cast(mask, values.dtype)
    per_token = tf.reduce_mean(values, axis=-1)
    return tf.reduce_sum(per_token * weights, axis=-1) / tf.reduce_sum(weights, axis=-1)


class LavitModel(ParameterLayer):
    """Masked-token transformer predicting what the frozen tokenizer saw under the mask."""

    def __init__(self, settings: LavitSettings, seed: int = 0, dtype: str = 'float32') -> None:
        super().__init__('lavit', dtype)
        self.settings: LavitSettings = settings
        self.target_mode: TargetMode = settings.target_mode
        rng = Rng(seed, RngStream.INIT).child(1)
        d = settings.embed_dim

        self.input_embedding = self.register(
            'input_embedding', Linear(settings.feature_dim, d, rng.child(0), 'input_embedding', dtype))
        self.mask_embedding: tf.Variable = self.create_parameter('mask_embedding', (d,), rng.child(1))
        self.prediction_token: tf.Variable = self.create_parameter('prediction_token', (d,), rng.child(2))
        self.position: tf.Variable = self.create_parameter('position', (settings.token_count + 1, d), rng.child(3))
        self.blocks: List[TransformerBlock] = [
            self.register(f'block.{l}', TransformerBlock(d, settings.heads, settings.mlp_ratio, rng.child(100 + l),
                                                         f'block_{l}', dtype))
            for l in range(1, settings.layers + 1)]
        self.final_norm = self.register('final_norm', LayerNorm(d, 'final_norm', dtype))

        self.heads: List[Linear] = []
        head_rng = rng.child(200)
        if self.target_mode in (TargetMode.HISTOGRAM, TargetMode.CODES):
            for l in range(1, settings.hvq_layers + 1):
                self.heads.append(self.register(f'head.{l}', Linear(d, settings.codebook_size, head_rng.child(l),
                                                                    f'head_{l}', dtype)))
        elif self.target_mode == TargetMode.FEATURES:
            self.heads.append(self.register('head', Linear(d, settings.feature_dim, head_rng, 'head', dtype)))
        elif self.target_mode == TargetMode.PIXELS:
            self.heads.append(self.register('head', Linear(d, settings.pixel_dim, head_rng, 'head', dtype)))
        else:
            raise TargetModeError(f"Unknown target mode '{self.target_mode}'.")

    def embed(self, features: tf.Tensor) -> tf.Tensor:
        features = tf.convert_to_tensor(features, dtype=self.dtype)
        expected = [self.settings.token_count, self.settings.feature_dim]
        if features.shape.rank != 3 or features.shape.as_list()[1:] != expected:
            raise ShapeError(f'LAViT expects features shaped (B, {expected[0]}, {expected[1]}), got {features.shape}.')
        return self.input_embedding(features)

    def build_sequence(self, features: tf.Tensor, mask: tf.Tensor) -> tf.Tensor:
        sequence = apply_mask(self.embed(features), mask, self.mask_embedding, self.prediction_token)
        return sequence + self.position

    def encode(self, sequence: tf.Tensor) -> tf.Tensor:
        x = sequence
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)

    def call(self, sequence: tf.Tensor) -> tf.Tensor:
        return self.encode(sequence)

    def predict_histogram(self, sequence: tf.Tensor) -> List[tf.Tensor]:
        if self.target_mode != TargetMode.HISTOGRAM:
            raise TargetModeError(f"Histogram prediction needs target mode 'histogram', model has "
                                  f"'{self.target_mode.value}'.")
        prediction_state = self.encode(sequence)[:, -1, :]
        return [ops.softmax(head(prediction_state)) for head in self.heads]

    def target_loss(self, features: tf.Tensor, mask: tf.Tensor, targets: LavitTargets) -> tf.Tensor:
        """Per-image loss of this model's prediction target for one mask per image, (B,)."""
        return alternative_target_forward(self, self.build_sequence(features, mask), mask, targets,
                                          self.target_mode)

    def trainable_parameters(self) -> Dict[str, tf.Variable]:
        return self.named_parameters('lavit.')


def alternative_target_forward(model: LavitModel, sequence: tf.Tensor, mask: tf.Tensor, targets: LavitTargets,
                               mode: TargetMode) -> tf.Tensor:
    """Per-image loss for `mode`; the model must carry the heads of that mode."""
    if not isinstance(mode, TargetMode):
        try:
            mode = TargetMode(mode)
        except ValueError as error:
            raise TargetModeError(f"Unknown target mode '{mode}'.") from error
    if mode != model.target_mode:
        raise TargetModeError(f"Model heads are built for '{model.target_mode.value}', not '{mode.value}'.")
    mask = tf.convert_to_tensor(mask, dtype=tf.bool)
    dtype = sequence.dtype
    if mode == TargetMode.HISTOGRAM:
        predictions = model.predict_histogram(sequence)
        histograms = [compute_target_histogram(targets.codes[:, l, :], mask, model.settings.codebook_size, dtype)
                      for l in range(model.settings.hvq_layers)]
        return lavit_loss(predictions, histograms)

    token_states = model.encode(sequence)[:, :-1, :]
    if mode == TargetMode.CODES:
        weights = tf.cast(mask, dtype)
        total = tf.zeros(tf.shape(weights)[:1], dtype=dtype)
        for l, head in enumerate(model.heads):
            log_probabilities = tf.nn.log_softmax(head(token_states), axis=-1)
            picked = tf.gather(log_probabilities, tf.cast(targets.codes[:, l, :], tf.int32)[..., None],
                               batch_dims=2)[..., 0]
            total = total - tf.reduce_sum(picked * weights, axis=-1)
        return total
    reference = targets.features if mode == TargetMode.FEATURES else targets.patches
    if reference is None:
        raise TargetModeError(f"Target mode '{mode.value}' needs its regression targets.")
    prediction = model.heads[0](token_states)
    return _masked_mean(tf.square(prediction - tf.cast(reference, dtype)), mask)


def build_lavit(config: Dict[str, Any], token_count: int, pixel_dim: int,
                target_mode: Optional[TargetMode] = None, dtype: str = 'float32') -> LavitModel:
    settings = LavitSettings.from_config(config, token_count, pixel_dim, target_mode)
    return LavitModel(settings, int(config['seed_init']), dtype)


def score_masks(image_indices: List[int], grid: Tuple[int, int], ratio: float, n_masks: int,
                eval_seed: int) -> List[np.ndarray]:
    """Inference masks: mask k of image i comes from (eval seed, image index, k)."""
    base = Rng(eval_seed, RngStream.EVAL)
    return [batch_masks(grid, ratio, [base.child(index).child(k) for index in image_indices])
            for k in range(n_masks)]


def logical_score(model: LavitModel, features: np.ndarray, targets: LavitTargets, image_indices: List[int],
                  grid: Tuple[int, int], ratio: float, n_masks: int, eval_seed: int
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and standard deviation over `n_masks` masks of the per-image target loss.

    Mask losses are accumulated in ascending mask order.
    """
    if n_masks < 1:
        raise MaskError(f'n_masks must be at least 1, got {n_masks}.')
    per_mask: List[np.ndarray] = []
    for mask in score_masks(image_indices, grid, ratio, n_masks, eval_seed):
        per_mask.append(model.target_loss(features, mask, targets).numpy().astype(np.float64))
    losses = np.stack(per_mask)
    total = np.zeros(losses.shape[1], dtype=np.float64)
    for row in losses:
        total = total + row
    mean = total / n_masks
    logging.debug(f'scored {losses.shape[1]} images with {n_masks} masks')
    return mean, losses.std(axis=0)
