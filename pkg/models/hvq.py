import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import tensorflow as tf

from definitions import RngStream
from models.layers import DecoderBlock, Linear, ParameterLayer, TransformerBlock
from models.quantizer import Codebook, QuantizationResult, straight_through_codes
from tensor_core import ops
from tensor_core.rng import Rng
from utility.errors import ShapeError


@dataclass(frozen=True)
class HvqSettings:
    feature_dim: int = 64
    embed_dim: int = 128
    layers: int = 4
    codebook_size: int = 64
    codebook_dim: int = 32
    heads: int = 4
    mlp_ratio: int = 2
    token_count: int = 64

    @classmethod
    def from_config(cls, config: Dict[str, Any], token_count: int) -> 'HvqSettings':
        return cls(config['feature_dim'], config['embed_dim'], config['hvq_layers'], config['codebook_size'],
                   config['codebook_dim'], config['heads'], config['mlp_ratio'], token_count)

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


@dataclass
class HvqForward:
    features: tf.Tensor
    embedded: tf.Tensor
    hidden: List[tf.Tensor]
    quantizations: List[QuantizationResult]
    codes: List[tf.Tensor]  # what the decoder consumes, straight-through outside exact mode
    reconstruction: tf.Tensor
    losses: Dict[str, tf.Tensor] = field(default_factory=dict)


def hvq_loss(features: tf.Tensor, reconstruction: tf.Tensor, quantizations: List[QuantizationResult],
             exact: bool = False) -> Dict[str, tf.Tensor]:
    """Squared reconstruction error plus, per layer, ||sg(h) - b||^2 and ||h - sg(b)||^2.

    Every term is a squared norm per token averaged over tokens and images.
    `h` is the psi-projected pre-quantization vector and `b` the selected entry.
    `exact` drops the stop-gradients so the value and its derivative agree.
    """
    reconstruction_loss = ops.token_squared_error(features, reconstruction)
    codebook_loss = tf.zeros((), dtype=reconstruction_loss.dtype)
    commitment_loss = tf.zeros((), dtype=reconstruction_loss.dtype)
    for result in quantizations:
        stop = not exact
        codebook_loss = codebook_loss + ops.token_squared_error(ops.stop_gradient(result.projected, stop),
                                                                result.quantized)
        commitment_loss = commitment_loss + ops.token_squared_error(result.projected,
                                                                    ops.stop_gradient(result.quantized, stop))
    total = ops.check_finite(reconstruction_loss + codebook_loss + commitment_loss, 'hvq loss')
    return {'loss': total, 'reconstruction': reconstruction_loss, 'codebook': codebook_loss,
            'commitment': commitment_loss}


class HvqModel(ParameterLayer):
    """Hierarchical vector-quantized transformer reconstructing backbone features.

    Encoder block l produces h^l; the last state is quantized against codebook L and
    every earlier state h^(l-1) is quantized against codebook l after being joined
    with z^L. Decoder block l attends to z^l from learnable per-position queries.
    """

    def __init__(self, settings: HvqSettings, seed: int = 0, dtype: str = 'float32') -> None:
        super().__init__('hvq', dtype)
        self.settings: HvqSettings = settings
        self.seed: int = seed
        rng = Rng(seed, RngStream.INIT).child(0)
        d, layers = settings.embed_dim, settings.layers

        self.input_embedding = self.register(
            'input_embedding', Linear(settings.feature_dim, d, rng.child(0), 'input_embedding', dtype))
        self.encoder_blocks: List[TransformerBlock] = [
            self.register(f'encoder.{l}', TransformerBlock(d, settings.heads, settings.mlp_ratio, rng.child(100 + l),
                                                           f'encoder_{l}', dtype))
            for l in range(1, layers + 1)]
        self.codebooks: List[Codebook] = []
        for l in range(1, layers + 1):
            input_dim = d if l == layers else d + settings.codebook_dim
            self.codebooks.append(self.register(f'codebook.{l}', Codebook(
                input_dim, settings.codebook_size, settings.codebook_dim, rng.child(200 + l), f'codebook_{l}', dtype)))
        self.decoder_queries: tf.Variable = self.create_parameter(
            'decoder_queries', (settings.token_count, d), rng.child(1))
        self.decoder_blocks: List[DecoderBlock] = [
            self.register(f'decoder.{l}', DecoderBlock(d, settings.heads, settings.mlp_ratio, rng.child(300 + l),
                                                       f'decoder_{l}', dtype, settings.codebook_dim))
            for l in range(1, layers + 1)]
        self.output_head = self.register(
            'output_head', Linear(d, settings.feature_dim, rng.child(3), 'output_head', dtype))

    def _check_features(self, features: tf.Tensor) -> tf.Tensor:
        features = tf.convert_to_tensor(features, dtype=self.dtype)
        expected = [self.settings.token_count, self.settings.feature_dim]
        if features.shape.rank != 3 or features.shape.as_list()[1:] != expected:
            raise ShapeError(f'HVQ expects features shaped (B, {expected[0]}, {expected[1]}), got {features.shape}.')
        return features

    def embed(self, features: tf.Tensor) -> tf.Tensor:
        return self.input_embedding(self._check_features(features))

    def encode(self, embedded: tf.Tensor) -> List[tf.Tensor]:
        if embedded.shape[-1] != self.settings.embed_dim:
            raise ShapeError(f'Encoder expects dim {self.settings.embed_dim}, got {embedded.shape[-1]}.')
        hidden: List[tf.Tensor] = []
        x = embedded
        for block in self.encoder_blocks:
            x = block(x)
            hidden.append(x)
        return hidden

    def quantize_final(self, last_hidden: tf.Tensor) -> QuantizationResult:
        return self.codebooks[-1].quantize(last_hidden)

    def quantize_intermediate(self, previous_hidden: tf.Tensor, final_codes: tf.Tensor,
                              layer: int) -> QuantizationResult:
        """Quantizes h^(layer-1) joined with z^L against codebook `layer` (1-based, < L)."""
        if not 1 <= layer < self.settings.layers:
            raise ShapeError(f'Intermediate quantization needs 1 <= layer < {self.settings.layers}, got {layer}.')
        return self.codebooks[layer - 1].quantize(ops.concat([previous_hidden, final_codes], axis=-1))

    def quantize_all(self, embedded: tf.Tensor, hidden: List[tf.Tensor], exact: bool = False
                     ) -> Tuple[List[QuantizationResult], List[tf.Tensor]]:
        layers: int = self.settings.layers
        final = self.quantize_final(hidden[-1])
        final_codes = straight_through_codes(final, exact)
        quantizations: List[QuantizationResult] = []
        codes: List[tf.Tensor] = []
        states = [embedded] + hidden
        for layer in range(1, layers):
            result = self.quantize_intermediate(states[layer - 1], final_codes, layer)
            quantizations.append(result)
            codes.append(straight_through_codes(result, exact))
        quantizations.append(final)
        codes.append(final_codes)
        return quantizations, codes

    def decode(self, codes: List[tf.Tensor]) -> tf.Tensor:
        if len(codes) != self.settings.layers:
            raise ShapeError(f'Decoder needs {self.settings.layers} code maps, got {len(codes)}.')
        batch = tf.shape(codes[0])[0]
        x = tf.tile(self.decoder_queries[None], tf.stack([batch, 1, 1]))
        for block, layer_codes in zip(self.decoder_blocks, codes):
            x = block(x, layer_codes)
        return x

    def project(self, decoded: tf.Tensor) -> tf.Tensor:
        return self.output_head(decoded)

    def forward(self, features: tf.Tensor, exact: bool = False) -> HvqForward:
        features = self._check_features(features)
        embedded = self.input_embedding(features)
        hidden = self.encode(embedded)
        quantizations, codes = self.quantize_all(embedded, hidden, exact)
        reconstruction = self.project(self.decode(codes))
        result = HvqForward(features, embedded, hidden, quantizations, codes, reconstruction)
        result.losses = hvq_loss(features, reconstruction, quantizations, exact)
        return result

    def call(self, features: tf.Tensor) -> tf.Tensor:
        return self.forward(features).reconstruction

    def structural_score(self, features: tf.Tensor) -> tf.Tensor:
        """Per-image mean over tokens of the squared reconstruction distance ||h0_i - h~0_i||^2."""
        result = self.forward(features)
        return ops.token_squared_error(result.features, result.reconstruction, axis=1)

    def tokenize(self, features: tf.Tensor) -> np.ndarray:
        """Code maps of every layer, (B, L, N) int32; index 0 is layer 1."""
        features = self._check_features(features)
        embedded = self.input_embedding(features)
        quantizations, _ = self.quantize_all(embedded, self.encode(embedded))
        return np.stack([result.indices.numpy() for result in quantizations], axis=1)

    def initialize_codebooks(self, features: tf.Tensor, rng: Rng) -> None:
        """Seeds every codebook with projected vectors of one batch, final layer first."""
        features = self._check_features(features)
        embedded = self.input_embedding(features)
        hidden = self.encode(embedded)
        final_book = self.codebooks[-1]
        final_book.initialize_from(final_book.project(hidden[-1]).numpy(), rng.child(self.settings.layers))
        final_codes = self.quantize_final(hidden[-1]).quantized
        states = [embedded] + hidden
        for layer in range(1, self.settings.layers):
            book = self.codebooks[layer - 1]
            joined = ops.concat([states[layer - 1], final_codes], axis=-1)
            book.initialize_from(book.project(joined).numpy(), rng.child(layer))
        logging.info(f'initialized {self.settings.layers} codebooks from {int(features.shape[0])} images')

    def trainable_parameters(self) -> Dict[str, tf.Variable]:
        return self.named_parameters('hvq.')



def build_hvq(config: Dict[str, Any], token_count: int, dtype: str = 'float32',
              settings: Optional[HvqSettings] = None) -> HvqModel:
    return HvqModel(settings or HvqSettings.from_config(config, token_count), int(config['seed_init']), dtype)
