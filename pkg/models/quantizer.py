from dataclasses import dataclass

import numpy as np
import tensorflow as tf

from models.layers import Linear, ParameterLayer
from tensor_core import ops
from tensor_core.rng import Rng
from utility.errors import QuantizationError, ShapeError


@dataclass
class QuantizationResult:
    projected: tf.Tensor  # (B, N, d_q) pre-quantization vectors
    quantized: tf.Tensor  # (B, N, d_q) selected codebook rows
    indices: tf.Tensor  # (B, N) int32
    distances: tf.Tensor  # (B, N) squared distance to the selected row


def squared_distances(tokens: tf.Tensor, codebook: tf.Tensor) -> tf.Tensor:
    """Exact ||t - b_j||^2 for every token and entry, (..., K)."""
    if tokens.shape[-1] != codebook.shape[-1]:
        raise ShapeError(f'Token dim {tokens.shape[-1]} does not match codebook dim {codebook.shape[-1]}.')
    return tf.reduce_sum(tf.square(tokens[..., None, :] - codebook), axis=-1)


def lowest_index_argmin(distances: tf.Tensor) -> tf.Tensor:
    entries = tf.shape(distances)[-1]
    minimum = tf.reduce_min(distances, axis=-1, keepdims=True)
    candidates = tf.where(distances == minimum, tf.range(entries, dtype=tf.int32),
                          tf.fill(tf.shape(distances), entries))
    return tf.reduce_min(candidates, axis=-1)


def nearest_code(tokens: tf.Tensor, codebook: tf.Tensor) -> QuantizationResult:
    if codebook.shape[0] == 0:
        raise QuantizationError('Cannot quantize against an empty codebook.')
    distances = squared_distances(tokens, codebook)
    indices = lowest_index_argmin(distances)
    quantized = tf.gather(codebook, indices)
    selected = tf.reduce_min(distances, axis=-1)
    return QuantizationResult(tokens, quantized, indices, selected)


class Codebook(ParameterLayer):
    """K learnable entries of dimension d_q plus the projection psi into their space."""

    def __init__(self, input_dim: int, size: int, dim: int, rng: Rng, name: str = 'codebook',
                 dtype: str = 'float32') -> None:
        super().__init__(name, dtype)
        if size < 2:
            raise QuantizationError(f'A codebook needs at least 2 entries, got {size}.')
        self.size: int = size
        self.dim: int = dim
        self.projection = self.register('psi', Linear(input_dim, dim, rng.child(0), 'psi', dtype))
        self.entries: tf.Variable = self.create_parameter('entries', (size, dim), rng.child(1))

    def project(self, x: tf.Tensor) -> tf.Tensor:
        return self.projection(x)

    def quantize(self, x: tf.Tensor) -> QuantizationResult:
        return nearest_code(self.project(x), self.entries)

    def initialize_from(self, projected: np.ndarray, rng: Rng) -> None:
        """Samples entries from projected token vectors so no code starts dead."""
        vectors = np.asarray(projected).reshape(-1, self.dim)
        picks = rng.choice(len(vectors), size=self.size, replace=len(vectors) < self.size)
        self.entries.assign(vectors[picks].astype(self.dtype))


def straight_through_codes(result: QuantizationResult, exact: bool = False) -> tf.Tensor:
    """Quantized rows carrying the gradient of the pre-quantization vectors."""
    if exact:
        return result.quantized
    return ops.straight_through(result.projected, result.quantized)
