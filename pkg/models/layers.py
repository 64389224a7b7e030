import hashlib
import math
from typing import Dict, Optional, Tuple

import numpy as np
import tensorflow as tf
from tensorflow import keras

from tensor_core import ops
from tensor_core.rng import Rng

INIT_STD: float = 0.02


class ParameterLayer(keras.layers.Layer):
    """Keras layer whose weights carry stable, explicit names for checkpoint manifests.

    Weights are created eagerly in `__init__` and filled from an `Rng`, so two
    layers built from the same seed hold bitwise-identical values.
    """

    def __init__(self, name: str, dtype: str = 'float32') -> None:
        super().__init__(name=name, dtype=dtype)
        self.parameter_names: Dict[str, tf.Variable] = dict()
        self.sublayer_names: Dict[str, 'ParameterLayer'] = dict()

    def create_parameter(self, name: str, shape: Tuple[int, ...], rng: Optional[Rng] = None,
                         fill: Optional[float] = None, std: float = INIT_STD) -> tf.Variable:
        if fill is not None:
            value: np.ndarray = np.full(shape, fill)
        elif rng is not None:
            value = rng.truncated_normal(shape, std)
        else:
            value = np.zeros(shape)
        variable: tf.Variable = self.add_weight(name=name, shape=shape, dtype=self.dtype,
                                                initializer='zeros', trainable=True)
        variable.assign(value.astype(self.dtype))
        self.parameter_names[name] = variable
        return variable

    def register(self, name: str, layer: 'ParameterLayer') -> 'ParameterLayer':
        self.sublayer_names[name] = layer
        return layer

    def named_parameters(self, prefix: str = '') -> Dict[str, tf.Variable]:
        named: Dict[str, tf.Variable] = dict()
        for name, variable in self.parameter_names.items():
            named[prefix + name] = variable
        for name, layer in self.sublayer_names.items():
            named.update(layer.named_parameters(f'{prefix}{name}.'))
        return named

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        for name, variable in self.named_parameters().items():
            digest.update(name.encode('utf-8'))
            digest.update(np.ascontiguousarray(variable.numpy()).tobytes())
        return digest.hexdigest()


class Linear(ParameterLayer):
    def __init__(self, in_dim: int, out_dim: int, rng: Rng, name: str = 'linear', dtype: str = 'float32',
                 bias: bool = True) -> None:
        super().__init__(name, dtype)
        self.in_dim: int = in_dim
        self.out_dim: int = out_dim
        self.weight: tf.Variable = self.create_parameter('weight', (in_dim, out_dim), rng)
        self.bias: Optional[tf.Variable] = self.create_parameter('bias', (out_dim,)) if bias else None

    def call(self, x: tf.Tensor) -> tf.Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(ParameterLayer):
    def __init__(self, dim: int, name: str = 'norm', dtype: str = 'float32') -> None:
        super().__init__(name, dtype)
        self.gamma: tf.Variable = self.create_parameter('gamma', (dim,), fill=1.0)
        self.beta: tf.Variable = self.create_parameter('beta', (dim,))

    def call(self, x: tf.Tensor) -> tf.Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(ParameterLayer):
    def __init__(self, dim: int, heads: int, rng: Rng, name: str = 'attention', dtype: str = 'float32',
                 context_dim: Optional[int] = None) -> None:
        super().__init__(name, dtype)
        context_dim = dim if context_dim is None else context_dim
        if dim % heads:
            raise ValueError(f'Embedding dim {dim} is not divisible by {heads} heads.')
        self.dim: int = dim
        self.heads: int = heads
        self.head_dim: int = dim // heads
        self.query = self.register('query', Linear(dim, dim, rng.child(0), 'query', dtype))
        self.key = self.register('key', Linear(context_dim, dim, rng.child(1), 'key', dtype))
        self.value = self.register('value', Linear(context_dim, dim, rng.child(2), 'value', dtype))
        self.output_projection = self.register('output', Linear(dim, dim, rng.child(3), 'output', dtype))

    def _split_heads(self, x: tf.Tensor) -> tf.Tensor:
        batch, tokens = tf.shape(x)[0], tf.shape(x)[1]
        return tf.transpose(tf.reshape(x, (batch, tokens, self.heads, self.head_dim)), (0, 2, 1, 3))

    def attention_weights(self, x: tf.Tensor, context: tf.Tensor) -> tf.Tensor:
        q = self._split_heads(self.query(x))
        k = self._split_heads(self.key(context))
        return ops.softmax(ops.matmul(q, k, transpose_b=True) / math.sqrt(self.head_dim))

    def call(self, x: tf.Tensor, context: tf.Tensor) -> tf.Tensor:
        weights = self.attention_weights(x, context)
        v = self._split_heads(self.value(context))
        attended = tf.transpose(ops.matmul(weights, v), (0, 2, 1, 3))
        merged = tf.reshape(attended, (tf.shape(x)[0], tf.shape(x)[1], self.dim))
        return self.output_projection(merged)


class FeedForward(ParameterLayer):
    def __init__(self, dim: int, hidden_dim: int, rng: Rng, name: str = 'ffn', dtype: str = 'float32') -> None:
        super().__init__(name, dtype)
        self.expand = self.register('expand', Linear(dim, hidden_dim, rng.child(0), 'expand', dtype))
        self.contract = self.register('contract', Linear(hidden_dim, dim, rng.child(1), 'contract', dtype))

    def call(self, x: tf.Tensor) -> tf.Tensor:
        return self.contract(ops.gelu(self.expand(x)))


class TransformerBlock(ParameterLayer):
    """Pre-norm self-attention block: x + MSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: Rng, name: str = 'block',
                 dtype: str = 'float32') -> None:
        super().__init__(name, dtype)
        self.attention_norm = self.register('attention_norm', LayerNorm(dim, 'attention_norm', dtype))
        self.attention = self.register('attention', MultiHeadAttention(dim, heads, rng.child(0), 'attention', dtype))
        self.ffn_norm = self.register('ffn_norm', LayerNorm(dim, 'ffn_norm', dtype))
        self.ffn = self.register('ffn', FeedForward(dim, dim * mlp_ratio, rng.child(1), 'ffn', dtype))

    def call(self, x: tf.Tensor) -> tf.Tensor:
        normed = self.attention_norm(x)
        x = x + self.attention(normed, normed)
        return x + self.ffn(self.ffn_norm(x))


class DecoderBlock(ParameterLayer):
    """q = MSA(d) + d, then d~ = MCA(q, memory) + q, then FFN(d~) + d~; no normalization."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: Rng, name: str = 'decoder_block',
                 dtype: str = 'float32', memory_dim: Optional[int] = None) -> None:
        super().__init__(name, dtype)
        self.self_attention = self.register(
            'self_attention', MultiHeadAttention(dim, heads, rng.child(0), 'self_attention', dtype))
        self.cross_attention = self.register(
            'cross_attention', MultiHeadAttention(dim, heads, rng.child(1), 'cross_attention', dtype, memory_dim))
        self.ffn = self.register('ffn', FeedForward(dim, dim * mlp_ratio, rng.child(2), 'ffn', dtype))

    def call(self, x: tf.Tensor, memory: tf.Tensor) -> tf.Tensor:
        queries = x + self.self_attention(x, x)
        attended = queries + self.cross_attention(queries, memory)
        return attended + self.ffn(attended)
