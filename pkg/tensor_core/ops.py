"""Shape-checked dense ops on tf tensors.

Shapes are validated when an op is constructed, so a mismatch fails at trace
time instead of broadcasting silently. Value checks (`check_finite`) run inside
compiled graphs as well.
"""
from typing import List, Optional, Sequence

import tensorflow as tf

from utility.errors import NonFiniteError, ShapeError


def _static_shape(x: tf.Tensor) -> List[Optional[int]]:
    return tf.TensorShape(x.shape).as_list()


def _require_same_shape(a: tf.Tensor, b: tf.Tensor, op_name: str) -> None:
    a_shape, b_shape = _static_shape(a), _static_shape(b)
    if len(a_shape) != len(b_shape) or any(
            x is not None and y is not None and x != y for x, y in zip(a_shape, b_shape)):
        raise ShapeError(f'{op_name}: shapes {a_shape} and {b_shape} do not match')


def matmul(a: tf.Tensor, b: tf.Tensor, transpose_b: bool = False) -> tf.Tensor:
    a_shape, b_shape = _static_shape(a), _static_shape(b)
    if len(a_shape) < 2 or len(b_shape) < 2:
        raise ShapeError(f'matmul: operands need rank >= 2, got {a_shape} and {b_shape}')
    inner_b = b_shape[-1] if transpose_b else b_shape[-2]
    if a_shape[-1] is not None and inner_b is not None and a_shape[-1] != inner_b:
        raise ShapeError(f'matmul: inner dimensions differ, {a_shape} x {b_shape}')
    if len(a_shape) != len(b_shape):
        if len(b_shape) != 2:
            raise ShapeError(f'matmul: batch ranks differ, {a_shape} x {b_shape}')
        # (..., n, k) x (k, m)
        return tf.tensordot(a, tf.transpose(b) if transpose_b else b, axes=[[len(a_shape) - 1], [0]])
    return tf.linalg.matmul(a, b, transpose_b=transpose_b)


def linear(x: tf.Tensor, weight: tf.Tensor, bias: Optional[tf.Tensor] = None) -> tf.Tensor:
    out = matmul(x, weight)
    if bias is not None:
        if _static_shape(bias) != [_static_shape(weight)[-1]]:
            raise ShapeError(f'linear: bias shape {_static_shape(bias)} does not fit weight {_static_shape(weight)}')
        out = out + bias
    return out


def softmax(x: tf.Tensor, axis: int = -1) -> tf.Tensor:
    return tf.nn.softmax(x, axis=axis)


def layer_norm(x: tf.Tensor, gamma: tf.Tensor, beta: tf.Tensor, epsilon: float = 1e-5) -> tf.Tensor:
    if _static_shape(gamma) != [_static_shape(x)[-1]] or _static_shape(beta) != [_static_shape(x)[-1]]:
        raise ShapeError(f'layer_norm: scale/offset must have shape [{_static_shape(x)[-1]}]')
    mean, variance = tf.nn.moments(x, axes=[-1], keepdims=True)
    return (x - mean) * tf.math.rsqrt(variance + epsilon) * gamma + beta


def gelu(x: tf.Tensor) -> tf.Tensor:
    return tf.nn.gelu(x, approximate=False)


def concat(values: Sequence[tf.Tensor], axis: int = -1) -> tf.Tensor:
    shapes = [_static_shape(value) for value in values]
    rank = len(shapes[0])
    axis_index = axis % rank
    for shape in shapes[1:]:
        if len(shape) != rank or any(
                i != axis_index and x is not None and y is not None and x != y
                for i, (x, y) in enumerate(zip(shapes[0], shape))):
            raise ShapeError(f'concat: incompatible shapes {shapes} along axis {axis}')
    return tf.concat(list(values), axis=axis)


def mean(x: tf.Tensor, axis=None) -> tf.Tensor:
    return tf.reduce_mean(x, axis=axis)


def l1(a: tf.Tensor, b: tf.Tensor, axis=None) -> tf.Tensor:
    _require_same_shape(a, b, 'l1')
    return tf.reduce_sum(tf.abs(a - b), axis=axis)


def l2(a: tf.Tensor, b: tf.Tensor, axis=None) -> tf.Tensor:
    """Squared euclidean distance."""
    _require_same_shape(a, b, 'l2')
    return tf.reduce_sum(tf.square(a - b), axis=axis)


def token_squared_error(a: tf.Tensor, b: tf.Tensor, axis=None) -> tf.Tensor:
    """Squared euclidean distance per token (last axis), averaged over the remaining axes or `axis`."""
    _require_same_shape(a, b, 'token_squared_error')
    return tf.reduce_mean(tf.reduce_sum(tf.square(a - b), axis=-1), axis=axis)


def stop_gradient(x: tf.Tensor, enabled: bool = True) -> tf.Tensor:
    return tf.stop_gradient(x) if enabled else x


@tf.custom_gradient
def _straight_through(pre: tf.Tensor, post: tf.Tensor):
    def grad(upstream: tf.Tensor):
        return upstream, tf.zeros_like(post)

    return tf.identity(post), grad


def straight_through(pre: tf.Tensor, post: tf.Tensor) -> tf.Tensor:
    """Forward value is `post` exactly; the gradient of `post` is handed to `pre` unchanged."""
    _require_same_shape(pre, post, 'straight_through')
    return _straight_through(pre, post)


def check_finite(x: tf.Tensor, name: str = 'tensor') -> tf.Tensor:
    if tf.executing_eagerly():
        if not bool(tf.reduce_all(tf.math.is_finite(x))):
            raise NonFiniteError(f'{name} contains NaN or Inf')
        return x
    return tf.debugging.check_numerics(x, f'{name} contains NaN or Inf')
