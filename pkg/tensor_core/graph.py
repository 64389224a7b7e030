import logging
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import tensorflow as tf

from tensor_core.ops import check_finite
from tensor_core.rng import Rng
from utility.errors import GraphError


class Graph:
    """One recorded evaluation of a scalar loss over named trainable parameters."""

    def __init__(self, parameters: Dict[str, tf.Variable]) -> None:
        self.parameters: Dict[str, tf.Variable] = parameters
        self._tape: Optional[tf.GradientTape] = None
        self._output: Optional[tf.Tensor] = None

    def forward(self, fn: Callable[..., Any], *inputs: Any) -> Any:
        with tf.GradientTape(persistent=True) as tape:
            output = fn(*inputs)
            if isinstance(output, tuple):
                loss = check_finite(output[0], 'forward output')
                output = (loss,) + tuple(output[1:])
            else:
                loss = output = check_finite(output, 'forward output')
        self._tape = tape
        self._output = loss
        return output

    def backward(self, loss: Optional[tf.Tensor] = None, sources: Optional[List[tf.Tensor]] = None
                 ) -> Dict[str, tf.Tensor]:
        if self._tape is None:
            raise GraphError('backward called before forward')
        target = self._output if loss is None else loss
        if tf.TensorShape(target.shape).rank != 0:
            raise GraphError(f'backward needs a scalar loss, got shape {target.shape}')
        names: List[str] = list(self.parameters.keys())
        gradients = self._tape.gradient(target, [self.parameters[name] for name in names],
                                        unconnected_gradients=tf.UnconnectedGradients.ZERO)
        return dict(zip(names, gradients))

    def gradient_of(self, loss: tf.Tensor, tensors: List[tf.Tensor]) -> List[tf.Tensor]:
        """Gradients with respect to intermediate tensors recorded during `forward`."""
        if self._tape is None:
            raise GraphError('backward called before forward')
        return self._tape.gradient(loss, tensors, unconnected_gradients=tf.UnconnectedGradients.ZERO)


def finite_difference_check(graph: Graph, loss_fn: Callable[[], tf.Tensor], eps: float, rng: Rng,
                            samples_per_parameter: int = 4,
                            guard: Optional[Callable[[], Any]] = None) -> float:
    """Max over sampled entries of |analytic - central| / max(1, |central|).

    `guard` returns a value that must stay identical under the +/- eps perturbation
    (e.g. code indices); entries that flip it are skipped.
    """
    if not 0.0 < eps <= 1e-2:
        raise GraphError(f'eps must lie in (0, 1e-2], got {eps}')
    for name, parameter in graph.parameters.items():
        if parameter.dtype != tf.float64:
            raise GraphError(f'finite difference check needs 64-bit parameters, {name} is {parameter.dtype.name}')

    graph.forward(loss_fn)
    analytic: Dict[str, np.ndarray] = {name: gradient.numpy() for name, gradient in graph.backward().items()}
    base_guard = guard() if guard is not None else None

    max_error: float = 0.0
    skipped: int = 0
    for name, parameter in graph.parameters.items():
        original: np.ndarray = parameter.numpy()
        flat_size: int = original.size
        picks = rng.choice(flat_size, size=min(samples_per_parameter, flat_size), replace=False)
        for flat_index in picks:
            index = np.unravel_index(int(flat_index), original.shape)
            values: List[float] = []
            stable: bool = True
            for direction in (1.0, -1.0):
                perturbed = original.copy()
                perturbed[index] += direction * eps
                parameter.assign(perturbed)
                values.append(float(loss_fn().numpy()))
                if guard is not None and not _same(guard(), base_guard):
                    stable = False
            parameter.assign(original)
            if not stable:
                skipped += 1
                continue
            central: float = (values[0] - values[1]) / (2.0 * eps)
            error: float = abs(float(analytic[name][index]) - central) / max(1.0, abs(central))
            max_error = max(max_error, error)
    if skipped:
        logging.debug(f'finite difference check skipped {skipped} entries near a discontinuity')
    return max_error


def _same(a: Any, b: Any) -> bool:
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return bool(np.array_equal(np.asarray(a), np.asarray(b)))
