import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import tensorflow as tf
from progressbar import ProgressBar
from tensorflow import keras

from definitions import RngStream
from models.hvq import HvqModel
from tensor_core.graph import Graph
from tensor_core.rng import Rng
from utility.errors import DivergenceError
from utility.performance import track_time

LOSS_PARTS: List[str] = ['loss', 'reconstruction', 'codebook', 'commitment']


@dataclass
class TrainingHistory:
    stage: str
    epochs: List[Dict[str, float]] = field(default_factory=list)

    def append(self, epoch: int, values: Dict[str, float]) -> None:
        self.epochs.append(dict(epoch=epoch, **values))

    def curve(self, key: str = 'loss') -> List[float]:
        return [entry[key] for entry in self.epochs]

    def to_dict(self) -> Dict[str, Any]:
        return {'stage': self.stage, 'epochs': self.epochs}


def build_optimizer(learning_rate: float, weight_decay: float) -> keras.optimizers.Optimizer:
    return keras.optimizers.AdamW(learning_rate=learning_rate, weight_decay=weight_decay)


def epoch_batches(count: int, batch_size: int, rng: Rng) -> List[np.ndarray]:
    order = rng.permutation(count)
    return [order[start:start + batch_size] for start in range(0, count, batch_size)]


def run_epochs(stage: str, epochs: int, count: int, batch_size: int, shuffle_rng: Rng,
               step: Callable[[int, np.ndarray], List[tf.Tensor]], parts: List[str],
               progress: bool = True) -> TrainingHistory:
    """Drives `step` over shuffled batches and logs the size-weighted mean of each loss part per epoch."""
    history = TrainingHistory(stage)
    bar: Optional[ProgressBar] = ProgressBar(max_value=epochs) if progress and epochs > 0 else None
    if bar is not None:
        bar.start()
    global_step: int = 0
    for epoch in range(1, epochs + 1):
        sums = np.zeros(len(parts), dtype=np.float64)
        for batch_indices in epoch_batches(count, batch_size, shuffle_rng.child(epoch)):
            try:
                values = step(global_step, batch_indices)
            except tf.errors.InvalidArgumentError as error:
                raise DivergenceError(f'{stage} training diverged at epoch {epoch}, step {global_step}: '
                                      f'{error.message}') from error
            sums += np.array([float(value) for value in values]) * len(batch_indices)
            global_step += 1
        means = sums / count
        if not np.all(np.isfinite(means)):
            raise DivergenceError(f'{stage} training diverged at epoch {epoch}: losses {means.tolist()}')
        history.append(epoch, dict(zip(parts, means.tolist())))
        logging.info(f'{stage} epoch {epoch}/{epochs}: ' + ', '.join(
            f'{name} {value:.6f}' for name, value in zip(parts, means)))
        if bar is not None:
            bar.update(epoch)
    if bar is not None:
        bar.finish()
    return history


@track_time
def train_hvq(model: HvqModel, features: np.ndarray, config: Dict[str, Any],
              progress: bool = True) -> TrainingHistory:
    """Trains HVQ-Trans in place on normal-only train features (B, N, d0)."""
    epochs: int = int(config['hvq_epochs'])
    batch_size: int = int(config['batch_size'])
    count: int = int(features.shape[0])
    logging.info(f'training HVQ on {count} images for {epochs} epochs')
    if epochs == 0:
        return TrainingHistory('hvq')

    shuffle_rng = Rng(int(config['seed_init']), RngStream.SHUFFLE).child(0)
    first_batch = epoch_batches(count, batch_size, shuffle_rng.child(1))[0]
    model.initialize_codebooks(features[np.sort(first_batch)], Rng(int(config['seed_init']), RngStream.INIT).child(2))

    parameters: Dict[str, tf.Variable] = model.trainable_parameters()
    names: List[str] = list(parameters.keys())
    optimizer = build_optimizer(float(config['hvq_learning_rate']), float(config['hvq_weight_decay']))
    optimizer.build([parameters[name] for name in names])
    features_tensor = tf.constant(features, dtype=model.dtype)

    def objective(batch: tf.Tensor):
        result = model.forward(batch)
        return tuple(result.losses[name] for name in LOSS_PARTS)

    @tf.function(reduce_retracing=True)
    def train_step(batch: tf.Tensor):
        graph = Graph(parameters)
        values = graph.forward(objective, batch)
        gradients = graph.backward()
        optimizer.apply_gradients([(gradients[name], parameters[name]) for name in names])
        return values

    def step(global_step: int, batch_indices: np.ndarray) -> List[tf.Tensor]:
        return list(train_step(tf.gather(features_tensor, np.sort(batch_indices))))

    return run_epochs('hvq', epochs, count, batch_size, shuffle_rng, step, LOSS_PARTS, progress)


def batched(fn: Callable[[np.ndarray], np.ndarray], features: np.ndarray, batch_size: int) -> np.ndarray:
    return np.concatenate([np.asarray(fn(features[start:start + batch_size]))
                           for start in range(0, len(features), batch_size)])


def structural_scores(model: HvqModel, features: np.ndarray, batch_size: int) -> np.ndarray:
    return batched(lambda batch: model.structural_score(batch).numpy(), features, batch_size).astype(np.float64)


def tokenize_all(model: HvqModel, features: np.ndarray, batch_size: int) -> np.ndarray:
    return batched(model.tokenize, features, batch_size)
