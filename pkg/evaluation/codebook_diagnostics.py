import logging
from typing import Any, Dict, List

import numpy as np
import pandas as pd

from data.dataset_handler import DatasetSplit
from data.scene import SceneSpec, token_kind_map
from models.backbone import PatchBackbone
from models.hvq import HvqModel
from training.hvq_training import tokenize_all
from utility.performance import track_time

REDUNDANCY_THRESHOLD: float = 0.05


def usage_counts(codes: np.ndarray, codebook_size: int) -> np.ndarray:
    return np.bincount(np.asarray(codes, dtype=np.int64).ravel(), minlength=codebook_size)


def perplexity(counts: np.ndarray) -> float:
    """exp of the usage entropy: 1 for a single used code, K for uniform usage."""
    total = counts.sum()
    if total == 0:
        return 0.0
    probabilities = counts[counts > 0] / total
    return float(np.exp(-np.sum(probabilities * np.log(probabilities))))


def kind_code_table(codes: np.ndarray, kinds: np.ndarray, kind_names: List[str], codebook_size: int) -> pd.DataFrame:
    """Object kind x code token counts; background tokens (kind -1) are left out."""
    codes = np.asarray(codes, dtype=np.int64).ravel()
    kinds = np.asarray(kinds, dtype=np.int64).ravel()
    table = np.zeros((len(kind_names), codebook_size), dtype=np.int64)
    foreground = kinds >= 0
    np.add.at(table, (kinds[foreground], codes[foreground]), 1)
    return pd.DataFrame(table, index=kind_names, columns=list(range(codebook_size)))


def majority_codes(table: pd.DataFrame) -> Dict[str, int]:
    present = table[table.sum(axis=1) > 0]
    return {kind: int(np.argmax(row.to_numpy())) for kind, row in present.iterrows()}


def collision_proxy(table: pd.DataFrame) -> float:
    """Fraction of present object kinds whose majority code is shared with another kind."""
    majority = majority_codes(table)
    if not majority:
        return 0.0
    shared = pd.Series(list(majority.values())).value_counts()
    colliding = [kind for kind, code in majority.items() if shared[code] > 1]
    return len(colliding) / len(majority)


def redundancy_proxy(table: pd.DataFrame, threshold: float = REDUNDANCY_THRESHOLD) -> Dict[str, int]:
    """Codes above `threshold` of each kind's tokens."""
    totals = table.sum(axis=1)
    present = table[totals > 0]
    shares = present.div(totals[totals > 0], axis=0)
    return {kind: int((row > threshold).sum()) for kind, row in shares.iterrows()}


def exemplar_tokens(codes: np.ndarray, counts: np.ndarray, top: int = 8, per_code: int = 4
                    ) -> Dict[int, List[List[int]]]:
    """(image, token) positions of the first tokens assigned to each of the most used codes."""
    order = np.argsort(-counts, kind='stable')[:top]
    exemplars: Dict[int, List[List[int]]] = dict()
    for code in order:
        if counts[code] == 0:
            break
        images, tokens = np.nonzero(codes == code)
        exemplars[int(code)] = [[int(image), int(token)] for image, token in zip(images[:per_code], tokens[:per_code])]
    return exemplars


def layer_diagnostics(codes: np.ndarray, kinds: np.ndarray, kind_names: List[str], codebook_size: int
                      ) -> Dict[str, Any]:
    """Usage statistics of one layer's code maps, (B, N)."""
    counts = usage_counts(codes, codebook_size)
    table = kind_code_table(codes, kinds, kind_names, codebook_size)
    redundancy = redundancy_proxy(table)
    return {
        'usage': counts.tolist(),
        'perplexity': perplexity(counts),
        'dead_codes': int((counts == 0).sum()),
        'coverage': float((counts > 0).sum() / codebook_size),
        'kind_code_counts': {kind: row.tolist() for kind, row in table.iterrows()},
        'majority_codes': majority_codes(table),
        'collision': collision_proxy(table),
        'redundancy': redundancy,
        'mean_redundancy': float(np.mean(list(redundancy.values()))) if redundancy else 0.0,
        'exemplars': exemplar_tokens(codes, counts),
    }


def kind_names(spec: SceneSpec) -> List[str]:
    return [f'{kind.shape}-{kind.color[0]:02x}{kind.color[1]:02x}{kind.color[2]:02x}' for kind in spec.vocabulary]


@track_time
def codebook_diagnostics(hvq: HvqModel, backbone: PatchBackbone, split: DatasetSplit, spec: SceneSpec,
                         batch_size: int, map_count: int = 4) -> Dict[str, Any]:
    """Per-layer code usage, collision and redundancy of the HVQ tokenizer on one split."""
    features = backbone.extract_features(split.images)
    codes = tokenize_all(hvq, features, batch_size)
    token_size: int = backbone.patch_size * backbone.pool_size
    kinds = np.stack([token_kind_map(spec, objects, token_size) for objects in split.objects])
    names = kind_names(spec)
    grid = backbone.grid_size

    layers: List[Dict[str, Any]] = []
    for layer in range(codes.shape[1]):
        result = layer_diagnostics(codes[:, layer], kinds, names, hvq.settings.codebook_size)
        result['layer'] = layer + 1
        result['exemplar_ids'] = {code: [[split.ids[image], token] for image, token in positions]
                                  for code, positions in result['exemplars'].items()}
        layers.append(result)
        logging.info(f"layer {layer + 1}: perplexity {result['perplexity']:.2f}, dead codes {result['dead_codes']}, "
                     f"collision {result['collision']:.2f}, mean redundancy {result['mean_redundancy']:.2f}")

    return {
        'image_count': len(split),
        'codebook_size': hvq.settings.codebook_size,
        'kinds': names,
        'layers': layers,
        'code_maps': {split.ids[image]: codes[image].reshape(codes.shape[1], grid, grid).tolist()
                      for image in range(min(map_count, len(split)))},
    }


def exemplar_patches(split: DatasetSplit, positions: List[List[int]], token_size: int, grid: int) -> np.ndarray:
    """Pixel windows of the given (image, token) positions, (M, p, p, 3)."""
    patches = []
    for image, token in positions:
        row, column = divmod(token, grid)
        patches.append(split.images[image, row * token_size:(row + 1) * token_size,
                                    column * token_size:(column + 1) * token_size])
    return np.stack(patches) if patches else np.zeros((0, token_size, token_size, 3), dtype=np.uint8)
