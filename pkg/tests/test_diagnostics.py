import os

import numpy as np
import pytest

from data.dataset_handler import DatasetSplit
from data.scene import default_scene_spec
from definitions import AnomalyKind, AnomalyLabel
from evaluation.codebook_diagnostics import (collision_proxy, exemplar_patches,
                                             exemplar_tokens, kind_code_table,
                                             kind_names, layer_diagnostics,
                                             perplexity, redundancy_proxy,
                                             usage_counts)
from evaluation.create_plot import create_exemplar_plot


def test_single_code_has_perplexity_one():
    assert perplexity(usage_counts(np.full((3, 16), 5), 8)) == 1.0


def test_uniform_usage_has_perplexity_k():
    assert perplexity(usage_counts(np.arange(64) % 8, 8)) == pytest.approx(8.0)


def test_no_tokens_have_zero_perplexity():
    assert perplexity(np.zeros(4, dtype=np.int64)) == 0.0


def test_kind_table_counts_foreground_tokens_only():
    codes = np.array([[0, 1, 1, 2], [2, 2, 3, 0]])
    kinds = np.array([[-1, 0, 0, 1], [1, 1, -1, -1]])
    table = kind_code_table(codes, kinds, ['a', 'b'], 4)
    assert table.loc['a'].tolist() == [0, 2, 0, 0]
    assert table.loc['b'].tolist() == [0, 0, 3, 0]
    assert int(table.to_numpy().sum()) == int((kinds >= 0).sum())


def test_shared_majority_code_is_a_collision():
    codes = np.array([[1, 1, 1, 3, 2, 2]])
    kinds = np.array([[0, 0, 1, 1, 2, 2]])
    table = kind_code_table(codes, kinds, ['a', 'b', 'c'], 4)
    assert collision_proxy(table) == pytest.approx(2.0 / 3.0)


def test_redundancy_counts_codes_above_five_percent():
    codes = np.array([[0] * 18 + [1, 2]])
    kinds = np.zeros_like(codes)
    assert redundancy_proxy(kind_code_table(codes, kinds, ['a'], 4)) == {'a': 1}
    assert redundancy_proxy(kind_code_table(codes, kinds, ['a'], 4), threshold=0.01) == {'a': 3}


def test_exemplars_follow_usage_order():
    codes = np.array([[2, 2, 0], [2, 1, 1]])
    exemplars = exemplar_tokens(codes, usage_counts(codes, 4), top=2, per_code=2)
    assert list(exemplars) == [2, 1]
    assert exemplars[2] == [[0, 0], [0, 1]]


def test_layer_diagnostics_summary():
    codes = np.array([[0, 0, 1, 1]])
    result = layer_diagnostics(codes, np.array([[0, 0, 1, -1]]), ['a', 'b'], 4)
    assert result['dead_codes'] == 2
    assert result['coverage'] == 0.5
    assert result['majority_codes'] == {'a': 0, 'b': 1}
    assert result['collision'] == 0.0


def test_kind_names_are_unique():
    names = kind_names(default_scene_spec())
    assert len(set(names)) == len(names)


def test_exemplar_patches_cut_token_windows():
    images = np.zeros((1, 8, 8, 3), dtype=np.uint8)
    images[0, 4:8, 0:4] = 9
    split = DatasetSplit(['train/00000_none.ppm'], images, [AnomalyLabel.NORMAL], [AnomalyKind.NONE], [[]], [0])
    patches = exemplar_patches(split, [[0, 2], [0, 1]], 4, 2)
    assert patches.shape == (2, 4, 4, 3)
    assert np.all(patches[0] == 9) and np.all(patches[1] == 0)
    assert exemplar_patches(split, [], 4, 2).shape == (0, 4, 4, 3)


def test_exemplar_plot_shows_patches_of_every_code(tmp_path):
    images = np.zeros((1, 8, 8, 3), dtype=np.uint8)
    images[0, 4:8, 0:4] = 200
    split = DatasetSplit(['train/00000_none.ppm'], images, [AnomalyLabel.NORMAL], [AnomalyKind.NONE], [[]], [0])
    exemplars = exemplar_tokens(np.array([[0, 0, 1, 0]]), usage_counts(np.array([[0, 0, 1, 0]]), 2))
    patches = {code: exemplar_patches(split, positions, 4, 2) for code, positions in exemplars.items()}
    path = create_exemplar_plot(patches, 1, str(tmp_path))
    assert path == f'{tmp_path}/exemplars_layer_1.svg'
    assert os.path.exists(path) and os.path.exists(f'{tmp_path}/exemplars_layer_1.jpg')
