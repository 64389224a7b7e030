import os

import pandas as pd
import pytest

from conftest import write_config
from data.model_data import ModelData
from definitions import PipelineStage, TargetMode
from evaluation.evaluator import AnomalyEvaluator
from evaluation.report import scores_csv
from models.hvq import build_hvq
from models.lavit import build_lavit
from pipeline.commands import (RunPaths, build_backbone, load_dataset,
                               save_hvq_checkpoint, save_lavit_checkpoint)
from pipeline.run_config import RunConfig
from start_pipeline import main
from training.hvq_training import train_hvq
from training.lavit_training import train_lavit
from utility.file import file_hash, read_json


def run(command: str, config_path: str, *extra: str) -> int:
    return main([command, '--config', config_path, '--quiet', *extra])


def test_invalid_override_exits_with_config_error(tiny_config_path):
    assert run('gen-data', tiny_config_path, '--mask-ratio', '1.5') == 1


def test_stages_need_their_predecessors(tiny_config_path):
    assert run('train-hvq', tiny_config_path) == 2
    assert run('gen-data', tiny_config_path) == 0
    assert run('train-lavit', tiny_config_path) == 2
    assert run('eval', tiny_config_path) == 2
    assert run('diagnose', tiny_config_path) == 2


def test_resolved_config_is_stored_with_the_run(tiny_config_path):
    assert run('gen-data', tiny_config_path, '--n-masks', '3') == 0
    source = RunConfig(file_path=tiny_config_path)
    stored = RunConfig(file_path=RunPaths(source['out_dir']).config)
    assert stored['n_masks'] == 3
    assert stored['feature_dim'] == source['feature_dim']
    assert read_json(tiny_config_path)['n_masks'] == 2


@pytest.mark.slow
def test_end_to_end_run(tmp_path):
    config_path = write_config(str(tmp_path), plots=True)
    paths = RunPaths(str(tmp_path / 'run'))
    assert run('gen-data', config_path) == 0
    assert run('train-hvq', config_path) == 0
    assert run('eval', config_path) == 2
    assert run('train-lavit', config_path) == 0
    assert run('eval', config_path) == 0

    report = read_json(os.path.join(paths.reports, 'report.json'))
    assert report['image_count'] == 12
    assert set(report['configurations']) == {'hvq_only', 'lavit_only', 'fused'}
    for row in report['configurations'].values():
        assert all(0.0 <= value <= 1.0 for value in row['auroc'].values())
    scores = pd.read_csv(os.path.join(paths.reports, 'scores.csv'))
    assert len(scores) == 12
    assert os.path.exists(os.path.join(paths.plots, 'hvq_loss.svg'))
    assert os.path.exists(paths.stats)

    first_scores = file_hash(os.path.join(paths.reports, 'scores.csv'))
    assert run('eval', config_path) == 0
    assert file_hash(os.path.join(paths.reports, 'scores.csv')) == first_scores

    assert run('diagnose', config_path) == 0
    diagnostics = read_json(os.path.join(paths.diagnostics, 'codebook.json'))
    assert len(diagnostics['train']['layers']) == 2
    assert all(os.path.exists(os.path.join(paths.diagnostics, f'exemplars_layer_{layer}.svg')) for layer in (1, 2))


@pytest.mark.slow
def test_training_is_reproducible_across_runs(tmp_path):
    hashes = []
    for name in ['first', 'second']:
        directory = tmp_path / name
        directory.mkdir()
        config_path = write_config(str(directory))
        assert run('gen-data', config_path) == 0
        assert run('train-hvq', config_path) == 0
        hashes.append(ModelData.load(RunPaths(str(directory / 'run')).hvq_checkpoint, PipelineStage.HVQ)
                      .payload_hash())
    assert hashes[0] == hashes[1]


@pytest.mark.slow
def test_ablation_covers_every_target(tmp_path):
    config_path = write_config(str(tmp_path), lavit_epochs=1)
    paths = RunPaths(str(tmp_path / 'run'))
    assert run('gen-data', config_path) == 0
    assert run('train-hvq', config_path) == 0
    assert run('ablate', config_path) == 0
    report = read_json(os.path.join(paths.ablation, 'report.json'))
    assert set(report['ablation']) == {'pixels', 'features', 'codes', 'histogram'}
    modified = {mode: os.path.getmtime(paths.lavit_checkpoint(TargetMode(mode))) for mode in report['ablation']}
    assert run('ablate', config_path) == 0
    assert all(os.path.getmtime(paths.lavit_checkpoint(TargetMode(mode))) == stamp for mode, stamp in modified.items())


@pytest.mark.slow
def test_reloaded_checkpoints_score_like_the_models_in_memory(tmp_path):
    config_path = write_config(str(tmp_path))
    assert run('gen-data', config_path) == 0
    config = RunConfig(file_path=config_path)
    config.validate()
    paths = RunPaths(config['out_dir'])
    dataset = load_dataset(paths)
    train = dataset.get_train()

    backbone = build_backbone(config).calibrate(train.images)
    features = backbone.extract_features(train.images)
    patches = backbone.raw_patches(train.images)
    hvq = build_hvq(config, backbone.token_count)
    hvq_history = train_hvq(hvq, features, config, progress=False)
    lavit = build_lavit(config, backbone.token_count, patches.shape[-1])
    lavit_history = train_lavit(lavit, hvq, features, config, patches, progress=False)
    table, _ = AnomalyEvaluator(backbone, hvq, lavit, config).evaluate(dataset.get_validation(), dataset.get_test())

    hvq_data = save_hvq_checkpoint(config, paths, backbone, hvq, hvq_history)
    save_lavit_checkpoint(config, paths, lavit, lavit_history, hvq_data)
    assert run('eval', config_path) == 0
    with open(os.path.join(paths.reports, 'scores.csv'), 'rb') as scores_file:
        assert scores_file.read() == scores_csv(table).encode('utf-8')
