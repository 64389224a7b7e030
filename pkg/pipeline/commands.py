import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import tensorflow as tf

from data.dataset_handler import DatasetHandler, DatasetSplit
from data.model_data import ModelData, collect_parameters, layer_parameters, restore_parameters
from data.scene import default_scene_spec
from data.synthetic_data_handler import DatasetCounts, write_dataset
from definitions import (HVQ_CHECKPOINT_NAME, MANIFEST_NAME, AnomalyLabel,
                         PipelineStage, TargetMode, lavit_checkpoint_name)
from evaluation import create_plot
from evaluation.codebook_diagnostics import codebook_diagnostics, exemplar_patches
from evaluation.evaluator import AnomalyEvaluator, ScoreStats
from evaluation.report import build_report, summary_frame, write_report
from models.backbone import PatchBackbone
from models.hvq import HvqModel, HvqSettings, build_hvq
from models.lavit import LavitModel, LavitSettings, build_lavit
from pipeline.run_config import RunConfig
from training.hvq_training import TrainingHistory, train_hvq
from training.lavit_training import train_lavit
from utility.errors import CheckpointError, MissingStageError
from utility.file import RunStatistics, file_hash, write_json

THREADS_VARIABLE: str = 'LADMIM_THREADS'


@dataclass
class RunPaths:
    root: str

    @property
    def data(self) -> str:
        return os.path.join(self.root, 'data')

    @property
    def checkpoints(self) -> str:
        return os.path.join(self.root, 'checkpoints')

    @property
    def hvq_checkpoint(self) -> str:
        return os.path.join(self.checkpoints, HVQ_CHECKPOINT_NAME)

    def lavit_checkpoint(self, target_mode: TargetMode) -> str:
        return os.path.join(self.checkpoints, lavit_checkpoint_name(target_mode))

    @property
    def reports(self) -> str:
        return os.path.join(self.root, 'reports')

    @property
    def ablation(self) -> str:
        return os.path.join(self.root, 'ablation')

    @property
    def diagnostics(self) -> str:
        return os.path.join(self.root, 'diagnostics')

    @property
    def plots(self) -> str:
        return os.path.join(self.root, 'plots')

    @property
    def stats(self) -> str:
        return os.path.join(self.root, 'stats.json')

    @property
    def config(self) -> str:
        return os.path.join(self.root, 'config.json')


def worker_count(config: RunConfig) -> Optional[int]:
    """Configured worker threads capped by LADMIM_THREADS; None lets the pool pick."""
    workers: int = int(config['threads'])
    cap: Optional[str] = os.environ.get(THREADS_VARIABLE)
    if cap:
        cap_value = max(1, int(cap))
        workers = cap_value if workers == 0 else min(workers, cap_value)
    return workers or None


def configure_runtime(config: RunConfig) -> None:
    tf.config.experimental.enable_op_determinism()
    workers = worker_count(config)
    if workers is not None:
        try:
            tf.config.threading.set_intra_op_parallelism_threads(workers)
            tf.config.threading.set_inter_op_parallelism_threads(workers)
        except RuntimeError:
            logging.warning('TensorFlow already initialized, thread limits are left unchanged')


def load_dataset(paths: RunPaths) -> DatasetHandler:
    if not os.path.exists(os.path.join(paths.data, MANIFEST_NAME)):
        raise MissingStageError(f"The gen-data stage has not been run: no dataset at '{paths.data}'.")
    return DatasetHandler(paths.data)


def build_backbone(config: Dict[str, Any]) -> PatchBackbone:
    return PatchBackbone(int(config['image_size']), int(config['patch_size']), int(config['feature_dim']),
                         int(config['pool_size']), int(config['seed_init']))


def load_hvq(paths: RunPaths) -> Tuple[PatchBackbone, HvqModel, ModelData]:
    model_data = ModelData.load(paths.hvq_checkpoint, PipelineStage.HVQ)
    checkpoint_config = model_data.config
    backbone = PatchBackbone.from_parameters(int(checkpoint_config['image_size']), int(checkpoint_config['patch_size']),
                                             int(checkpoint_config['feature_dim']),
                                             int(checkpoint_config['pool_size']),
                                             int(checkpoint_config['seed_init']), model_data.parameters)
    hvq = HvqModel(HvqSettings(**model_data.extra['settings']), int(checkpoint_config['seed_init']))
    restore_parameters(hvq, model_data.parameters)
    return backbone, hvq, model_data


def load_lavit(paths: RunPaths, target_mode: TargetMode, hvq_data: ModelData) -> Tuple[LavitModel, ModelData]:
    path = paths.lavit_checkpoint(target_mode)
    if not os.path.exists(path):
        raise MissingStageError(f"The train-lavit stage has not been run for the {target_mode.value} target: "
                                f"no checkpoint at '{path}'.")
    model_data = ModelData.load(path, PipelineStage.LAVIT)
    if model_data.extra.get('hvq_payload_hash') != hvq_data.payload_hash():
        raise CheckpointError(f"'{path}' was trained against a different HVQ checkpoint.")
    settings_values = dict(model_data.extra['settings'])
    settings_values['target_mode'] = TargetMode(settings_values['target_mode'])
    lavit = LavitModel(LavitSettings(**settings_values), int(model_data.config['seed_init']))
    restore_parameters(lavit, model_data.parameters)
    return lavit, model_data


def cmd_gen_data(config: RunConfig) -> Dict[str, Any]:
    paths = RunPaths(config['out_dir'])
    counts = DatasetCounts(int(config['train_count']), int(config['test_normal_count']),
                           int(config['test_logical_count']), int(config['test_structural_count']),
                           float(config['validation_fraction']))
    return write_dataset(default_scene_spec(int(config['object_count'])), counts, int(config['seed_data']),
                         paths.data, worker_count(config))


def save_hvq_checkpoint(config: RunConfig, paths: RunPaths, backbone: PatchBackbone, hvq: HvqModel,
                        history: TrainingHistory) -> ModelData:
    metrics = history.epochs[-1] if history.epochs else dict()
    model_data = ModelData(PipelineStage.HVQ, config.as_dict(), collect_parameters(backbone, hvq),
                           len(history.epochs), metrics,
                           {'settings': hvq.settings.to_dict(), 'history': history.to_dict(),
                            'manifest_hash': file_hash(os.path.join(paths.data, MANIFEST_NAME))})
    model_data.save(paths.hvq_checkpoint)
    logging.info(f'HVQ checkpoint payload sha256 {model_data.payload_hash()}')
    return model_data


def save_lavit_checkpoint(config: RunConfig, paths: RunPaths, lavit: LavitModel, history: TrainingHistory,
                          hvq_data: ModelData) -> str:
    path = paths.lavit_checkpoint(lavit.target_mode)
    metrics = history.epochs[-1] if history.epochs else dict()
    model_data = ModelData(PipelineStage.LAVIT, config.as_dict(), layer_parameters(lavit, 'lavit.'),
                           len(history.epochs), metrics,
                           {'settings': lavit.settings.to_dict(), 'history': history.to_dict(),
                            'hvq_payload_hash': hvq_data.payload_hash()})
    model_data.save(path)
    return path


def cmd_train_hvq(config: RunConfig, progress: bool = True) -> str:
    paths = RunPaths(config['out_dir'])
    dataset = load_dataset(paths)
    train: DatasetSplit = dataset.get_train()
    backbone = build_backbone(config).calibrate(train.images)
    features = backbone.extract_features(train.images)

    hvq = build_hvq(config, backbone.token_count)
    history = train_hvq(hvq, features, config, progress)
    save_hvq_checkpoint(config, paths, backbone, hvq, history)
    if config['plots'] and history.epochs:
        create_plot.create_loss_plot(history.to_dict(), paths.plots)
    return paths.hvq_checkpoint


def _train_lavit_mode(config: RunConfig, paths: RunPaths, target_mode: TargetMode, progress: bool) -> str:
    backbone, hvq, hvq_data = load_hvq(paths)
    hvq_file_hash = file_hash(paths.hvq_checkpoint)
    train = load_dataset(paths).get_train()
    features = backbone.extract_features(train.images)
    patches = backbone.raw_patches(train.images)

    lavit = build_lavit(config, backbone.token_count, patches.shape[-1], target_mode)
    history = train_lavit(lavit, hvq, features, config, patches, progress=progress)
    if file_hash(paths.hvq_checkpoint) != hvq_file_hash:
        raise CheckpointError('The HVQ checkpoint file changed while LAViT trained.')

    path = save_lavit_checkpoint(config, paths, lavit, history, hvq_data)
    if config['plots'] and history.epochs:
        create_plot.create_loss_plot({'stage': f'lavit_{target_mode.value}', 'epochs': history.epochs}, paths.plots)
    return path


def cmd_train_lavit(config: RunConfig, progress: bool = True) -> str:
    paths = RunPaths(config['out_dir'])
    if not os.path.exists(paths.hvq_checkpoint):
        raise MissingStageError(f"The train-hvq stage has not been run: no checkpoint at '{paths.hvq_checkpoint}'.")
    return _train_lavit_mode(config, paths, TargetMode(config['target_mode']), progress)


def _evaluate_mode(config: RunConfig, paths: RunPaths, target_mode: TargetMode
                   ) -> Tuple[pd.DataFrame, ScoreStats]:
    backbone, hvq, hvq_data = load_hvq(paths)
    lavit, _ = load_lavit(paths, target_mode, hvq_data)
    dataset = load_dataset(paths)
    evaluator = AnomalyEvaluator(backbone, hvq, lavit, config)
    return evaluator.evaluate(dataset.get_validation(), dataset.get_test())


def _write_plots(config: RunConfig, table: pd.DataFrame, directory: str) -> None:
    if not config['plots']:
        return
    for subset in [AnomalyLabel.STRUCTURAL, AnomalyLabel.LOGICAL]:
        if (table['label'] == subset.value).any():
            create_plot.create_roc_plot(table, directory, subset)


def cmd_eval(config: RunConfig) -> Dict[str, Any]:
    paths = RunPaths(config['out_dir'])
    target_mode = TargetMode(config['target_mode'])
    if not os.path.exists(paths.hvq_checkpoint):
        raise MissingStageError(f"The train-hvq stage has not been run: no checkpoint at '{paths.hvq_checkpoint}'.")
    table, stats = _evaluate_mode(config, paths, target_mode)
    report = build_report(table, stats, config.as_dict())
    write_report(paths.reports, report, table)
    logging.info('\n' + summary_frame(report).to_string())
    _write_plots(config, table, paths.reports)
    return report


def _lavit_is_current(config: RunConfig, paths: RunPaths, target_mode: TargetMode) -> bool:
    path = paths.lavit_checkpoint(target_mode)
    if not os.path.exists(path):
        return False
    model_data = ModelData.load(path, PipelineStage.LAVIT)
    hvq_data = ModelData.load(paths.hvq_checkpoint, PipelineStage.HVQ)
    ignored = {'target_mode', 'plots', 'threads', 'out_dir'}
    current = {key: value for key, value in config.as_dict().items() if key not in ignored}
    stored = {key: value for key, value in model_data.config.items() if key not in ignored}
    return model_data.extra.get('hvq_payload_hash') == hvq_data.payload_hash() and current == stored


def cmd_ablate(config: RunConfig, progress: bool = True) -> Dict[str, Any]:
    """Trains and evaluates LAViT for every prediction target against one frozen HVQ."""
    paths = RunPaths(config['out_dir'])
    if not os.path.exists(paths.hvq_checkpoint):
        raise MissingStageError(f"The train-hvq stage has not been run: no checkpoint at '{paths.hvq_checkpoint}'.")
    tables: Dict[str, pd.DataFrame] = dict()
    stats_by_mode: Dict[str, ScoreStats] = dict()
    for target_mode in TargetMode:
        if _lavit_is_current(config, paths, target_mode):
            logging.info(f'reusing the {target_mode.value} LAViT checkpoint')
        else:
            _train_lavit_mode(config, paths, target_mode, progress)
        table, stats = _evaluate_mode(config, paths, target_mode)
        mode_directory = os.path.join(paths.ablation, target_mode.value)
        write_report(mode_directory, build_report(table, stats, config.as_dict()), table)
        tables[target_mode.value] = table
        stats_by_mode[target_mode.value] = stats

    base_mode = TargetMode(config['target_mode']).value
    report = build_report(tables[base_mode], stats_by_mode[base_mode], config.as_dict(), tables)
    write_report(paths.ablation, report, tables[base_mode])
    if config['plots']:
        create_plot.create_ablation_plot(report, paths.ablation)
    return report


def cmd_diagnose(config: RunConfig) -> Dict[str, Any]:
    paths = RunPaths(config['out_dir'])
    if not os.path.exists(paths.hvq_checkpoint):
        raise MissingStageError(f"The train-hvq stage has not been run: no checkpoint at '{paths.hvq_checkpoint}'.")
    backbone, hvq, _ = load_hvq(paths)
    dataset = load_dataset(paths)
    spec = default_scene_spec(int(config['object_count']))
    splits: List[DatasetSplit] = [dataset.get_train(), dataset.get_test()]
    test_normal = splits[1].select(np.array([label == AnomalyLabel.NORMAL for label in splits[1].labels]))
    report = {'train': codebook_diagnostics(hvq, backbone, splits[0], spec, int(config['batch_size'])),
              'test_normal': codebook_diagnostics(hvq, backbone, test_normal, spec, int(config['batch_size'])),
              'config': config.as_dict()}
    write_json(os.path.join(paths.diagnostics, 'codebook.json'), report)
    if config['plots']:
        create_plot.create_code_map_plot(report['train'], paths.diagnostics)
        token_size: int = backbone.patch_size * backbone.pool_size
        for layer in report['train']['layers']:
            patches = {code: exemplar_patches(splits[0], positions, token_size, backbone.grid_size)
                       for code, positions in layer['exemplars'].items()}
            create_plot.create_exemplar_plot(patches, layer['layer'], paths.diagnostics)
    return report


def write_run_statistics(config: RunConfig) -> None:
    """Writes the timings of this command and starts a fresh collection for the next one."""
    RunStatistics().write_statistics(RunPaths(config['out_dir']).stats)
    RunStatistics.reset()
