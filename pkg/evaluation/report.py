import logging
import os
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from definitions import (REFERENCE_COMPONENT_AUROC, REFERENCE_TARGET_AUROC,
                         REPORT_NAME, SCORES_NAME, AnomalyKind, AnomalyLabel,
                         TargetMode)
from evaluation.evaluator import SCORE_COLUMNS, ScoreStats
from evaluation.metrics import auroc, best_f1_threshold
from utility.errors import MetricError, ReportError
from utility.file import atomic_write_text, write_json

REPORT_SCHEMA_VERSION: int = 1
CONFIGURATIONS: Dict[str, str] = {'hvq_only': 's_hvq', 'lavit_only': 's_lavit', 'fused': 's_fused'}
COLUMNS: List[str] = ['SA', 'LA', 'Avg']


def _check_columns(table: pd.DataFrame, columns: List[str], name: str) -> None:
    missing = [column for column in columns if column not in table.columns]
    if missing:
        raise ReportError(f'{name} score table lacks the configuration columns {missing}.')


def _subset_auroc(table: pd.DataFrame, score_column: str, anomalies: pd.Series) -> float:
    """AUROC of one anomaly subset against all normal images."""
    normal = table['label'] == AnomalyLabel.NORMAL.value
    subset = table[normal | anomalies]
    try:
        return auroc((subset['label'] != AnomalyLabel.NORMAL.value).to_numpy(), subset[score_column].to_numpy())
    except MetricError as error:
        raise ReportError(f"Cannot compute AUROC of '{score_column}': {error}") from error


def split_aurocs(table: pd.DataFrame, score_column: str) -> Dict[str, float]:
    """SA (structural vs. normal), LA (logical vs. normal) and their mean."""
    structural = _subset_auroc(table, score_column, table['label'] == AnomalyLabel.STRUCTURAL.value)
    logical = _subset_auroc(table, score_column, table['label'] == AnomalyLabel.LOGICAL.value)
    return {'SA': structural, 'LA': logical, 'Avg': (structural + logical) / 2.0}


def kind_aurocs(table: pd.DataFrame, score_column: str) -> Dict[str, float]:
    result: Dict[str, float] = dict()
    for kind in AnomalyKind:
        selected = table['kind'] == kind.value
        if kind == AnomalyKind.NONE or not selected.any():
            continue
        result[kind.value] = _subset_auroc(table, score_column, selected)
    return result


def _reference(values: Tuple[float, float, float]) -> Dict[str, float]:
    return dict(zip(COLUMNS, values))


def component_rows(table: pd.DataFrame) -> Dict[str, Dict[str, Any]]:
    _check_columns(table, list(CONFIGURATIONS.values()), 'Evaluation')
    rows: Dict[str, Dict[str, Any]] = dict()
    for configuration, column in CONFIGURATIONS.items():
        rows[configuration] = {'auroc': split_aurocs(table, column),
                               'reference_percent': _reference(REFERENCE_COMPONENT_AUROC[configuration]),
                               'per_kind': kind_aurocs(table, column)}
    return rows


def ablation_rows(ablation: Dict[str, pd.DataFrame]) -> Dict[str, Dict[str, Any]]:
    rows: Dict[str, Dict[str, Any]] = dict()
    for mode, table in ablation.items():
        _check_columns(table, ['s_fused', 's_lavit'], f"'{mode}' ablation")
        rows[TargetMode(mode).value] = {'fused': split_aurocs(table, 's_fused'),
                                        'lavit_only': split_aurocs(table, 's_lavit'),
                                        'reference_percent': _reference(REFERENCE_TARGET_AUROC[TargetMode(mode).value])}
    return rows


def mask_variance(table: pd.DataFrame) -> Dict[str, Any]:
    if 's_lavit_std' not in table.columns:
        return dict()
    grouped = table.groupby('label')['s_lavit_std'].mean()
    return {'mean_std': float(table['s_lavit_std'].mean()),
            'mean_std_by_label': {label: float(value) for label, value in grouped.items()}}


def build_report(table: pd.DataFrame, stats: ScoreStats, config: Dict[str, Any],
                 ablation: Optional[Dict[str, pd.DataFrame]] = None) -> Dict[str, Any]:
    """Assembles the evaluation report from a scored test table."""
    _check_columns(table, ['id', 'label', 'kind'], 'Evaluation')
    anomalous = (table['label'] != AnomalyLabel.NORMAL.value).to_numpy()
    fused_f1 = best_f1_threshold(anomalous, table['s_fused'].to_numpy()) if 's_fused' in table.columns else None
    report: Dict[str, Any] = {
        'schema_version': REPORT_SCHEMA_VERSION,
        'config': config,
        'image_count': int(len(table)),
        'label_counts': {label: int(count) for label, count in table['label'].value_counts().sort_index().items()},
        'calibration': stats.to_dict(),
        'configurations': component_rows(table),
        'best_f1': fused_f1,
        'mask_variance': mask_variance(table),
    }
    if ablation:
        report['ablation'] = ablation_rows(ablation)
    return report


def scores_csv(table: pd.DataFrame) -> str:
    _check_columns(table, SCORE_COLUMNS, 'Evaluation')
    return table[SCORE_COLUMNS].to_csv(index=False, lineterminator='\n')


def write_report(directory: str, report: Dict[str, Any], table: pd.DataFrame) -> Tuple[str, str]:
    report_path = os.path.join(directory, REPORT_NAME)
    scores_path = os.path.join(directory, SCORES_NAME)
    write_json(report_path, report)
    atomic_write_text(scores_path, scores_csv(table))
    fused = report['configurations']['fused']['auroc']
    logging.info(f'fused AUROC SA {fused["SA"]:.4f}, LA {fused["LA"]:.4f}, Avg {fused["Avg"]:.4f}')
    logging.info(f'wrote "{report_path}" and "{scores_path}"')
    return report_path, scores_path


def summary_frame(report: Dict[str, Any]) -> pd.DataFrame:
    """One row per configuration with measured AUROC [%] next to the reference."""
    rows: List[Dict[str, Any]] = list()
    for configuration, row in report['configurations'].items():
        entry: Dict[str, Any] = {'configuration': configuration}
        for column in COLUMNS:
            entry[column] = float(np.round(row['auroc'][column] * 100.0, 1))
            entry[f'{column} (reference)'] = row['reference_percent'][column]
        rows.append(entry)
    return pd.DataFrame(rows).set_index('configuration')
