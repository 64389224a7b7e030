import os
from typing import Any, Dict, List

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib.axes import Axes  # noqa: E402
from sklearn.metrics import roc_curve  # noqa: E402

from definitions import AnomalyLabel  # noqa: E402
from evaluation.report import CONFIGURATIONS  # noqa: E402


def setup_plot() -> None:
    plt.rc('font', size=14)
    plt.rc('axes', titlesize=14)
    plt.rc('axes', labelsize=14)
    plt.rc('xtick', labelsize=14)
    plt.rc('ytick', labelsize=14)
    plt.rc('legend', fontsize=14)
    plt.rc('figure', titlesize=14)


def style_axes(plot: Axes) -> None:
    plot.set_facecolor('#F4F4F4')
    plot.grid(color='white', linestyle='-', linewidth=2)
    for line in plot.lines:
        plt.setp(line, linewidth=3, alpha=0.7)


def save_plot(directory: str, name: str) -> str:
    if not os.path.exists(directory):
        os.makedirs(directory)
    file_path: str = f'{directory}/{name}.svg'
    plt.savefig(file_path)
    plt.savefig(f'{directory}/{name}.jpg')
    return file_path


def create_roc_plot(table: pd.DataFrame, directory: str, subset: AnomalyLabel) -> str:
    """ROC curves of every score configuration for one anomaly subset against the normal images."""
    setup_plot()
    selected = table[table['label'].isin([AnomalyLabel.NORMAL.value, subset.value])]
    labels = (selected['label'] == subset.value).to_numpy().astype(int)
    figure, plot = plt.subplots(figsize=(7, 7))
    for configuration, column in CONFIGURATIONS.items():
        false_positive, true_positive, _ = roc_curve(labels, selected[column].to_numpy())
        plot.plot(false_positive, true_positive, label=configuration)
    plot.plot([0, 1], [0, 1], color='grey', linestyle='--')
    plot.set_xlabel('False Positive Rate')
    plot.set_ylabel('True Positive Rate')
    plot.set_title(f'{subset.value} anomalies')
    plot.legend(loc='lower right')
    style_axes(plot)
    figure.tight_layout()
    path = save_plot(directory, f'roc_{subset.value}')
    plt.close(figure)
    return path


def create_ablation_plot(report: Dict[str, Any], directory: str) -> str:
    """Measured fused AUROC [%] per prediction target next to the reference values."""
    setup_plot()
    converted_data: List[List[Any]] = []
    for mode, row in report['ablation'].items():
        for column, value in row['fused'].items():
            converted_data.append([mode, f'{column} (measured)', value * 100.0])
        for column, value in row['reference_percent'].items():
            converted_data.append([mode, f'{column} (reference)', value])

    df = pd.DataFrame(converted_data, columns=['Prediction Target', 'Metric', 'AUROC [%]'])
    df = df.pivot(index='Prediction Target', columns='Metric', values='AUROC [%]')
    plot: Axes = df.plot.bar(legend=True, figsize=(11, 6), rot=0)
    plot.set_ylabel('AUROC [%]')
    plot.set_ylim(0, 100)
    plot.legend(facecolor='white', framealpha=1, ncol=2, fontsize=10)
    style_axes(plot)
    plt.tight_layout()
    path = save_plot(directory, 'target_ablation')
    plt.close()
    return path


def create_code_map_plot(diagnostics: Dict[str, Any], directory: str) -> str:
    """Code maps of every layer for the first diagnosed images."""
    setup_plot()
    code_maps = diagnostics['code_maps']
    layer_count = len(diagnostics['layers'])
    figure, axes = plt.subplots(len(code_maps), layer_count, figsize=(3 * layer_count, 3 * len(code_maps)),
                                squeeze=False)
    for row, (image_id, maps) in enumerate(code_maps.items()):
        for layer in range(layer_count):
            axes[row][layer].imshow(np.asarray(maps[layer]), cmap='tab20', vmin=0,
                                    vmax=diagnostics['codebook_size'] - 1)
            axes[row][layer].set_xticks([])
            axes[row][layer].set_yticks([])
            if row == 0:
                axes[row][layer].set_title(f'layer {layer + 1}')
        axes[row][0].set_ylabel(os.path.basename(image_id), fontsize=9)
    figure.tight_layout()
    path = save_plot(directory, 'code_maps')
    plt.close(figure)
    return path


def create_exemplar_plot(patches: Dict[int, np.ndarray], layer: int, directory: str) -> str:
    """One row of pixel patches per code, most used code first."""
    setup_plot()
    rows = max(len(patches), 1)
    columns = max([len(windows) for windows in patches.values()] + [1])
    figure, axes = plt.subplots(rows, columns, figsize=(1.5 * columns, 1.5 * rows), squeeze=False)
    for axis in axes.flat:
        axis.set_xticks([])
        axis.set_yticks([])
    for row, (code, windows) in enumerate(patches.items()):
        for column, window in enumerate(windows):
            axes[row][column].imshow(window, interpolation='nearest')
        axes[row][0].set_ylabel(f'code {code}', fontsize=9)
    figure.suptitle(f'layer {layer}')
    figure.tight_layout()
    path = save_plot(directory, f'exemplars_layer_{layer}')
    plt.close(figure)
    return path


def create_loss_plot(history: Dict[str, Any], directory: str) -> str:
    setup_plot()
    df = pd.DataFrame(history['epochs']).set_index('epoch')
    plot: Axes = df.plot(legend=True, logy=True)
    plot.set_ylabel('Loss')
    style_axes(plot)
    plt.tight_layout()
    path = save_plot(directory, f"{history['stage']}_loss")
    plt.close()
    return path
