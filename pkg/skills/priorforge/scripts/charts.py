#!/usr/bin/env python3
"""
Chart generation for training reports
Creates PNG loss curves from a run's metrics log
"""

import io
import logging
from pathlib import Path
from typing import Dict, List, Optional

import matplotlib
matplotlib.use('Agg')  # Use non-interactive backend

import matplotlib.pyplot as plt
import numpy as np

from checkpoint import atomic_write
from training import StepMetrics

logger = logging.getLogger(__name__)

plt.rcParams.update({
    'font.size': 12,
    'axes.titlesize': 14,
    'axes.labelsize': 12,
    'xtick.labelsize': 10,
    'ytick.labelsize': 10,
    'legend.fontsize': 10,
    'figure.facecolor': 'white',
    'axes.facecolor': 'white',
    'axes.edgecolor': '#333333',
    'text.color': '#333333',
    'figure.dpi': 100
})

# Loss colors - consistent across charts
LOSS_COLORS = {
    'l_rec': '#2ecc71',        # Green
    'l_code_gan': '#3498db',   # Blue
    'l_image_gan': '#e74c3c',  # Red
    'l_mi': '#9b59b6',         # Purple
}
LOSS_LABELS = {
    'l_rec': 'Reconstruction',
    'l_code_gan': 'Code adversarial',
    'l_image_gan': 'Image adversarial',
    'l_mi': 'MI category',
}


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing mean over `window` steps (shorter at the start)"""
    if window <= 1 or len(values) == 0:
        return values
    cumsum = np.cumsum(np.insert(values, 0, 0.0))
    out = np.empty_like(values)
    for i in range(len(values)):
        lo = max(0, i + 1 - window)
        out[i] = (cumsum[i + 1] - cumsum[lo]) / (i + 1 - lo)
    return out


def loss_series(records: List[StepMetrics]) -> Dict[str, np.ndarray]:
    """Per-loss arrays; l_mi only when every record carries it"""
    series = {}
    for name in LOSS_COLORS:
        values = [getattr(r, name) for r in records]
        if all(v is not None for v in values):
            series[name] = np.array(values, dtype=np.float64)
    return series


def create_loss_chart(records: List[StepMetrics], path: str, title: str = "Training Losses",
                      smooth: int = 20) -> Optional[str]:
    """
    Create one panel per logged loss, raw values faint and a moving average on top.

    Args:
        records: StepMetrics in step order
        path: Output PNG path
        title: Chart title
        smooth: Moving-average window in steps

    Returns:
        Path to saved PNG file or None if there is nothing to plot
    """
    if len(records) < 2:
        return None

    steps = np.array([r.step for r in records])
    series = loss_series(records)
    fig, axes = plt.subplots(len(series), 1, figsize=(8, 2.4 * len(series)), dpi=100, sharex=True)
    axes = np.atleast_1d(axes)
    try:
        for ax, (name, values) in zip(axes, series.items()):
            color = LOSS_COLORS[name]
            ax.plot(steps, values, color=color, alpha=0.25, linewidth=1)
            ax.plot(steps, moving_average(values, smooth), color=color, linewidth=2.5)
            ax.set_ylabel(LOSS_LABELS[name], fontsize=10, color='#333333')

            ax.spines['top'].set_visible(False)
            ax.spines['right'].set_visible(False)
            ax.spines['left'].set_color('#cccccc')
            ax.spines['bottom'].set_color('#cccccc')
            ax.grid(True, alpha=0.3, linestyle='--')

        axes[0].set_title(title, fontsize=14, fontweight='bold', pad=20, color='#333333')
        axes[-1].set_xlabel('Step')

        buffer = io.BytesIO()
        fig.savefig(buffer, format='png', bbox_inches='tight',
                    facecolor='white', edgecolor='none', dpi=100)
    finally:
        plt.close(fig)

    target = Path(path)
    atomic_write(target, buffer.getvalue())
    logger.info(f"Loss chart written: {target}")
    return str(target)
