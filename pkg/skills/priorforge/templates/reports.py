#!/usr/bin/env python3
"""
Report generation for PriorForge runs
Creates training summaries from a run directory and score reports from evaluation
"""

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

# Add scripts directory to path
import sys
sys.path.append(str(Path(__file__).parent.parent / 'scripts'))

from checkpoint import CheckpointError, load_checkpoint
from training import METRICS_FILE, StepMetrics, read_metrics

try:
    from config import CHECKPOINT_SUFFIX
except ImportError:
    CHECKPOINT_SUFFIX = ".ckpt"

LOSS_NAMES = ('l_rec', 'l_code_gan', 'l_image_gan', 'l_mi')


@dataclass
class Report:
    """Report data structure"""
    type: str  # training, score
    text: str
    metadata: Dict[str, Any] = field(default_factory=dict)


def epoch_means(records: List[StepMetrics]) -> Dict[int, Dict[str, float]]:
    """Mean of each logged loss per epoch; l_mi is omitted when not logged"""
    grouped: Dict[int, List[StepMetrics]] = OrderedDict()
    for record in records:
        grouped.setdefault(record.epoch, []).append(record)

    means = OrderedDict()
    for epoch, rows in grouped.items():
        means[epoch] = OrderedDict()
        for name in LOSS_NAMES:
            values = [getattr(r, name) for r in rows if getattr(r, name) is not None]
            if values:
                means[epoch][name] = sum(values) / len(values)
    return means


def _latest_checkpoint(run_dir: Path) -> Optional[Path]:
    candidates = sorted(
        run_dir.glob(f"ckpt_epoch_*{CHECKPOINT_SUFFIX}"),
        key=lambda p: int(p.stem.rsplit('_', 1)[1]),
    )
    return candidates[-1] if candidates else None


def generate_training_report(run_dir: str) -> Optional[Report]:
    """Summarize a run directory: config of the last checkpoint and per-epoch loss means"""
    run = Path(run_dir)
    metrics_path = run / METRICS_FILE
    if not metrics_path.exists():
        return None

    records = read_metrics(str(metrics_path))
    means = epoch_means(records)
    text_lines = [f"**Training Report**: {run}", ""]

    latest = _latest_checkpoint(run)
    config: Dict[str, Any] = {}
    if latest is not None:
        try:
            config = load_checkpoint(str(latest)).config
        except CheckpointError as e:
            text_lines.append(f"Warning: could not read {latest.name}: {e}")
    if config:
        text_lines.extend([
            "**Model**",
            f"• Mode: {config['mode']} on {config['dataset']}",
            f"• Code: {config['code_dim']}-D from {config['noise_dim']}-D noise"
            + (f" + {config['num_classes']} classes" if config['num_classes'] else ""),
            f"• Learned prior: {config['learned_prior']}, perceptual loss: {config['perceptual_loss']}, "
            f"decoder in both phases: {config['decoder_both_phases']}",
            f"• Latest checkpoint: {latest.name}",
            "",
        ])

    text_lines.append(f"**Losses** ({len(records)} steps, {len(means)} epochs)")
    if means:
        columns = [name for name in LOSS_NAMES if any(name in row for row in means.values())]
        text_lines.append("epoch  " + "  ".join(f"{name:>12}" for name in columns))
        for epoch, row in means.items():
            cells = "  ".join(f"{row[name]:>12.4f}" if name in row else f"{'-':>12}" for name in columns)
            text_lines.append(f"{epoch:>5}  {cells}")
    else:
        text_lines.append("• No steps logged")

    return Report(
        type='training',
        text="\n".join(text_lines),
        metadata={'steps': len(records), 'epochs': len(means), 'epoch_means': means, 'config': config},
    )


def format_score_report(scores: Dict[str, Any]) -> Report:
    """Render an evaluation report: one `key: value` line per field, in insertion order"""
    lines = []
    for key, value in scores.items():
        shown = f"{value:.6f}" if isinstance(value, float) else str(value)
        lines.append(f"{key}: {shown}")
    return Report(type='score', text="\n".join(lines), metadata=dict(scores))
