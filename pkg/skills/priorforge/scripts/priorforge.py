#!/usr/bin/env python3
"""
PriorForge: adversarial autoencoders with a learned latent prior
Main entry point with all commands

Supports:
- Two-phase training (unconditional, supervised, unsupervised conditional priors)
- Sampling, label x noise grids and latent dumps
- Inception-Score-style evaluation against a desk-scale classifier
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional

sys.path.append(str(Path(__file__).parent.parent / 'templates'))

from config import (
    EXIT_OK, EXIT_CONFIG_ERROR, EXIT_DATA_ERROR, EXIT_NUMERIC_ERROR,
    DEFAULT_IS_SPLITS, DEFAULT_CLASSIFIER_EPOCHS, CLASSIFIER_MIN_ACCURACY, DATASETS, MODES,
    ConfigError, load_config_file, resolve_config, describe_config_keys
)
from checkpoint import CheckpointError, atomic_write, load_checkpoint, save_checkpoint
from data import DataLoadError, fetch_mnist, load_dataset
from networks import NetworkConfigError
from objectives import ObjectiveError
from training import (
    ABLATION_STAGES, METRICS_FILE, NumericalError, TrainingConfig,
    ablation_config, bundle_from_checkpoint, read_metrics, run_training
)
from sampling import (
    LATENT_SOURCES, SWEEP, SampleRequest, SamplingError,
    export_latents, generate_images, label_noise_grid, sample_prior, save_png, tile_images
)
from evaluation import (
    AccuracyFloorError, EvaluationError, classifier_from_checkpoint, classifier_to_checkpoint,
    conditional_accuracy, score_model, train_eval_classifier
)

logger = logging.getLogger(__name__)

# exception type -> exit code, first match wins
EXIT_CODES = (
    (AccuracyFloorError, EXIT_NUMERIC_ERROR),
    (NumericalError, EXIT_NUMERIC_ERROR),
    (ConfigError, EXIT_CONFIG_ERROR),
    (NetworkConfigError, EXIT_CONFIG_ERROR),
    (ObjectiveError, EXIT_CONFIG_ERROR),
    (SamplingError, EXIT_CONFIG_ERROR),
    (EvaluationError, EXIT_CONFIG_ERROR),
    (DataLoadError, EXIT_DATA_ERROR),
    (CheckpointError, EXIT_DATA_ERROR),
)
HANDLED_ERRORS = tuple(kind for kind, _ in EXIT_CODES)


def exit_code_for(error: Exception) -> int:
    for kind, code in EXIT_CODES:
        if isinstance(error, kind):
            return code
    raise error


def _label_arg(value: str):
    if value == SWEEP:
        return value
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"label must be a class index or '{SWEEP}'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="PriorForge Commands")
    parser.add_argument('--verbose', '-v', action='store_true', help='Debug logging')
    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    # Train command
    train_parser = subparsers.add_parser('train', help='Train a model (two-phase loop)')
    train_parser.add_argument('--config', '-c', help='key = value config file')
    train_parser.add_argument('--mode', choices=MODES)
    train_parser.add_argument('--dataset', choices=DATASETS)
    train_parser.add_argument('--data-path')
    train_parser.add_argument('--dataset-size', type=int)
    train_parser.add_argument('--output-dir', '-o')
    train_parser.add_argument('--channels', type=int)
    train_parser.add_argument('--code-dim', type=int)
    train_parser.add_argument('--noise-dim', type=int)
    train_parser.add_argument('--num-classes', type=int)
    train_parser.add_argument('--lambda-rec', type=float)
    train_parser.add_argument('--learning-rate', type=float)
    train_parser.add_argument('--beta1', type=float)
    train_parser.add_argument('--beta2', type=float)
    train_parser.add_argument('--batch-size', type=int)
    train_parser.add_argument('--epochs', type=int)
    train_parser.add_argument('--seed', type=int)
    train_parser.add_argument('--learned-prior', help='true | false')
    train_parser.add_argument('--perceptual-loss', help='true | false')
    train_parser.add_argument('--decoder-both-phases', help='true | false')
    train_parser.add_argument('--nonsaturating-generator', help='true | false')
    train_parser.add_argument('--log-every', type=int)
    train_parser.add_argument('--device')
    train_parser.add_argument('--ablation', choices=list(ABLATION_STAGES),
                              help='Override A/B/C switches with an ablation preset')
    train_parser.add_argument('--list-keys', action='store_true', help='Describe every config key')

    # Generate command
    gen_parser = subparsers.add_parser('generate', help='Sample images from a checkpoint')
    gen_parser.add_argument('checkpoint', help='Model checkpoint')
    gen_parser.add_argument('--n', type=int, default=64, help='Number of samples (per class with sweep)')
    gen_parser.add_argument('--label', type=_label_arg, help=f"Class index or '{SWEEP}'")
    gen_parser.add_argument('--grid', action='store_true', help='Label x noise grid (conditional models)')
    gen_parser.add_argument('--rows', type=int, default=8, help='Noise rows of the grid')
    gen_parser.add_argument('--cols', type=int, default=8, help='Tile columns for plain samples')
    gen_parser.add_argument('--seed', type=int, default=0)
    gen_parser.add_argument('--out', '-o', required=True, help='Output PNG')

    # Evaluate command
    eval_parser = subparsers.add_parser('evaluate', help='Score a checkpoint against a classifier')
    eval_parser.add_argument('checkpoint', help='Model checkpoint')
    eval_parser.add_argument('--classifier', required=True, help='Classifier checkpoint')
    eval_parser.add_argument('--n', type=int, default=5000, help='Number of samples')
    eval_parser.add_argument('--splits', type=int, default=DEFAULT_IS_SPLITS)
    eval_parser.add_argument('--per-class', type=int, default=100, help='Samples per class for conditional accuracy')
    eval_parser.add_argument('--seed', type=int, default=0)
    eval_parser.add_argument('--out', '-o', help='Also write the report as JSON')

    # Export latents command
    export_parser = subparsers.add_parser('export-latents', help='Dump latent codes with labels')
    export_parser.add_argument('checkpoint', help='Model checkpoint')
    export_parser.add_argument('--source', choices=LATENT_SOURCES, default='encoder')
    export_parser.add_argument('--dataset', choices=DATASETS, help='Dataset to encode (encoder source)')
    export_parser.add_argument('--data-path', default='')
    export_parser.add_argument('--dataset-size', type=int, default=0)
    export_parser.add_argument('--split', choices=['train', 'test'], default='test')
    export_parser.add_argument('--n', type=int, default=1000, help='Draws for the code_generator source')
    export_parser.add_argument('--seed', type=int, default=0)
    export_parser.add_argument('--out', '-o', required=True, help='Output CSV')

    # Train classifier command
    clf_parser = subparsers.add_parser('train-classifier', help='Train the evaluation classifier')
    clf_parser.add_argument('--dataset', choices=DATASETS, required=True)
    clf_parser.add_argument('--data-path', default='')
    clf_parser.add_argument('--dataset-size', type=int, default=0)
    clf_parser.add_argument('--channels', type=int, default=1)
    clf_parser.add_argument('--num-classes', type=int, default=0, help='Classes for synthetic data')
    clf_parser.add_argument('--epochs', type=int, default=DEFAULT_CLASSIFIER_EPOCHS)
    clf_parser.add_argument('--seed', type=int, default=0)
    clf_parser.add_argument('--min-accuracy', type=float, default=CLASSIFIER_MIN_ACCURACY)
    clf_parser.add_argument('--holdout-test-split', action='store_true',
                            help='Hold out the dataset test split instead of 10%% of train')
    clf_parser.add_argument('--out', '-o', required=True, help='Output checkpoint')

    # Fetch command
    fetch_parser = subparsers.add_parser('fetch', help='Download MNIST IDX archives')
    fetch_parser.add_argument('--out', '-o', required=True, help='Target directory')

    # Report command
    report_parser = subparsers.add_parser('report', help='Summarize a training run')
    report_parser.add_argument('run_dir', help='Training output directory')
    report_parser.add_argument('--chart', help='Loss chart PNG (default: <run_dir>/losses.png)')
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )

    if args.command == 'train':
        if args.list_keys:
            print(describe_config_keys())
            return EXIT_OK
        return cmd_train(args.config, _train_overrides(args), args.ablation)
    elif args.command == 'generate':
        return cmd_generate(args.checkpoint, args.out, args.n, args.label, args.grid,
                            args.rows, args.cols, args.seed)
    elif args.command == 'evaluate':
        return cmd_evaluate(args.checkpoint, args.classifier, args.n, args.splits,
                            args.per_class, args.seed, args.out)
    elif args.command == 'export-latents':
        return cmd_export_latents(args.checkpoint, args.source, args.out, args.dataset,
                                  args.data_path, args.dataset_size, args.split, args.n, args.seed)
    elif args.command == 'train-classifier':
        return cmd_train_classifier(args.dataset, args.out, args.data_path, args.dataset_size,
                                    args.channels, args.num_classes, args.epochs, args.seed,
                                    args.min_accuracy, args.holdout_test_split)
    elif args.command == 'fetch':
        return cmd_fetch(args.out)
    elif args.command == 'report':
        return cmd_report(args.run_dir, args.chart)
    else:
        parser.print_help()
        return 1


def _train_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    keys = (
        'mode', 'dataset', 'data_path', 'dataset_size', 'output_dir', 'channels', 'code_dim',
        'noise_dim', 'num_classes', 'lambda_rec', 'learning_rate', 'beta1', 'beta2', 'batch_size',
        'epochs', 'seed', 'learned_prior', 'perceptual_loss', 'decoder_both_phases',
        'nonsaturating_generator', 'log_every', 'device',
    )
    return {key: getattr(args, key) for key in keys}


def _fail(error: Exception) -> int:
    code = exit_code_for(error)
    logger.error(f"{type(error).__name__}: {error}")
    print(f"Error: {error}", file=sys.stderr)
    return code


# ============================================================================
# Training Commands
# ============================================================================

def cmd_train(config_path: Optional[str], overrides: Dict[str, Any], ablation: Optional[str] = None) -> int:
    """Train a model and write checkpoints plus the metrics log"""
    try:
        file_values = load_config_file(config_path) if config_path else {}
        settings = resolve_config(file_values, overrides)
        dataset = load_dataset(
            settings['dataset'], settings['data_path'], settings['channels'],
            settings['dataset_size'], settings['num_classes'], settings['seed'],
        )
        config = TrainingConfig.from_settings(settings, dataset)
        if ablation:
            config = ablation_config(config, ablation)

        output_dir = Path(settings['output_dir'])
        print(f"Training {config.mode} model on {dataset.name} ({len(dataset)} images)")
        print(f"Output: {output_dir}")
        ckpt, history = run_training(config, dataset, str(output_dir))

        last = history[-1] if history else None
        print(f"Finished: {ckpt.step} steps, {ckpt.epoch} epochs")
        if last:
            print(f"Last step: l_rec={last.l_rec:.4f} l_code_gan={last.l_code_gan:.4f} "
                  f"l_image_gan={last.l_image_gan:.4f}"
                  + (f" l_mi={last.l_mi:.4f}" if last.l_mi is not None else ""))
        print(f"Metrics: {output_dir / METRICS_FILE}")
        return EXIT_OK

    except HANDLED_ERRORS as e:
        return _fail(e)


def cmd_train_classifier(dataset_name: str, out: str, data_path: str = '', dataset_size: int = 0,
                         channels: int = 1, num_classes: int = 0, epochs: int = DEFAULT_CLASSIFIER_EPOCHS,
                         seed: int = 0, min_accuracy: float = CLASSIFIER_MIN_ACCURACY,
                         holdout_test_split: bool = False) -> int:
    """Train the desk-scale evaluation classifier and save it"""
    try:
        dataset = load_dataset(dataset_name, data_path, channels, dataset_size, num_classes, seed)
        holdout = None
        if holdout_test_split:
            holdout = load_dataset(dataset_name, data_path, channels, 0, num_classes, seed + 1, split='test')

        print(f"Training classifier on {dataset.name} ({len(dataset)} images, {epochs} epochs)")
        classifier, held_accuracy = train_eval_classifier(
            dataset, epochs, seed, min_accuracy, holdout=holdout
        )
        save_checkpoint(classifier_to_checkpoint(classifier, held_accuracy, seed), out)
        print(f"Held-out accuracy: {held_accuracy:.4f}")
        print(f"Classifier saved: {out}")
        return EXIT_OK

    except HANDLED_ERRORS as e:
        return _fail(e)


# ============================================================================
# Sampling Commands
# ============================================================================

def cmd_generate(checkpoint: str, out: str, n: int = 64, label=None, grid: bool = False,
                 rows: int = 8, cols: int = 8, seed: int = 0) -> int:
    """Write a PNG tile of samples, or a label x noise grid"""
    try:
        bundle, _ = bundle_from_checkpoint(load_checkpoint(checkpoint))
        if grid:
            if label is not None:
                raise SamplingError("--grid sweeps every label; drop --label")
            images = label_noise_grid(bundle, rows, seed)
            tile = tile_images(images, bundle.config.num_classes)
            print(f"Grid: {rows} noise rows x {bundle.config.num_classes} classes")
        else:
            codes, labels = sample_prior(bundle, SampleRequest(n=n, label=label, seed=seed))
            images = generate_images(bundle, codes)
            per_row = n if label == SWEEP else cols
            tile = tile_images(images, per_row)
            print(f"Samples: {images.shape[0]}")

        path = save_png(tile, out)
        print(f"Image saved: {path}")
        return EXIT_OK

    except HANDLED_ERRORS as e:
        return _fail(e)


def cmd_export_latents(checkpoint: str, source: str, out: str, dataset_name: Optional[str] = None,
                       data_path: str = '', dataset_size: int = 0, split: str = 'test',
                       n: int = 1000, seed: int = 0) -> int:
    """Dump encoder or code generator latents with labels"""
    try:
        bundle, _ = bundle_from_checkpoint(load_checkpoint(checkpoint))
        dataset = None
        if source == 'encoder':
            if not dataset_name:
                raise SamplingError("--dataset is required for the encoder source")
            dataset = load_dataset(dataset_name, data_path, bundle.config.channels, dataset_size,
                                   bundle.config.num_classes, seed, split=split)
        path = export_latents(bundle, source, out, dataset=dataset, n=n, seed=seed)
        print(f"Latents saved: {path}")
        return EXIT_OK

    except HANDLED_ERRORS as e:
        return _fail(e)


# ============================================================================
# Evaluation Commands
# ============================================================================

def cmd_evaluate(checkpoint: str, classifier_path: str, n: int = 5000,
                 splits: int = DEFAULT_IS_SPLITS, per_class: int = 100, seed: int = 0,
                 out: Optional[str] = None) -> int:
    """Score a model; conditional models also report conditional accuracy"""
    try:
        from reports import format_score_report

        bundle, _ = bundle_from_checkpoint(load_checkpoint(checkpoint))
        classifier = classifier_from_checkpoint(load_checkpoint(classifier_path))
        if bundle.config.conditional and classifier.num_classes != bundle.config.num_classes:
            raise EvaluationError(
                f"Class-count mismatch: model has {bundle.config.num_classes}, "
                f"classifier has {classifier.num_classes}"
            )

        score = score_model(bundle, classifier, n, splits, seed)
        report = score.report(n)
        if bundle.config.conditional:
            report['cond_accuracy'] = conditional_accuracy(bundle, classifier, per_class, seed)

        print(format_score_report(report).text)
        if out:
            atomic_write(Path(out), json.dumps(report, indent=2).encode('utf-8'))
            print(f"Report saved: {out}")
        return EXIT_OK

    except HANDLED_ERRORS as e:
        return _fail(e)


# ============================================================================
# Data & Report Commands
# ============================================================================

def cmd_fetch(out: str) -> int:
    """Download the MNIST IDX archives"""
    try:
        paths = fetch_mnist(out)
        for path in paths:
            print(f"Downloaded: {path}")
        return EXIT_OK

    except HANDLED_ERRORS as e:
        return _fail(e)


def cmd_report(run_dir: str, chart: Optional[str] = None) -> int:
    """Print the training report of a run and write its loss chart"""
    try:
        from reports import generate_training_report
        from charts import create_loss_chart

        report = generate_training_report(run_dir)
        if not report:
            print(f"No {METRICS_FILE} in {run_dir}")
            return EXIT_DATA_ERROR

        print(report.text)

        records = read_metrics(str(Path(run_dir) / METRICS_FILE))
        chart_path = create_loss_chart(records, chart or str(Path(run_dir) / 'losses.png'))
        if chart_path:
            print(f"Chart saved: {chart_path}")
        return EXIT_OK

    except HANDLED_ERRORS as e:
        return _fail(e)


if __name__ == '__main__':
    sys.exit(main())
