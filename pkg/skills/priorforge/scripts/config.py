#!/usr/bin/env python3
"""
Configuration settings for PriorForge
Centralized location for all configurable values, plus the config-file schema
"""

import logging
import os
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)

# Image contract
IMAGE_SIZE = 32  # Every network consumes and produces 32 x 32 images
SUPPORTED_CHANNELS = (1, 3)

# Network settings
LEAKY_SLOPE = 0.2  # Leaky rectifier slope for both discriminators
INIT_STD = 0.02  # Std of the zero-mean normal used for conv/FC weights
CODE_DISC_WIDTHS = (1000, 500, 200)
IMAGE_DISC_FC_WIDTH = 1000

# Objective settings
LOG_EPS = 1e-7  # Clamp for log arguments

# Training defaults
DEFAULT_CODE_DIM = 64
DEFAULT_LAMBDA_REC = 1.0
DEFAULT_LEARNING_RATE = 2e-4
DEFAULT_BETAS = (0.5, 0.999)
DEFAULT_BATCH_SIZE = 64
DEFAULT_EPOCHS = 10
DEFAULT_SEED = 0
DEFAULT_LOG_EVERY = 50
UNSUPERVISED_DEFAULT_CLASSES = 10

# Evaluation settings
DEFAULT_IS_SPLITS = 10
DEFAULT_CLASSIFIER_EPOCHS = 3
CLASSIFIER_MIN_ACCURACY = 0.95
CLASSIFIER_HOLDOUT_FRACTION = 0.1

# Checkpoint settings
CHECKPOINT_MAGIC = b"PFCK"
CHECKPOINT_VERSION = 1
CHECKPOINT_SUFFIX = ".ckpt"

# Exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
EXIT_NUMERIC_ERROR = 4

# Environment
DATA_ENV_VAR = "PRIORFORGE_DATA"
SLOW_TESTS_ENV_VAR = "PRIORFORGE_SLOW"

# MNIST mirror (IDX archives, gzip-compressed)
MNIST_MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist"
MNIST_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}
DOWNLOAD_TIMEOUT_SECONDS = 60

MODES = ('unconditional', 'supervised', 'unsupervised')
DATASETS = ('mnist', 'cifar10', 'folder', 'synthetic')


class ConfigError(Exception):
    """Raised for invalid or unknown configuration values"""
    pass


# ============================================================================
# Config file schema
# ============================================================================

# key -> (type, default, description). A default of None means the key is required.
CONFIG_KEYS = OrderedDict([
    ('mode', (str, None, "unconditional | supervised | unsupervised")),
    ('dataset', (str, None, "mnist | cifar10 | folder | synthetic")),
    ('data_path', (str, '', f"Dataset location; empty means ${DATA_ENV_VAR}/<dataset>")),
    ('dataset_size', (int, 0, "Keep only the first N images (0 keeps all)")),
    ('output_dir', (str, 'runs/default', "Directory for checkpoints and the metrics log")),
    ('channels', (int, 1, "Image channels for folder/synthetic data (1 or 3)")),
    ('code_dim', (int, DEFAULT_CODE_DIM, "Latent code size")),
    ('noise_dim', (int, 0, "Noise size; 0 derives it from code_dim and num_classes")),
    ('num_classes', (int, 0, "Categories; 0 means none/from dataset/10 by mode")),
    ('lambda_rec', (float, DEFAULT_LAMBDA_REC, "Weight of the reconstruction loss on the decoder")),
    ('learning_rate', (float, DEFAULT_LEARNING_RATE, "Adam learning rate for every network")),
    ('beta1', (float, DEFAULT_BETAS[0], "Adam first-moment decay")),
    ('beta2', (float, DEFAULT_BETAS[1], "Adam second-moment decay")),
    ('batch_size', (int, DEFAULT_BATCH_SIZE, "Mini-batch size (>= 2)")),
    ('epochs', (int, DEFAULT_EPOCHS, "Training epochs")),
    ('seed', (int, DEFAULT_SEED, "Seed for init, batch order and noise")),
    ('learned_prior', (bool, True, "A: drive the prior through the code generator")),
    ('perceptual_loss', (bool, True, "B: reconstruct in discriminator-feature space")),
    ('decoder_both_phases', (bool, True, "C: update the decoder in the prior phase too")),
    ('nonsaturating_generator', (bool, False, "Use -log D(fake) for generator-side updates")),
    ('log_every', (int, DEFAULT_LOG_EVERY, "Log a metrics line every N steps")),
    ('device', (str, 'cpu', "torch device string")),
])

_TRUE_VALUES = {'true', 'yes', '1', 'on'}
_FALSE_VALUES = {'false', 'no', '0', 'off'}


def coerce_value(key: str, raw: Any) -> Any:
    """Convert a raw (string or native) value to the schema type of `key`"""
    if key not in CONFIG_KEYS:
        raise ConfigError(f"Unknown config key: {key}")
    kind = CONFIG_KEYS[key][0]

    if kind is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in _TRUE_VALUES:
            return True
        if text in _FALSE_VALUES:
            return False
        raise ConfigError(f"{key}: expected a boolean, got '{raw}'")

    try:
        return kind(raw.strip() if isinstance(raw, str) else raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got '{raw}'")


def load_config_file(path: str) -> Dict[str, Any]:
    """
    Read a flat key = value config file.

    Args:
        path: Path to the config file

    Returns:
        Dict of the keys present in the file, coerced to schema types
    """
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"Config file not found: {path}")

    values = {}
    with open(config_path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split('=', 1))
            if key not in CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
            values[key] = coerce_value(key, value)

    logger.debug(f"Loaded {len(values)} keys from {config_path}")
    return values


def resolve_config(file_values: Optional[Dict[str, Any]] = None,
                   overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Merge defaults, file values and CLI overrides (in increasing precedence).

    Overrides whose value is None are treated as "not given".
    """
    merged = {key: entry[1] for key, entry in CONFIG_KEYS.items()}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            merged[key] = coerce_value(key, value)

    missing = [key for key in ('mode', 'dataset') if merged.get(key) is None]
    if missing:
        raise ConfigError(f"Missing required config keys: {', '.join(missing)}")
    if merged['mode'] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got '{merged['mode']}'")
    if merged['dataset'] not in DATASETS:
        raise ConfigError(f"dataset must be one of {DATASETS}, got '{merged['dataset']}'")
    return merged


def default_data_root() -> Optional[Path]:
    """Dataset root from the environment, if set"""
    root = os.environ.get(DATA_ENV_VAR)
    return Path(root).expanduser() if root else None


def describe_config_keys() -> str:
    """Documentation block for every config key"""
    lines = []
    for key, (kind, default, description) in CONFIG_KEYS.items():
        shown = 'required' if default is None else repr(default)
        lines.append(f"{key:<24} {kind.__name__:<6} {shown:<16} {description}")
    return "\n".join(lines)
