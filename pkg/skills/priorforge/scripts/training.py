#!/usr/bin/env python3
"""
Two-phase training for PriorForge

Per mini-batch, an AAE phase (code discriminator, encoder, decoder) is followed by a
prior improvement phase (image discriminator, decoder, code generator, Q head).
Each phase computes its losses once, takes the gradients of every update it makes,
then steps the optimizers in listing order.
"""

import csv
import dataclasses
import json
import logging
import math
import random
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

try:
    from config import (
        DEFAULT_CODE_DIM, DEFAULT_LAMBDA_REC, DEFAULT_LEARNING_RATE, DEFAULT_BETAS,
        DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_SEED, DEFAULT_LOG_EVERY,
        UNSUPERVISED_DEFAULT_CLASSES, CHECKPOINT_SUFFIX, MODES, ConfigError
    )
except ImportError:
    DEFAULT_CODE_DIM = 64
    DEFAULT_LAMBDA_REC = 1.0
    DEFAULT_LEARNING_RATE = 2e-4
    DEFAULT_BETAS = (0.5, 0.999)
    DEFAULT_BATCH_SIZE = 64
    DEFAULT_EPOCHS = 10
    DEFAULT_SEED = 0
    DEFAULT_LOG_EVERY = 50
    UNSUPERVISED_DEFAULT_CLASSES = 10
    CHECKPOINT_SUFFIX = ".ckpt"
    MODES = ('unconditional', 'supervised', 'unsupervised')

    class ConfigError(Exception):
        pass

from networks import (
    build_encoder, build_decoder, build_code_generator,
    build_image_discriminator, build_code_discriminator
)
from objectives import (
    code_adversarial_loss, image_adversarial_loss, generator_adversarial_loss,
    perceptual_loss, pixel_mse_loss, mi_category_loss
)
from checkpoint import Checkpoint, save_checkpoint, split_prefix
from data import DatasetHandle, batches

logger = logging.getLogger(__name__)

METRICS_FILE = 'metrics.csv'
METRICS_COLUMNS = ('step', 'epoch', 'l_rec', 'l_code_gan', 'l_image_gan', 'l_mi')
NETWORK_PREFIXES = ('enc', 'dec', 'cg', 'd_i', 'd_c')
ABLATION_STAGES = OrderedDict([
    ('baseline', (False, False, False)),
    ('A', (True, False, False)),
    ('AB', (True, True, False)),
    ('ABC', (True, True, True)),
])


class NumericalError(Exception):
    """Raised when a training loss becomes non-finite"""

    def __init__(self, message: str, step: int = 0, losses: Optional[Dict[str, float]] = None):
        super().__init__(message)
        self.step = step
        self.losses = losses or {}


# ============================================================================
# Configuration
# ============================================================================

@dataclass
class TrainingConfig:
    """Everything needed to rebuild the networks and replay a run"""
    mode: str = 'unconditional'
    code_dim: int = DEFAULT_CODE_DIM
    noise_dim: int = DEFAULT_CODE_DIM
    num_classes: int = 0
    channels: int = 1
    lambda_rec: float = DEFAULT_LAMBDA_REC
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    batch_size: int = DEFAULT_BATCH_SIZE
    epochs: int = DEFAULT_EPOCHS
    seed: int = DEFAULT_SEED
    learned_prior: bool = True
    perceptual_loss: bool = True
    decoder_both_phases: bool = True
    nonsaturating_generator: bool = False
    log_every: int = DEFAULT_LOG_EVERY
    device: str = 'cpu'
    dataset: str = 'synthetic'
    data_path: str = ''
    dataset_size: int = 0

    @property
    def conditional(self) -> bool:
        return self.mode in ('supervised', 'unsupervised')

    @property
    def cond_dim(self) -> int:
        return self.num_classes if self.conditional else 0

    @property
    def betas(self) -> Tuple[float, float]:
        return (self.beta1, self.beta2)

    def validate(self) -> 'TrainingConfig':
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.lambda_rec <= 0:
            raise ConfigError(f"lambda_rec must be > 0, got {self.lambda_rec}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for batch norm, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.code_dim < 1 or self.noise_dim < 1:
            raise ConfigError(f"code_dim and noise_dim must be >= 1, got {self.code_dim}/{self.noise_dim}")
        if self.conditional and self.num_classes < 2:
            raise ConfigError(f"{self.mode} mode needs num_classes >= 2, got {self.num_classes}")
        if not self.conditional and self.num_classes:
            raise ConfigError(f"num_classes is meaningless in unconditional mode (got {self.num_classes})")
        if not self.learned_prior and self.noise_dim + self.cond_dim != self.code_dim:
            raise ConfigError(
                f"Without a learned prior the code is the noise (plus one-hot label): "
                f"noise_dim + num_classes must equal code_dim "
                f"({self.noise_dim} + {self.cond_dim} != {self.code_dim})"
            )
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'TrainingConfig':
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"Unknown training config fields: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_settings(cls, settings: Dict[str, Any],
                      dataset: Optional[DatasetHandle] = None) -> 'TrainingConfig':
        """
        Build from resolved config-file settings, filling the derived defaults.

        num_classes=0 takes the dataset's class count in supervised mode and 10 in
        unsupervised mode; noise_dim=0 becomes code_dim - num_classes (or code_dim).
        """
        mode = settings['mode']
        num_classes = settings.get('num_classes', 0)
        if num_classes == 0 and mode == 'supervised' and dataset is not None:
            num_classes = dataset.num_classes
        elif num_classes == 0 and mode == 'unsupervised':
            num_classes = UNSUPERVISED_DEFAULT_CLASSES

        code_dim = settings.get('code_dim', DEFAULT_CODE_DIM)
        noise_dim = settings.get('noise_dim', 0)
        if noise_dim == 0:
            noise_dim = code_dim - num_classes if mode != 'unconditional' else code_dim

        channels = dataset.channels if dataset is not None else settings.get('channels', 1)
        known = {f.name for f in dataclasses.fields(cls)}
        values = {k: v for k, v in settings.items() if k in known}
        values.update(num_classes=num_classes, noise_dim=noise_dim, channels=channels)
        return cls(**values).validate()


def ablation_config(base: TrainingConfig, stage: str) -> TrainingConfig:
    """
    Config for one ablation stage: baseline (Gaussian prior + pixel MSE), A (learned
    prior), AB (+ perceptual loss), ABC (+ decoder updated in both phases).
    """
    if stage not in ABLATION_STAGES:
        raise ConfigError(f"Unknown ablation stage '{stage}', expected one of {list(ABLATION_STAGES)}")
    learned, perceptual, both = ABLATION_STAGES[stage]
    noise_dim = base.noise_dim if learned else base.code_dim - base.cond_dim
    return dataclasses.replace(
        base, learned_prior=learned, perceptual_loss=perceptual,
        decoder_both_phases=both, noise_dim=noise_dim,
    ).validate()


# ============================================================================
# Networks and optimizers
# ============================================================================

@dataclass
class ModelBundle:
    """The networks of one model"""
    config: TrainingConfig
    encoder: nn.Module
    decoder: nn.Module
    image_discriminator: nn.Module
    code_discriminator: nn.Module
    code_generator: Optional[nn.Module] = None

    def networks(self) -> Dict[str, nn.Module]:
        nets = OrderedDict([
            ('enc', self.encoder),
            ('dec', self.decoder),
            ('cg', self.code_generator),
            ('d_i', self.image_discriminator),
            ('d_c', self.code_discriminator),
        ])
        return OrderedDict((k, v) for k, v in nets.items() if v is not None)

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        """Parameters per update group; Q is the Q head of the image discriminator"""
        groups = OrderedDict([
            ('enc', list(self.encoder.parameters())),
            ('dec', list(self.decoder.parameters())),
            ('cg', list(self.code_generator.parameters()) if self.code_generator is not None else []),
            ('d_i', list(self.image_discriminator.d_parameters())),
            ('d_c', list(self.code_discriminator.parameters())),
            ('q', list(self.image_discriminator.q_parameters())),
        ])
        return OrderedDict((k, v) for k, v in groups.items() if v)

    def train(self) -> 'ModelBundle':
        for net in self.networks().values():
            net.train()
        return self

    def eval(self) -> 'ModelBundle':
        for net in self.networks().values():
            net.eval()
        return self

    def to(self, device: str) -> 'ModelBundle':
        for net in self.networks().values():
            net.to(device)
        return self


def set_seed(seed: int):
    """Seed Python, NumPy and torch RNGs"""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if torch.cuda.is_available():
        torch.cuda.manual_seed_all(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def build_networks(config: TrainingConfig) -> ModelBundle:
    """Build every network the configured mode needs"""
    config.validate()
    bundle = ModelBundle(
        config=config,
        encoder=build_encoder(config.channels, config.code_dim),
        decoder=build_decoder(config.channels, config.code_dim),
        image_discriminator=build_image_discriminator(
            config.channels, config.num_classes, q_enabled=config.conditional
        ),
        code_discriminator=build_code_discriminator(
            config.code_dim, config.num_classes if config.mode == 'supervised' else 0
        ),
        code_generator=(
            build_code_generator(config.noise_dim, config.cond_dim, config.code_dim)
            if config.learned_prior else None
        ),
    )
    return bundle.to(config.device)


def build_optimizers(bundle: ModelBundle) -> Dict[str, torch.optim.Optimizer]:
    """One Adam optimizer per parameter group"""
    config = bundle.config
    return OrderedDict(
        (group, torch.optim.Adam(params, lr=config.learning_rate, betas=config.betas))
        for group, params in bundle.parameter_groups().items()
    )


# ============================================================================
# Sampling helpers
# ============================================================================

def one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    return F.one_hot(labels.long(), num_classes).float()


def sample_noise(n: int, dim: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randn(n, dim, generator=generator)


def sample_categories(n: int, num_classes: int, generator: torch.Generator) -> torch.Tensor:
    """Uniform categorical labels"""
    return torch.randint(num_classes, (n,), generator=generator)


def prior_codes(bundle: ModelBundle, z: torch.Tensor, s: Optional[torch.Tensor] = None) -> torch.Tensor:
    """CG(z[, s]); without a learned prior, the code is z itself, or [s, z] when conditioned"""
    if bundle.code_generator is not None:
        return bundle.code_generator(z, s)
    return z if s is None else torch.cat([s, z], dim=1)


# ============================================================================
# Phase steps
# ============================================================================

@dataclass
class StepMetrics:
    """Losses recorded for one training step"""
    step: int
    epoch: int
    l_rec: float
    l_code_gan: float
    l_image_gan: float
    l_mi: Optional[float] = None

    def to_row(self) -> List[str]:
        values = [self.l_rec, self.l_code_gan, self.l_image_gan, self.l_mi]
        return [str(self.step), str(self.epoch)] + ['' if v is None else repr(v) for v in values]

    def finite(self) -> bool:
        values = [self.l_rec, self.l_code_gan, self.l_image_gan, self.l_mi]
        return all(math.isfinite(v) for v in values if v is not None)


def _gradients(loss: torch.Tensor, params: List[nn.Parameter]) -> List[torch.Tensor]:
    grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def _apply(optimizer: torch.optim.Optimizer, params: List[nn.Parameter], grads: List[torch.Tensor]):
    for param, grad in zip(params, grads):
        param.grad = grad
    optimizer.step()
    for param in params:
        param.grad = None


def _check_finite(losses: Dict[str, torch.Tensor], step: int):
    values = {name: float(loss.detach()) for name, loss in losses.items()}
    bad = [name for name, value in values.items() if not math.isfinite(value)]
    if bad:
        raise NumericalError(f"Non-finite loss at step {step}: {', '.join(bad)}", step, values)


def aae_phase_step(bundle: ModelBundle, optimizers: Dict[str, torch.optim.Optimizer],
                   images: torch.Tensor, labels: Optional[torch.Tensor],
                   generator: torch.Generator, step: int = 0) -> Dict[str, float]:
    """
    AAE phase: D_C ascends the code adversarial value, the encoder descends it plus the
    reconstruction loss, and the decoder descends lambda * reconstruction loss.

    Code generator, image discriminator and Q are left untouched.
    """
    config = bundle.config
    device = images.device
    n = images.shape[0]
    groups = bundle.parameter_groups()

    z = sample_noise(n, config.noise_dim, generator).to(device)
    s_cg = None
    s_dc = None
    if config.mode == 'supervised':
        if labels is None:
            raise ConfigError("Supervised training needs a labeled dataset")
        s_cg = s_dc = one_hot(labels, config.num_classes).to(device)
    elif config.mode == 'unsupervised':
        s_cg = one_hot(sample_categories(n, config.num_classes, generator), config.num_classes).to(device)

    with torch.no_grad():
        z_c = prior_codes(bundle, z, s_cg)

    codes = bundle.encoder(images)
    d_prior = bundle.code_discriminator(z_c, s_dc)
    d_enc = bundle.code_discriminator(codes, s_dc)
    l_code = code_adversarial_loss(d_prior, d_enc)

    recon = bundle.decoder(codes)
    if config.perceptual_loss:
        features_recon = bundle.image_discriminator(recon).features
        with torch.no_grad():
            features_orig = bundle.image_discriminator(images).features
        l_rec = perceptual_loss(features_recon, features_orig)
    else:
        l_rec = pixel_mse_loss(recon, images)

    _check_finite({'l_code_gan': l_code, 'l_rec': l_rec}, step)

    l_enc = generator_adversarial_loss(d_enc, config.nonsaturating_generator) + l_rec
    updates = [
        ('d_c', _gradients(-l_code, groups['d_c'])),
        ('enc', _gradients(l_enc, groups['enc'])),
        ('dec', _gradients(config.lambda_rec * l_rec, groups['dec'])),
    ]
    for group, grads in updates:
        _apply(optimizers[group], groups[group], grads)

    return {'l_code_gan': float(l_code.detach()), 'l_rec': float(l_rec.detach())}


def prior_phase_step(bundle: ModelBundle, optimizers: Dict[str, torch.optim.Optimizer],
                     images: torch.Tensor, labels: Optional[torch.Tensor],
                     generator: torch.Generator, step: int = 0) -> Dict[str, Optional[float]]:
    """
    Prior improvement phase: D_I ascends the image adversarial value; decoder and code
    generator descend it (plus the MI category loss in conditional modes); Q descends
    the MI category loss. The encoder and D_C are left untouched, and so is the decoder
    when decoder_both_phases is off.
    """
    config = bundle.config
    device = images.device
    n = images.shape[0]
    groups = bundle.parameter_groups()

    z = sample_noise(n, config.noise_dim, generator).to(device)
    s = None
    if config.conditional:
        s = one_hot(sample_categories(n, config.num_classes, generator), config.num_classes).to(device)

    fake = bundle.decoder(prior_codes(bundle, z, s))
    out_real = bundle.image_discriminator(images)
    out_fake = bundle.image_discriminator(fake)
    l_image = image_adversarial_loss(out_real.d, out_fake.d)

    losses = {'l_image_gan': l_image}
    l_gen = generator_adversarial_loss(out_fake.d, config.nonsaturating_generator)
    l_mi = None
    if config.conditional:
        l_mi = mi_category_loss(out_fake.class_probs(), s)
        losses['l_mi'] = l_mi
        l_gen = l_gen + l_mi

    _check_finite(losses, step)

    updates = [('d_i', _gradients(-l_image, groups['d_i']))]
    if config.decoder_both_phases:
        updates.append(('dec', _gradients(l_gen, groups['dec'])))
    if 'cg' in groups:
        updates.append(('cg', _gradients(l_gen, groups['cg'])))
    if l_mi is not None:
        updates.append(('q', _gradients(l_mi, groups['q'])))
    for group, grads in updates:
        _apply(optimizers[group], groups[group], grads)

    return {
        'l_image_gan': float(l_image.detach()),
        'l_mi': float(l_mi.detach()) if l_mi is not None else None,
    }


# ============================================================================
# Metrics log
# ============================================================================

class MetricsLog:
    """Append-only CSV of StepMetrics, header row first"""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, 'w', newline='', encoding='utf-8')
        self._writer = csv.writer(self._file)
        self._writer.writerow(METRICS_COLUMNS)

    def write(self, metrics: StepMetrics):
        self._writer.writerow(metrics.to_row())

    def flush(self):
        self._file.flush()

    def close(self):
        if not self._file.closed:
            self._file.close()


def read_metrics(path: str) -> List[StepMetrics]:
    """Read a metrics log back into StepMetrics records"""
    records = []
    with open(path, 'r', newline='', encoding='utf-8') as f:
        for row in csv.DictReader(f):
            records.append(StepMetrics(
                step=int(row['step']),
                epoch=int(row['epoch']),
                l_rec=float(row['l_rec']),
                l_code_gan=float(row['l_code_gan']),
                l_image_gan=float(row['l_image_gan']),
                l_mi=float(row['l_mi']) if row['l_mi'] else None,
            ))
    return records


def write_diagnostic_dump(output_dir: Path, error: NumericalError, bundle: ModelBundle) -> Path:
    """Losses and per-network parameter norms at the failing step"""
    norms = {}
    for name, net in bundle.networks().items():
        norms[name] = {pname: float(p.detach().norm()) for pname, p in net.named_parameters()}
    dump = {'step': error.step, 'losses': error.losses, 'parameter_norms': norms}
    path = Path(output_dir) / f"nonfinite_step_{error.step}.json"
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(dump, f, indent=2, sort_keys=True)
    return path


# ============================================================================
# Checkpoint conversion
# ============================================================================

def bundle_to_checkpoint(bundle: ModelBundle, optimizers: Optional[Dict[str, torch.optim.Optimizer]] = None,
                         step: int = 0, epoch: int = 0) -> Checkpoint:
    """Snapshot every network (parameters and buffers) and optimizer state"""
    tensors = OrderedDict()
    for prefix, net in bundle.networks().items():
        for name, tensor in net.state_dict().items():
            tensors[f"{prefix}.{name}"] = tensor

    optimizer_meta = OrderedDict()
    for group, optimizer in (optimizers or {}).items():
        state = optimizer.state_dict()
        optimizer_meta[group] = state['param_groups']
        for index, slots in state['state'].items():
            for key, value in slots.items():
                if torch.is_tensor(value):
                    tensors[f"optim.{group}.{index}.{key}"] = value

    return Checkpoint(
        tensors=tensors,
        config=bundle.config.to_dict(),
        kind='model',
        step=step,
        epoch=epoch,
        seed=bundle.config.seed,
        meta={'optimizers': optimizer_meta},
    )


def bundle_from_checkpoint(ckpt: Checkpoint) -> Tuple[ModelBundle, Dict[str, torch.optim.Optimizer]]:
    """Rebuild networks and optimizers from a model checkpoint"""
    if ckpt.kind != 'model':
        raise ConfigError(f"Expected a model checkpoint, got kind '{ckpt.kind}'")
    config = TrainingConfig.from_dict(ckpt.config)
    bundle = build_networks(config)
    for prefix, net in bundle.networks().items():
        net.load_state_dict(split_prefix(ckpt.tensors, prefix))

    optimizers = build_optimizers(bundle)
    for group, param_groups in ckpt.meta.get('optimizers', {}).items():
        state = OrderedDict()
        for name, tensor in split_prefix(ckpt.tensors, f"optim.{group}").items():
            index, key = name.split('.', 1)
            state.setdefault(int(index), OrderedDict())[key] = tensor
        optimizers[group].load_state_dict({'state': state, 'param_groups': param_groups})
    return bundle, optimizers


def checkpoint_path(output_dir: Path, epoch: int) -> Path:
    return Path(output_dir) / f"ckpt_epoch_{epoch}{CHECKPOINT_SUFFIX}"


# ============================================================================
# Training loop
# ============================================================================

def _check_dataset(config: TrainingConfig, dataset: DatasetHandle):
    if dataset.channels != config.channels:
        raise ConfigError(f"Dataset has {dataset.channels} channels, config expects {config.channels}")
    if config.mode == 'supervised':
        if not dataset.labeled:
            raise ConfigError("Supervised mode needs a labeled dataset")
        if int(dataset.labels.max()) >= config.num_classes:
            raise ConfigError(
                f"Dataset labels reach {int(dataset.labels.max())}, num_classes is {config.num_classes}"
            )


def run_training(config: TrainingConfig, dataset: DatasetHandle, output_dir: Optional[str] = None,
                 max_steps: Optional[int] = None) -> Tuple[Checkpoint, List[StepMetrics]]:
    """
    Train for config.epochs epochs (or until max_steps), AAE phase then prior phase per batch.

    With an output_dir, writes metrics.csv and one checkpoint per epoch. Given the same
    config and dataset the run is deterministic.

    Returns:
        Tuple of (final checkpoint, list of StepMetrics)
    """
    config.validate()
    _check_dataset(config, dataset)
    set_seed(config.seed)
    bundle = build_networks(config).train()
    optimizers = build_optimizers(bundle)
    noise = torch.Generator().manual_seed(config.seed)

    out = Path(output_dir) if output_dir else None
    log = MetricsLog(out / METRICS_FILE) if out else None
    history: List[StepMetrics] = []
    step = 0
    epoch = 0
    logger.info(
        f"Training {config.mode} model on {dataset.name} ({len(dataset)} images): "
        f"code {config.code_dim}, noise {config.noise_dim}, classes {config.num_classes}, "
        f"A={config.learned_prior} B={config.perceptual_loss} C={config.decoder_both_phases}"
    )

    try:
        for epoch in range(1, config.epochs + 1):
            for images, labels in batches(dataset, config.batch_size, config.seed, epoch):
                step += 1
                images = images.to(config.device)
                labels = labels.to(config.device) if labels is not None else None
                aae = aae_phase_step(bundle, optimizers, images, labels, noise, step)
                prior = prior_phase_step(bundle, optimizers, images, labels, noise, step)

                metrics = StepMetrics(step=step, epoch=epoch, **aae, **prior)
                history.append(metrics)
                if log:
                    log.write(metrics)
                if step % config.log_every == 0:
                    logger.info(
                        f"step {step} epoch {epoch}: l_rec={metrics.l_rec:.4f} "
                        f"l_code_gan={metrics.l_code_gan:.4f} l_image_gan={metrics.l_image_gan:.4f}"
                        + (f" l_mi={metrics.l_mi:.4f}" if metrics.l_mi is not None else "")
                    )
                if max_steps is not None and step >= max_steps:
                    break

            if log:
                log.flush()
            if out:
                save_checkpoint(bundle_to_checkpoint(bundle, optimizers, step, epoch), checkpoint_path(out, epoch))
            if max_steps is not None and step >= max_steps:
                break
    except NumericalError as e:
        logger.error(f"Aborting: {e}")
        if out:
            dump = write_diagnostic_dump(out, e, bundle)
            logger.error(f"Diagnostic state written to {dump}")
        raise
    finally:
        if log:
            log.close()

    logger.info(f"Training finished after {step} steps")
    return bundle_to_checkpoint(bundle, optimizers, step, epoch), history
