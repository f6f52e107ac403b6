#!/usr/bin/env python3
"""
Sampling from a trained PriorForge model
Prior codes, decoded images, label x noise grids, PNG tiles and latent code dumps
"""

import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import matplotlib
matplotlib.use('Agg')  # Use non-interactive backend

import matplotlib.pyplot as plt
import numpy as np
import torch

from checkpoint import atomic_write
from data import DatasetHandle
from training import ModelBundle, one_hot, prior_codes

logger = logging.getLogger(__name__)

LATENT_SOURCES = ('encoder', 'code_generator')
SWEEP = 'sweep'
ENCODE_BATCH = 256


class SamplingError(Exception):
    """Raised for requests the loaded model cannot serve"""
    pass


@dataclass
class SampleRequest:
    """n samples, optionally for one class or swept over all classes, from a seed"""
    n: int
    label: Optional[Union[int, str]] = None
    seed: int = 0

    def validate(self, num_classes: int) -> 'SampleRequest':
        if self.n < 1:
            raise SamplingError(f"n must be >= 1, got {self.n}")
        if self.label is None:
            return self
        if num_classes == 0:
            raise SamplingError("A label was given but the model is unconditional")
        if self.label == SWEEP:
            return self
        if not isinstance(self.label, int) or not 0 <= self.label < num_classes:
            raise SamplingError(f"label must be in [0, {num_classes}) or '{SWEEP}', got {self.label!r}")
        return self


def _request_labels(request: SampleRequest, num_classes: int,
                    generator: torch.Generator) -> Optional[torch.Tensor]:
    if num_classes == 0:
        return None
    if request.label is None:
        return torch.randint(num_classes, (request.n,), generator=generator)
    if request.label == SWEEP:
        return torch.arange(num_classes).repeat_interleave(request.n)
    return torch.full((request.n,), request.label, dtype=torch.long)


@torch.no_grad()
def sample_prior(bundle: ModelBundle, request: SampleRequest) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """
    Draw prior codes CG(z[, s]) in eval mode.

    In conditional modes s is the requested label, a uniform draw when no label is
    given, or every class in order (n per class) for a sweep.

    Returns:
        Tuple of (codes, labels); labels is None for unconditional models
    """
    config = bundle.config
    request.validate(config.cond_dim)
    generator = torch.Generator().manual_seed(request.seed)
    labels = _request_labels(request, config.cond_dim, generator)
    count = request.n if labels is None else labels.shape[0]
    z = torch.randn(count, config.noise_dim, generator=generator).to(config.device)
    s = one_hot(labels, config.cond_dim).to(config.device) if labels is not None else None
    bundle.eval()
    return prior_codes(bundle, z, s), labels


@torch.no_grad()
def generate_images(bundle: ModelBundle, codes: torch.Tensor) -> torch.Tensor:
    """Decode codes (N x code_dim) to images in (-1, 1)"""
    if codes.dim() != 2 or codes.shape[1] != bundle.config.code_dim:
        raise SamplingError(
            f"Codes must be N x {bundle.config.code_dim}, got {tuple(codes.shape)}"
        )
    bundle.eval()
    return bundle.decoder(codes.to(bundle.config.device)).cpu()


@torch.no_grad()
def label_noise_grid(bundle: ModelBundle, rows: int, seed: int = 0) -> torch.Tensor:
    """
    Images for a rows x K grid: row r shares noise z_r, column c uses class c.

    Returns:
        Tensor (rows * K) x C x 32 x 32 in row-major order
    """
    config = bundle.config
    if not config.conditional:
        raise SamplingError("label_noise_grid needs a conditional model")
    if rows < 1:
        raise SamplingError(f"rows must be >= 1, got {rows}")
    k = config.num_classes
    generator = torch.Generator().manual_seed(seed)
    z = torch.randn(rows, config.noise_dim, generator=generator)
    z_cells = z.repeat_interleave(k, dim=0)
    s_cells = one_hot(torch.arange(k).repeat(rows), k)
    bundle.eval()
    codes = prior_codes(bundle, z_cells.to(config.device), s_cells.to(config.device))
    return generate_images(bundle, codes)


# ============================================================================
# Image emission
# ============================================================================

def to_uint8(images: torch.Tensor) -> np.ndarray:
    """[-1, 1] floats to 8-bit with round half away from zero (values are non-negative)"""
    scaled = (images.detach().cpu().double().numpy() + 1.0) * 127.5
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def tile_images(images: torch.Tensor, cols: int) -> torch.Tensor:
    """Arrange N x C x H x W into one C x (rows*H) x (cols*W) tile, row-major, blank-padded"""
    if images.dim() != 4:
        raise SamplingError(f"Expected N x C x H x W images, got {tuple(images.shape)}")
    if cols < 1:
        raise SamplingError(f"cols must be >= 1, got {cols}")
    n, c, h, w = images.shape
    rows = -(-n // cols)
    tile = torch.full((c, rows * h, cols * w), -1.0, dtype=images.dtype)
    for i in range(n):
        r, col = divmod(i, cols)
        tile[:, r * h:(r + 1) * h, col * w:(col + 1) * w] = images[i]
    return tile


def save_png(tile: torch.Tensor, path: str) -> Path:
    """Write a C x H x W tile in [-1, 1] as an RGB PNG (grayscale replicated)"""
    pixels = to_uint8(tile).transpose(1, 2, 0)
    if pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    buffer = io.BytesIO()
    plt.imsave(buffer, pixels, format='png')
    target = Path(path)
    atomic_write(target, buffer.getvalue())
    logger.info(f"Image written: {target} ({pixels.shape[1]}x{pixels.shape[0]})")
    return target


# ============================================================================
# Latent dumps
# ============================================================================

@torch.no_grad()
def export_latents(bundle: ModelBundle, source: str, path: str,
                   dataset: Optional[DatasetHandle] = None, n: int = 1000, seed: int = 0) -> Path:
    """
    Write code vectors with labels as delimited text, header dim_0..dim_{d-1},label.

    source='encoder' encodes every image of `dataset` with its true label (-1 when
    unlabeled); source='code_generator' draws n (z, s) pairs with the sampled label.
    """
    if source not in LATENT_SOURCES:
        raise SamplingError(f"source must be one of {LATENT_SOURCES}, got '{source}'")
    bundle.eval()
    if source == 'encoder':
        if dataset is None:
            raise SamplingError("Encoder latents need a dataset")
        chunks = [
            bundle.encoder(dataset.images[i:i + ENCODE_BATCH].to(bundle.config.device)).cpu()
            for i in range(0, len(dataset), ENCODE_BATCH)
        ]
        codes = torch.cat(chunks)
        labels = dataset.labels if dataset.labeled else torch.full((len(dataset),), -1, dtype=torch.long)
    else:
        codes, labels = sample_prior(bundle, SampleRequest(n=n, seed=seed))
        codes = codes.cpu()
        if labels is None:
            labels = torch.full((n,), -1, dtype=torch.long)

    table = np.column_stack([codes.numpy().astype(np.float32), labels.numpy().astype(np.float32)])
    header = ','.join([f"dim_{i}" for i in range(codes.shape[1])] + ['label'])
    buffer = io.StringIO()
    np.savetxt(buffer, table, delimiter=',', header=header, comments='', fmt='%.9g')
    target = Path(path)
    atomic_write(target, buffer.getvalue().encode('utf-8'))
    logger.info(f"Latent dump written: {target} ({codes.shape[0]} rows, source={source})")
    return target


def load_latents(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Read a latent dump back into (codes float32 N x d, labels int64 N)"""
    table = np.loadtxt(path, delimiter=',', skiprows=1, dtype=np.float64, ndmin=2)
    return table[:, :-1].astype(np.float32), table[:, -1].astype(np.int64)
