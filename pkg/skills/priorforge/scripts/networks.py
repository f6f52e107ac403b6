#!/usr/bin/env python3
"""
Network construction for PriorForge
Encoder, decoder, code generator, image discriminator (D/Q heads) and code discriminator,
all for 32 x 32 images
"""

from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

try:
    from config import (
        IMAGE_SIZE, SUPPORTED_CHANNELS, LEAKY_SLOPE, INIT_STD,
        CODE_DISC_WIDTHS, IMAGE_DISC_FC_WIDTH
    )
except ImportError:
    IMAGE_SIZE = 32
    SUPPORTED_CHANNELS = (1, 3)
    LEAKY_SLOPE = 0.2
    INIT_STD = 0.02
    CODE_DISC_WIDTHS = (1000, 500, 200)
    IMAGE_DISC_FC_WIDTH = 1000

RESAMPLE_MODES = ('none', 'down', 'up')


class NetworkConfigError(Exception):
    """Raised for invalid network configuration or mismatched inputs"""
    pass


def init_weights(module: nn.Module):
    """N(0, 0.02) conv/linear weights, N(1, 0.02) batch-norm scale, zero biases"""
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.normal_(module.weight, 0.0, INIT_STD)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d)):
        nn.init.normal_(module.weight, 1.0, INIT_STD)
        nn.init.zeros_(module.bias)


def _check_last_dim(x: torch.Tensor, expected: int, what: str):
    if x.dim() != 2 or x.shape[1] != expected:
        raise NetworkConfigError(
            f"{what} expects input of shape N x {expected}, got {tuple(x.shape)}"
        )


def _check_images(x: torch.Tensor, channels: int, what: str):
    if x.dim() != 4 or x.shape[1:] != (channels, IMAGE_SIZE, IMAGE_SIZE):
        raise NetworkConfigError(
            f"{what} expects N x {channels} x {IMAGE_SIZE} x {IMAGE_SIZE} images, "
            f"got {tuple(x.shape)}"
        )


# ============================================================================
# Residual block
# ============================================================================

class ResidualBlock(nn.Module):
    """
    Two rectified 3x3 convs with a skip connection and a final rectifier.

    resample='down' puts stride 2 on the first conv, resample='up' puts a nearest-neighbor
    x2 upsample in front of it. The skip path is the identity when shapes match and a
    learned 1x1 projection (with the same resampling) otherwise.
    """

    def __init__(self, in_channels: int, out_channels: int, resample: str = 'none'):
        super().__init__()
        if resample not in RESAMPLE_MODES:
            raise NetworkConfigError(f"resample must be one of {RESAMPLE_MODES}, got '{resample}'")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.resample = resample

        stride = 2 if resample == 'down' else 1
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1)

        if resample != 'none' or in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, 1, stride=stride)
        else:
            self.skip = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise NetworkConfigError(
                f"Residual block expects {self.in_channels} input channels, got {tuple(x.shape)}"
            )
        if self.resample == 'up':
            x = F.interpolate(x, scale_factor=2, mode='nearest')

        residual = F.relu(self.conv2(F.relu(self.conv1(x))))
        shortcut = x if self.skip is None else self.skip(x)
        return F.relu(shortcut + residual)


def residual_block(x: torch.Tensor, out_channels: int, resample: str = 'none') -> torch.Tensor:
    """Apply a freshly initialized residual block to `x` (functional form)"""
    block = ResidualBlock(x.shape[1], out_channels, resample).to(x.device, x.dtype)
    block.apply(init_weights)
    return block(x)


# ============================================================================
# Encoder / decoder
# ============================================================================

class Encoder(nn.Module):
    """N x C x 32 x 32 images -> N x code_dim codes"""

    def __init__(self, channels: int, code_dim: int):
        super().__init__()
        self.name = 'encoder'
        self.channels = channels
        self.code_dim = code_dim

        self.features = nn.Sequential(
            nn.Conv2d(channels, 64, 3, stride=2, padding=1),   # 32 -> 16
            nn.ReLU(),
            ResidualBlock(64, 64),
            ResidualBlock(64, 128, 'down'),                     # 16 -> 8
            ResidualBlock(128, 256, 'down'),                    # 8 -> 4
            ResidualBlock(256, 512, 'down'),                    # 4 -> 2
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Sequential(
            nn.Linear(512, 2 * code_dim),
            nn.BatchNorm1d(2 * code_dim),
            nn.ReLU(),
            nn.Linear(2 * code_dim, code_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_images(x, self.channels, 'Encoder')
        return self.head(torch.flatten(self.features(x), 1))


class Decoder(nn.Module):
    """N x code_dim codes -> N x C x 32 x 32 images in (-1, 1)"""

    def __init__(self, channels: int, code_dim: int):
        super().__init__()
        self.name = 'decoder'
        self.channels = channels
        self.code_dim = code_dim

        self.body = nn.Sequential(
            nn.ConvTranspose2d(code_dim, 512, 4, stride=1, padding=0),  # 1 -> 4
            nn.BatchNorm2d(512),
            nn.ReLU(),
            ResidualBlock(512, 256, 'up'),                              # 4 -> 8
            ResidualBlock(256, 128, 'up'),                              # 8 -> 16
            ResidualBlock(128, 64, 'up'),                               # 16 -> 32
            nn.Conv2d(64, channels, 3, stride=1, padding=1),
            nn.Tanh(),
        )

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        _check_last_dim(codes, self.code_dim, 'Decoder')
        return self.body(codes.view(codes.shape[0], self.code_dim, 1, 1))


def build_encoder(channels: int, code_dim: int, image_size: int = IMAGE_SIZE) -> Encoder:
    """Build the residual encoder"""
    if image_size != IMAGE_SIZE:
        raise NetworkConfigError(f"Only {IMAGE_SIZE} x {IMAGE_SIZE} images are supported, got {image_size}")
    if channels not in SUPPORTED_CHANNELS:
        raise NetworkConfigError(f"channels must be one of {SUPPORTED_CHANNELS}, got {channels}")
    if code_dim < 1:
        raise NetworkConfigError(f"code_dim must be >= 1, got {code_dim}")
    net = Encoder(channels, code_dim)
    net.apply(init_weights)
    return net


def build_decoder(channels: int, code_dim: int) -> Decoder:
    """Build the residual decoder"""
    if channels not in SUPPORTED_CHANNELS:
        raise NetworkConfigError(f"channels must be one of {SUPPORTED_CHANNELS}, got {channels}")
    if code_dim < 1:
        raise NetworkConfigError(f"code_dim must be >= 1, got {code_dim}")
    net = Decoder(channels, code_dim)
    net.apply(init_weights)
    return net


# ============================================================================
# Code generator
# ============================================================================

class CodeGenerator(nn.Module):
    """Noise (optionally concatenated with a one-hot condition) -> latent code"""

    def __init__(self, noise_dim: int, cond_dim: int, code_dim: int):
        super().__init__()
        self.name = 'code_generator'
        self.noise_dim = noise_dim
        self.cond_dim = cond_dim
        self.code_dim = code_dim
        in_dim = noise_dim + cond_dim

        self.body = nn.Sequential(
            nn.Linear(in_dim, 2 * in_dim),
            nn.BatchNorm1d(2 * in_dim),
            nn.ReLU(),
            nn.Linear(2 * in_dim, code_dim),
            nn.BatchNorm1d(code_dim),
        )

    def forward(self, z: torch.Tensor, s: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = z if s is None else torch.cat([z, s], dim=1)
        _check_last_dim(x, self.noise_dim + self.cond_dim, 'Code generator')
        return self.body(x)


def build_code_generator(noise_dim: int, cond_dim: int, code_dim: int) -> CodeGenerator:
    """Build the code generator; cond_dim=0 gives the unconditional prior generator"""
    if noise_dim < 1:
        raise NetworkConfigError(f"noise_dim must be >= 1, got {noise_dim}")
    if cond_dim < 0:
        raise NetworkConfigError(f"cond_dim must be >= 0, got {cond_dim}")
    if code_dim < 1:
        raise NetworkConfigError(f"code_dim must be >= 1, got {code_dim}")
    net = CodeGenerator(noise_dim, cond_dim, code_dim)
    net.apply(init_weights)
    return net


# ============================================================================
# Discriminators
# ============================================================================

@dataclass
class DiscriminatorOutput:
    """Image discriminator outputs"""
    d: torch.Tensor  # N x 1 probabilities
    features: torch.Tensor  # N x F last conv layer activations
    q: Optional[torch.Tensor] = None  # N x K class probabilities, only with the Q head

    def class_probs(self) -> torch.Tensor:
        """Q head output; an error when the head is disabled"""
        if self.q is None:
            raise NetworkConfigError("Q head is disabled on this image discriminator")
        return self.q


class ImageDiscriminator(nn.Module):
    """Shared conv trunk with a real/fake head (D) and an optional category head (Q)"""

    def __init__(self, channels: int, num_classes: int, q_enabled: bool):
        super().__init__()
        self.name = 'image_discriminator'
        self.channels = channels
        self.num_classes = num_classes
        self.q_enabled = q_enabled

        self.trunk = nn.Sequential(
            nn.Conv2d(channels, 64, 4, stride=2, padding=1),    # 32 -> 16
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(64, 128, 4, stride=2, padding=1),         # 16 -> 8
            nn.BatchNorm2d(128),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(128, 256, 4, stride=2, padding=1),        # 8 -> 4
            nn.BatchNorm2d(256),
            nn.LeakyReLU(LEAKY_SLOPE),
        )
        self.feature_dim = 256 * 4 * 4
        self.fc = nn.Sequential(
            nn.Linear(self.feature_dim, IMAGE_DISC_FC_WIDTH),
            nn.LeakyReLU(LEAKY_SLOPE),
        )
        self.d_head = nn.Linear(IMAGE_DISC_FC_WIDTH, 1)
        self.q_head = nn.Linear(IMAGE_DISC_FC_WIDTH, num_classes) if q_enabled else None

    def forward(self, x: torch.Tensor) -> DiscriminatorOutput:
        _check_images(x, self.channels, 'Image discriminator')
        features = torch.flatten(self.trunk(x), 1)
        hidden = self.fc(features)
        d = torch.sigmoid(self.d_head(hidden))
        q = F.softmax(self.q_head(hidden), dim=1) if self.q_head is not None else None
        return DiscriminatorOutput(d=d, features=features, q=q)

    def q_parameters(self) -> Iterator[nn.Parameter]:
        """Parameters of the Q head"""
        if self.q_head is None:
            return iter(())
        return self.q_head.parameters()

    def d_parameters(self) -> Iterator[nn.Parameter]:
        """Trunk, FC and D head parameters (everything except the Q head)"""
        for name, param in self.named_parameters():
            if not name.startswith('q_head.'):
                yield param


def build_image_discriminator(channels: int, num_classes: int = 0,
                              q_enabled: bool = False) -> ImageDiscriminator:
    """Build the image discriminator"""
    if channels not in SUPPORTED_CHANNELS:
        raise NetworkConfigError(f"channels must be one of {SUPPORTED_CHANNELS}, got {channels}")
    if q_enabled and num_classes < 2:
        raise NetworkConfigError(f"Q head needs num_classes >= 2, got {num_classes}")
    net = ImageDiscriminator(channels, num_classes, q_enabled)
    net.apply(init_weights)
    return net


class CodeDiscriminator(nn.Module):
    """Latent code (optionally with one-hot label) -> probability of coming from the prior"""

    def __init__(self, code_dim: int, cond_dim: int):
        super().__init__()
        self.name = 'code_discriminator'
        self.code_dim = code_dim
        self.cond_dim = cond_dim

        layers: List[nn.Module] = []
        width = code_dim + cond_dim
        for out_width in CODE_DISC_WIDTHS:
            layers += [nn.Linear(width, out_width), nn.LeakyReLU(LEAKY_SLOPE)]
            width = out_width
        layers += [nn.Linear(width, 1), nn.Sigmoid()]
        self.body = nn.Sequential(*layers)

    def forward(self, codes: torch.Tensor, s: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = codes if s is None else torch.cat([codes, s], dim=1)
        _check_last_dim(x, self.code_dim + self.cond_dim, 'Code discriminator')
        return self.body(x)


def build_code_discriminator(code_dim: int, cond_dim: int = 0) -> CodeDiscriminator:
    """Build the code discriminator; cond_dim > 0 makes it label-conditioned"""
    if code_dim < 1:
        raise NetworkConfigError(f"code_dim must be >= 1, got {code_dim}")
    if cond_dim < 0:
        raise NetworkConfigError(f"cond_dim must be >= 0, got {cond_dim}")
    net = CodeDiscriminator(code_dim, cond_dim)
    net.apply(init_weights)
    return net


def count_parameters(net: nn.Module) -> int:
    """Total number of scalar parameters"""
    return sum(p.numel() for p in net.parameters())


def parameter_summary(nets: Dict[str, nn.Module]) -> Dict[str, int]:
    """Parameter count per named network"""
    return {name: count_parameters(net) for name, net in nets.items()}
