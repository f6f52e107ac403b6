#!/usr/bin/env python3
"""
Training objectives for PriorForge

All losses are batch means; feature and pixel losses also average over elements.
Log arguments are clamped at LOG_EPS so every loss stays finite.
"""

import torch
import torch.nn.functional as F

try:
    from config import LOG_EPS
except ImportError:
    LOG_EPS = 1e-7


class ObjectiveError(Exception):
    """Raised when loss inputs have incompatible shapes"""
    pass


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(p, min=LOG_EPS))


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ObjectiveError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def gan_value(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """mean(log d_real) + mean(log(1 - d_fake)); at most 0"""
    if d_real.shape[0] != d_fake.shape[0]:
        raise ObjectiveError(
            f"Batch sizes differ: {d_real.shape[0]} real vs {d_fake.shape[0]} fake"
        )
    return _safe_log(d_real).mean() + _safe_log(1.0 - d_fake).mean()


def image_adversarial_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """
    Adversarial value in image space.

    D_I ascends it; decoder and code generator descend it.

    Args:
        d_real: D_I probabilities on real images, N x 1
        d_fake: D_I probabilities on decoded prior codes, N x 1
    """
    return gan_value(d_real, d_fake)


def code_adversarial_loss(d_prior: torch.Tensor, d_enc: torch.Tensor) -> torch.Tensor:
    """
    Adversarial value in latent code space (label-conditioned upstream when supervised).

    D_C ascends it; the encoder descends it.

    Args:
        d_prior: D_C probabilities on prior codes (real role), N x 1
        d_enc: D_C probabilities on encoder outputs (fake role), N x 1
    """
    return gan_value(d_prior, d_enc)


def generator_adversarial_loss(d_fake: torch.Tensor, nonsaturating: bool = False) -> torch.Tensor:
    """
    Generator-side term of the adversarial value.

    The saturating form is log(1 - d_fake), the only term that depends on the generator,
    so its gradient equals that of the full value. The non-saturating form is -log d_fake.
    """
    if nonsaturating:
        return -_safe_log(d_fake).mean()
    return _safe_log(1.0 - d_fake).mean()


def perceptual_loss(features_recon: torch.Tensor, features_orig: torch.Tensor) -> torch.Tensor:
    """Mean squared difference of discriminator features; the original side is detached"""
    _same_shape(features_recon, features_orig, 'perceptual_loss')
    return F.mse_loss(features_recon, features_orig.detach(), reduction='mean')


def pixel_mse_loss(x_recon: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Mean squared pixel error (the MSE baseline reconstruction objective)"""
    _same_shape(x_recon, x, 'pixel_mse_loss')
    return F.mse_loss(x_recon, x, reduction='mean')


def mi_category_loss(q: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """
    Cross-entropy of Q's class probabilities against the one-hot category s.

    Minimizing it maximizes the variational lower bound on the mutual information
    between the category and the decoded image.
    """
    _same_shape(q, s, 'mi_category_loss')
    return -(s * _safe_log(q)).sum(dim=1).mean()
