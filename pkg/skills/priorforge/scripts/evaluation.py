#!/usr/bin/env python3
"""
Evaluation for PriorForge
Inception-Score-style scoring against a desk-scale classifier, the classifier trainer,
and conditional accuracy of class-conditioned samples
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

try:
    from config import (
        DEFAULT_IS_SPLITS, DEFAULT_CLASSIFIER_EPOCHS, CLASSIFIER_MIN_ACCURACY,
        CLASSIFIER_HOLDOUT_FRACTION, DEFAULT_LEARNING_RATE, DEFAULT_BETAS, DEFAULT_BATCH_SIZE
    )
except ImportError:
    DEFAULT_IS_SPLITS = 10
    DEFAULT_CLASSIFIER_EPOCHS = 3
    CLASSIFIER_MIN_ACCURACY = 0.95
    CLASSIFIER_HOLDOUT_FRACTION = 0.1
    DEFAULT_LEARNING_RATE = 2e-4
    DEFAULT_BETAS = (0.5, 0.999)
    DEFAULT_BATCH_SIZE = 64

from checkpoint import Checkpoint
from data import DatasetHandle, batches, epoch_permutation
from networks import ImageDiscriminator, build_image_discriminator
from objectives import mi_category_loss
from sampling import SampleRequest, generate_images, sample_prior
from training import ModelBundle, one_hot, set_seed

logger = logging.getLogger(__name__)

CLASSIFY_BATCH = 256


class EvaluationError(Exception):
    """Raised for invalid scoring inputs or mismatched classifiers"""
    pass


class AccuracyFloorError(EvaluationError):
    """Raised when a trained classifier misses its held-out accuracy floor"""

    def __init__(self, accuracy: float, floor: float):
        super().__init__(f"Classifier held-out accuracy {accuracy:.4f} is below the floor {floor:.4f}")
        self.accuracy = accuracy
        self.floor = floor


@dataclass
class ScoreResult:
    mean: float
    std: float
    splits: int

    def report(self, n: int) -> dict:
        return {'is_mean': self.mean, 'is_std': self.std, 'splits': self.splits, 'n': n}


def inception_score(probs: np.ndarray, splits: int = DEFAULT_IS_SPLITS) -> ScoreResult:
    """
    exp(mean KL(p(y|x) || p(y))) per split, with p(y) the split's marginal.

    Rows beyond the last full split are dropped. Returns mean and (population) std over
    splits; natural logs throughout.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise EvaluationError(f"probs must be N x K, got shape {probs.shape}")
    n, k = probs.shape
    if k < 2:
        raise EvaluationError(f"Inception score needs K >= 2 classes, got {k}")
    if splits < 1:
        raise EvaluationError(f"splits must be >= 1, got {splits}")
    size = n // splits
    if size < 1:
        raise EvaluationError(f"{n} rows cannot fill {splits} splits")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-4):
        raise EvaluationError("Each row of probs must sum to 1")

    scores = []
    for i in range(splits):
        part = probs[i * size:(i + 1) * size]
        marginal = part.mean(axis=0, keepdims=True)
        # 0 * log 0 contributes nothing
        with np.errstate(divide='ignore', invalid='ignore'):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        scores.append(float(np.exp(terms.sum(axis=1).mean())))

    scores = np.array(scores)
    return ScoreResult(mean=float(scores.mean()), std=float(scores.std()), splits=splits)


# ============================================================================
# Classifier
# ============================================================================

@torch.no_grad()
def classify(classifier: ImageDiscriminator, images: torch.Tensor) -> torch.Tensor:
    """Class probabilities (N x K) from the classifier's softmax head"""
    classifier.eval()
    device = next(classifier.parameters()).device
    out = [
        classifier(images[i:i + CLASSIFY_BATCH].to(device)).class_probs().cpu()
        for i in range(0, images.shape[0], CLASSIFY_BATCH)
    ]
    return torch.cat(out)


def accuracy(classifier: ImageDiscriminator, images: torch.Tensor, labels: torch.Tensor) -> float:
    predicted = classify(classifier, images).argmax(dim=1)
    return float((predicted == labels).float().mean())


def _holdout_split(dataset: DatasetHandle, seed: int,
                   fraction: float) -> Tuple[DatasetHandle, DatasetHandle]:
    order = torch.from_numpy(epoch_permutation(len(dataset), seed, 0))
    cut = max(1, int(round(len(dataset) * fraction)))
    held, kept = order[:cut], order[cut:]

    def take(idx: torch.Tensor, suffix: str) -> DatasetHandle:
        return DatasetHandle(
            images=dataset.images[idx], name=f"{dataset.name}/{suffix}",
            labels=dataset.labels[idx], num_classes=dataset.num_classes,
        )
    return take(kept, 'train'), take(held, 'holdout')


def train_eval_classifier(dataset: DatasetHandle, epochs: int = DEFAULT_CLASSIFIER_EPOCHS,
                          seed: int = 0, min_accuracy: float = CLASSIFIER_MIN_ACCURACY,
                          holdout: Optional[DatasetHandle] = None,
                          batch_size: int = DEFAULT_BATCH_SIZE) -> Tuple[ImageDiscriminator, float]:
    """
    Train the image discriminator trunk with its softmax head as a plain classifier.

    Args:
        dataset: Labeled training images
        epochs: Training epochs
        seed: Seed for init and batch order
        min_accuracy: Held-out accuracy floor; 0 disables the check
        holdout: Held-out images; a seeded 10% split of `dataset` when None

    Returns:
        Tuple of (frozen classifier in eval mode, held-out accuracy)
    """
    if not dataset.labeled or dataset.num_classes < 2:
        raise EvaluationError("Classifier training needs a labeled dataset with >= 2 classes")
    if holdout is None:
        dataset, holdout = _holdout_split(dataset, seed, CLASSIFIER_HOLDOUT_FRACTION)

    set_seed(seed)
    k = dataset.num_classes
    classifier = build_image_discriminator(dataset.channels, k, q_enabled=True)
    optimizer = torch.optim.Adam(classifier.parameters(), lr=DEFAULT_LEARNING_RATE, betas=DEFAULT_BETAS)
    batch_size = min(batch_size, len(dataset))

    classifier.train()
    for epoch in range(1, epochs + 1):
        total, steps = 0.0, 0
        for images, labels in batches(dataset, batch_size, seed, epoch):
            loss = mi_category_loss(classifier(images).class_probs(), one_hot(labels, k))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
            steps += 1
        logger.info(f"Classifier epoch {epoch}/{epochs}: mean loss {total / max(steps, 1):.4f}")

    for param in classifier.parameters():
        param.requires_grad_(False)
    held_accuracy = accuracy(classifier, holdout.images, holdout.labels)
    logger.info(f"Classifier held-out accuracy: {held_accuracy:.4f} on {len(holdout)} images")
    if held_accuracy < min_accuracy:
        raise AccuracyFloorError(held_accuracy, min_accuracy)
    return classifier.eval(), held_accuracy


def classifier_to_checkpoint(classifier: ImageDiscriminator, accuracy_value: float, seed: int = 0) -> Checkpoint:
    return Checkpoint(
        tensors=dict(classifier.state_dict()),
        config={'channels': classifier.channels, 'num_classes': classifier.num_classes},
        kind='classifier',
        seed=seed,
        meta={'holdout_accuracy': accuracy_value},
    )


def classifier_from_checkpoint(ckpt: Checkpoint) -> ImageDiscriminator:
    if ckpt.kind != 'classifier':
        raise EvaluationError(f"Expected a classifier checkpoint, got kind '{ckpt.kind}'")
    classifier = build_image_discriminator(ckpt.config['channels'], ckpt.config['num_classes'], q_enabled=True)
    classifier.load_state_dict(ckpt.tensors)
    for param in classifier.parameters():
        param.requires_grad_(False)
    return classifier.eval()


# ============================================================================
# Model scoring
# ============================================================================

def score_model(bundle: ModelBundle, classifier: ImageDiscriminator, n: int,
                splits: int = DEFAULT_IS_SPLITS, seed: int = 0) -> ScoreResult:
    """Inception score of n prior samples under the classifier"""
    if classifier.channels != bundle.config.channels:
        raise EvaluationError(
            f"Classifier expects {classifier.channels} channels, model produces {bundle.config.channels}"
        )
    codes, _ = sample_prior(bundle, SampleRequest(n=n, seed=seed))
    probs = classify(classifier, generate_images(bundle, codes))
    return inception_score(probs.numpy(), splits)


def conditional_accuracy(bundle: ModelBundle, classifier: ImageDiscriminator,
                         per_class: int = 100, seed: int = 0) -> float:
    """Fraction of per_class samples per class s that the classifier assigns to s"""
    config = bundle.config
    if not config.conditional:
        raise EvaluationError("conditional_accuracy needs a conditional model")
    if classifier.num_classes != config.num_classes:
        raise EvaluationError(
            f"Class-count mismatch: model has {config.num_classes}, classifier has {classifier.num_classes}"
        )
    codes, labels = sample_prior(bundle, SampleRequest(n=per_class, label='sweep', seed=seed))
    return accuracy(classifier, generate_images(bundle, codes), labels)
