"""Training objectives.

All distances are mean squared error so the loss weights keep their meaning
across image sizes and message lengths. The adversarial pair is the
relativistic-average least-squares formulation: each side is scored against
the batch-average score of the other side, which makes both losses invariant
to any constant shift of the discriminator output.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .networks import ShapeError


@dataclass
class LossWeights:
    """Weights for (adversarial, reconstruction, tracer, detector-common, detector-malicious)."""

    ad2: float = 0.1
    en: float = 1.0
    tr: float = 10.0
    de1: float = 10.0
    de2: float = 10.0


@dataclass
class LossReport:
    en: float
    tr: float
    de1: float
    de2: float
    ad1: float
    ad2: float
    total: float

    def as_line(self, step: int) -> str:
        return (f"step={step} en={self.en:.6f} tr={self.tr:.6f} de1={self.de1:.6f} "
                f"de2={self.de2:.6f} ad1={self.ad1:.6f} ad2={self.ad2:.6f} total={self.total:.6f}")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_encoder(cover: torch.Tensor, encoded: torch.Tensor) -> torch.Tensor:
    """Reconstruction distance between cover and encoded image."""
    _check_same_shape(cover, encoded)
    return F.mse_loss(encoded, cover)


def loss_tracer(m_en: torch.Tensor, m_tr: torch.Tensor) -> torch.Tensor:
    """Tracer must recover the embedded signal message from the mixed batch."""
    _check_same_shape(m_en, m_tr)
    return F.mse_loss(m_tr, m_en)


def loss_detector_common(m_en: torch.Tensor, m_de: torch.Tensor) -> torch.Tensor:
    """Detector must recover the message from the benign-only batch."""
    _check_same_shape(m_en, m_de)
    return F.mse_loss(m_de, m_en)


def loss_detector_malicious(m_de: torch.Tensor) -> torch.Tensor:
    """Detector output is driven to zero on the malicious-only batch, so its
    binarized bits are uninformative there."""
    return F.mse_loss(m_de, torch.zeros_like(m_de))


def patch_scores(score_map: torch.Tensor) -> torch.Tensor:
    """Per-image mean of a Bx1xhxw patch map."""
    if score_map.dim() != 4:
        raise ShapeError(f"expected a Bx1xhxw score map, got {tuple(score_map.shape)}")
    return score_map.mean(dim=(1, 2, 3))


def loss_discriminator(real_map: torch.Tensor, fake_map: torch.Tensor) -> torch.Tensor:
    """Relativistic-average least-squares loss for the discriminator update.

    The caller computes fake_map from a detached encoded image so no gradient
    reaches the encoder through this term.
    """
    real = patch_scores(real_map)
    fake = patch_scores(fake_map)
    return (torch.mean((real - fake.mean() - 1.0) ** 2)
            + torch.mean((fake - real.mean() + 1.0) ** 2))


def loss_adversarial_for_encoder(real_map: torch.Tensor, fake_map: torch.Tensor) -> torch.Tensor:
    """Mirrored relativistic loss whose gradients push the encoder; the
    discriminator is held fixed by only stepping the main optimizer."""
    real = patch_scores(real_map)
    fake = patch_scores(fake_map)
    return (torch.mean((real - fake.mean() + 1.0) ** 2)
            + torch.mean((fake - real.mean() - 1.0) ** 2))


def total_loss(en, tr, de1, de2, ad2, weights: LossWeights):
    """Weighted sum of the main-update terms."""
    return (weights.ad2 * ad2 + weights.en * en + weights.tr * tr
            + weights.de1 * de1 + weights.de2 * de2)
