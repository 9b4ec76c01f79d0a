"""Reconstruction, contrastive and ablation losses.

All distances are mean absolute differences per feature map, and per-image
values are averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from csd.embedding import DEFAULT_LAYER_WEIGHTS

EPSILON = 1e-8
LOSS_KINDS = ("csd", "infonce", "perceptual", "none")


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss component is NaN or infinite; training must stop."""


@dataclass
class LossWeights:
    lambda_t: float = 1.0
    lambda_c: float = 200.0
    layer_weights: list[float] = field(default_factory=lambda: list(DEFAULT_LAYER_WEIGHTS))

    def __post_init__(self):
        if self.lambda_t < 0 or self.lambda_c < 0 or any(w < 0 for w in self.layer_weights):
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    recon_student: float = 0.0
    recon_teacher: float = 0.0
    contrastive: float = 0.0
    total: float = 0.0

    def as_dict(self):
        return {"recon_student": self.recon_student, "recon_teacher": self.recon_teacher,
                "contrastive": self.contrastive, "total": self.total}


@dataclass
class ContrastiveBatch:
    """Anchor ``B x 3 x H x W``, positive of the same shape, negatives ``K x B x 3 x H x W``."""

    anchor: torch.Tensor
    positive: torch.Tensor
    negatives: torch.Tensor

    def __post_init__(self):
        if self.negatives.dim() == 4:
            self.negatives = self.negatives.unsqueeze(0)
        if self.negatives.shape[0] < 1:
            raise ValueError("contrastive loss needs at least one negative")
        if self.anchor.shape != self.positive.shape or self.negatives.shape[1:] != self.anchor.shape:
            raise ValueError(
                f"anchor {tuple(self.anchor.shape)}, positive {tuple(self.positive.shape)} and "
                f"negatives {tuple(self.negatives.shape)} must share the SR resolution")

    @property
    def k(self):
        return self.negatives.shape[0]


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _per_image_l1(a, b):
    return (a - b).abs().flatten(1).mean(dim=1)


def reconstruction_loss(o_s, o_t, gt):
    """Return ``(L1(o_s, gt), L1(o_t, gt))``; the caller applies ``lambda_t``."""
    _check_same(o_s, gt)
    _check_same(o_t, gt)
    return F.l1_loss(o_s, gt), F.l1_loss(o_t, gt)


def contrastive_loss(cb: ContrastiveBatch, extractor, layer_weights=None, epsilon=EPSILON):
    """L1-ratio contrastive loss.

    For each tapped layer the distance to the positive is divided by the
    summed distances to the K negatives, weighted per layer and averaged over
    the batch.
    """
    if layer_weights is None:
        layer_weights = extractor.layer_weights
    b, k = cb.anchor.shape[0], cb.k
    stacked = torch.cat([cb.anchor, cb.positive, cb.negatives.flatten(0, 1)], dim=0)
    feats = extractor(stacked)
    if len(feats) != len(layer_weights):
        raise ValueError(f"{len(layer_weights)} layer weights for {len(feats)} feature maps")

    loss = cb.anchor.new_zeros(b)
    for w, f in zip(layer_weights, feats):
        fa, fp, fn = f[:b], f[b:2 * b], f[2 * b:].unflatten(0, (k, b))
        d_pos = _per_image_l1(fa, fp)
        d_neg = (fa.unsqueeze(0) - fn).abs().flatten(2).mean(dim=2).sum(dim=0)
        loss = loss + w * d_pos / (d_neg + epsilon)
    return loss.mean()


def infonce_loss(cb: ContrastiveBatch, extractor, temperature=0.07):
    """Dot-product InfoNCE on the deepest tapped layer, flattened and L2-normalized."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    b, k = cb.anchor.shape[0], cb.k
    stacked = torch.cat([cb.anchor, cb.positive, cb.negatives.flatten(0, 1)], dim=0)
    z = F.normalize(extractor(stacked)[-1].flatten(1), dim=1)
    za, zp, zn = z[:b], z[b:2 * b], z[2 * b:].unflatten(0, (k, b))
    pos = (za * zp).sum(dim=1, keepdim=True)
    neg = (za.unsqueeze(0) * zn).sum(dim=2).t()
    logits = torch.cat([pos, neg], dim=1) / temperature
    target = torch.zeros(b, dtype=torch.long, device=logits.device)
    return F.cross_entropy(logits, target)


def perceptual_loss(o, gt, extractor, layer_weights=None):
    _check_same(o, gt)
    if layer_weights is None:
        layer_weights = extractor.layer_weights
    b = o.shape[0]
    feats = extractor(torch.cat([o, gt], dim=0))
    loss = o.new_zeros(())
    for w, f in zip(layer_weights, feats):
        loss = loss + w * F.l1_loss(f[:b], f[b:])
    return loss


def total_loss(recon_student, recon_teacher, contrastive, weights: LossWeights):
    """``recon_student + lambda_t * recon_teacher + lambda_c * contrastive``.

    Works on floats or tensors; a non-finite component raises
    :class:`NonFiniteLossError`.
    """
    for name, v in (("recon_student", recon_student), ("recon_teacher", recon_teacher),
                    ("contrastive", contrastive)):
        value = v.item() if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(value):
            raise NonFiniteLossError(f"{name} is {value}")
    return recon_student + weights.lambda_t * recon_teacher + weights.lambda_c * contrastive
