"""Adversarial domain alignment: gradient reversal plus two discriminators.

The image-level discriminator scores every feature-map pixel; the
instance-level discriminator scores pooled ROI features.  Both sit behind a
gradient reversal layer, so minimizing their binary cross-entropy trains the
discriminators while pushing the backbone toward domain-confusing features.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

DOMAIN_LABEL = {"S": 0.0, "T": 1.0, "T'": 1.0}


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lam * grad, None


def grad_reverse(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity in the forward pass; scales gradients by -lam going down."""
    if lam < 0:
        raise ValueError("reversal strength must be >= 0")
    return _GradReverse.apply(x, lam)


class GradientReversal(nn.Module):
    def __init__(self, lam: float = 1.0):
        super().__init__()
        if lam < 0:
            raise ValueError("reversal strength must be >= 0")
        self.lam = lam

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return grad_reverse(x, self.lam)


class ImageDomainDiscriminator(nn.Module):
    """Two 1x1 convs producing a per-pixel domain logit over the feature map."""

    def __init__(self, in_channels: int = 64, mid_channels: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, mid_channels, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid_channels, 1, 1),
        )

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        """(C, h, w) -> (h, w) logits."""
        return self.net(feat[None])[0, 0]


class InstanceDomainDiscriminator(nn.Module):
    """Two-layer perceptron scoring each pooled instance feature."""

    def __init__(self, in_channels: int = 64, pool_size: int = 7, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(in_channels * pool_size * pool_size, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, roi_feats: torch.Tensor) -> torch.Tensor:
        """(N, C, P, P) -> (N,) logits."""
        return self.fc2(torch.relu(self.fc1(roi_feats.flatten(1))))[:, 0]


def adversarial_loss(
    img_disc: ImageDomainDiscriminator,
    inst_disc: InstanceDomainDiscriminator,
    feat: torch.Tensor,
    roi_feats: torch.Tensor | None,
    domain_label: float,
    lam: float = 1.0,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Image-level plus instance-level BCE against the domain label.

    Features pass through gradient reversal on their way in, so one backward
    pass trains the discriminators and un-trains the domain signal below.
    Returns the scalar loss and logging stats including discriminator
    accuracy on this batch.
    """
    img_logits = img_disc(grad_reverse(feat, lam))
    img_target = img_logits.new_full(img_logits.shape, domain_label)
    loss = F.binary_cross_entropy_with_logits(img_logits, img_target)
    correct = ((img_logits.detach() > 0).to(torch.float64).mean().item())
    acc = correct if domain_label == 1.0 else 1.0 - correct
    n_scored = img_logits.numel()

    if roi_feats is not None and roi_feats.shape[0] > 0:
        inst_logits = inst_disc(grad_reverse(roi_feats, lam))
        inst_target = inst_logits.new_full(inst_logits.shape, domain_label)
        loss = loss + F.binary_cross_entropy_with_logits(inst_logits, inst_target)
        inst_correct = (inst_logits.detach() > 0).to(torch.float64).mean().item()
        inst_acc = inst_correct if domain_label == 1.0 else 1.0 - inst_correct
        acc = (acc * n_scored + inst_acc * inst_logits.numel()) / (n_scored + inst_logits.numel())
    return loss, {"disc_acc": float(acc)}


def da_objective(
    loss_det: torch.Tensor, loss_adv: torch.Tensor, lambda_adv: float = 1.0
) -> torch.Tensor:
    """Detection loss on labeled data plus weighted adversarial loss."""
    return loss_det + lambda_adv * loss_adv


def domain_label_for(domain: str) -> float:
    """0 for source-style batches, 1 for target-style batches."""
    try:
        return DOMAIN_LABEL[domain]
    except KeyError:
        raise ValueError(f"unknown domain tag {domain!r}") from None


def balanced_disc_accuracy(
    img_disc: ImageDomainDiscriminator,
    feats_by_domain: dict[float, list[torch.Tensor]],
) -> float:
    """Pixel accuracy of the image discriminator on held-out features."""
    correct, total = 0, 0
    with torch.no_grad():
        for label, feats in feats_by_domain.items():
            for feat in feats:
                pred = (img_disc(feat) > 0).to(torch.float64)
                correct += float((pred == label).sum())
                total += pred.numel()
    return correct / max(total, 1)


__all__ = [
    "GradientReversal",
    "ImageDomainDiscriminator",
    "InstanceDomainDiscriminator",
    "adversarial_loss",
    "balanced_disc_accuracy",
    "da_objective",
    "domain_label_for",
    "grad_reverse",
]
