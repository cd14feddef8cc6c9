"""Cross-entropy losses on probability maps.

Class axis is dim 1 throughout (N x C or N x C x H x W).
"""
from __future__ import annotations

import torch

EPS = 1e-7


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def bce_loss(targets, probs, eps: float = EPS) -> torch.Tensor:
    probs = _as_tensor(probs)
    targets = _as_tensor(targets, probs).to(probs.dtype)
    if targets.shape != probs.shape:
        raise ValueError(f"shape mismatch: targets {tuple(targets.shape)} vs probs {tuple(probs.shape)}")
    p = probs.clamp(eps, 1 - eps)
    return -(targets * torch.log(p) + (1 - targets) * torch.log(1 - p)).mean()


def cce_loss(onehot_targets, probs, mask=None, eps: float = EPS) -> torch.Tensor:
    """Mean over samples/pixels of -sum_c y_c log p_c.

    ``mask`` (broadcastable to targets without the class axis) excludes
    pixels that carry no class label; an all-false mask gives zero loss.
    """
    probs = _as_tensor(probs)
    y = _as_tensor(onehot_targets, probs).to(probs.dtype)
    if y.shape != probs.shape:
        raise ValueError(f"shape mismatch: targets {tuple(y.shape)} vs probs {tuple(probs.shape)}")
    if y.ndim < 2:
        raise ValueError("targets need a class axis at dim 1")
    row_sums = y.sum(dim=1)
    if not (torch.all((y == 0) | (y == 1)) and torch.all(row_sums == 1)):
        raise ValueError("targets are not one-hot along dim 1")
    per_item = -(y * torch.log(probs.clamp(eps, 1.0))).sum(dim=1)
    if mask is None:
        return per_item.mean()
    m = _as_tensor(mask, per_item).to(per_item.dtype).expand_as(per_item)
    denom = m.sum()
    if denom == 0:
        return per_item.sum() * 0.0
    return (per_item * m).sum() / denom


def combined_seg_loss(targets: dict, outputs, weights=(1.0, 1.0)) -> torch.Tensor:
    """weights[0] * BCE(nuclei) + weights[1] * CCE(cell types).

    ``targets`` holds ``nuclei`` (N x 1 x H x W), ``types`` (one-hot
    N x 7 x H x W) and optionally ``type_mask`` (N x H x W).
    """
    w_bce, w_cce = weights
    total = outputs.nuclei_prob.new_zeros(())
    if w_bce:
        total = total + w_bce * bce_loss(targets["nuclei"], outputs.nuclei_prob)
    if w_cce:
        total = total + w_cce * cce_loss(targets["types"], outputs.type_prob, targets.get("type_mask"))
    return total
