"""Segmentation objectives: hard-negative-mined BCE, auxiliary stage losses, total loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..distill import LossReport
from ..errors import ShapeError, TrainingError

BCE_EPS = 1e-7
MINING_RATIO = 3


@dataclass
class HardMiningBatch:
    """Selected pixels of one probability map (flat raster indices)."""

    indices: np.ndarray
    x: torch.Tensor
    y: torch.Tensor
    n_pos: int
    n_neg_selected: int


def _select(pred_flat: np.ndarray, target_flat: np.ndarray, ratio: float) -> tuple[np.ndarray, int, int]:
    pos = np.flatnonzero(target_flat)
    neg = np.flatnonzero(target_flat == 0)
    n_pos = len(pos)
    k = min(int(ratio * max(n_pos, 1)), len(neg))
    idx = np.concatenate([pos, np.sort(neg[_top_k_stable(pred_flat[neg], k)])])
    return idx, n_pos, k


def _top_k_stable(values: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` largest values; ties at the cutoff go to the lowest positions.

    Same selection as a stable descending sort truncated to ``k``, without the full sort.
    """
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    if k >= len(values):
        return np.arange(len(values))
    cutoff = np.partition(values, len(values) - k)[len(values) - k]
    above = np.flatnonzero(values > cutoff)
    ties = np.flatnonzero(values == cutoff)[: k - len(above)]
    return np.concatenate([above, ties])


def mine_hard_negatives(pred: torch.Tensor, target, ratio: float = MINING_RATIO) -> HardMiningBatch:
    """All positives plus the ``ratio * max(n_pos, 1)`` highest-scoring negatives.

    ``pred`` and ``target`` are single maps of the same shape (any rank).
    """
    target = torch.as_tensor(target)
    if tuple(pred.shape) != tuple(target.shape):
        raise ShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    p = pred.reshape(-1)
    t = target.reshape(-1)
    idx, n_pos, k = _select(p.detach().cpu().numpy(), t.cpu().numpy() > 0, ratio)
    it = torch.from_numpy(idx).to(p.device)
    return HardMiningBatch(idx, p[it], (t[it] > 0).to(p.dtype), n_pos, k)


def _bce(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    x = torch.clamp(x, BCE_EPS, 1.0 - BCE_EPS)
    return -(y * torch.log(x) + (1.0 - y) * torch.log(1.0 - x))


def seg_loss(pred: torch.Tensor, target, ratio: float = MINING_RATIO) -> torch.Tensor:
    """Mean BCE over the hard-mined subset, mining each map of the batch separately.

    Accepts a single map ``(H, W)`` or a batch ``(N, H, W)`` / ``(N, 1, H, W)``.
    """
    target = torch.as_tensor(target, device=pred.device)
    if pred.ndim == 4:
        pred = pred[:, 0]
    if target.ndim == 4:
        target = target[:, 0]
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    if tuple(pred.shape) != tuple(target.shape):
        raise ShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    xs, ys = [], []
    for p, t in zip(pred, target):
        batch = mine_hard_negatives(p, t, ratio)
        xs.append(batch.x)
        ys.append(batch.y)
    return _bce(torch.cat(xs), torch.cat(ys)).mean()


def stage_targets(mask: np.ndarray | torch.Tensor, sizes: Sequence[tuple[int, int]]) -> list[torch.Tensor]:
    """Any-rule downsampled copies of ``(N, H, W)`` masks for each stage size."""
    from ..imgkit import downsample_mask

    m = np.asarray(mask.cpu() if isinstance(mask, torch.Tensor) else mask)
    if m.ndim == 2:
        m = m[None]
    out = []
    for h, w in sizes:
        out.append(torch.from_numpy(np.stack([downsample_mask(mi, h, w) for mi in m])))
    return out


def aux_loss(aux_preds: Sequence[torch.Tensor], stage_masks: Sequence, ratio: float = MINING_RATIO) -> torch.Tensor:
    """Sum over stages of :func:`seg_loss` against that stage's mask."""
    total = aux_preds[0].new_zeros(())
    for p, m in zip(aux_preds, stage_masks):
        total = total + seg_loss(p, m, ratio)
    return total


def total_loss(report: LossReport, kd=None, seg=None, dis=None) -> torch.Tensor | float:
    """``L_kd + L_seg + L_dis`` with unit weights; fills ``report.total``.

    Tensors may be passed for the three terms (the sum is then returned as a
    tensor for backpropagation); otherwise the report's floats are summed.
    """
    names = ("l_kd", "l_seg", "l_dis")
    values = [getattr(report, n) for n in names]
    for n, v in zip(names, values):
        if not math.isfinite(v):
            raise TrainingError(f"loss term {n} is not finite ({v})")
    report.total = float(sum(values))
    terms = [t for t in (kd, seg, dis) if t is not None]
    if terms:
        out = terms[0]
        for t in terms[1:]:
            out = out + t
        return out
    return report.total
