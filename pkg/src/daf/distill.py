"""Teacher-student distillation losses and the discrepancy map.

Feature tensors are ``(N, C, H, W)``; per-stage masks are ``(N, H, W)`` with
1 marking anomalous positions. Losses only look at normal positions: the
cosine term is per position, and the SSIM term computes its local window
statistics from normal positions only, so features at anomalous positions
have no influence on either loss.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import DegenerateBatchError, ShapeError

LAMBDA1 = 0.1
LAMBDA2 = 9e-4
SSIM_WINDOW = 11
COS_EPS = 1e-8


@dataclass
class LossReport:
    l_cos: float = 0.0
    l_ssim: float = 0.0
    l_kd: float = 0.0
    l_seg: float = 0.0
    l_dis: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def reflect_index(n: int, pad: int, device=None) -> torch.Tensor:
    """Indices for symmetric padding (``d c b a | a b c d``) valid for any pad width."""
    i = torch.arange(-pad, n + pad, device=device)
    j = torch.remainder(i, 2 * n)
    return torch.where(j >= n, 2 * n - 1 - j, j)


def _pad(x: torch.Tensor, pad: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    x = x.index_select(-2, reflect_index(h, pad, x.device))
    return x.index_select(-1, reflect_index(w, pad, x.device))


def box_mean(x: torch.Tensor, window: int) -> torch.Tensor:
    """Valid-mode ``window x window`` mean over the last two axes via running sums.

    Equivalent to ``avg_pool2d(x, window, stride=1)``, much faster for large windows on CPU.
    """
    for dim in (-2, -1):
        c = torch.cumsum(x, dim=dim)
        n = x.shape[dim]
        head = c.narrow(dim, window - 1, 1)
        rest = c.narrow(dim, window, n - window) - c.narrow(dim, 0, n - window)
        x = torch.cat([head, rest], dim=dim)
    return x / (window * window)


def cosine_map(ft: torch.Tensor, fs: torch.Tensor) -> torch.Tensor:
    """Per-position cosine similarity of channel vectors, ``(N, H, W)``, in [-1, 1].

    Zero vectors yield 0. Identical inputs yield exactly 1.
    """
    dot = (ft * fs).sum(dim=1)
    nt = (ft * ft).sum(dim=1)
    ns = (fs * fs).sum(dim=1)
    denom = torch.sqrt(torch.clamp(nt * ns, min=COS_EPS**2))
    return torch.clamp(dot / denom, -1.0, 1.0)


def feature_ssim(
    ft: torch.Tensor,
    fs: torch.Tensor,
    window: int = SSIM_WINDOW,
    lambda1: float = LAMBDA1,
    lambda2: float = LAMBDA2,
    anomaly_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Windowed SSIM between two feature maps, averaged over channels, ``(N, H, W)``.

    Local means, variances and covariance use a uniform ``window x window``
    box with symmetric padding. When ``anomaly_mask`` is given the box
    statistics are taken over normal positions only. Variances are floored at
    zero and the covariance is bounded by their average, so each SSIM factor
    stays in [-1, 1] and identical inputs give exactly 1.
    """
    if window % 2 != 1:
        raise ShapeError(f"SSIM window must be odd, got {window}")
    if ft.shape != fs.shape:
        raise ShapeError(f"feature shapes differ: {tuple(ft.shape)} vs {tuple(fs.shape)}")
    n, c, h, w = ft.shape
    pad = window // 2
    if anomaly_mask is None:
        normal = torch.ones((n, 1, h, w), dtype=torch.bool, device=ft.device)
    else:
        normal = (anomaly_mask.reshape(n, 1, h, w) == 0)

    normal_p = _pad(normal, pad)
    zero = torch.zeros((), dtype=ft.dtype, device=ft.device)
    t = torch.where(normal_p, _pad(ft, pad), zero)
    s = torch.where(normal_p, _pad(fs, pad), zero)

    stacked = torch.cat([normal_p.to(ft.dtype), t, s, t * t, s * s, t * s], dim=1)
    pooled = box_mean(stacked, window)
    cnt = pooled[:, :1].clamp_min(torch.finfo(ft.dtype).tiny)
    mu_t, mu_s, e_tt, e_ss, e_ts = (pooled[:, 1 + k * c:1 + (k + 1) * c] / cnt for k in range(5))

    var_t = torch.clamp(e_tt - mu_t * mu_t, min=0.0)
    var_s = torch.clamp(e_ss - mu_s * mu_s, min=0.0)
    bound = (var_t + var_s) / 2
    cov = torch.clamp(e_ts - mu_t * mu_s, min=-bound, max=bound)

    num = (2 * mu_t * mu_s + lambda1) * (2 * cov + lambda2)
    den = (mu_t * mu_t + mu_s * mu_s + lambda1) * (var_t + var_s + lambda2)
    return torch.clamp(num / den, -1.0, 1.0).mean(dim=1)


def _normal_masks(masks: Sequence[torch.Tensor] | None, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    out = []
    for i, f in enumerate(feats):
        if masks is None or masks[i] is None:
            out.append(torch.ones((f.shape[0],) + tuple(f.shape[-2:]), dtype=torch.bool, device=f.device))
            continue
        m = torch.as_tensor(masks[i], device=f.device)
        if tuple(m.shape) != (f.shape[0],) + tuple(f.shape[-2:]):
            raise ShapeError(f"stage {i + 1} mask shape {tuple(m.shape)} does not match features {tuple(f.shape)}")
        out.append(m == 0)
    return out


def _masked_mean(values: torch.Tensor, normal: torch.Tensor, stage: int) -> torch.Tensor:
    n_neg = normal.sum()
    if int(n_neg) == 0:
        raise DegenerateBatchError(f"stage {stage} has no normal positions")
    return torch.where(normal, values, torch.zeros((), dtype=values.dtype, device=values.device)).sum() / n_neg


def cos_loss(ft: Sequence[torch.Tensor], fs: Sequence[torch.Tensor], masks=None) -> torch.Tensor:
    """Sum over stages of ``1 - mean cosine similarity`` on normal positions."""
    normals = _normal_masks(masks, ft)
    total = 0.0
    for i, (a, b, nm) in enumerate(zip(ft, fs, normals)):
        total = total + (1.0 - _masked_mean(cosine_map(a, b), nm, i + 1))
    return total


def ssim_loss(
    ft: Sequence[torch.Tensor],
    fs: Sequence[torch.Tensor],
    masks=None,
    window: int = SSIM_WINDOW,
    lambda1: float = LAMBDA1,
    lambda2: float = LAMBDA2,
) -> torch.Tensor:
    """Sum over stages of ``1 - mean feature SSIM`` on normal positions."""
    normals = _normal_masks(masks, ft)
    total = 0.0
    for i, (a, b, nm) in enumerate(zip(ft, fs, normals)):
        ssim = feature_ssim(a, b, window, lambda1, lambda2, anomaly_mask=~nm)
        total = total + (1.0 - _masked_mean(ssim, nm, i + 1))
    return total


def kd_loss(
    ft: Sequence[torch.Tensor],
    fs: Sequence[torch.Tensor],
    masks=None,
    window: int = SSIM_WINDOW,
    lambda1: float = LAMBDA1,
    lambda2: float = LAMBDA2,
    terms: str = "both",
) -> tuple[torch.Tensor, LossReport]:
    """Distillation objective ``L_cos + L_SSIM`` and its report.

    ``terms`` selects ``"both"``, ``"cos"`` or ``"ssim"`` (loss ablation).
    """
    if terms not in ("both", "cos", "ssim"):
        raise ValueError(f"terms must be 'both', 'cos' or 'ssim', got {terms!r}")
    zero = ft[0].new_zeros(())
    lc = cos_loss(ft, fs, masks) if terms in ("both", "cos") else zero
    ls = ssim_loss(ft, fs, masks, window, lambda1, lambda2) if terms in ("both", "ssim") else zero
    report = LossReport(l_cos=float(lc.detach()), l_ssim=float(ls.detach()))
    report.l_kd = report.l_cos + report.l_ssim
    return lc + ls, report


def stage_discrepancy(ft: torch.Tensor, fs: torch.Tensor, window=SSIM_WINDOW, lambda1=LAMBDA1, lambda2=LAMBDA2) -> torch.Tensor:
    """``2 - cos - SSIM`` at stage resolution, in [0, 4]."""
    m = 2.0 - cosine_map(ft, fs) - feature_ssim(ft, fs, window, lambda1, lambda2)
    return torch.clamp(m, 0.0, 4.0)


def discrepancy_map(
    ft: Sequence[torch.Tensor],
    fs: Sequence[torch.Tensor],
    height: int,
    width: int,
    window: int = SSIM_WINDOW,
    lambda1: float = LAMBDA1,
    lambda2: float = LAMBDA2,
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Fused discrepancy ``(N, H, W)`` and the per-stage maps.

    Each stage map is bilinearly upsampled (half-pixel alignment) to
    ``height x width`` and the results are summed. Callers that must not
    backpropagate through this path detach or run under ``torch.no_grad``.
    """
    stages = [stage_discrepancy(a, b, window, lambda1, lambda2) for a, b in zip(ft, fs)]
    fused = None
    for m in stages:
        up = F.interpolate(m[:, None], size=(height, width), mode="bilinear", align_corners=False)[:, 0]
        up = torch.clamp(up, 0.0, 4.0)
        fused = up if fused is None else fused + up
    return torch.clamp(fused, 0.0, 4.0 * len(stages)), stages
