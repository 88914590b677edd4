"""Anomaly scores and detection/localization metrics.

Pixel-level metrics pool every test pixel of the set. Undefined metrics
(for example a single-class label set) are reported as ``None`` / JSON null.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import imgkit
from .errors import ShapeError, UndefinedMetricError

SCORE_LAMBDA = 3.0
SCORE_SIGMA = 4.0
TOPK = 50
PRO_FPR_LIMIT = 0.3
PRO_THRESHOLDS = 200


@dataclass
class ScoreMap:
    map: np.ndarray
    image_score: float


def image_score(score: np.ndarray, topk: int = TOPK) -> float:
    """Mean of the ``topk`` largest values (all values when the map is smaller)."""
    flat = np.asarray(score, dtype=np.float64).ravel()
    if flat.size <= topk:
        return float(flat.mean())
    return float(np.partition(flat, flat.size - topk)[flat.size - topk:].mean())


def score_map(
    mbar: np.ndarray | None,
    ms: np.ndarray | None,
    lam: float = SCORE_LAMBDA,
    sigma: float = SCORE_SIGMA,
    topk: int = TOPK,
) -> ScoreMap:
    """``gaussian_blur(M_bar + lam * M_S, sigma)``; a ``None`` term contributes nothing."""
    if mbar is None and ms is None:
        raise ValueError("score_map needs at least one of M_bar and M_S")
    ref = mbar if mbar is not None else ms
    total = np.zeros(np.shape(ref), dtype=np.float64)
    if mbar is not None:
        total += np.asarray(mbar, dtype=np.float64)
    if ms is not None:
        if np.shape(ms) != total.shape:
            raise ShapeError(f"M_bar {total.shape} and M_S {np.shape(ms)} differ in shape")
        total += lam * np.asarray(ms, dtype=np.float64)
    smoothed = imgkit.gaussian_blur(total, sigma)
    return ScoreMap(smoothed, image_score(smoothed, topk))


def _binary(labels) -> np.ndarray:
    y = np.asarray(labels).ravel()
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return y.astype(bool)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary(labels)
    if s.shape != y.shape:
        raise ShapeError(f"{s.shape[0]} scores vs {y.shape[0]} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-wise area under the precision-recall curve over descending unique scores."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary(labels)
    if s.shape != y.shape:
        raise ShapeError(f"{s.shape[0]} scores vs {y.shape[0]} labels")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average_precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # Last index of each run of equal scores = one threshold.
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _regions(gt_masks) -> tuple[np.ndarray, int]:
    """Global region id per pixel (0 = normal, ids from 1) over a list of masks."""
    ids = []
    offset = 0
    for m in gt_masks:
        lab, k = imgkit.connected_components(np.asarray(m) > 0)
        ids.append(np.where(lab > 0, lab + offset, 0).ravel())
        offset += k
    return np.concatenate(ids), offset


def pro_curve(score_maps, gt_masks, n_thresholds: int | None = PRO_THRESHOLDS) -> tuple[np.ndarray, np.ndarray]:
    """``(fpr, pro)`` points ordered by decreasing threshold, starting at ``(0, 0)``.

    ``n_thresholds=None`` uses every unique score as a threshold (exact, for small inputs).
    """
    if len(score_maps) != len(gt_masks):
        raise ShapeError(f"{len(score_maps)} score maps vs {len(gt_masks)} masks")
    for s, m in zip(score_maps, gt_masks):
        if np.shape(s) != np.shape(m):
            raise ShapeError(f"score map {np.shape(s)} vs mask {np.shape(m)}")
    scores = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in score_maps])
    region, n_regions = _regions(gt_masks)
    if n_regions == 0:
        raise UndefinedMetricError("pro_score needs at least one anomalous region")
    normal = region == 0
    n_normal = int(normal.sum())
    if n_normal == 0:
        raise UndefinedMetricError("pro_score needs normal pixels to measure false positives")

    if n_thresholds is None:
        th = np.unique(scores)
    else:
        th = np.linspace(scores.min(), scores.max(), int(n_thresholds))
    n = th.size
    # Pixel with bin b is predicted anomalous at thresholds th[0..b-1] (score >= th[j]).
    bins = np.searchsorted(th, scores, side="right")
    fp_hist = np.bincount(bins[normal], minlength=n + 1)
    reg_hist = np.bincount(region[~normal] * (n + 1) + bins[~normal], minlength=(n_regions + 1) * (n + 1))
    reg_hist = reg_hist.reshape(n_regions + 1, n + 1)[1:]

    # count_ge[j] = pixels predicted at threshold j = sum over bins > j.
    fp = np.cumsum(fp_hist[::-1])[::-1][1:]
    hit = np.cumsum(reg_hist[:, ::-1], axis=1)[:, ::-1][:, 1:]
    sizes = reg_hist.sum(axis=1)
    fpr = fp / n_normal
    pro = (hit / sizes[:, None]).mean(axis=0)
    # Decreasing threshold order, prefixed by the empty prediction.
    return np.r_[0.0, fpr[::-1]], np.r_[0.0, pro[::-1]]


def integrate_to_limit(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoid area under a curve with non-decreasing ``x`` from ``x[0]`` up to ``limit``."""
    area = 0.0
    for i in range(1, x.size):
        x0, x1, y0, y1 = x[i - 1], x[i], y[i - 1], y[i]
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def pro_score(score_maps, gt_masks, fpr_limit: float = PRO_FPR_LIMIT,
              n_thresholds: int | None = PRO_THRESHOLDS) -> float:
    """Normalized area under the PRO-vs-FPR curve up to ``fpr_limit``."""
    if not 0 < fpr_limit <= 1:
        raise ValueError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    fpr, pro = pro_curve(score_maps, gt_masks, n_thresholds)
    return float(integrate_to_limit(fpr, pro, fpr_limit) / fpr_limit)


@dataclass
class MetricReport:
    i_auc: float | None
    p_auc: float | None
    p_pro: float | None
    p_map: float | None
    per_category: dict = field(default_factory=dict)
    n_images: int = 0
    n_pixels: int = 0
    config_hash: str | None = None
    errors: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "i_auc": self.i_auc,
            "p_auc": self.p_auc,
            "p_pro": self.p_pro,
            "p_map": self.p_map,
            "per_category": self.per_category,
            "n_images": self.n_images,
            "n_pixels": self.n_pixels,
            "config_hash": self.config_hash,
            "errors": self.errors,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _metric(fn, errors: dict, name: str, *args, **kw):
    try:
        return fn(*args, **kw)
    except UndefinedMetricError as exc:
        errors[name] = str(exc)
        return None


def _core_metrics(maps, masks, labels, n_thresholds) -> tuple[dict, dict]:
    errors: dict = {}
    img_scores = [image_score(m) if not isinstance(m, ScoreMap) else m.image_score for m in maps]
    rasters = [m.map if isinstance(m, ScoreMap) else np.asarray(m) for m in maps]
    pix_s = np.concatenate([r.ravel() for r in rasters])
    pix_y = np.concatenate([(np.asarray(m) > 0).ravel() for m in masks]).astype(np.uint8)
    out = {
        "i_auc": _metric(roc_auc, errors, "i_auc", img_scores, labels),
        "p_auc": _metric(roc_auc, errors, "p_auc", pix_s, pix_y),
        "p_pro": _metric(pro_score, errors, "p_pro", rasters, masks, n_thresholds=n_thresholds),
        "p_map": _metric(average_precision, errors, "p_map", pix_s, pix_y),
    }
    return out, errors


def metrics_from_scores(
    maps: Sequence[ScoreMap | np.ndarray],
    masks: Sequence[np.ndarray],
    labels: Sequence[int],
    categories: Sequence[str] | None = None,
    config_hash: str | None = None,
    n_thresholds: int | None = PRO_THRESHOLDS,
) -> MetricReport:
    """Build a :class:`MetricReport` from per-image score maps (fixed image order)."""
    if not (len(maps) == len(masks) == len(labels)):
        raise ShapeError("maps, masks and labels must have equal length")
    core, errors = _core_metrics(maps, masks, labels, n_thresholds)
    per_cat = {}
    if categories is not None and len(set(categories)) > 1:
        for cat in sorted(set(categories)):
            sel = [i for i, c in enumerate(categories) if c == cat]
            m, e = _core_metrics([maps[i] for i in sel], [masks[i] for i in sel], [labels[i] for i in sel],
                                 n_thresholds)
            per_cat[cat] = {**m, "n_images": len(sel), "errors": e}
    n_pixels = int(sum(np.asarray(m).size for m in masks))
    return MetricReport(**core, per_category=per_cat, n_images=len(maps), n_pixels=n_pixels,
                        config_hash=config_hash, errors=errors)


def combine_score_maps(*runs: Sequence[ScoreMap], topk: int = TOPK) -> list[ScoreMap]:
    """Ensemble several runs by averaging their score maps image by image."""
    out = []
    for maps in zip(*runs):
        avg = np.mean([m.map for m in maps], axis=0)
        out.append(ScoreMap(avg, image_score(avg, topk)))
    return out


def score_dataset(model, images: Sequence[np.ndarray], config=None, batch_size: int = 8) -> list[ScoreMap]:
    """Run inference and scoring on every image; the score terms follow the config switches."""
    from .segtrain.model import infer_batch

    cfg = config or model.config
    mbars, probs = infer_batch(model, np.stack(images), batch_size)
    out = []
    for mb, pr in zip(mbars, probs):
        out.append(score_map(
            mb if cfg.score_discrepancy else None,
            pr if cfg.score_segmentation else None,
            cfg.score_lambda, cfg.gaussian_sigma, cfg.topk,
        ))
    return out


def evaluate_dataset(
    model,
    images: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    labels: Sequence[int],
    categories: Sequence[str] | None = None,
    config=None,
    config_hash: str | None = None,
) -> tuple[MetricReport, list[ScoreMap]]:
    """Infer, score and measure a test set; returns the report and the score maps."""
    maps = score_dataset(model, images, config)
    return metrics_from_scores(maps, masks, labels, categories, config_hash), maps
