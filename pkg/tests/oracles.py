"""Slow, direct reference implementations used as test oracles.

Everything here is written with explicit loops over scalars so that it shares
no code path with the vectorized implementations under test.
"""
from __future__ import annotations

import math
from collections import deque

import numpy as np


# ------------------------------------------------------------------ rasters

def reflect(i: int, n: int) -> int:
    """Symmetric boundary index: ... 1 0 | 0 1 ... n-1 | n-1 n-2 ..."""
    while i < 0 or i >= n:
        if i < 0:
            i = -i - 1
        if i >= n:
            i = 2 * n - 1 - i
    return i


def bilinear_at(x: np.ndarray, h: int, w: int, i: int, j: int) -> float:
    H, W = x.shape

    def coord(d, n_in, n_out):
        s = (d + 0.5) * n_in / n_out - 0.5
        return min(max(s, 0.0), n_in - 1)

    sy, sx = coord(i, H, h), coord(j, W, w)
    y0, x0 = int(math.floor(sy)), int(math.floor(sx))
    y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
    fy, fx = sy - y0, sx - x0
    return ((1 - fy) * ((1 - fx) * x[y0, x0] + fx * x[y0, x1])
            + fy * ((1 - fx) * x[y1, x0] + fx * x[y1, x1]))


def flood_fill_labels(mask: np.ndarray) -> tuple[np.ndarray, int]:
    H, W = mask.shape
    lab = np.zeros((H, W), dtype=np.int64)
    k = 0
    for y in range(H):
        for x in range(W):
            if mask[y, x] and lab[y, x] == 0:
                k += 1
                lab[y, x] = k
                q = deque([(y, x)])
                while q:
                    cy, cx = q.popleft()
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx = cy + dy, cx + dx
                            if 0 <= ny < H and 0 <= nx < W and mask[ny, nx] and lab[ny, nx] == 0:
                                lab[ny, nx] = k
                                q.append((ny, nx))
    return lab, k


def maxpool_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = mask.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            r0, r1 = (i * H) // h, -((-(i + 1) * H) // h)
            c0, c1 = (j * W) // w, -((-(j + 1) * W) // w)
            out[i, j] = 1 if any(mask[y, x] for y in range(r0, r1) for x in range(c0, c1)) else 0
    return out


# ------------------------------------------------------------------ distillation

def cos_scalar(a: np.ndarray, b: np.ndarray) -> float:
    na = math.sqrt(sum(float(v) * float(v) for v in a))
    nb = math.sqrt(sum(float(v) * float(v) for v in b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return sum(float(p) * float(q) for p, q in zip(a, b)) / (na * nb)


def ssim_raster(ft: np.ndarray, fs: np.ndarray, normal: np.ndarray | None = None,
                window: int = 11, l1: float = 0.1, l2: float = 9e-4) -> np.ndarray:
    """Channel-mean SSIM per position of ``(C, H, W)`` maps.

    Window statistics use the symmetric-padded ``window x window`` box and,
    when ``normal`` is given, only the window entries whose (reflected)
    position is normal.
    """
    C, H, W = ft.shape
    if normal is None:
        normal = np.ones((H, W), dtype=bool)
    r = window // 2
    out = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            pts = []
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xx = reflect(y + dy, H), reflect(x + dx, W)
                    if normal[yy, xx]:
                        pts.append((yy, xx))
            if not pts:
                out[y, x] = 1.0
                continue
            acc = 0.0
            for c in range(C):
                p = [float(ft[c, a, b]) for a, b in pts]
                q = [float(fs[c, a, b]) for a, b in pts]
                n = len(p)
                mp, mq = sum(p) / n, sum(q) / n
                vp = sum((v - mp) ** 2 for v in p) / n
                vq = sum((v - mq) ** 2 for v in q) / n
                cpq = sum((u - mp) * (v - mq) for u, v in zip(p, q)) / n
                acc += ((2 * mp * mq + l1) * (2 * cpq + l2)) / ((mp * mp + mq * mq + l1) * (vp + vq + l2))
            out[y, x] = acc / C
    return out


def cos_loss(ft_stages, fs_stages, masks) -> float:
    total = 0.0
    for ft, fs, m in zip(ft_stages, fs_stages, masks):
        vals = [cos_scalar(ft[:, y, x], fs[:, y, x])
                for y in range(ft.shape[1]) for x in range(ft.shape[2]) if m[y, x] == 0]
        total += 1.0 - sum(vals) / len(vals)
    return total


def ssim_loss(ft_stages, fs_stages, masks, window=11) -> float:
    total = 0.0
    for ft, fs, m in zip(ft_stages, fs_stages, masks):
        s = ssim_raster(ft, fs, m == 0, window)
        vals = [s[y, x] for y in range(m.shape[0]) for x in range(m.shape[1]) if m[y, x] == 0]
        total += 1.0 - sum(vals) / len(vals)
    return total


def discrepancy(ft_stages, fs_stages, H: int, W: int, window=11) -> np.ndarray:
    out = np.zeros((H, W))
    for ft, fs in zip(ft_stages, fs_stages):
        s = ssim_raster(ft, fs, None, window)
        m = np.zeros(ft.shape[1:])
        for y in range(ft.shape[1]):
            for x in range(ft.shape[2]):
                m[y, x] = 2.0 - cos_scalar(ft[:, y, x], fs[:, y, x]) - s[y, x]
        for i in range(H):
            for j in range(W):
                out[i, j] += bilinear_at(m, H, W, i, j)
    return out


# ------------------------------------------------------------------ segmentation

def bce_over_sub(pred: np.ndarray, target: np.ndarray, ratio: int = 3, eps: float = 1e-7) -> float:
    flat_p = [float(v) for v in pred.ravel()]
    flat_t = [int(v) for v in target.ravel()]
    pos = [i for i, t in enumerate(flat_t) if t]
    neg = sorted((i for i, t in enumerate(flat_t) if not t), key=lambda i: (-flat_p[i], i))
    k = min(ratio * max(len(pos), 1), len(neg))
    sub = pos + neg[:k]
    total = 0.0
    for i in sub:
        x = min(max(flat_p[i], eps), 1 - eps)
        total += -math.log(x) if flat_t[i] else -math.log(1 - x)
    return total / len(sub)


# ------------------------------------------------------------------ metrics

def pairwise_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    acc = 0.0
    for p in pos:
        for n in neg:
            acc += 1.0 if p > n else (0.5 if p == n else 0.0)
    return acc / (len(pos) * len(neg))


def exhaustive_ap(scores, labels) -> float:
    n_pos = sum(labels)
    prev_r = 0.0
    ap = 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        r = tp / n_pos
        ap += (r - prev_r) * (tp / (tp + fp))
        prev_r = r
    return ap


def exhaustive_pro(score_maps, masks, limit: float = 0.3) -> float:
    regions = []
    normals = []
    for s, m in zip(score_maps, masks):
        lab, k = flood_fill_labels(m > 0)
        for r in range(1, k + 1):
            regions.append([float(v) for v in s[lab == r]])
        normals.extend(float(v) for v in s[m == 0])
    thresholds = sorted({float(v) for s in score_maps for v in np.ravel(s)})
    pts = [(0.0, 0.0)]
    for t in thresholds:
        fpr = sum(1 for v in normals if v >= t) / len(normals)
        pro = sum(sum(1 for v in reg if v >= t) / len(reg) for reg in regions) / len(regions)
        pts.append((fpr, pro))
    pts.sort()
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += 0.5 * (x1 - x0) * (y0 + y1)
    return area / limit


# ------------------------------------------------------------------ poisson

def dense_poisson(normal: np.ndarray, donor: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Direct solve of ``4u_p - sum_q u_q = 4d_p - sum_q d_q`` on omega, u = normal elsewhere (one channel)."""
    H, W = normal.shape
    idx = {p: i for i, p in enumerate(zip(*np.nonzero(omega)))}
    A = np.zeros((len(idx), len(idx)))
    b = np.zeros(len(idx))
    for (y, x), i in idx.items():
        A[i, i] = 4.0
        b[i] = 4.0 * donor[y, x]
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            b[i] -= donor[ny, nx]
            if (ny, nx) in idx:
                A[i, idx[(ny, nx)]] = -1.0
            else:
                b[i] += normal[ny, nx]
    sol = np.linalg.solve(A, b)
    out = normal.astype(np.float64).copy()
    for (y, x), i in idx.items():
        out[y, x] = sol[i]
    return out
