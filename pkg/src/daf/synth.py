"""Synthetic anomaly generation.

A strategy combines a mask shape source (Perlin blobs or rectangles), a fill
texture source (external texture folder, random colors or a shifted copy of the
image itself) and a blend (opacity or Poisson). Six named strategies are
provided in :data:`STRATEGIES`.
"""
from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import imgkit
from .errors import ConfigurationError, ParameterError

MIN_AREA_FRACTION = 0.001
MAX_AREA_FRACTION = 0.4
MAX_MASK_RESAMPLES = 10

SHAPE_SOURCES = ("perlin", "rectangle")
TEXTURE_SOURCES = ("external-folder", "random-color", "self-patch")
BLENDS = ("opacity", "poisson")


@dataclass(frozen=True)
class StrategySpec:
    """Parameters of a synthesis strategy.

    ``beta`` is either a fixed opacity in [0.1, 1] or ``"sampled-per-image"``,
    in which case it is drawn uniformly from ``beta_range`` for each sample.
    """

    name: str = "custom"
    shape_source: str = "perlin"
    texture_source: str = "external-folder"
    blend: str = "opacity"
    beta: float | str = 1.0
    beta_range: tuple[float, float] = (0.1, 1.0)
    perlin_cells: tuple[int, ...] = (16, 32, 64)
    threshold: float = 0.6
    rect_side: tuple[int, int] = (16, 64)
    rect_count: tuple[int, int] = (1, 3)
    donor_scale: tuple[float, float] = (0.5, 1.5)
    poisson_method: str = "cg"
    poisson_tol: float = 1e-4
    poisson_max_iter: int = 5000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(key, msg):
            raise ConfigurationError(f"strategy.{key}: {msg}", key=f"strategy.{key}")

        if self.shape_source not in SHAPE_SOURCES:
            bad("shape_source", f"must be one of {SHAPE_SOURCES}, got {self.shape_source!r}")
        if self.texture_source not in TEXTURE_SOURCES:
            bad("texture_source", f"must be one of {TEXTURE_SOURCES}, got {self.texture_source!r}")
        if self.blend not in BLENDS:
            bad("blend", f"must be one of {BLENDS}, got {self.blend!r}")
        if isinstance(self.beta, str):
            if self.beta != "sampled-per-image":
                bad("beta", "must be a number or 'sampled-per-image'")
        elif not 0.1 <= float(self.beta) <= 1.0:
            bad("beta", f"must lie in [0.1, 1], got {self.beta}")
        lo, hi = self.beta_range
        if not 0 < lo <= hi <= 1:
            bad("beta_range", f"need 0 < lo <= hi <= 1, got {self.beta_range}")
        if not 0 < self.threshold < 1:
            bad("threshold", f"must lie in (0, 1), got {self.threshold}")
        if not self.perlin_cells or any(c < 1 for c in self.perlin_cells):
            bad("perlin_cells", "need at least one positive cell size")
        if not 1 <= self.rect_side[0] <= self.rect_side[1]:
            bad("rect_side", f"need 1 <= lo <= hi, got {self.rect_side}")
        if not 1 <= self.rect_count[0] <= self.rect_count[1]:
            bad("rect_count", f"need 1 <= lo <= hi, got {self.rect_count}")
        if not 0 < self.donor_scale[0] <= self.donor_scale[1]:
            bad("donor_scale", f"need 0 < lo <= hi, got {self.donor_scale}")
        if self.poisson_method not in ("jacobi", "cg"):
            bad("poisson_method", "must be 'jacobi' or 'cg'")

    def replace(self, **changes) -> "StrategySpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "StrategySpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigurationError(f"strategy: unknown key(s) {unknown}", key=f"strategy.{unknown[0]}")
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)


STRATEGIES: dict[str, StrategySpec] = {
    "dra": StrategySpec(
        name="dra", shape_source="perlin", texture_source="external-folder",
        blend="opacity", beta="sampled-per-image",
    ),
    "dra_fixed_beta": StrategySpec(
        name="dra_fixed_beta", shape_source="perlin", texture_source="external-folder",
        blend="opacity", beta=1.0,
    ),
    "nsa_b": StrategySpec(
        name="nsa_b", shape_source="perlin", texture_source="self-patch", blend="poisson",
    ),
    "cutpaste": StrategySpec(
        name="cutpaste", shape_source="rectangle", texture_source="self-patch",
        blend="opacity", beta=1.0, rect_count=(1, 1),
    ),
    "simple_texture": StrategySpec(
        name="simple_texture", shape_source="perlin", texture_source="random-color",
        blend="opacity", beta=1.0,
    ),
    "simple_shape": StrategySpec(
        name="simple_shape", shape_source="rectangle", texture_source="external-folder",
        blend="opacity", beta=1.0,
    ),
    "simple_texture_shape": StrategySpec(
        name="simple_texture_shape", shape_source="rectangle", texture_source="random-color",
        blend="opacity", beta=1.0,
    ),
}


def get_strategy(name: str) -> StrategySpec:
    try:
        return STRATEGIES[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown strategy {name!r}; known: {sorted(STRATEGIES)}", key="strategy.name"
        ) from None


@dataclass
class SynthSample:
    normal: np.ndarray
    corrupted: np.ndarray
    mask: np.ndarray
    strategy: str
    beta: float | None = None
    converged: bool = True


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin_noise(h: int, w: int, cell: int, seed: int) -> np.ndarray:
    """Classic 2-D gradient Perlin noise on a lattice with spacing ``cell`` pixels.

    Gradients are random unit vectors, interpolation uses the quintic fade
    ``6t^5 - 15t^4 + 10t^3``. Lattice points fall on pixels whose coordinates
    are multiples of ``cell``, where the noise is exactly zero.
    """
    if cell < 1 or h % cell or w % cell:
        raise ParameterError(f"cell {cell} must divide both {h} and {w}")
    rng = np.random.default_rng(seed)
    gy, gx = h // cell + 1, w // cell + 1
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(gy, gx))
    grad = np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    yi = np.floor(ys).astype(np.int64)
    xi = np.floor(xs).astype(np.int64)
    fy = (ys - yi)[:, None]
    fx = (xs - xi)[None, :]

    def corner(dy, dx):
        g = grad[(yi + dy)[:, None], (xi + dx)[None, :]]
        return g[..., 0] * (fx - dx) + g[..., 1] * (fy - dy)

    u, v = _fade(fx), _fade(fy)
    top = corner(0, 0) * (1 - u) + corner(0, 1) * u
    bot = corner(1, 0) * (1 - u) + corner(1, 1) * u
    return np.clip(top * (1 - v) + bot * v, -1.0, 1.0)


def _perlin_any_size(h: int, w: int, cell: int, seed: int) -> np.ndarray:
    ph = -(-h // cell) * cell
    pw = -(-w // cell) * cell
    return perlin_noise(ph, pw, cell, seed)[:h, :w]


def _area_ok(mask: np.ndarray) -> bool:
    frac = mask.mean()
    return MIN_AREA_FRACTION <= frac <= MAX_AREA_FRACTION and mask.any()


def _fallback_rectangle(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    side_h = max(1, int(np.ceil(np.sqrt(MIN_AREA_FRACTION * h * w))))
    side_w = max(1, int(np.ceil(MIN_AREA_FRACTION * h * w / side_h)))
    side_h, side_w = min(side_h, h), min(side_w, w)
    y = int(rng.integers(0, h - side_h + 1))
    x = int(rng.integers(0, w - side_w + 1))
    m = np.zeros((h, w), dtype=np.uint8)
    m[y:y + side_h, x:x + side_w] = 1
    return m


def _draw_mask(spec: StrategySpec, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    if spec.shape_source == "perlin":
        cell = int(rng.choice(spec.perlin_cells))
        cell = max(1, min(cell, max(h, w)))
        noise = np.abs(_perlin_any_size(h, w, cell, int(rng.integers(2**31))))
        peak = noise.max()
        if peak <= 0:
            return np.zeros((h, w), dtype=np.uint8)
        return (noise / peak > spec.threshold).astype(np.uint8)

    m = np.zeros((h, w), dtype=np.uint8)
    for _ in range(int(rng.integers(spec.rect_count[0], spec.rect_count[1] + 1))):
        rh = min(int(rng.integers(spec.rect_side[0], spec.rect_side[1] + 1)), h)
        rw = min(int(rng.integers(spec.rect_side[0], spec.rect_side[1] + 1)), w)
        y = int(rng.integers(0, h - rh + 1))
        x = int(rng.integers(0, w - rw + 1))
        m[y:y + rh, x:x + rw] = 1
    return m


def make_mask(spec: StrategySpec, h: int, w: int, seed: int | np.random.Generator) -> np.ndarray:
    """Draw an anomaly mask covering between 0.1% and 40% of the image.

    Draws that fall outside the area band are retried up to
    ``MAX_MASK_RESAMPLES`` times before a minimal rectangle is forced.
    """
    rng = np.random.default_rng(seed)
    for _ in range(MAX_MASK_RESAMPLES):
        m = _draw_mask(spec, h, w, rng)
        if _area_ok(m):
            return m
    return _fallback_rectangle(h, w, rng)


def _random_crop_resized(src: np.ndarray, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    sh, sw = src.shape[:2]
    frac = rng.uniform(0.5, 1.0)
    ch, cw = max(1, int(round(sh * frac))), max(1, int(round(sw * frac)))
    y = int(rng.integers(0, sh - ch + 1))
    x = int(rng.integers(0, sw - cw + 1))
    crop = src[y:y + ch, x:x + cw]
    return imgkit.as_image(imgkit.resize_bilinear(crop, h, w))


def _match_channels(img: np.ndarray, channels: int) -> np.ndarray:
    if img.shape[2] == channels:
        return img
    if channels == 3:
        return np.repeat(img, 3, axis=2)
    return img.mean(axis=2, keepdims=True)


def texture_fill(
    spec: StrategySpec,
    donor_pool: Sequence[np.ndarray],
    shape: tuple[int, int],
    seed: int | np.random.Generator,
    *,
    image: np.ndarray | None = None,
    mask: np.ndarray | None = None,
    channels: int = 3,
) -> np.ndarray:
    """Produce the fill texture that gets blended into the masked region.

    ``random-color`` gives one uniform color per connected region of ``mask``;
    ``external-folder`` crops and resizes a random donor texture;
    ``self-patch`` returns ``image`` cyclically shifted by a random offset, so
    every fill value is a value of the source image.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    if image is not None:
        channels = image.shape[2]
    src = spec.texture_source
    if src == "random-color":
        if mask is None:
            mask = np.ones((h, w), dtype=np.uint8)
        labels, k = imgkit.connected_components(mask)
        colors = rng.uniform(0.0, 1.0, size=(k + 1, channels)).astype(np.float32)
        return colors[labels]
    if src == "external-folder":
        if not donor_pool:
            raise ConfigurationError(
                "external-folder texture source needs a non-empty donor pool",
                key="strategy.texture_dir",
            )
        donor = imgkit.as_image(donor_pool[int(rng.integers(len(donor_pool)))])
        return _match_channels(_random_crop_resized(donor, h, w, rng), channels)
    if image is None:
        raise ConfigurationError("self-patch texture source needs the source image")
    dy = int(rng.integers(h // 8, h - h // 8 + 1)) if h >= 8 else int(rng.integers(h))
    dx = int(rng.integers(w // 8, w - w // 8 + 1)) if w >= 8 else int(rng.integers(w))
    return np.roll(image, (dy, dx), axis=(0, 1)).copy()


def blend_opacity(normal: np.ndarray, fill: np.ndarray, mask: np.ndarray, beta: float) -> np.ndarray:
    """``(1 - beta) * normal + beta * fill`` inside the mask, ``normal`` outside."""
    if not 0 < beta <= 1:
        raise ParameterError(f"beta must lie in (0, 1], got {beta}")
    normal = imgkit.as_image(normal)
    fill = imgkit.as_image(fill)
    m = (np.asarray(mask) > 0)[:, :, None]
    mixed = np.clip((1.0 - beta) * normal + beta * fill, 0.0, 1.0).astype(np.float32)
    return np.where(m, mixed, normal)


def _laplacian(u: np.ndarray) -> np.ndarray:
    """5-point ``4u - sum(neighbors)`` on interior pixels; zero on the outer border."""
    out = np.zeros_like(u)
    out[1:-1, 1:-1] = 4 * u[1:-1, 1:-1] - u[:-2, 1:-1] - u[2:, 1:-1] - u[1:-1, :-2] - u[1:-1, 2:]
    return out


def poisson_unknowns(mask: np.ndarray) -> np.ndarray:
    """Pixels solved for: mask pixels not on the image border."""
    inner = np.asarray(mask) > 0
    inner = inner.copy()
    inner[0, :] = inner[-1, :] = False
    inner[:, 0] = inner[:, -1] = False
    return inner


def _solve_channel(normal, donor, omega, method, tol, max_iter):
    """Solve ``4u - sum(nb u) = 4d - sum(nb d)`` on omega with u = normal elsewhere."""
    b = _laplacian(donor)
    u = np.where(omega, donor + (normal - donor)[~omega].mean() if (~omega).any() else donor, normal)

    def residual(v):
        return np.where(omega, b - _laplacian(v), 0.0)

    r = residual(u)
    if np.abs(r).max() < tol:
        return u, True
    if method == "jacobi":
        for _ in range(max_iter):
            nb = np.zeros_like(u)
            nb[1:-1, 1:-1] = u[:-2, 1:-1] + u[2:, 1:-1] + u[1:-1, :-2] + u[1:-1, 2:]
            u = np.where(omega, (b + nb) / 4.0, u)
            if np.abs(residual(u)).max() < tol:
                return u, True
        return u, False

    # Conjugate gradients on the SPD operator restricted to omega.
    def apply(p):
        return np.where(omega, _laplacian(p), 0.0)

    p = r.copy()
    rr = float((r * r).sum())
    for _ in range(max_iter):
        ap = apply(p)
        alpha = rr / float((p * ap).sum())
        u = u + alpha * p
        r = r - alpha * ap
        if np.abs(r).max() < tol:
            # Recompute the true residual to guard against drift.
            if np.abs(residual(u)).max() < tol:
                return u, True
            r = residual(u)
        rr_new = float((r * r).sum())
        p = r + (rr_new / rr) * p
        rr = rr_new
    return u, bool(np.abs(residual(u)).max() < tol)


def poisson_blend(
    normal: np.ndarray,
    donor: np.ndarray,
    mask: np.ndarray,
    tol: float = 1e-4,
    max_iter: int = 5000,
    method: str = "jacobi",
    return_info: bool = False,
):
    """Seamlessly insert ``donor`` into ``normal`` over ``mask`` (Poisson image editing).

    Per channel solves the discrete Poisson equation with the donor's
    Laplacian as guidance and Dirichlet values from ``normal`` on the ring
    around the mask. Iteration stops once the max-norm residual drops below
    ``tol``. With ``return_info=True`` also returns a ``converged`` flag; a
    :class:`RuntimeWarning` is emitted when ``max_iter`` is hit first.
    """
    normal = imgkit.as_image(normal).astype(np.float64)
    donor = imgkit.as_image(donor).astype(np.float64)
    if donor.shape != normal.shape:
        raise ParameterError(f"donor shape {donor.shape} != image shape {normal.shape}")
    omega_full = poisson_unknowns(mask)
    if not omega_full.any():
        raise ParameterError("mask has no interior pixels to solve for")

    ys, xs = np.nonzero(omega_full)
    y0, y1 = ys.min() - 1, ys.max() + 2
    x0, x1 = xs.min() - 1, xs.max() + 2
    omega = omega_full[y0:y1, x0:x1]

    out = normal.copy()
    converged = True
    for c in range(normal.shape[2]):
        u, ok = _solve_channel(
            normal[y0:y1, x0:x1, c], donor[y0:y1, x0:x1, c], omega, method, tol, max_iter
        )
        converged &= ok
        out[y0:y1, x0:x1, c] = np.where(omega, u, normal[y0:y1, x0:x1, c])
    if not converged:
        warnings.warn(f"poisson_blend did not reach tol={tol} in {max_iter} iterations", RuntimeWarning)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return (out, converged) if return_info else out


def _placed_donor(src: np.ndarray, h: int, w: int, scale: tuple[float, float], rng) -> np.ndarray:
    s = rng.uniform(*scale)
    sh = max(1, int(round(src.shape[0] * s)))
    sw = max(1, int(round(src.shape[1] * s)))
    scaled = imgkit.as_image(imgkit.resize_bilinear(src, sh, sw))
    reps = (-(-h // sh) + 1, -(-w // sw) + 1, 1)
    tiled = np.tile(scaled, reps)
    y = int(rng.integers(0, sh))
    x = int(rng.integers(0, sw))
    return tiled[y:y + h, x:x + w]


def synthesize(
    img: np.ndarray,
    spec: StrategySpec,
    donor_pool: Sequence[np.ndarray] = (),
    seed: int = 0,
) -> SynthSample:
    """Corrupt ``img`` according to ``spec``; a pure function of its arguments.

    For Poisson blending the donor pool holds other normal images (the image
    itself is used when the pool is empty); otherwise it holds textures.
    """
    img = imgkit.as_image(img)
    h, w, ch = img.shape
    if spec.blend == "poisson" and spec.texture_source == "random-color":
        raise ConfigurationError("poisson blending needs a donor image, not random colors",
                                 key="strategy.texture_source")
    if spec.texture_source == "external-folder" and not donor_pool:
        raise ConfigurationError("strategy needs a texture folder (empty donor pool)",
                                 key="strategy.texture_dir")
    rng = np.random.default_rng(seed)
    mask = make_mask(spec, h, w, rng)

    if spec.blend == "poisson":
        if not poisson_unknowns(mask).any():
            mask = _fallback_rectangle(h, w, rng)
            mask[0, :] = mask[-1, :] = 0
            mask[:, 0] = mask[:, -1] = 0
            if not mask.any():
                mask[h // 2, w // 2] = 1
        source = img
        if spec.texture_source == "external-folder" or (spec.texture_source == "self-patch" and donor_pool):
            source = _match_channels(imgkit.as_image(donor_pool[int(rng.integers(len(donor_pool)))]), ch)
        donor = _placed_donor(source, h, w, spec.donor_scale, rng)
        corrupted, converged = poisson_blend(
            img, donor, mask, tol=spec.poisson_tol, max_iter=spec.poisson_max_iter,
            method=spec.poisson_method, return_info=True,
        )
        # Pixels on the image border are never solved for; keep the mask honest.
        mask = poisson_unknowns(mask).astype(np.uint8)
        return SynthSample(img, corrupted, mask, spec.name, None, converged)

    fill = texture_fill(spec, donor_pool, (h, w), rng, image=img, mask=mask)
    if spec.beta == "sampled-per-image":
        beta = float(rng.uniform(*spec.beta_range))
    else:
        beta = float(spec.beta)
    corrupted = blend_opacity(img, fill, mask, beta)
    return SynthSample(img, corrupted, mask, spec.name, beta, True)
