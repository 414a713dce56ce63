"""Probabilistic Gaussian superposition onto a BEV semantic raster.

Per pixel x the background probability is the product of (1 - alpha_i(x)) and
the foreground channels are (1 - p_b) * softmax(o(x)), where o(x) mixes the
Gaussian logits with weights proportional to pdf_i(x) * a_i.

Pixel (i, j) sits at ``origin + (i * resolution, j * resolution)``: rows run
along BEV x and columns along BEV y.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from gaussfusion.core.errors import ContractError
from gaussfusion.core.tensor import NumericArray, constant, lift, make, where
from gaussfusion.scene.gaussians import Gaussian2D, GaussianSet, SceneBounds, normalize_rotation

logger = logging.getLogger(__name__)

DEFAULT_CUTOFF = math.exp(-4.5)
TWO_PI = 2.0 * math.pi
_BBOX_MARGIN = 1e-9


@dataclass(frozen=True)
class RasterConfig:
    """Raster geometry and culling parameters.

    ``origin`` is the BEV coordinate of the center of pixel (0, 0). The raster is
    logically padded up to a multiple of ``tile`` pixels on each axis.
    """
    h: int
    w: int
    resolution: float
    origin: Tuple[float, float] = (0.0, 0.0)
    cutoff: float = DEFAULT_CUTOFF
    tile: int = 16

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ContractError(f"raster must be at least 1x1, got {self.h}x{self.w}")
        if self.resolution <= 0:
            raise ContractError(f"raster resolution must be positive, got {self.resolution}")
        if not 0.0 < self.cutoff < 1.0:
            raise ContractError(f"alpha cutoff must lie in (0, 1), got {self.cutoff}")
        if self.tile < 1:
            raise ContractError(f"tile size must be positive, got {self.tile}")

    @classmethod
    def from_bounds(cls, bounds: SceneBounds, h: int, w: int, cutoff: float = DEFAULT_CUTOFF,
                    tile: int = 16) -> 'RasterConfig':
        res = (bounds.x_max - bounds.x_min) / h
        if not math.isclose(res * w, bounds.y_max - bounds.y_min, rel_tol=1e-9):
            raise ContractError(f"a {h}x{w} raster with square pixels cannot cover the scene bounds")
        return cls(h=h, w=w, resolution=res, origin=(bounds.x_min + res / 2, bounds.y_min + res / 2),
                   cutoff=cutoff, tile=tile)

    @classmethod
    def from_config(cls, config: Mapping) -> 'RasterConfig':
        bounds = SceneBounds.from_config(config)
        return cls.from_bounds(bounds, config['raster.h'], config['raster.w'],
                               cutoff=config['raster.cutoff'], tile=config['raster.tile'])

    @property
    def bbox_sigma(self) -> float:
        """Mahalanobis radius at which alpha drops to the cutoff (3 for exp(-4.5))."""
        return math.sqrt(-2.0 * math.log(self.cutoff))

    @property
    def tiles(self) -> Tuple[int, int]:
        return -(-self.h // self.tile), -(-self.w // self.tile)

    def pixel_centers(self) -> np.ndarray:
        """(H, W, 2) BEV coordinates of every pixel center."""
        xs = self.origin[0] + np.arange(self.h) * self.resolution
        ys = self.origin[1] + np.arange(self.w) * self.resolution
        return np.stack(np.meshgrid(xs, ys, indexing='ij'), axis=-1)

    def to_pixel(self, xy: np.ndarray) -> np.ndarray:
        """Continuous (row, col) raster coordinates of BEV points."""
        return (np.asarray(xy) - np.asarray(self.origin)) / self.resolution


@dataclass
class SemanticBevMap:
    """H x W x (C + 1) probabilities; channel 0 is background."""
    probs: NumericArray
    resolution: float
    origin: Tuple[float, float]
    underflow: int = 0
    underflow_mask: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.probs.shape

    @property
    def channels(self) -> int:
        return self.probs.shape[-1]

    def numpy(self) -> np.ndarray:
        return self.probs.values

    def argmax(self) -> np.ndarray:
        return np.argmax(self.probs.values, axis=-1)

    def channel_sums(self) -> np.ndarray:
        return self.probs.values.sum(axis=-1)


# ------------------------------------------------------------ pointwise terms
def _as_columns(g) -> Tuple[NumericArray, NumericArray, NumericArray]:
    if isinstance(g, Gaussian2D):
        return constant(g.m[None]), constant(g.s[None]), constant(g.r[None])
    return g.means, g.scales, g.rotations


def mahalanobis_sq(x, means, scales, rotations) -> NumericArray:
    """(x - m)^T Sigma^-1 (x - m) for (n, 2) points against P Gaussians, shape (n, P)."""
    x = lift(x)
    if x.ndim == 1:
        x = x.reshape(1, 2)
    rn = normalize_rotation(rotations)
    cs, sn = rn[:, 0].reshape(1, -1), rn[:, 1].reshape(1, -1)
    dx = x[:, 0].reshape(-1, 1) - means[:, 0].reshape(1, -1)
    dy = x[:, 1].reshape(-1, 1) - means[:, 1].reshape(1, -1)
    l1 = (cs * dx + sn * dy) / scales[:, 0].reshape(1, -1)
    l2 = (cs * dy - sn * dx) / scales[:, 1].reshape(1, -1)
    return l1 * l1 + l2 * l2


def alpha(x, g) -> NumericArray:
    """exp(-q/2) of points ``x`` against a Gaussian2D or a GaussianSet; shape (n, P)."""
    means, scales, rotations = _as_columns(g)
    if np.any(scales.values <= 0):
        raise ContractError("alpha requires strictly positive scales")
    return (mahalanobis_sq(x, means, scales, rotations) * -0.5).exp()


def gaussian_pdf(x, g) -> NumericArray:
    """Normal density alpha / (2 pi s1 s2) with the 2D normalizer."""
    means, scales, rotations = _as_columns(g)
    norm = (scales[:, 0] * scales[:, 1] * TWO_PI).reshape(1, -1)
    return alpha(x, g) / norm


def superpose_weights(x, gset: GaussianSet) -> Tuple[NumericArray, np.ndarray]:
    """Mixing weights pdf_i * a_i / sum_j pdf_j * a_j, shape (n, P).

    Rows whose weights all underflow fall back to uniform weights and are
    flagged in the returned boolean mask.
    """
    if gset.count < 1:
        raise ContractError("superpose needs at least one Gaussian")
    weighted = gaussian_pdf(x, gset) * gset.priors.reshape(1, -1)
    total = weighted.sum(axis=1, keepdims=True)
    flags = total.values[:, 0] <= 0.0
    safe_total = where(flags[:, None], np.ones_like(total.values), total)
    uniform = np.full(weighted.shape, 1.0 / gset.count)
    return where(flags[:, None], uniform, weighted / safe_total), flags


def superpose(x, gset: GaussianSet) -> Tuple[NumericArray, np.ndarray]:
    """Logit mixture o(x) = sum_i w_i c_i, shape (n, C), plus the underflow flags."""
    weights, flags = superpose_weights(x, gset)
    return weights @ gset.logits, flags


# ---------------------------------------------------------------- raster kernel
class _Scene:
    """Numpy snapshot of the rendered fields plus derived per-Gaussian terms."""

    def __init__(self, gset: GaussianSet):
        self.means = gset.means.values
        self.scales = gset.scales.values
        if np.any(self.scales <= 0):
            raise ContractError("render requires strictly positive scales")
        priors = gset.priors.values
        if np.any(priors <= 0) or np.any(priors > 1):
            raise ContractError("render requires existence priors in (0, 1]")
        raw = gset.rotations.values
        self.rot_norm = np.sqrt((raw * raw).sum(axis=1))
        if np.any(self.rot_norm == 0):
            raise ContractError("render requires non-zero rotation vectors")
        rn = raw / self.rot_norm[:, None]
        self.rot = rn
        self.cos, self.sin = rn[:, 0], rn[:, 1]
        self.logits = gset.logits.values
        self.priors = priors
        self.log_weight = np.log(priors) - np.log(self.scales[:, 0]) - np.log(self.scales[:, 1])
        self.fallback_logits = self.logits.mean(axis=0) if len(priors) else None


def _shade(scene: _Scene, px: np.ndarray, idx: np.ndarray, cutoff: Optional[float]) -> Dict[str, np.ndarray]:
    """Forward terms for pixels ``px`` (n, 2) against Gaussians ``idx`` (ascending)."""
    m = scene.means[idx]
    s1, s2 = scene.scales[idx, 0], scene.scales[idx, 1]
    cs, sn = scene.cos[idx], scene.sin[idx]
    dx = px[:, 0:1] - m[None, :, 0]
    dy = px[:, 1:2] - m[None, :, 1]
    l1 = cs * dx + sn * dy
    l2 = cs * dy - sn * dx
    q = (l1 / s1) ** 2 + (l2 / s2) ** 2
    alpha_raw = np.exp(-0.5 * q)
    active = alpha_raw >= cutoff if cutoff is not None else np.ones(q.shape, dtype=bool)
    a_eff = np.where(active, alpha_raw, 0.0)
    p_b = np.prod(1.0 - a_eff, axis=1)

    any_active = active.any(axis=1)
    ell = np.where(active, -0.5 * q + scene.log_weight[idx], -np.inf)
    ell_max = np.where(any_active, ell.max(axis=1, initial=-np.inf), 0.0)
    e = np.exp(ell - ell_max[:, None])
    z = e.sum(axis=1)
    w = e / np.where(any_active, z, 1.0)[:, None]
    o = w @ scene.logits[idx]
    if not any_active.all():
        o[~any_active] = scene.fallback_logits

    shifted = o - o.max(axis=1, keepdims=True)
    soft = np.exp(shifted)
    soft /= soft.sum(axis=1, keepdims=True)
    u = 1.0 - p_b
    return {'dx': dx, 'dy': dy, 'l1': l1, 'l2': l2, 'alpha': a_eff, 'active': active,
            'p_b': p_b, 'w': w, 'soft': soft, 'u': u, 'fallback': ~any_active,
            'out': np.concatenate([p_b[:, None], u[:, None] * soft], axis=1)}


def _shade_backward(scene: _Scene, px: np.ndarray, idx: np.ndarray, cutoff: Optional[float],
                    g: np.ndarray) -> Dict[str, np.ndarray]:
    t = _shade(scene, px, idx, cutoff)
    s1, s2 = scene.scales[idx, 0], scene.scales[idx, 1]
    cs, sn = scene.cos[idx], scene.sin[idx]
    soft, u, w, a_eff = t['soft'], t['u'], t['w'], t['alpha']

    g_b, g_f = g[:, 0], g[:, 1:]
    dot = (g_f * soft).sum(axis=1)
    g_o = u[:, None] * soft * (g_f - dot[:, None])
    g_pb = g_b - dot

    one_minus = 1.0 - a_eff
    ones = np.ones((one_minus.shape[0], 1))
    prefix = np.cumprod(np.concatenate([ones, one_minus[:, :-1]], axis=1), axis=1)
    suffix = np.cumprod(np.concatenate([ones, one_minus[:, :0:-1]], axis=1), axis=1)[:, ::-1]
    g_alpha = -g_pb[:, None] * prefix * suffix

    h = g_o @ scene.logits[idx].T
    g_ell = w * (h - (w * h).sum(axis=1, keepdims=True))
    g_ell[t['fallback']] = 0.0

    g_q = g_alpha * (-0.5 * a_eff) - 0.5 * g_ell
    g_l1 = g_q * 2.0 * t['l1'] / s1 ** 2
    g_l2 = g_q * 2.0 * t['l2'] / s2 ** 2
    dx, dy = t['dx'], t['dy']
    sum_ell = g_ell.sum(axis=0)

    grad_means = np.stack([(-g_l1 * cs + g_l2 * sn).sum(axis=0),
                           (-g_l1 * sn - g_l2 * cs).sum(axis=0)], axis=1)
    grad_scales = np.stack([(g_q * -2.0 * t['l1'] ** 2 / s1 ** 3).sum(axis=0) - sum_ell / s1,
                            (g_q * -2.0 * t['l2'] ** 2 / s2 ** 3).sum(axis=0) - sum_ell / s2], axis=1)
    grad_rot = np.stack([(g_l1 * dx + g_l2 * dy).sum(axis=0),
                         (g_l1 * dy - g_l2 * dx).sum(axis=0)], axis=1)
    grad_logits = w.T @ g_o
    grad_priors = sum_ell / scene.priors[idx]
    return {'means': grad_means, 'scales': grad_scales, 'rot': grad_rot,
            'logits': grad_logits, 'priors': grad_priors}


# ------------------------------------------------------------------ work units
@dataclass(frozen=True)
class _Unit:
    """A block of pixels and the ascending Gaussian indices that may touch it."""
    rows: slice
    cols: slice
    idx: np.ndarray


def _naive_units(cfg: RasterConfig, count: int) -> List[_Unit]:
    everyone = np.arange(count)
    return [_Unit(slice(i, i + 1), slice(0, cfg.w), everyone) for i in range(cfg.h)]


def bin_gaussians(scene: _Scene, cfg: RasterConfig) -> List[_Unit]:
    """Assign each Gaussian to every tile its cutoff ellipse's bounding box overlaps."""
    k = cfg.bbox_sigma
    s1, s2 = scene.scales[:, 0], scene.scales[:, 1]
    half_x = k * np.sqrt((scene.cos * s1) ** 2 + (scene.sin * s2) ** 2)
    half_y = k * np.sqrt((scene.sin * s1) ** 2 + (scene.cos * s2) ** 2)
    margin = _BBOX_MARGIN * max(1.0, cfg.resolution)
    lo_x, hi_x = scene.means[:, 0] - half_x - margin, scene.means[:, 0] + half_x + margin
    lo_y, hi_y = scene.means[:, 1] - half_y - margin, scene.means[:, 1] + half_y + margin

    units = []
    tiles_h, tiles_w = cfg.tiles
    for ti in range(tiles_h):
        r0, r1 = ti * cfg.tile, min((ti + 1) * cfg.tile, cfg.h)
        x0 = cfg.origin[0] + r0 * cfg.resolution
        x1 = cfg.origin[0] + (r1 - 1) * cfg.resolution
        in_x = (hi_x >= x0) & (lo_x <= x1)
        for tj in range(tiles_w):
            c0, c1 = tj * cfg.tile, min((tj + 1) * cfg.tile, cfg.w)
            y0 = cfg.origin[1] + c0 * cfg.resolution
            y1 = cfg.origin[1] + (c1 - 1) * cfg.resolution
            hit = in_x & (hi_y >= y0) & (lo_y <= y1)
            units.append(_Unit(slice(r0, r1), slice(c0, c1), np.flatnonzero(hit)))
    return units


def _map(fn, units: Sequence[_Unit], threads: int):
    if threads <= 1 or len(units) < 2:
        return [fn(u) for u in units]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, units))


def _rasterize(gset: GaussianSet, cfg: RasterConfig, units_for, cutoff: Optional[float],
               threads: int, op: str) -> SemanticBevMap:
    classes = gset.classes
    centers = cfg.pixel_centers()
    if gset.count == 0:
        probs = np.zeros((cfg.h, cfg.w, classes + 1))
        probs[..., 0] = 1.0
        return SemanticBevMap(constant(probs), cfg.resolution, cfg.origin, 0, np.zeros((cfg.h, cfg.w), bool))

    scene = _Scene(gset)
    units = units_for(scene)

    def forward(unit: _Unit):
        px = centers[unit.rows, unit.cols].reshape(-1, 2)
        t = _shade(scene, px, unit.idx, cutoff)
        return t['out'], t['fallback']

    out = np.empty((cfg.h, cfg.w, classes + 1))
    fallback = np.zeros((cfg.h, cfg.w), dtype=bool)
    for unit, (values, flags) in zip(units, _map(forward, units, threads)):
        shape = (unit.rows.stop - unit.rows.start, unit.cols.stop - unit.cols.start)
        out[unit.rows, unit.cols] = values.reshape(*shape, classes + 1)
        fallback[unit.rows, unit.cols] = flags.reshape(shape)

    def backward(g):
        def partial(unit: _Unit):
            px = centers[unit.rows, unit.cols].reshape(-1, 2)
            if unit.idx.size == 0:
                return None
            return _shade_backward(scene, px, unit.idx, cutoff, g[unit.rows, unit.cols].reshape(-1, classes + 1))

        grads = {'means': np.zeros_like(scene.means), 'scales': np.zeros_like(scene.scales),
                 'rot': np.zeros_like(scene.rot), 'logits': np.zeros_like(scene.logits),
                 'priors': np.zeros_like(scene.priors)}
        # per-unit partials are reduced in unit order
        for unit, part in zip(units, _map(partial, units, threads)):
            if part is None:
                continue
            for key, value in part.items():
                grads[key][unit.idx] += value
        rot = scene.rot
        g_rot = (grads['rot'] - rot * (rot * grads['rot']).sum(axis=1, keepdims=True)) / scene.rot_norm[:, None]
        return grads['means'], grads['scales'], g_rot, grads['logits'], grads['priors']

    probs = make(out, (gset.means, gset.scales, gset.rotations, gset.logits, gset.priors), backward, op)
    underflow = int(fallback.sum())
    if underflow:
        logger.debug("render fell back to uniform weights on %d pixels", underflow)
    return SemanticBevMap(probs, cfg.resolution, cfg.origin, underflow, fallback)


def render_naive(gset: GaussianSet, cfg: RasterConfig, cull: bool = True, threads: int = 1) -> SemanticBevMap:
    """Reference renderer: every pixel row against every Gaussian.

    With ``cull`` the same alpha cutoff as the tiled path applies, so the two
    agree to rounding; without it nothing is culled.
    """
    return _rasterize(gset, cfg, lambda scene: _naive_units(cfg, gset.count),
                      cfg.cutoff if cull else None, threads, 'render_naive')


def render_tiled(gset: GaussianSet, cfg: RasterConfig, threads: int = 1) -> SemanticBevMap:
    """Tiled renderer: per tile, only Gaussians binned to it and above the cutoff contribute."""
    return _rasterize(gset, cfg, lambda scene: bin_gaussians(scene, cfg), cfg.cutoff, threads, 'render_tiled')


def render(gset: GaussianSet, cfg: RasterConfig, cull: bool = True, threads: int = 1) -> SemanticBevMap:
    """Render ``gset``; culled rendering uses the tiled path, unculled the naive one."""
    if cull:
        return render_tiled(gset, cfg, threads=threads)
    return render_naive(gset, cfg, cull=False, threads=threads)
