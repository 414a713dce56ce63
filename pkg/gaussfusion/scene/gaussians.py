"""2D Gaussian scene primitives shared by the encoder, renderer and planner.

Rotation convention: ``r = (cos(theta), sin(theta))`` with
``R = [[cos, -sin], [sin, cos]]``. Raw rotation 2-vectors are normalized inside
``covariance`` and ``make_query_points`` so gradients flow through the norm.
"""
import dataclasses
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from gaussfusion.core.errors import ContractError, DatasetError, DimensionError
from gaussfusion.core.ops import mlp_forward
from gaussfusion.core.params import ParameterStore
from gaussfusion.core.tensor import NumericArray, concat, constant, lift, stack
from gaussfusion.memory.container import read_container, write_container

POSITION_SCALE = 100.0
FREQUENCY_BASE = 1e4
FIXED_OFFSETS = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
# tanh(p) / sqrt(2) keeps learnable offsets strictly inside the unit disc.
LEARNABLE_SQUASH = 1.0 / np.sqrt(2.0)


@dataclass(frozen=True)
class SceneBounds:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float = -1.0
    z_max: float = 3.0

    def __post_init__(self):
        for axis in ('x', 'y', 'z'):
            lo, hi = getattr(self, f'{axis}_min'), getattr(self, f'{axis}_max')
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
                raise ContractError(f"degenerate scene bounds on {axis}: [{lo}, {hi}]")

    @classmethod
    def from_config(cls, config: Mapping) -> 'SceneBounds':
        return cls(*(float(config[f'scene.{k}']) for k in ('x_min', 'x_max', 'y_min', 'y_max', 'z_min', 'z_max')))

    @property
    def low(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min])

    @property
    def high(self) -> np.ndarray:
        return np.array([self.x_max, self.y_max])

    @property
    def extent(self) -> np.ndarray:
        return np.array([self.x_max - self.x_min, self.y_max - self.y_min])

    def normalize(self, xy):
        """Map BEV meters to [0, 1]^2; accepts numpy or NumericArray."""
        return (xy - self.low) * (1.0 / self.extent)

    def contains(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy)
        return ((xy[..., 0] >= self.x_min) & (xy[..., 0] <= self.x_max)
                & (xy[..., 1] >= self.y_min) & (xy[..., 1] <= self.y_max))

    def to_dict(self) -> Dict[str, float]:
        return dataclasses.asdict(self)


@dataclass
class Gaussian2D:
    """One primitive, read out of a GaussianSet as plain arrays."""
    m: np.ndarray
    s: np.ndarray
    r: np.ndarray
    c: np.ndarray
    a: float
    f_exp: np.ndarray
    f_imp: np.ndarray

    def check(self, tol: float = 1e-9) -> None:
        if np.any(self.s <= 0):
            raise ContractError(f"non-positive scale {self.s}")
        if abs(np.linalg.norm(self.r) - 1.0) > tol:
            raise ContractError(f"rotation {self.r} is not a unit vector")
        if not 0.0 < self.a < 1.0:
            raise ContractError(f"existence prior {self.a} outside (0, 1)")


@dataclass
class GaussianSet:
    """Columnar storage of P Gaussians.

    Attributes:
        means: (P, 2) BEV positions in meters.
        scales: (P, 2) strictly positive per-axis scales.
        rotations: (P, 2) rotation vectors (cos, sin); unit norm after refinement.
        logits: (P, C) semantic logits.
        priors: (P,) existence priors in (0, 1).
        f_exp: (P, d) explicit features.
        f_imp: (P, d) implicit features.
    """
    means: NumericArray
    scales: NumericArray
    rotations: NumericArray
    logits: NumericArray
    priors: NumericArray
    f_exp: NumericArray
    f_imp: NumericArray

    FIELDS = ('means', 'scales', 'rotations', 'logits', 'priors', 'f_exp', 'f_imp')

    def __post_init__(self):
        for name in self.FIELDS:
            setattr(self, name, lift(getattr(self, name)))
        count = self.means.shape[0]
        expected = {'means': 2, 'scales': 2, 'rotations': 2}
        for name in self.FIELDS:
            arr = getattr(self, name)
            if arr.shape[0] != count:
                raise DimensionError(f"GaussianSet field '{name}' has {arr.shape[0]} rows, means has {count}")
            if name in expected and arr.shape[1:] != (expected[name],):
                raise DimensionError(f"GaussianSet field '{name}' must be (P, 2), got {arr.shape}")
        if self.priors.ndim != 1:
            raise DimensionError(f"priors must be (P,), got {self.priors.shape}")
        if self.f_exp.shape != self.f_imp.shape:
            raise DimensionError(f"explicit {self.f_exp.shape} and implicit {self.f_imp.shape} features differ")

    @property
    def count(self) -> int:
        return self.means.shape[0]

    @property
    def classes(self) -> int:
        return self.logits.shape[1]

    @property
    def dim(self) -> int:
        return self.f_exp.shape[1]

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> Gaussian2D:
        return Gaussian2D(
            m=self.means.values[i].copy(), s=self.scales.values[i].copy(),
            r=self.rotations.values[i].copy(), c=self.logits.values[i].copy(),
            a=float(self.priors.values[i]), f_exp=self.f_exp.values[i].copy(),
            f_imp=self.f_imp.values[i].copy())

    def replace(self, **fields) -> 'GaussianSet':
        return dataclasses.replace(self, **fields)

    def detach(self) -> 'GaussianSet':
        return GaussianSet(*(constant(getattr(self, n).values) for n in self.FIELDS))

    def take(self, order: Sequence[int]) -> 'GaussianSet':
        order = np.asarray(order, dtype=np.int64)
        return GaussianSet(*(getattr(self, n)[order] for n in self.FIELDS))

    def arrays(self) -> Dict[str, np.ndarray]:
        return {n: getattr(self, n).values for n in self.FIELDS}

    def check(self) -> None:
        for i in range(self.count):
            self[i].check()

    @classmethod
    def empty(cls, classes: int, dim: int) -> 'GaussianSet':
        return cls(np.zeros((0, 2)), np.ones((0, 2)), np.zeros((0, 2)), np.zeros((0, classes)),
                   np.zeros(0), np.zeros((0, dim)), np.zeros((0, dim)))


def init_gaussians(count: int, bounds: SceneBounds, classes: int, dim: int, rng: np.random.Generator,
                   init_scale: float = 1.0, feature_std: float = 0.02) -> GaussianSet:
    """Draw an initial set: uniform means, isotropic scales, identity rotations.

    Args:
        count: Number of Gaussians P (at least 1).
        bounds: BEV rectangle the means are drawn from.
        classes: Number of foreground classes C.
        dim: Feature width d.
        rng: Source of randomness; the same seed gives bit-identical sets.
        init_scale: Initial scale sigma_0 in meters.
        feature_std: Standard deviation of the initial features.

    Returns:
        A GaussianSet of constant arrays.
    """
    if count < 1:
        raise ContractError(f"init_gaussians needs P >= 1, got {count}")
    if init_scale <= 0:
        raise ContractError(f"initial scale must be positive, got {init_scale}")
    means = np.stack([rng.uniform(bounds.x_min, bounds.x_max, count),
                      rng.uniform(bounds.y_min, bounds.y_max, count)], axis=1)
    f_exp = rng.normal(0.0, feature_std, (count, dim))
    f_imp = rng.normal(0.0, feature_std, (count, dim))
    return GaussianSet(
        means=means,
        scales=np.full((count, 2), float(init_scale)),
        rotations=np.tile([1.0, 0.0], (count, 1)),
        logits=np.zeros((count, classes)),
        priors=np.full(count, 0.5),
        f_exp=f_exp,
        f_imp=f_imp,
    )


def normalize_rotation(r: NumericArray) -> NumericArray:
    r = lift(r)
    return r / (r * r).sum(axis=-1, keepdims=True).sqrt()


def _check_scales(s: NumericArray) -> None:
    if np.any(s.values <= 0):
        raise ContractError("covariance requires strictly positive scales")


def covariance(s, r) -> NumericArray:
    """Sigma = R diag(s)^2 R^T for (..., 2) scales and rotations; returns (..., 2, 2)."""
    s, r = lift(s), lift(r)
    _check_scales(s)
    rn = normalize_rotation(r)
    c, sn = rn[..., 0], rn[..., 1]
    s1, s2 = s[..., 0] * s[..., 0], s[..., 1] * s[..., 1]
    xx = c * c * s1 + sn * sn * s2
    xy = c * sn * (s1 - s2)
    yy = sn * sn * s1 + c * c * s2
    return stack([stack([xx, xy], axis=-1), stack([xy, yy], axis=-1)], axis=-2)


def rotate_scale(s: NumericArray, r: NumericArray, offsets) -> NumericArray:
    """R diag(s) u for every Gaussian and every unit offset u; returns (P, n, 2)."""
    rn = normalize_rotation(r)
    c, sn = rn[:, 0:1], rn[:, 1:2]
    u = lift(offsets)
    if u.ndim == 2:
        ux, uy = u[:, 0].reshape(1, -1), u[:, 1].reshape(1, -1)
    else:
        ux, uy = u[..., 0], u[..., 1]
    sx, sy = s[:, 0:1] * ux, s[:, 1:2] * uy
    return stack([c * sx - sn * sy, sn * sx + c * sy], axis=-1)


# ---------------------------------------------------------------- embeddings
def sinusoidal_encoding(uv, dim: int) -> NumericArray:
    """Encode normalized 2D positions into ``dim`` channels.

    Each axis gets dim/4 geometric frequencies (base 1e4) and contributes its
    sines then its cosines.
    """
    if dim % 4:
        raise DimensionError(f"sinusoidal encoding width must be divisible by 4, got {dim}")
    uv = lift(uv)
    pairs = dim // 4
    freqs = FREQUENCY_BASE ** (-np.arange(pairs) / pairs)
    parts = []
    for axis in range(2):
        angles = uv[..., axis:axis + 1] * (POSITION_SCALE * freqs)
        parts.extend([angles.sin(), angles.cos()])
    return concat(parts, axis=-1)


def pos_embed_layers(store: ParameterStore, prefix: str, dim: int):
    w1, b1 = store.linear(f"{prefix}.fc1", dim, dim)
    w2, b2 = store.linear(f"{prefix}.fc2", dim, dim)
    return [(w1, b1, 'relu'), (w2, b2, 'identity')]


def pos_embed(means, bounds: SceneBounds, layers) -> NumericArray:
    """Sinusoidal encoding of bounds-normalized means followed by a 2-layer MLP."""
    dim = layers[0][0].shape[0]
    return mlp_forward(sinusoidal_encoding(bounds.normalize(lift(means)), dim), layers)


# -------------------------------------------------------------- query points
@dataclass
class QueryPointSet:
    """n_q BEV query locations per Gaussian, fixed ones first."""
    points: NumericArray
    kinds: Tuple[str, ...]

    @property
    def per_gaussian(self) -> int:
        return self.points.shape[1]


@dataclass
class PillarQuerySet:
    """n_q * n_p 3D points per Gaussian; heights vary fastest."""
    base: QueryPointSet
    points: NumericArray
    heights: NumericArray
    tops: NumericArray
    n_p: int


def make_query_points(means, scales, rotations, learnable: Optional[NumericArray] = None) -> QueryPointSet:
    """Fixed points m, m +- R diag(s) e1, m +- R diag(s) e2 plus learnable interior points.

    Args:
        means: (P, 2) centers.
        scales: (P, 2) scales.
        rotations: (P, 2) raw rotation vectors.
        learnable: Optional (L, 2) unconstrained offsets shared by every Gaussian,
            or (P, L, 2) per-Gaussian offsets; each becomes
            m + R diag(s) tanh(p) / sqrt(2).
    """
    means, scales, rotations = lift(means), lift(scales), lift(rotations)
    offsets = FIXED_OFFSETS
    kinds: List[str] = ['fixed'] * len(FIXED_OFFSETS)
    rotated = rotate_scale(scales, rotations, offsets)
    if learnable is not None and learnable.shape[-2] > 0:
        squashed = learnable.tanh() * LEARNABLE_SQUASH
        rotated = concat([rotated, rotate_scale(scales, rotations, squashed)], axis=1)
        kinds += ['learnable'] * learnable.shape[-2]
    points = rotated + means.reshape(means.shape[0], 1, 2)
    return QueryPointSet(points=points, kinds=tuple(kinds))


def make_pillar_points(q: QueryPointSet, top_param: NumericArray, n_p: int, bounds: SceneBounds) -> PillarQuerySet:
    """Lift every query point to a pillar of n_p heights from z_min to a learnable top.

    ``top_param`` is (P,); the top is z_min + sigmoid(param) * (z_max - z_min).
    A single sample sits at z_min.
    """
    if n_p < 1:
        raise ContractError(f"pillar needs at least one height sample, got {n_p}")
    count, n_q = q.points.shape[0], q.points.shape[1]
    top_param = lift(top_param)
    tops = top_param.sigmoid() * (bounds.z_max - bounds.z_min) + bounds.z_min
    fractions = np.linspace(0.0, 1.0, n_p) if n_p > 1 else np.zeros(1)
    heights = (tops - bounds.z_min).reshape(count, 1) * fractions.reshape(1, n_p) + bounds.z_min
    xy = q.points.reshape(count, n_q, 1, 2) + np.zeros((1, 1, n_p, 2))
    z = heights.reshape(count, 1, n_p, 1) + np.zeros((1, n_q, 1, 1))
    points = concat([xy, z], axis=-1).reshape(count, n_q * n_p, 3)
    return PillarQuerySet(base=q, points=points, heights=heights, tops=tops, n_p=n_p)


# ------------------------------------------------------------- serialization
def save_gaussians(path: str, gset: GaussianSet, bounds: SceneBounds) -> str:
    meta = {'kind': 'gaussian_set', 'P': gset.count, 'C': gset.classes, 'd': gset.dim,
            'bounds': bounds.to_dict()}
    return write_container(path, gset.arrays(), meta)


def load_gaussians(path: str) -> Tuple[GaussianSet, SceneBounds]:
    arrays, meta = read_container(path)
    if meta.get('kind') != 'gaussian_set':
        raise DatasetError(f"{path}: not a serialized Gaussian set")
    try:
        gset = GaussianSet(*(arrays[n] for n in GaussianSet.FIELDS))
    except KeyError as exc:
        raise DatasetError(f"{path}: missing field {exc}") from exc
    return gset, SceneBounds(**meta['bounds'])
