"""Gaussian encoder: point and image cross-attention, self-attention, refinement.

Every block reads the current GaussianSet and returns a new one with updated
features and physical attributes. Explicit features are updated by deformable
sampling around each Gaussian; implicit features by global cross-attention.
Only explicit features feed the physical refinement, so implicit features
never reach the rendered map.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from gaussfusion.agents.layers import CrossAttentionBlock, Dense, FeedForward, LayerNorm, Mlp, SelfAttentionBlock
from gaussfusion.core.errors import ContractError, DimensionError
from gaussfusion.core.ops import bilinear_sample, softmax
from gaussfusion.core.params import ParameterStore
from gaussfusion.core.tensor import NumericArray, constant, lift, stack
from gaussfusion.scene.gaussians import (GaussianSet, PillarQuerySet, QueryPointSet, SceneBounds,
                                         make_pillar_points, make_query_points, normalize_rotation,
                                         pos_embed, pos_embed_layers, sinusoidal_encoding)
from gaussfusion.scene.sensors import BevFeaturePyramid, ImageFeaturePyramid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeformableAttnParams:
    heads: int = 4
    levels: int = 2
    points: int = 4


@dataclass(frozen=True)
class EncoderSettings:
    dim: int
    classes: int
    count: int
    bounds: SceneBounds
    deform: DeformableAttnParams = DeformableAttnParams()
    learnable_points: int = 4
    pillar_points: int = 4
    query_reduce: str = 'sum'
    use_points: bool = True
    use_images: bool = True
    use_implicit: bool = True
    views: int = 3

    @classmethod
    def from_config(cls, config: Mapping) -> 'EncoderSettings':
        return cls(
            dim=config['gaussians.dim'],
            classes=config['gaussians.classes'],
            count=config['gaussians.count'],
            bounds=SceneBounds.from_config(config),
            deform=DeformableAttnParams(config['encoder.heads'], config['encoder.levels'], config['encoder.points']),
            learnable_points=config['gaussians.learnable_points'],
            pillar_points=config['gaussians.pillar_points'],
            query_reduce=config['encoder.query_reduce'],
            use_points=config['encoder.use_points'],
            use_images=config['encoder.use_images'],
            use_implicit=config['encoder.use_implicit'],
            views=config['camera.count'],
        )


def map_tokens(fmap: NumericArray) -> Tuple[NumericArray, np.ndarray]:
    """Flatten (V, d, H, W) or (d, H, W) maps into (V*H*W, d) tokens plus normalized cell centers."""
    if fmap.ndim == 3:
        fmap = fmap.reshape(1, *fmap.shape)
    views, dim, h, w = fmap.shape
    tokens = fmap.reshape(views, dim, h * w).swapaxes(-1, -2).reshape(views * h * w, dim)
    rows, cols = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing='ij')
    centers = np.tile(np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1), (views, 1))
    return tokens, centers


class DeformableAttention:
    """Multi-head, multi-level deformable sampling around reference points.

    Offsets (in level grid cells) and attention weights are predicted from the
    query; both predictors start at zero, so initially every sample sits on the
    reference point and all slots weigh the same.
    """

    def __init__(self, store: ParameterStore, path: str, dim: int, params: DeformableAttnParams):
        if dim % params.heads:
            raise DimensionError(f"deformable attention width {dim} not divisible by {params.heads} heads")
        self.dim = dim
        self.params = params
        slots = params.heads * params.levels * params.points
        self.offsets = Dense(store, f"{path}.offsets", dim, slots * 2, zero=True)
        self.weights = Dense(store, f"{path}.weights", dim, slots, zero=True)
        self.value = Dense(store, f"{path}.value", dim, dim)
        self.output = Dense(store, f"{path}.output", dim, dim, use_bias=False)

    def project_values(self, levels: Sequence[NumericArray]) -> List[NumericArray]:
        """Value-project (V, d, H, W) maps into (V, heads, d / heads, H, W)."""
        heads = self.params.heads
        out = []
        for fmap in levels:
            fmap = lift(fmap)
            if fmap.ndim == 3:
                fmap = fmap.reshape(1, *fmap.shape)
            views, dim, h, w = fmap.shape
            tokens = self.value(fmap.reshape(views, dim, h * w).swapaxes(-1, -2))
            out.append(tokens.swapaxes(-1, -2).reshape(views, heads, dim // heads, h, w))
        return out

    def sampling(self, query: NumericArray) -> Tuple[NumericArray, NumericArray]:
        """Per-query offsets (Q, h, L, K, 2) and softmaxed weights (Q, h, L, K)."""
        p = self.params
        count = query.shape[0]
        offsets = self.offsets(query).reshape(count, p.heads, p.levels, p.points, 2)
        logits = self.weights(query).reshape(count, p.heads, p.levels * p.points)
        return offsets, softmax(logits, axis=-1).reshape(count, p.heads, p.levels, p.points)

    def __call__(self, query: NumericArray, ref: NumericArray, values: Sequence[NumericArray]) -> NumericArray:
        """Sample ``values`` around normalized references.

        Args:
            query: (Q, d) queries driving offsets and weights.
            ref: (Q, S, V, 2) normalized (row, col) references per sample point and view.
            values: Output of ``project_values`` with V views and L levels.

        Returns:
            (Q, S, V, d) output-projected samples.
        """
        p = self.params
        if len(values) != p.levels:
            raise DimensionError(f"expected {p.levels} pyramid levels, got {len(values)}")
        count, samples, views, _ = ref.shape
        dh = self.dim // p.heads
        offsets, weights = self.sampling(query)
        total = None
        for level, vmap in enumerate(values):
            h, w = vmap.shape[-2:]
            grid = ref * np.array([h, w], dtype=float) - 0.5
            loc = grid.reshape(count, samples, views, 1, 1, 2) + \
                offsets[:, :, level].reshape(count, 1, 1, p.heads, p.points, 2)
            pts = loc.transpose(0, 1, 4, 2, 3, 5).reshape(count * samples * p.points, views * p.heads, 2)
            sampled = bilinear_sample(vmap.reshape(views * p.heads, dh, h, w), pts)
            sampled = sampled.reshape(count, samples, p.points, views, p.heads, dh)
            slot = weights[:, :, level].transpose(0, 2, 1).reshape(count, 1, p.points, 1, p.heads, 1)
            term = (sampled * slot).sum(axis=2)
            total = term if total is None else total + term
        return self.output(total.reshape(count, samples, views, self.dim))

    def attend(self, query: NumericArray, ref: NumericArray, levels: Sequence[NumericArray]) -> NumericArray:
        """Single reference point per query on a single view: (Q, 2) refs -> (Q, d)."""
        out = self(query, lift(ref).reshape(ref.shape[0], 1, 1, 2), self.project_values(levels))
        return out.reshape(ref.shape[0], self.dim)


def deformable_attn(module: DeformableAttention, query, ref_pt, levels: Sequence[NumericArray]) -> NumericArray:
    return module.attend(lift(query), lift(ref_pt), levels)


def _reduce_points(x: NumericArray, mode: str) -> NumericArray:
    return x.sum(axis=1) if mode == 'sum' else x.mean(axis=1)


class PointCrossAttention:
    """Explicit features <- sum over query points of deformable BEV sampling."""

    def __init__(self, store: ParameterStore, path: str, settings: EncoderSettings):
        self.reduce = settings.query_reduce
        self.norm = LayerNorm(store, f"{path}.norm", settings.dim)
        self.deform = DeformableAttention(store, f"{path}.deform", settings.dim, settings.deform)
        self.ffn = FeedForward(store, f"{path}.ffn", settings.dim)

    def update(self, f_exp: NumericArray, queries: QueryPointSet, pyr: BevFeaturePyramid) -> NumericArray:
        """Pre-residual update (P, d)."""
        ref = pyr.normalize(queries.points)
        count, n_q = ref.shape[0], ref.shape[1]
        out = self.deform(self.norm(f_exp), ref.reshape(count, n_q, 1, 2), self.deform.project_values(pyr.levels))
        return _reduce_points(out.reshape(count, n_q, out.shape[-1]), self.reduce)

    def __call__(self, f_exp, queries, pyr):
        update = self.update(f_exp, queries, pyr)
        return self.ffn(f_exp + update), update


class ImageCrossAttention:
    """Explicit features <- sum over pillar points of the mean over valid views."""

    def __init__(self, store: ParameterStore, path: str, settings: EncoderSettings):
        self.reduce = settings.query_reduce
        self.norm = LayerNorm(store, f"{path}.norm", settings.dim)
        self.deform = DeformableAttention(store, f"{path}.deform", settings.dim, settings.deform)
        self.ffn = FeedForward(store, f"{path}.ffn", settings.dim)

    def references(self, pillars: PillarQuerySet, pyr: ImageFeaturePyramid) -> Tuple[NumericArray, np.ndarray]:
        refs, masks = [], []
        for camera in pyr.cameras:
            ref, valid = camera.project(pillars.points)
            refs.append(ref)
            masks.append(valid)
        return stack(refs, axis=2), np.stack(masks, axis=2)

    def update(self, f_exp: NumericArray, pillars: PillarQuerySet, pyr: ImageFeaturePyramid) -> NumericArray:
        ref, mask = self.references(pillars, pyr)
        out = self.deform(self.norm(f_exp), ref, self.deform.project_values(pyr.levels))
        weight = mask.astype(float)
        count = weight.sum(axis=2, keepdims=True)
        weight = weight / np.maximum(count, 1.0)
        per_point = (out * weight[..., None]).sum(axis=2)
        return _reduce_points(per_point, self.reduce)

    def __call__(self, f_exp, pillars, pyr):
        update = self.update(f_exp, pillars, pyr)
        return self.ffn(f_exp + update), update


class ImplicitAttention:
    """Implicit features <- cross-attention over the flattened last pyramid level.

    Keys carry a 2D sinusoidal encoding of the cell position (plus a learnable
    view embedding for multi-view maps); values carry no positional term.
    """

    def __init__(self, store: ParameterStore, path: str, settings: EncoderSettings, views: int = 0):
        self.dim = settings.dim
        self.block = CrossAttentionBlock(store, path, settings.dim, settings.deform.heads)
        self.view_embed = store.normal(f"{path}.view_embed", (views, settings.dim), 0.02) if views else None

    def keys(self, fmap: NumericArray) -> Tuple[NumericArray, NumericArray]:
        tokens, centers = map_tokens(lift(fmap))
        key_pos = constant(sinusoidal_encoding(centers, self.dim).values)
        if self.view_embed is not None:
            views = self.view_embed.shape[0]
            per_view = tokens.shape[0] // views
            key_pos = key_pos + (self.view_embed.reshape(views, 1, self.dim)
                                 + np.zeros((1, per_view, self.dim))).reshape(views * per_view, self.dim)
        return tokens, key_pos

    def __call__(self, f_imp: NumericArray, fmap: NumericArray):
        tokens, key_pos = self.keys(fmap)
        return self.block(f_imp, tokens, tokens, key_pos=key_pos)


class RefineHead:
    """MLP on explicit features -> (dm, scale, rotation, logits, prior) heads.

    The final layer is zero-initialized with the rotation bias at (1, 0), so a
    fresh head keeps means, sets scales to softplus(0), rotations to (1, 0),
    logits to 0 and priors to 0.5.
    """

    def __init__(self, store: ParameterStore, path: str, settings: EncoderSettings):
        self.classes = settings.classes
        width = 7 + settings.classes
        bias = np.zeros(width)
        bias[4] = 1.0
        self.mlp = Mlp(store, path, [settings.dim, settings.dim, width], zero_last=True, last_bias=bias)

    def heads(self, f_exp: NumericArray) -> Dict[str, NumericArray]:
        out = self.mlp(f_exp)
        c = self.classes
        return {'delta': out[:, 0:2], 'scale': out[:, 2:4], 'rotation': out[:, 4:6],
                'logits': out[:, 6:6 + c], 'prior': out[:, 6 + c]}

    def __call__(self, gset: GaussianSet, f_exp: NumericArray, bounds: SceneBounds) -> GaussianSet:
        h = self.heads(f_exp)
        means = (gset.means + h['delta']).clamp(bounds.low, bounds.high)
        return gset.replace(means=means, scales=h['scale'].softplus(), rotations=normalize_rotation(h['rotation']),
                            logits=h['logits'], priors=h['prior'].sigmoid(), f_exp=f_exp)


@dataclass
class BlockTrace:
    """Intermediate quantities of one encoder block, for tests and diagnostics."""
    updates: Dict[str, NumericArray] = field(default_factory=dict)
    weights: Dict[str, NumericArray] = field(default_factory=dict)
    queries: Optional[QueryPointSet] = None
    pillars: Optional[PillarQuerySet] = None


class EncoderBlock:
    """PCA -> ICA -> implicit attention -> dual self-attention -> refinement."""

    def __init__(self, store: ParameterStore, path: str, settings: EncoderSettings):
        self.settings = settings
        s = settings
        self.query_offsets = store.normal(f"{path}.query_offsets", (s.learnable_points, 2), 0.5) \
            if s.learnable_points else None
        self.pca = PointCrossAttention(store, f"{path}.pca", s) if s.use_points else None
        self.ica = None
        if s.use_images:
            self.ica = ImageCrossAttention(store, f"{path}.ica", s)
            self.pillar_top = store.zeros(f"{path}.pillar_top", (s.count,))
        self.implicit_points = ImplicitAttention(store, f"{path}.imp_points", s) \
            if s.use_implicit and s.use_points else None
        self.implicit_images = ImplicitAttention(store, f"{path}.imp_images", s, views=s.views) \
            if s.use_implicit and s.use_images else None
        self.pos = pos_embed_layers(store, f"{path}.pos", s.dim)
        self.self_exp = SelfAttentionBlock(store, f"{path}.self_exp", s.dim, s.deform.heads)
        self.self_imp = SelfAttentionBlock(store, f"{path}.self_imp", s.dim, s.deform.heads)
        self.refine = RefineHead(store, f"{path}.refine", s)

    def query_points(self, gset: GaussianSet) -> QueryPointSet:
        return make_query_points(gset.means, gset.scales, gset.rotations, self.query_offsets)

    def point_cross_attention(self, gset: GaussianSet, bev: BevFeaturePyramid, trace: BlockTrace) -> NumericArray:
        if trace.queries is None:
            trace.queries = self.query_points(gset)
        queries = trace.queries
        f_exp, update = self.pca(gset.f_exp, queries, bev)
        trace.updates['pca'] = update
        return f_exp

    def image_cross_attention(self, gset: GaussianSet, f_exp: NumericArray, img: ImageFeaturePyramid,
                              trace: BlockTrace) -> NumericArray:
        if trace.queries is None:
            trace.queries = self.query_points(gset)
        queries = trace.queries
        pillars = make_pillar_points(queries, self.pillar_top, self.settings.pillar_points, self.settings.bounds)
        trace.pillars = pillars
        f_exp, update = self.ica(f_exp, pillars, img)
        trace.updates['ica'] = update
        return f_exp

    def implicit_point_attention(self, f_imp: NumericArray, bev: BevFeaturePyramid, trace: BlockTrace) -> NumericArray:
        f_imp, update, weights = self.implicit_points(f_imp, bev.levels[-1])
        trace.updates['imp_points'], trace.weights['imp_points'] = update, weights
        return f_imp

    def implicit_image_attention(self, f_imp: NumericArray, img: ImageFeaturePyramid, trace: BlockTrace) -> NumericArray:
        f_imp, update, weights = self.implicit_images(f_imp, img.levels[-1])
        trace.updates['imp_images'], trace.weights['imp_images'] = update, weights
        return f_imp

    def gaussian_self_attention(self, means: NumericArray, f_exp: NumericArray, f_imp: NumericArray,
                                trace: BlockTrace) -> Tuple[NumericArray, NumericArray]:
        pos = pos_embed(means, self.settings.bounds, self.pos)
        f_exp, update_exp, weights_exp = self.self_exp(f_exp, pos)
        f_imp, update_imp, weights_imp = self.self_imp(f_imp, pos)
        trace.updates['self_exp'], trace.weights['self_exp'] = update_exp, weights_exp
        trace.updates['self_imp'], trace.weights['self_imp'] = update_imp, weights_imp
        return f_exp, f_imp

    def refine_physical(self, gset: GaussianSet, f_exp: NumericArray) -> GaussianSet:
        return self.refine(gset, f_exp, self.settings.bounds)

    def __call__(self, gset: GaussianSet, bev: Optional[BevFeaturePyramid],
                 img: Optional[ImageFeaturePyramid]) -> Tuple[GaussianSet, BlockTrace]:
        trace = BlockTrace()
        f_exp, f_imp = gset.f_exp, gset.f_imp
        if self.pca is not None:
            f_exp = self.point_cross_attention(gset, bev, trace)
        if self.ica is not None:
            f_exp = self.image_cross_attention(gset, f_exp, img, trace)
        if self.implicit_points is not None:
            f_imp = self.implicit_point_attention(f_imp, bev, trace)
        if self.implicit_images is not None:
            f_imp = self.implicit_image_attention(f_imp, img, trace)
        f_exp, f_imp = self.gaussian_self_attention(gset.means, f_exp, f_imp, trace)
        refined = self.refine_physical(gset, f_exp)
        return refined.replace(f_imp=f_imp), trace


def encoder_block(block: EncoderBlock, gset: GaussianSet, bev: Optional[BevFeaturePyramid],
                  img: Optional[ImageFeaturePyramid]) -> GaussianSet:
    return block(gset, bev, img)[0]


class GaussianEncoder:
    """B encoder blocks with unshared weights."""

    def __init__(self, store: ParameterStore, settings: EncoderSettings, blocks: int = 4, path: str = 'encoder'):
        if blocks < 0:
            raise ContractError(f"encoder block count must be non-negative, got {blocks}")
        self.settings = settings
        self.blocks = [EncoderBlock(store, f"{path}.block{b}", settings) for b in range(blocks)]

    def __call__(self, gset: GaussianSet, bev: Optional[BevFeaturePyramid], img: Optional[ImageFeaturePyramid],
                 keep_intermediate: bool = False):
        history = [gset]
        for block in self.blocks:
            gset, _ = block(gset, bev, img)
            history.append(gset)
        return history if keep_intermediate else gset


def run_encoder(encoder: GaussianEncoder, gset: GaussianSet, bev: Optional[BevFeaturePyramid],
                img: Optional[ImageFeaturePyramid], keep_intermediate: bool = False):
    """Run every block; with ``keep_intermediate`` return the input plus each block's output."""
    out = encoder(gset, bev, img, keep_intermediate=keep_intermediate)
    logger.debug("encoder ran %d blocks on %d Gaussians", len(encoder.blocks), gset.count)
    return out
