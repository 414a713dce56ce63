"""Cascade anchor-trajectory planner over Gaussian features.

Each stage embeds its input trajectories, attends to the Gaussians nearest to
their waypoints, then to every Gaussian, and regresses residual waypoints and
a score. Later stages start from the previous stage's refined trajectories.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Mapping, NamedTuple, Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from gaussfusion.agents.layers import CrossAttentionBlock, Dense, Mlp
from gaussfusion.core.errors import ContractError, DatasetError, DimensionError
from gaussfusion.core.ops import log_softmax
from gaussfusion.core.params import ParameterStore
from gaussfusion.core.tensor import NumericArray, concat, constant, lift, stack
from gaussfusion.memory.container import read_container, write_container
from gaussfusion.scene.gaussians import GaussianSet, SceneBounds

logger = logging.getLogger(__name__)

KMEANS_ITERATIONS = 50
SCORE_INIT_STD = 0.01


@dataclass(frozen=True)
class AnchorVocabulary:
    """k anchor trajectories (k, T, 2) in ego-frame meters."""
    anchors: np.ndarray

    def __post_init__(self):
        anchors = np.asarray(self.anchors, dtype=float)
        if anchors.ndim != 3 or anchors.shape[-1] != 2 or anchors.shape[0] < 1:
            raise DimensionError(f"anchor vocabulary must be (k>=1, T, 2), got {anchors.shape}")
        anchors.setflags(write=False)
        object.__setattr__(self, 'anchors', anchors)

    @property
    def size(self) -> int:
        return self.anchors.shape[0]

    @property
    def horizon(self) -> int:
        return self.anchors.shape[1]

    def __len__(self) -> int:
        return self.size


def _kmeans_plus_plus(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [data[rng.integers(len(data))]]
    for _ in range(1, k):
        dist = cdist(data, np.stack(centroids), 'sqeuclidean').min(axis=1)
        total = dist.sum()
        if total <= 0.0:
            break
        centroids.append(data[rng.choice(len(data), p=dist / total)])
    return np.stack(centroids)


def build_anchor_vocabulary(trajs: np.ndarray, k: int, rng: np.random.Generator,
                            iterations: int = KMEANS_ITERATIONS) -> AnchorVocabulary:
    """Cluster (n, T, 2) ego trajectories into k anchors with k-means.

    Seeding is k-means++; Lloyd iterations run a fixed number of times on the
    flattened 2T-dim trajectories. Empty clusters keep their previous centroid.

    Raises:
        ContractError: fewer trajectories than k, or too few distinct ones to
            give k distinct centroids.
    """
    trajs = np.asarray(trajs, dtype=float)
    if trajs.ndim != 3 or trajs.shape[-1] != 2:
        raise DimensionError(f"trajectories must be (n, T, 2), got {trajs.shape}")
    n, horizon = trajs.shape[:2]
    if k < 1 or n < k:
        raise ContractError(f"need at least k={k} trajectories, got {n}")
    data = trajs.reshape(n, 2 * horizon)
    distinct = len(np.unique(data, axis=0))
    if distinct < k:
        raise ContractError(f"duplicate centroids: only {distinct} distinct trajectories for k={k}")

    centroids = _kmeans_plus_plus(data, k, rng)
    for _ in range(iterations):
        labels = np.argmin(cdist(data, centroids, 'sqeuclidean'), axis=1)
        for idx in range(k):
            members = data[labels == idx]
            if len(members):
                centroids[idx] = members.mean(axis=0)
    if len(np.unique(centroids, axis=0)) < k:
        raise ContractError(f"k-means collapsed to duplicate centroids for k={k}")
    logger.debug("clustered %d trajectories into %d anchors", n, k)
    return AnchorVocabulary(centroids.reshape(k, horizon, 2))


def select_topm(anchor: np.ndarray, gset: GaussianSet, m: int) -> np.ndarray:
    """Indices of the m nearest Gaussian means to every waypoint.

    ``anchor`` is (T, 2) or batched (k, T, 2). Ties go to the lower Gaussian
    index; results are concatenated in waypoint order without deduplication,
    giving (m*T,) or (k, m*T) indices.
    """
    if m > gset.count:
        raise ContractError(f"cannot select top-{m} of {gset.count} Gaussians")
    if m < 1:
        raise ContractError(f"top-m needs m >= 1, got {m}")
    anchor = np.asarray(anchor.values if isinstance(anchor, NumericArray) else anchor, dtype=float)
    means = gset.means.values
    dist = np.linalg.norm(anchor[..., :, None, :] - means, axis=-1)
    order = np.argsort(dist, axis=-1, kind='stable')[..., :m]
    return order.reshape(*anchor.shape[:-2], anchor.shape[-2] * m)


@dataclass
class TrajectorySet:
    """Refined trajectories (k, T, 2) with score logits (k,) from one stage.

    ``history`` holds every stage's set in order, ending with this one.
    """
    trajectories: NumericArray
    scores: NumericArray
    stage: int
    history: List['TrajectorySet'] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.trajectories, self.scores = lift(self.trajectories), lift(self.scores)
        k = self.trajectories.shape[0]
        if self.trajectories.ndim != 3 or self.trajectories.shape[-1] != 2 or self.scores.shape != (k,):
            raise DimensionError(f"inconsistent trajectory set {self.trajectories.shape} / scores {self.scores.shape}")

    @property
    def size(self) -> int:
        return self.trajectories.shape[0]

    @property
    def stages(self) -> List['TrajectorySet']:
        return self.history or [self]

    def to_dict(self) -> dict:
        return {'stage': self.stage, 'trajectories': self.trajectories.values.tolist(),
                'scores': self.scores.values.tolist()}


@dataclass(frozen=True)
class PlannerSettings:
    dim: int
    horizon: int = 8
    stages: int = 2
    top_m: int = 4
    heads: int = 4
    ego_state: bool = False
    bounds: Optional[SceneBounds] = None

    @classmethod
    def from_config(cls, config: Mapping) -> 'PlannerSettings':
        return cls(dim=config['gaussians.dim'], horizon=config['planner.horizon'],
                   stages=config['planner.stages'], top_m=config['planner.top_m'],
                   heads=config['planner.heads'], ego_state=config['planner.ego_state'],
                   bounds=SceneBounds.from_config(config))


class PlannerStage:
    """Embedding, spatial attention, global attention, refinement and score heads of one stage."""

    def __init__(self, store: ParameterStore, path: str, settings: PlannerSettings):
        d, horizon = settings.dim, settings.horizon
        self.settings = settings
        self.embed = Mlp(store, f"{path}.embed", [2 * horizon, d, d])
        self.ego = Dense(store, f"{path}.ego", 2, d) if settings.ego_state else None
        self.spatial = CrossAttentionBlock(store, f"{path}.spatial", d, settings.heads, key_dim=2 * d)
        self.glob = CrossAttentionBlock(store, f"{path}.global", d, settings.heads, key_dim=2 * d)
        self.refine = Mlp(store, f"{path}.refine", [d, d, 2 * horizon], zero_last=True)
        self.score = Mlp(store, f"{path}.score", [d, d, 1], last_std=SCORE_INIT_STD)

    def scale(self) -> np.ndarray:
        bounds = self.settings.bounds
        return np.ones(2) if bounds is None else 0.5 * bounds.extent

    def query(self, anchors: NumericArray, ego_state: Optional[np.ndarray] = None) -> NumericArray:
        """F_query (k, d) from (k, T, 2) trajectories."""
        k = anchors.shape[0]
        f_query = self.embed((anchors * (1.0 / self.scale())).reshape(k, 2 * self.settings.horizon))
        if self.ego is not None:
            state = np.zeros(2) if ego_state is None else np.asarray(ego_state, dtype=float)
            f_query = f_query + self.ego(constant(state.reshape(1, 2)))
        return f_query


def gaussian_features(gset: GaussianSet) -> NumericArray:
    """Per-Gaussian [f_exp; f_imp] of width 2d."""
    return concat([gset.f_exp, gset.f_imp], axis=-1)


class SpatialAttention(NamedTuple):
    features: NumericArray
    weights: NumericArray
    indices: np.ndarray


def gaussian_spatial_attention(stage: PlannerStage, anchors, gset: GaussianSet,
                               ego_state: Optional[np.ndarray] = None) -> SpatialAttention:
    """F_A (k, d): cross-attention of the trajectory embedding over its m*T nearest Gaussians."""
    anchors = lift(anchors)
    batched = anchors.ndim == 3
    if not batched:
        anchors = anchors.reshape(1, *anchors.shape)
    if anchors.shape[1] != stage.settings.horizon:
        raise DimensionError(f"planner expects horizon {stage.settings.horizon}, got {anchors.shape[1]}")
    k = anchors.shape[0]
    indices = select_topm(anchors, gset, stage.settings.top_m)
    subset = gaussian_features(gset)[indices]
    f_query = stage.query(anchors, ego_state).reshape(k, 1, stage.settings.dim)
    f_a, _, weights = stage.spatial(f_query, subset)
    f_a = f_a.reshape(k, stage.settings.dim)
    if not batched:
        return SpatialAttention(f_a[0], weights[0], indices[0])
    return SpatialAttention(f_a, weights, indices)


def gaussian_cross_attention_refine(stage: PlannerStage, f_a: NumericArray, gset: GaussianSet,
                                    anchors) -> Tuple[NumericArray, NumericArray]:
    """(tau (k, T, 2), score (k,)) with tau = MLP(F_o) + anchors."""
    anchors = lift(anchors)
    batched = anchors.ndim == 3
    if not batched:
        anchors = anchors.reshape(1, *anchors.shape)
        f_a = f_a.reshape(1, f_a.shape[-1])
    k, horizon = anchors.shape[:2]
    f_o, _, _ = stage.glob(f_a.reshape(k, 1, stage.settings.dim), gaussian_features(gset))
    f_o = f_o.reshape(k, stage.settings.dim)
    tau = stage.refine(f_o).reshape(k, horizon, 2) * stage.scale() + anchors
    score = stage.score(f_o).reshape(k)
    if not batched:
        return tau[0], score[0]
    return tau, score


class CascadePlanner:
    """S unshared planner stages; holds the anchor vocabulary."""

    def __init__(self, store: ParameterStore, settings: PlannerSettings, vocab: AnchorVocabulary,
                 path: str = 'planner'):
        if settings.stages < 1:
            raise ContractError(f"planner needs at least one stage, got {settings.stages}")
        if vocab.horizon != settings.horizon:
            raise DimensionError(f"vocabulary horizon {vocab.horizon} != planner horizon {settings.horizon}")
        self.settings = settings
        self.vocab = vocab
        self.stages = [PlannerStage(store, f"{path}.stage{s}", settings) for s in range(settings.stages)]

    def __call__(self, gset: GaussianSet, ego_state: Optional[np.ndarray] = None) -> TrajectorySet:
        return cascade_plan(self, gset, ego_state=ego_state)


# Parameters of every planner stage are held by the CascadePlanner.
PlannerParams = CascadePlanner


def cascade_plan(planner: CascadePlanner, gset: GaussianSet, stages: Optional[int] = None,
                 ego_state: Optional[np.ndarray] = None) -> TrajectorySet:
    """Run the cascade; each stage re-selects its Gaussians from the current trajectories."""
    count = len(planner.stages) if stages is None else stages
    if not 1 <= count <= len(planner.stages):
        raise ContractError(f"requested {count} stages of a {len(planner.stages)}-stage planner")
    current = constant(planner.vocab.anchors)
    history: List[TrajectorySet] = []
    for s, stage in enumerate(planner.stages[:count]):
        f_a = gaussian_spatial_attention(stage, current, gset, ego_state).features
        current, scores = gaussian_cross_attention_refine(stage, f_a, gset, current)
        history.append(TrajectorySet(current, scores, stage=s + 1))
    final = history[-1]
    final.history = history
    return final


class TrajectoryLoss(NamedTuple):
    regression: NumericArray
    classification: NumericArray
    total: NumericArray
    winners: Tuple[int, ...]


def winner_index(trajectories: np.ndarray, gt: np.ndarray) -> int:
    """Index of the trajectory with the smallest mean waypoint distance to ``gt``."""
    dist = np.linalg.norm(np.asarray(trajectories) - gt, axis=-1).mean(axis=-1)
    return int(np.argmin(dist))


def trajectory_loss(out: TrajectorySet, gt: np.ndarray, kind: str = 'l1') -> TrajectoryLoss:
    """Winner-takes-all regression plus score cross-entropy, summed over cascade stages."""
    gt = np.asarray(gt, dtype=float)
    if gt.shape != out.trajectories.shape[1:]:
        raise DimensionError(f"ground-truth trajectory {gt.shape} does not match {out.trajectories.shape[1:]}")
    if kind not in ('l1', 'l2'):
        raise ContractError(f"unknown trajectory loss '{kind}'")
    regression, classification, winners = [], [], []
    for stage in out.stages:
        win = winner_index(stage.trajectories.values, gt)
        diff = stage.trajectories[win] - gt
        regression.append(diff.abs().mean() if kind == 'l1' else (diff * diff).mean())
        classification.append(-log_softmax(stage.scores, axis=-1)[win])
        winners.append(win)
    reg, cls = stack(regression).sum(), stack(classification).sum()
    return TrajectoryLoss(reg, cls, reg + cls, tuple(winners))


def select_trajectory(out: TrajectorySet) -> np.ndarray:
    """Highest-scoring trajectory; ties go to the lowest index."""
    return out.trajectories.values[int(np.argmax(out.scores.values))]


def save_vocabulary(path: str, vocab: AnchorVocabulary) -> str:
    return write_container(path, {'anchors': vocab.anchors}, {'kind': 'anchor_vocabulary',
                                                              'k': vocab.size, 'T': vocab.horizon})


def load_vocabulary(path: str) -> AnchorVocabulary:
    arrays, meta = read_container(path)
    if meta.get('kind') != 'anchor_vocabulary' or 'anchors' not in arrays:
        raise DatasetError(f"{path}: not an anchor vocabulary")
    return AnchorVocabulary(arrays['anchors'])
