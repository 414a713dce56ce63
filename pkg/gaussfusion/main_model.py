# gaussfusion/main_model.py
import logging
from dataclasses import dataclass, field
from typing import List, Mapping, NamedTuple, Optional

import numpy as np
from scipy.special import logit

from gaussfusion.agents.encoder import EncoderSettings, GaussianEncoder, run_encoder
from gaussfusion.agents.planner import (AnchorVocabulary, CascadePlanner, PlannerSettings, TrajectoryLoss,
                                        TrajectorySet, build_anchor_vocabulary, cascade_plan, select_trajectory,
                                        trajectory_loss)
from gaussfusion.core.config import Config
from gaussfusion.core.errors import ContractError
from gaussfusion.core.observability import Observability
from gaussfusion.core.params import ParameterStore
from gaussfusion.core.tensor import NumericArray, constant, stack
from gaussfusion.render.losses import MapLoss, map_loss
from gaussfusion.render.renderer import RasterConfig, SemanticBevMap, render
from gaussfusion.scene.gaussians import GaussianSet, SceneBounds, init_gaussians
from gaussfusion.tools.backbone import ToyBackbone, encode_features
from gaussfusion.tools.dataset import dataset_trajectories
from gaussfusion.tools.synth import SceneSample, sample_ego_trajectories

logger = logging.getLogger(__name__)


@dataclass
class ModelOutput:
    gaussians: GaussianSet
    trajectories: TrajectorySet
    bev_map: Optional[SemanticBevMap] = None
    history: List[GaussianSet] = field(default_factory=list)

    @property
    def selected(self) -> np.ndarray:
        return select_trajectory(self.trajectories)


class LossBreakdown(NamedTuple):
    map: MapLoss
    trajectory: TrajectoryLoss
    total: NumericArray

    def to_record(self, underflow: int = 0) -> dict:
        return {
            'map_ce': self.map.ce.item(),
            'map_lovasz': self.map.lovasz.item(),
            'traj_l1': self.trajectory.regression.item(),
            'traj_cls': self.trajectory.classification.item(),
            'total': self.total.item(),
            'underflow': int(underflow),
        }


def build_vocabulary(config: Mapping, samples=(), seed: Optional[int] = None) -> AnchorVocabulary:
    """k-means anchors over the kinematic sampler's pool plus the dataset's own trajectories."""
    rng = np.random.default_rng(config['seed'] if seed is None else seed)
    bounds = SceneBounds.from_config(config)
    pool = sample_ego_trajectories(rng, config['planner.vocab_pool'], config['planner.horizon'], bounds)
    if len(samples):
        pool = np.concatenate([pool, dataset_trajectories(samples)])
    return build_anchor_vocabulary(pool, config['planner.anchors'], rng)


def inverse_softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x + np.log(-np.expm1(-x))


class InitialGaussians:
    """The learnable starting set, kept in unconstrained coordinates.

    Scales are stored through softplus, rotations as an angle and priors through
    a sigmoid, so every AdamW step yields a valid GaussianSet. Logits and priors
    only reach an output when no encoder block replaces them; otherwise they are
    held constant and left out of the store.
    """

    def __init__(self, store: ParameterStore, init: GaussianSet, learn_semantics: bool = True):
        self.means = store.add('gaussians.means', init.means.values)
        self.scale_params = store.add('gaussians.scale_params', inverse_softplus(init.scales.values))
        r = init.rotations.values
        self.angles = store.add('gaussians.angles', np.arctan2(r[:, 1], r[:, 0]))
        prior_params = logit(init.priors.values)
        if learn_semantics:
            self.logits = store.add('gaussians.logits', init.logits.values)
            self.prior_params = store.add('gaussians.prior_params', prior_params)
        else:
            self.logits = constant(init.logits.values)
            self.prior_params = constant(prior_params)
        self.f_exp = store.add('gaussians.f_exp', init.f_exp.values)
        self.f_imp = store.add('gaussians.f_imp', init.f_imp.values)

    def __call__(self) -> GaussianSet:
        return GaussianSet(
            means=self.means,
            scales=self.scale_params.softplus(),
            rotations=stack([self.angles.cos(), self.angles.sin()], axis=-1),
            logits=self.logits,
            priors=self.prior_params.sigmoid(),
            f_exp=self.f_exp,
            f_imp=self.f_imp,
        )


class GaussianFusionModel:
    """Learnable initial Gaussians, toy backbones, the encoder and the cascade planner in one store."""

    def __init__(self, config: Config, vocab: AnchorVocabulary, store: Optional[ParameterStore] = None):
        self.config = config
        self.store = store or ParameterStore(config['seed'])
        self.bounds = SceneBounds.from_config(config)
        self.raster = RasterConfig.from_config(config)
        init = init_gaussians(config['gaussians.count'], self.bounds, config['gaussians.classes'],
                              config['gaussians.dim'], self.store.rng, config['gaussians.init_scale'],
                              config['gaussians.feature_std'])
        self.initial_params = InitialGaussians(self.store, init, learn_semantics=config['encoder.blocks'] == 0)
        self.backbone = ToyBackbone.from_config(self.store, config)
        self.encoder = GaussianEncoder(self.store, EncoderSettings.from_config(config), config['encoder.blocks'])
        self.planner = CascadePlanner(self.store, PlannerSettings.from_config(config), vocab)
        Observability.log('model_built', {'parameters': len(self.store), 'values': self.store.num_values()})

    @property
    def initial(self) -> GaussianSet:
        return self.initial_params()

    @property
    def vocab(self) -> AnchorVocabulary:
        return self.planner.vocab

    def forward(self, sample: SceneSample, with_map: bool = True, keep_intermediate: bool = False,
                cull: bool = True) -> ModelOutput:
        """Encode features, refine the Gaussians, plan, and optionally render the map."""
        cfg = self.config
        bev = img = None
        if cfg['encoder.use_points'] or cfg['encoder.use_images']:
            bev, img = encode_features(sample, self.backbone, self.bounds)
        history = run_encoder(self.encoder, self.initial, bev, img, keep_intermediate=True)
        gset = history[-1]
        ego = sample.ego_state if cfg['planner.ego_state'] else None
        trajs = cascade_plan(self.planner, gset, ego_state=ego)
        bev_map = render(gset, self.raster, cull=cull, threads=cfg['threads']) if with_map else None
        return ModelOutput(gset, trajs, bev_map, history if keep_intermediate else [])

    __call__ = forward

    def loss(self, sample: SceneSample, output: ModelOutput) -> LossBreakdown:
        """Map loss on the final block's Gaussians plus the trajectory loss, weighted from config."""
        cfg = self.config
        if output.bev_map is None:
            raise ContractError("the map loss needs an output rendered with with_map=True")
        m = map_loss(output.bev_map, sample.gt_map, cfg['loss.lovasz_weight'])
        t = trajectory_loss(output.trajectories, sample.gt_traj, cfg['loss.trajectory'])
        total = m.total * cfg['loss.map_weight'] + t.total * cfg['loss.trajectory_weight']
        return LossBreakdown(m, t, total)


def run_model(config: Config, sample: SceneSample, vocab: Optional[AnchorVocabulary] = None,
              with_map: bool = True) -> ModelOutput:
    vocab = vocab or build_vocabulary(config, [sample])
    return GaussianFusionModel(config, vocab).forward(sample, with_map=with_map)
