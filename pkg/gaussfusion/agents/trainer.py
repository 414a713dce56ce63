# gaussfusion/agents/trainer.py
"""Training and evaluation loops over a list of scenes."""
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from gaussfusion.agents.evaluator import Evaluator
from gaussfusion.agents.planner import AnchorVocabulary, save_vocabulary
from gaussfusion.core.config import Config
from gaussfusion.core.errors import ContractError, DatasetError
from gaussfusion.core.observability import JsonLinesWriter, Observability
from gaussfusion.core.optim import adamw_step, cosine_lr
from gaussfusion.core.params import ParameterStore
from gaussfusion.core.tensor import set_default_dtype
from gaussfusion.main_model import GaussianFusionModel, build_vocabulary
from gaussfusion.memory.checkpoint import load_checkpoint, save_checkpoint
from gaussfusion.memory.container import read_container
from gaussfusion.tools.synth import SceneSample

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = 'checkpoint.gfc'
TRAIN_LOG_FILE = 'train_log.jsonl'
VOCAB_FILE = 'vocab.gfc'


@dataclass
class TrainResult:
    model: GaussianFusionModel
    checkpoint: Optional[str]
    log_path: Optional[str]
    history: List[Dict[str, float]] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r['total'] for r in self.history])


def train_step(model: GaussianFusionModel, sample: SceneSample, lr: float) -> Dict[str, float]:
    """One AdamW step on one scene; returns the logged loss terms."""
    store = model.store
    store.zero_grad()
    output = model.forward(sample, with_map=True)
    losses = model.loss(sample, output)
    losses.total.backward()
    adamw_step(store, store.grads(), lr, weight_decay=model.config['train.weight_decay'])
    return losses.to_record(output.bev_map.underflow)


def train(config: Config, samples: Sequence[SceneSample], out_dir: Optional[str] = None,
          vocab: Optional[AnchorVocabulary] = None, steps: Optional[int] = None) -> TrainResult:
    """AdamW with a cosine schedule over ``train.epochs`` passes of ``samples``.

    Each iteration is one scene in dataset order. With ``out_dir`` the per-step
    JSON-lines log and the final checkpoint are written there.
    """
    if not samples:
        raise ContractError("training needs at least one scene")
    vocab = vocab or build_vocabulary(config, samples)
    model = GaussianFusionModel(config, vocab)
    total_steps = config['train.epochs'] * len(samples) if steps is None else steps
    log_path = checkpoint = None
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, TRAIN_LOG_FILE)
        writer = JsonLinesWriter(log_path)
    history: List[Dict[str, float]] = []
    Observability.log('train_start', {'steps': total_steps, 'scenes': len(samples), 'overrides': config.overrides()})
    try:
        for step in range(total_steps):
            lr = cosine_lr(step, total_steps, config['train.lr'], config['train.lr_min'])
            record = train_step(model, samples[step % len(samples)], lr)
            record.update(step=step, lr=lr)
            history.append(record)
            if writer is not None:
                writer.write(record)
            if config['train.log_every'] and step % config['train.log_every'] == 0:
                logger.debug("step %d lr %.3g total %.5f", step, lr, record['total'])
    finally:
        if writer is not None:
            writer.close()
    if out_dir is not None:
        checkpoint = save_checkpoint(os.path.join(out_dir, CHECKPOINT_FILE), model.store,
                                     checkpoint_meta(config, vocab))
        save_vocabulary(os.path.join(out_dir, VOCAB_FILE), vocab)
    Observability.log('train_end', {'steps': total_steps, 'final_total': history[-1]['total'] if history else None})
    return TrainResult(model, checkpoint, log_path, history)


def checkpoint_meta(config: Config, vocab: AnchorVocabulary) -> dict:
    return {'config': config.overrides(), 'anchors': vocab.anchors.tolist()}


def load_model(path: str, overrides: Optional[dict] = None) -> GaussianFusionModel:
    """Rebuild the model a checkpoint was trained with and restore its parameters."""
    _, meta = read_container(path)
    if 'config' not in meta or 'anchors' not in meta:
        raise DatasetError(f"{path}: checkpoint carries no model configuration")
    config = Config(meta['config']).updated(overrides or {})
    set_default_dtype(config['precision'])
    model = GaussianFusionModel(config, AnchorVocabulary(np.array(meta['anchors'])),
                                ParameterStore(config['seed']))
    load_checkpoint(path, model.store)
    return model


def evaluate(model: GaussianFusionModel, samples: Sequence[SceneSample]) -> dict:
    """Deterministic metrics over ``samples``, including Gaussian migration across the encoder."""
    evaluator = Evaluator(model.config['gaussians.classes'] + 1, model.raster)
    for sample in samples:
        output = model.forward(sample, with_map=True, keep_intermediate=True)
        evaluator.add(output.bev_map.argmax(), sample.gt_map, output.selected, sample.gt_traj,
                      output.history[0].means.values, output.gaussians.means.values)
    return evaluator.evaluate()


def evaluate_checkpoint(path: str, samples: Sequence[SceneSample], threads: int = 1) -> Tuple[dict, GaussianFusionModel]:
    model = load_model(path, {'threads': threads})
    return evaluate(model, samples), model
