"""Episodic training and the two reference baselines.

One optimizer step per episode: sample a task, run the full guided
forward, take dense cross-entropy against the query target, backprop
through guidance and head alike. The annotation budget is re-drawn per
episode so a single model serves every sparsity level at test time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import episodes as ep
from . import model, ops
from .checkpoint import save_checkpoint
from .errors import ConfigError, TrainingDivergedError
from .optim import sgd_momentum_step
from .shapes import DenseSample
from .tensor import Tape, Tensor, backward

P_TRAIN_CHOICES: tuple = (1, 2, 5, 10, ep.DENSE)


@dataclass
class TrainConfig:
    mode: str = ep.MODE_SEMANTIC
    guidance: model.GuidanceConfig = field(default_factory=model.GuidanceConfig)
    episodes: int = 5000
    s_train: int = 1
    p_train: object = "mixed"      # "mixed" | int | "dense"
    lr: float = 0.02               # above ~0.05 the imbalanced loss collapses features
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    allowed_classes: Optional[Sequence[int]] = None
    log_every: int = 100

    def __post_init__(self):
        if self.mode not in ep.MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.episodes < 1:
            raise ConfigError(f"episodes must be >= 1, got {self.episodes}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        ok = self.p_train == "mixed" or self.p_train == ep.DENSE or (
            isinstance(self.p_train, int) and self.p_train >= 1)
        if not ok:
            raise ConfigError(f"bad p_train {self.p_train!r}")


def _draw_budget(cfg: TrainConfig, rng: np.random.Generator):
    if cfg.p_train == "mixed":
        return P_TRAIN_CHOICES[rng.integers(0, len(P_TRAIN_CHOICES))]
    return cfg.p_train


def episode_loss(params: model.ModelParams, episode: ep.Episode) -> Tensor:
    """Differentiable cross-entropy of the guided prediction on the query."""
    support = [(Tensor(img), ann) for img, ann in episode.support]
    query = Tensor(episode.query)
    z = None if params.config.unguided else model.extract_guidance(support, params)
    qf = model.extract_features(query, params)
    logits = model.infer(qf, z, params,
                         out_size=(episode.query.shape[1], episode.query.shape[2]))
    return ops.softmax_cross_entropy(logits, episode.query_target)


def _param_norms(params: model.ModelParams) -> dict[str, float]:
    return {name: float(np.linalg.norm(t.data)) for name, t in params.params.items()}


def _step(params: model.ModelParams, loss_fn, state: dict, cfg_lr: float,
          momentum: float, weight_decay: float) -> float:
    with Tape() as tape:
        loss = loss_fn()
    by_tensor = backward(loss, tape)
    grads = {}
    for name, t in params.params.items():
        g = by_tensor.get(t)
        grads[name] = g if g is not None else np.zeros_like(t.data)
    sgd_momentum_step(params.params, grads, state, cfg_lr, momentum, weight_decay)
    return float(loss.data)


def train_guided(dataset: Sequence[DenseSample], cfg: TrainConfig,
                 out_path=None,
                 log: Callable[[str], None] = print) -> tuple[model.ModelParams, list]:
    """Run the episodic loop; returns (trained params, per-episode losses)."""
    rng = np.random.default_rng(cfg.seed)
    params = model.init_params(cfg.guidance, seed=cfg.seed)
    state: dict = {}
    history: list[float] = []
    for i in range(1, cfg.episodes + 1):
        episode = ep.sample_episode(dataset, cfg.mode, cfg.s_train,
                                    _draw_budget(cfg, rng), rng,
                                    allowed_classes=cfg.allowed_classes)
        loss = _step(params, lambda: episode_loss(params, episode),
                     state, cfg.lr, cfg.momentum, cfg.weight_decay)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at episode {i}, task {episode.task_descriptor}, "
                f"shots {episode.shot_params}, parameter norms {_param_norms(params)}")
        history.append(loss)
        if cfg.log_every and i % cfg.log_every == 0:
            window = history[-cfg.log_every:]
            log(f"episode {i}/{cfg.episodes}  loss {np.mean(window):.4f}")
    if out_path is not None:
        save_checkpoint(out_path, params.params, cfg.guidance.to_dict())
    return params, history


# ---------------------------------------------------------------------------
# baselines

def fgbg_config(like: Optional[model.GuidanceConfig] = None) -> model.GuidanceConfig:
    """The unguided twin of a guided config: same encoder, no task input."""
    base = like or model.GuidanceConfig()
    return model.GuidanceConfig(
        fusion=model.FUSION_LATE,
        locality=model.LOCALITY_GLOBAL,
        head=model.HEAD_FEATURE_FUSION,
        encoder_spec=base.encoder_spec,
        tau=base.tau,
        unguided=True,
    )


def train_fgbg(dataset: Sequence[DenseSample], cfg: TrainConfig,
               out_path=None,
               log: Callable[[str], None] = print) -> tuple[model.ModelParams, list]:
    """Foreground-vs-background floor: segment every instance, ignore tasks.

    Shares the training budget and optimizer with the guided run but the
    target is the union of all instances, so the support never matters.
    """
    rng = np.random.default_rng(cfg.seed)
    params = model.init_params(fgbg_config(cfg.guidance), seed=cfg.seed)
    state: dict = {}
    history: list[float] = []
    if not dataset:
        raise ConfigError("empty dataset")
    for i in range(1, cfg.episodes + 1):
        sample = dataset[rng.integers(0, len(dataset))]
        target = (sample.label_map > 0).astype(np.uint8)

        def loss_fn():
            qf = model.extract_features(Tensor(sample.image), params)
            logits = model.infer(qf, None, params, out_size=sample.size)
            return ops.softmax_cross_entropy(logits, target)

        loss = _step(params, loss_fn, state, cfg.lr, cfg.momentum, cfg.weight_decay)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at step {i}, parameter norms {_param_norms(params)}")
        history.append(loss)
        if cfg.log_every and i % cfg.log_every == 0:
            window = history[-cfg.log_every:]
            log(f"step {i}/{cfg.episodes}  loss {np.mean(window):.4f}")
    if out_path is not None:
        save_checkpoint(out_path, params.params, params.config.to_dict())
    return params, history


def _clone_params(params: model.ModelParams) -> model.ModelParams:
    copies = {name: Tensor(t.data.copy(), requires_grad=True)
              for name, t in params.params.items()}
    return model.ModelParams(params=copies, config=params.config)


def _point_target(ann: model.AnnotationSet, size: tuple[int, int]) -> np.ndarray:
    target = np.full(size, ops.IGNORE_LABEL, dtype=np.uint8)
    for pt in ann.points:
        target[pt.row, pt.col] = 1 if pt.positive else 0
    return target


def baseline_finetune(params: model.ModelParams,
                      support: Sequence[tuple[np.ndarray, model.AnnotationSet]],
                      query: np.ndarray,
                      steps: int = 100,
                      lr: float = 0.002,  # a tenth of the default training rate
                      momentum: float = 0.0) -> dict:
    """Adapt a parameter copy to the support points, then predict the query.

    Every parameter is optimized; unannotated pixels carry the ignore
    label so only the clicked points contribute loss. Plain gradient
    descent by default: on a handful of points, momentum overshoots and
    can kill the network outright. Returns the mask, the final support
    loss, and the wall-clock spent optimizing.
    """
    if not support:
        raise ConfigError("fine-tuning needs at least one support item")
    if not any(len(ann) for _, ann in support):
        raise ConfigError("fine-tuning needs at least one annotated point")
    tuned = _clone_params(params)
    targets = [_point_target(ann, (img.shape[1], img.shape[2]))
               for img, ann in support]

    def loss_fn():
        sup_t = [(Tensor(img), ann) for img, ann in support]
        z = None if tuned.config.unguided else model.extract_guidance(sup_t, tuned)
        terms = []
        for (img, _), target in zip(support, targets):
            qf = model.extract_features(Tensor(img), tuned)
            logits = model.infer(qf, z, tuned, out_size=(img.shape[1], img.shape[2]))
            terms.append(ops.softmax_cross_entropy(logits, target))
        return ops.weighted_sum(terms, [1.0 / len(terms)] * len(terms))

    state: dict = {}
    last_loss = None
    t0 = time.perf_counter()
    for _ in range(steps):
        last_loss = _step(tuned, loss_fn, state, lr, momentum, 0.0)
    wall = time.perf_counter() - t0

    support_t = [(Tensor(img), ann) for img, ann in support]
    mask, logits = model.segment(support_t, Tensor(query), tuned)
    return {"mask": mask, "logits": logits, "support_loss": last_loss,
            "wall_clock_s": wall, "steps": steps}
