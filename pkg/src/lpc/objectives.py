"""Training objectives (PC, LMC, ALMC, combined) and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import evaluate
from .data import Dataset, batches
from .hessian import CholFactor, FullHessian, HessianBlocks, block_hessian, full_hessian
from .inference import Amortizer, InferenceConfig, amortizer_init, amortizer_update, map_inference
from .model import GenerativeModel, ParamGrads, concat_latents, grad_log_joint_params, log_joint, split_latents
from .numerics import make_rng, sample_mvn_from_precision, split_rng

log = logging.getLogger(__name__)

OBJECTIVES = ("pc", "lmc", "almc")


@dataclass
class ObjectiveResult:
    """Per-sample objective values and batch-mean parameter gradients."""

    value: np.ndarray
    grads: ParamGrads
    fallback: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.value))


def _batch_size(x: np.ndarray) -> int:
    return int(np.prod(np.shape(x)[:-1], dtype=int))


def pc_objective(model: GenerativeModel, z_map: list[np.ndarray], x: np.ndarray) -> ObjectiveResult:
    value = log_joint(model, z_map, x)
    grads = grad_log_joint_params(model, z_map, x).scaled(1.0 / _batch_size(x))
    return ObjectiveResult(value, grads, np.zeros(np.shape(value), dtype=bool))


def sampled_objective(
    model: GenerativeModel,
    z_map: list[np.ndarray],
    x: np.ndarray,
    groups: list[tuple[list[int], CholFactor]],
    K: int,
    rng: np.random.Generator,
    temp: float = 1.0,
) -> ObjectiveResult:
    """Average log joint over K draws around the MAP.

    ``groups`` lists independent Gaussian blocks as (layer indices, Cholesky
    factor of the block precision). Layers absent from every group stay at
    their MAP values.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    shape = (K,) + x.shape[:-1]
    zs = [np.broadcast_to(np.asarray(v, dtype=np.float64), shape + (d,)) for v, d in zip(z_map, model.latent_dims)]
    for layers, factor in groups:
        mean = concat_latents([z_map[j] for j in layers])
        draw = sample_mvn_from_precision(mean, factor, temp, rng, size=(K,))
        for j, part in zip(layers, split_latents(draw, [model.latent_dims[j] for j in layers])):
            zs[j] = part
    xs = np.broadcast_to(x, shape + x.shape[-1:])
    lj = log_joint(model, zs, xs)
    grads = grad_log_joint_params(model, zs, xs).scaled(1.0 / (K * _batch_size(x)))
    return ObjectiveResult(np.mean(lj, axis=0), grads, np.zeros(x.shape[:-1], dtype=bool))


def lmc_objective(
    model: GenerativeModel,
    z_map: list[np.ndarray],
    x: np.ndarray,
    hess: FullHessian,
    K: int,
    rng: np.random.Generator,
    temp: float = 1.0,
) -> ObjectiveResult:
    """Laplace Monte Carlo: joint sampling from N(z_map, He^-1).

    ``hess`` may cover a subset of layers; the rest stay at the MAP.
    """
    res = sampled_objective(model, z_map, x, [(hess.layers, hess.factor)], K, rng, temp)
    res.fallback = np.asarray(hess.fallback)
    return res


def almc_objective(
    model: GenerativeModel,
    z_map: list[np.ndarray],
    x: np.ndarray,
    blocks: HessianBlocks,
    K: int,
    rng: np.random.Generator,
    temp: float = 1.0,
) -> ObjectiveResult:
    """Approximate LMC: each layer sampled independently from its own block."""
    groups = [([j], f) for j, f in zip(blocks.layers, blocks.factors)]
    return sampled_objective(model, z_map, x, groups, K, rng, temp)


def default_pc_layers(model: GenerativeModel) -> set[int]:
    return {model.n_latent - 1}


def combined_objective(
    model: GenerativeModel,
    z_map: list[np.ndarray],
    x: np.ndarray,
    K: int,
    rng: np.random.Generator,
    pc_layers: set[int] | None = None,
    blocks_upper: HessianBlocks | None = None,
) -> ObjectiveResult:
    """ALMC on the layers outside ``pc_layers``; those stay at their MAP.

    No block is built for a PC layer, so the observation-sized Jacobian of
    the bottom latent never appears under the default split.
    """
    pc_layers = default_pc_layers(model) if pc_layers is None else set(pc_layers)
    upper = [j for j in range(model.n_latent) if j not in pc_layers]
    if not upper:
        return pc_objective(model, z_map, x)
    if blocks_upper is None:
        blocks_upper = block_hessian(model, z_map, upper)
    return almc_objective(model, z_map, x, blocks_upper, K, rng)


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    velocity: ParamGrads | None = None

    @classmethod
    def for_model(cls, model: GenerativeModel, lr: float, momentum: float = 0.9) -> "OptimizerState":
        return cls(lr, momentum, model.zero_grads())


def sgd_momentum_step(model: GenerativeModel, grads: ParamGrads, opt: OptimizerState) -> GenerativeModel:
    """Momentum ascent step on the objective, in place; clamps learned variances."""
    if opt.velocity is None:
        opt.velocity = model.zero_grads()
    groups = [
        (model.weights, grads.weights, opt.velocity.weights),
        (model.biases, grads.biases, opt.velocity.biases),
        (model.log_vars, grads.log_vars, opt.velocity.log_vars),
    ]
    for name, (params, gs, vs) in zip(("weights", "biases", "log_vars"), groups):
        if name == "log_vars" and model.variance_mode != "learned":
            continue
        for l, (p, g, v) in enumerate(zip(params, gs, vs)):
            if not np.all(np.isfinite(g)):
                log.warning("skipping update of %s[%d]: non-finite gradient", name, l)
                continue
            v *= opt.momentum
            v += g
            p += opt.lr * v
    model.clamp_variances()
    return model


@dataclass
class TrainConfig:
    objective: str = "pc"
    combined: bool = False
    K: int = 20
    pc_layers: tuple[int, ...] | None = None
    infer: InferenceConfig = field(default_factory=InferenceConfig)
    lr: float = 0.01
    momentum: float = 0.9
    amortizer_lr: float = 0.01
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0
    eval_seed: int = 1
    curvature_hessian: str = "full"

    def __post_init__(self):
        self.objective = self.objective.lower()
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.objective == "pc" and self.combined:
            raise ValueError("combined mode is meaningless for PC")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.curvature_hessian not in ("full", "block"):
            raise ValueError("curvature_hessian must be 'full' or 'block'")


def compute_objective(
    model: GenerativeModel,
    z_map: list[np.ndarray],
    x: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> ObjectiveResult:
    if cfg.objective == "pc":
        return pc_objective(model, z_map, x)
    pc_layers = set(cfg.pc_layers) if cfg.pc_layers is not None else default_pc_layers(model)
    if cfg.objective == "almc":
        if cfg.combined:
            return combined_objective(model, z_map, x, cfg.K, rng, pc_layers)
        return almc_objective(model, z_map, x, block_hessian(model, z_map), cfg.K, rng)
    layers = [j for j in range(model.n_latent) if not (cfg.combined and j in pc_layers)]
    if not layers:
        return pc_objective(model, z_map, x)
    hess = full_hessian(model, z_map, x, layers)
    return lmc_objective(model, z_map, x, hess, cfg.K, rng)


def train(
    model: GenerativeModel,
    am: Amortizer,
    dataset: Dataset,
    cfg: TrainConfig,
    heldout: np.ndarray | None = None,
    on_epoch: Callable[[int, dict], None] | None = None,
) -> list[dict]:
    """Run ``cfg.epochs`` epochs of the inference/learning recipe in place.

    Per batch: amortised init, MAP inference, objective, parameter step,
    amortizer step. After each epoch the mean log-determinant of the Hessian
    is measured on ``heldout``. Returns one metrics dict per epoch.
    """
    shuffle_rng, noise_rng, sample_rng = split_rng(make_rng(cfg.seed), 3)
    opt = OptimizerState.for_model(model, cfg.lr, cfg.momentum)
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        xs = dataset.observations(noise_rng)
        total, count, n_fallback = 0.0, 0, 0
        for b, idx in enumerate(batches(len(xs), cfg.batch_size, shuffle_rng)):
            xb = xs[idx]
            z_map, _ = map_inference(model, xb, amortizer_init(am, xb), cfg.infer)
            try:
                res = compute_objective(model, z_map, xb, cfg, sample_rng)
            except ArithmeticError as exc:
                raise type(exc)(f"epoch {epoch} batch {b}: {exc}") from exc
            sgd_momentum_step(model, res.grads, opt)
            amortizer_update(am, xb, z_map, cfg.amortizer_lr, cfg.momentum)
            total += float(np.sum(res.value))
            count += len(idx)
            n_fallback += int(np.sum(res.fallback))
        record = {
            "epoch": epoch + 1,
            "objective_kind": cfg.objective,
            "mean_objective": total / max(count, 1),
            "psd_fallback_rate": n_fallback / max(count, 1),
        }
        if heldout is not None and len(heldout):
            curv = evaluate.track_curvature(model, heldout, cfg.infer, am, cfg.curvature_hessian)
            record["heldout_logdet_mean"] = curv.mean_logdet
            record["heldout_fallback_rate"] = curv.fallback_rate
        record["wall_seconds"] = time.perf_counter() - t0
        history.append(record)
        log.info("epoch %d: %s", epoch + 1, record)
        if on_epoch is not None:
            on_epoch(epoch, record)
    return history
