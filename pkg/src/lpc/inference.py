"""MAP inference over the latents and the amortised initialiser."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Activation, GenerativeModel, activation, activation_deriv, grad_log_joint_latents, log_joint

log = logging.getLogger(__name__)


@dataclass
class InferenceConfig:
    steps: int = 150
    step_size: float = 0.05
    shrink_factor: float = 0.9
    min_step: float = 1e-5
    variance_coupled_rescale: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("inference needs at least one step")
        if not 0.0 < self.shrink_factor < 1.0:
            raise ValueError("shrink_factor must lie in (0, 1)")

    @classmethod
    def for_activation(cls, act: Activation | str, **overrides) -> "InferenceConfig":
        kind = act.kind if isinstance(act, Activation) else act
        step = 0.001 if kind == "leaky_relu" else 0.05
        return cls(**{"step_size": step, **overrides})


@dataclass
class InferenceTrace:
    """Per-step records; every array is ``(steps + 1, *batch)``."""

    best_log_joint: np.ndarray
    log_joint: np.ndarray
    step_size: np.ndarray
    warning: np.ndarray

    def write_csv(self, path: str | Path) -> None:
        flat_best = self.best_log_joint.reshape(len(self.best_log_joint), -1)
        flat_cur = self.log_joint.reshape(len(self.log_joint), -1)
        flat_eta = self.step_size.reshape(len(self.step_size), -1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "step", "log_joint", "best_log_joint", "step_size"])
            for s in range(flat_best.shape[1]):
                for t in range(flat_best.shape[0]):
                    w.writerow([s, t, repr(flat_cur[t, s]), repr(flat_best[t, s]), repr(flat_eta[t, s])])


def map_inference(
    model: GenerativeModel,
    x: np.ndarray,
    init: list[np.ndarray],
    cfg: InferenceConfig,
) -> tuple[list[np.ndarray], InferenceTrace]:
    """Gradient ascent on log P(x, z) from ``init``; returns the best iterate.

    Each sample keeps its own step size, multiplied by ``shrink_factor``
    (floored at ``min_step``) whenever a step lowers its log joint or produces
    a non-finite value. Non-finite iterates are replaced by the best state.
    """
    x = np.asarray(x, dtype=np.float64)
    batch = x.shape[:-1]
    z = [np.array(np.broadcast_to(v, batch + (d,)), dtype=np.float64) for v, d in zip(init, model.latent_dims)]
    model.check_state(z, x)

    scale = 1.0
    if cfg.variance_coupled_rescale and model.variance_mode == "learned":
        scale = min(float(np.min(model.variances(l))) for l in range(model.n_latent))

    with np.errstate(all="ignore"):
        lj = log_joint(model, z, x, check=False)
    if not np.all(np.isfinite(lj)):
        raise ValueError("log joint is not finite at the initial state")
    best = [v.copy() for v in z]
    best_lj = lj.copy()
    eta = np.full(batch, cfg.step_size)
    warning = np.zeros(batch, dtype=bool)

    hist_best, hist_cur, hist_eta = [best_lj.copy()], [lj.copy()], [eta.copy()]
    for _ in range(cfg.steps):
        eff = np.maximum(cfg.min_step, eta * scale) if scale != 1.0 else eta
        with np.errstate(all="ignore"):
            grads = grad_log_joint_latents(model, z, x)
            z_new = [v + eff[..., None] * g for v, g in zip(z, grads)]
            lj_new = log_joint(model, z_new, x, check=False)
        bad = ~np.isfinite(lj_new)
        worse = bad | (lj_new < lj)
        eta = np.where(worse, np.maximum(eta * cfg.shrink_factor, cfg.min_step), eta)
        if np.any(bad):
            for v, b in zip(z_new, best):
                v[bad] = b[bad]
            lj_new = np.where(bad, best_lj, lj_new)
        warning = bad
        improved = lj_new > best_lj
        for b, v in zip(best, z_new):
            b[improved] = v[improved]
        best_lj = np.where(improved, lj_new, best_lj)
        z, lj = z_new, lj_new
        hist_best.append(best_lj.copy())
        hist_cur.append(lj.copy())
        hist_eta.append(eta.copy())

    if np.any(warning):
        log.warning("inference ended on a non-finite step for %d sample(s)", int(np.sum(warning)))
    trace = InferenceTrace(np.stack(hist_best), np.stack(hist_cur), np.stack(hist_eta), warning)
    return best, trace


@dataclass
class Amortizer:
    """Bottom-up network mapping an observation to initial latents.

    ``weights[k]`` maps node ``L - k`` to node ``L - k - 1`` (observation
    first), so layer dims mirror the generative model.
    """

    act: Activation
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    vel_w: list[np.ndarray] = field(default_factory=list)
    vel_b: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.vel_w:
            self.vel_w = [np.zeros_like(w) for w in self.weights]
            self.vel_b = [np.zeros_like(b) for b in self.biases]

    @classmethod
    def for_model(cls, model: GenerativeModel, rng: np.random.Generator | None = None) -> "Amortizer":
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = model.dims[::-1]
        weights, biases = [], []
        for k in range(len(dims) - 1):
            bound = math.sqrt(6.0 / (dims[k] + dims[k + 1]))
            weights.append(rng.uniform(-bound, bound, size=(dims[k + 1], dims[k])))
            biases.append(np.zeros(dims[k + 1]))
        return cls(model.activation, weights, biases)

    def copy(self) -> "Amortizer":
        return Amortizer(
            self.act,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [v.copy() for v in self.vel_w],
            [v.copy() for v in self.vel_b],
        )


def amortizer_init(am: Amortizer, x: np.ndarray) -> list[np.ndarray]:
    """Feedforward pass; returns latents ordered top layer first."""
    h = np.asarray(x, dtype=np.float64)
    outs = []
    for w, b in zip(am.weights, am.biases):
        h = activation(am.act, h @ w.T + b)
        outs.append(h)
    return outs[::-1]


def amortizer_loss(am: Amortizer, x: np.ndarray, z_map: list[np.ndarray]) -> float:
    """Sum over layers of the batch-mean of 0.5 * ||pred - target||^2."""
    inputs = [np.asarray(x)] + list(z_map[::-1])
    total = 0.0
    for k, (w, b) in enumerate(zip(am.weights, am.biases)):
        pred = activation(am.act, inputs[k] @ w.T + b)
        diff = (pred - inputs[k + 1]).reshape(-1, w.shape[0])
        total += 0.5 * float(np.mean(np.sum(diff**2, axis=-1)))
    return total


def amortizer_grads(am: Amortizer, x: np.ndarray, z_map: list[np.ndarray]):
    inputs = [np.asarray(x, dtype=np.float64)] + [np.asarray(v) for v in z_map[::-1]]
    gws, gbs = [], []
    for k, (w, b) in enumerate(zip(am.weights, am.biases)):
        inp = inputs[k].reshape(-1, w.shape[1])
        pre = inp @ w.T + b
        delta = (activation(am.act, pre) - inputs[k + 1].reshape(-1, w.shape[0])) * activation_deriv(am.act, pre)
        n = inp.shape[0]
        gws.append(delta.T @ inp / n)
        gbs.append(delta.sum(axis=0) / n)
    return gws, gbs


def amortizer_update(
    am: Amortizer, x: np.ndarray, z_map: list[np.ndarray], lr: float, momentum: float = 0.9
) -> Amortizer:
    """One SGD-momentum step per layer toward the MAP latents (in place).

    Each layer is fed the MAP value of the node beneath it, not the
    amortizer's own prediction, so layers learn independently.
    """
    gws, gbs = amortizer_grads(am, x, z_map)
    for k in range(len(am.weights)):
        am.vel_w[k] = momentum * am.vel_w[k] + gws[k]
        am.vel_b[k] = momentum * am.vel_b[k] + gbs[k]
        am.weights[k] -= lr * am.vel_w[k]
        am.biases[k] -= lr * am.vel_b[k]
    return am
