"""Hierarchical latent Gaussian generative model.

Nodes are numbered top-down: node 0 is the top latent layer with a fixed
N(0, I) prior, nodes 1..L-1 are lower latent layers and node L is the
observation. ``layers[l]`` predicts node ``l + 1`` from node ``l`` as
``W @ act(z) + b`` (plus ``z`` itself on skip layers), with diagonal Gaussian
noise of variance ``exp(log_vars[l])``.

All functions accept latents and observations with arbitrary leading batch
axes. Scalars such as the log joint come back with the batch shape.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import DimensionError, NumericError

LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Activation:
    kind: str = "leaky_relu"
    slope: float = 0.01

    def __post_init__(self):
        if self.kind not in ("leaky_relu", "tanh", "identity"):
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ValueError("leaky relu slope must lie in (0, 1)")

    @classmethod
    def parse(cls, name: str) -> "Activation":
        name = name.strip().lower().replace("-", "_")
        if name in ("leakyrelu", "lrelu"):
            name = "leaky_relu"
        return cls(name)


def activation(kind: Activation, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if kind.kind == "leaky_relu":
        return np.where(v >= 0, v, kind.slope * v)
    if kind.kind == "tanh":
        return np.tanh(v)
    return v.copy()


def activation_deriv(kind: Activation, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if kind.kind == "leaky_relu":
        # derivative at exactly 0 is taken from the right
        return np.where(v >= 0, 1.0, kind.slope)
    if kind.kind == "tanh":
        return 1.0 - np.tanh(v) ** 2
    return np.ones_like(v)


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: Activation
    skip: bool = False

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dims must be positive")
        if self.skip and self.in_dim != self.out_dim:
            raise ValueError("skip connections need equal in/out dims")


@dataclass
class ParamGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    log_vars: list[np.ndarray]

    def tensors(self):
        yield from self.weights
        yield from self.biases
        yield from self.log_vars

    def scaled(self, c: float) -> "ParamGrads":
        return ParamGrads(
            [c * w for w in self.weights], [c * b for b in self.biases], [c * v for v in self.log_vars]
        )


@dataclass
class GenerativeModel:
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    log_vars: list[np.ndarray]
    variance_mode: str = "fixed"
    var_min: float = 1e-3
    var_max: float = 2.0

    def __post_init__(self):
        if self.variance_mode not in ("fixed", "learned"):
            raise ValueError(f"unknown variance mode {self.variance_mode!r}")
        for l, spec in enumerate(self.layers):
            if self.weights[l].shape != (spec.out_dim, spec.in_dim):
                raise DimensionError(f"layer {l}: weight shape {self.weights[l].shape}")
            if self.biases[l].shape != (spec.out_dim,) or self.log_vars[l].shape != (spec.out_dim,):
                raise DimensionError(f"layer {l}: bias/log-variance shape mismatch")
        for l in range(1, len(self.layers)):
            if self.layers[l].in_dim != self.layers[l - 1].out_dim:
                raise DimensionError(f"layer {l} input does not match layer {l - 1} output")

    @classmethod
    def create(
        cls,
        dims: list[int],
        activation: Activation | str = "leaky_relu",
        variance_mode: str = "fixed",
        init_variance: float = 1.0,
        skip: bool | list[bool] | None = None,
        rng: np.random.Generator | None = None,
    ) -> "GenerativeModel":
        """Build a model for node sizes ``dims`` (top latent first, observation last).

        ``skip=None`` turns on skip connections wherever adjacent dims agree.
        Weights are drawn uniformly from +-sqrt(6 / (in + out)).
        """
        if len(dims) < 2:
            raise ValueError("need at least one latent layer and an observation")
        if isinstance(activation, str):
            activation = Activation.parse(activation)
        rng = rng if rng is not None else np.random.default_rng(0)
        n = len(dims) - 1
        if skip is None:
            skips = [dims[l] == dims[l + 1] for l in range(n)]
        elif isinstance(skip, bool):
            skips = [skip and dims[l] == dims[l + 1] for l in range(n)]
        else:
            skips = list(skip)
        layers = [LayerSpec(dims[l], dims[l + 1], activation, skips[l]) for l in range(n)]
        weights, biases, log_vars = [], [], []
        for spec in layers:
            bound = math.sqrt(6.0 / (spec.in_dim + spec.out_dim))
            weights.append(rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim)))
            biases.append(np.zeros(spec.out_dim))
            log_vars.append(np.full(spec.out_dim, math.log(init_variance)))
        return cls(layers, weights, biases, log_vars, variance_mode)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [s.out_dim for s in self.layers]

    @property
    def latent_dims(self) -> list[int]:
        return self.dims[:-1]

    @property
    def n_latent(self) -> int:
        return len(self.layers)

    @property
    def obs_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def activation(self) -> Activation:
        return self.layers[0].activation

    def variances(self, l: int) -> np.ndarray:
        return np.exp(self.log_vars[l])

    def precisions(self, l: int) -> np.ndarray:
        return np.exp(-self.log_vars[l])

    def copy(self) -> "GenerativeModel":
        return GenerativeModel(
            list(self.layers),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [v.copy() for v in self.log_vars],
            self.variance_mode,
            self.var_min,
            self.var_max,
        )

    def clamp_variances(self) -> None:
        if self.variance_mode != "learned":
            return
        lo, hi = math.log(self.var_min), math.log(self.var_max)
        for v in self.log_vars:
            np.clip(v, lo, hi, out=v)

    def zero_grads(self) -> ParamGrads:
        return ParamGrads(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            [np.zeros_like(v) for v in self.log_vars],
        )

    def check_state(self, z: list[np.ndarray], x: np.ndarray | None = None) -> None:
        if len(z) != self.n_latent:
            raise DimensionError(f"expected {self.n_latent} latent layers, got {len(z)}")
        for j, (zj, d) in enumerate(zip(z, self.latent_dims)):
            if np.shape(zj)[-1] != d:
                raise DimensionError(f"latent layer {j} has dim {np.shape(zj)[-1]}, expected {d}")
        if x is not None and np.shape(x)[-1] != self.obs_dim:
            raise DimensionError(f"observation has dim {np.shape(x)[-1]}, expected {self.obs_dim}")


def layer_predict(model: GenerativeModel, l: int, z_parent: np.ndarray) -> np.ndarray:
    spec = model.layers[l]
    z_parent = np.asarray(z_parent, dtype=np.float64)
    if z_parent.shape[-1] != spec.in_dim:
        raise DimensionError(f"layer {l} expects input dim {spec.in_dim}, got {z_parent.shape[-1]}")
    out = activation(spec.activation, z_parent) @ model.weights[l].T + model.biases[l]
    if spec.skip:
        out = out + z_parent
    return out


def layer_jacobian(model: GenerativeModel, l: int, z_parent: np.ndarray) -> np.ndarray:
    """d layer_predict / d z_parent, shape ``(..., out_dim, in_dim)``."""
    spec = model.layers[l]
    z_parent = np.asarray(z_parent, dtype=np.float64)
    jac = model.weights[l] * activation_deriv(spec.activation, z_parent)[..., None, :]
    if spec.skip:
        jac = jac + np.eye(spec.in_dim)
    return jac


def _nodes(z: list[np.ndarray], x: np.ndarray) -> list[np.ndarray]:
    return [np.asarray(v, dtype=np.float64) for v in z] + [np.asarray(x, dtype=np.float64)]


def residuals(model: GenerativeModel, z: list[np.ndarray], x: np.ndarray) -> list[np.ndarray]:
    """Prediction errors for every node, top prior first (its error is z_0 itself)."""
    nodes = _nodes(z, x)
    errs = [nodes[0]]
    for l in range(model.n_latent):
        errs.append(nodes[l + 1] - layer_predict(model, l, nodes[l]))
    return errs


def log_joint_terms(model: GenerativeModel, z: list[np.ndarray], x: np.ndarray) -> list[np.ndarray]:
    """Per-conditional Gaussian log densities, normalisation included."""
    errs = residuals(model, z, x)
    terms = [-0.5 * (np.sum(errs[0] ** 2, axis=-1) + errs[0].shape[-1] * LOG_2PI)]
    for l in range(model.n_latent):
        prec = model.precisions(l)
        terms.append(
            -0.5 * (np.sum(errs[l + 1] ** 2 * prec, axis=-1) + np.sum(model.log_vars[l]) + prec.size * LOG_2PI)
        )
    return terms


def log_joint(model: GenerativeModel, z: list[np.ndarray], x: np.ndarray, check: bool = True) -> np.ndarray:
    """log P(x, z) including all normalising constants.

    Raises ``NumericError`` naming the first non-finite conditional when
    ``check`` is set.
    """
    terms = log_joint_terms(model, z, x)
    if check:
        for j, t in enumerate(terms):
            if not np.all(np.isfinite(t)):
                raise NumericError(f"non-finite log density at layer {j}")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def grad_log_joint_latents(model: GenerativeModel, z: list[np.ndarray], x: np.ndarray) -> list[np.ndarray]:
    errs = residuals(model, z, x)
    nodes = _nodes(z, x)
    grads = [-errs[0]]
    for j in range(1, model.n_latent):
        grads.append(-errs[j] * model.precisions(j - 1))
    for j in range(model.n_latent):
        # the child of node j is node j + 1, predicted by layer j
        weighted = errs[j + 1] * model.precisions(j)
        jac = layer_jacobian(model, j, nodes[j])
        grads[j] = grads[j] + np.einsum("...o,...oi->...i", weighted, jac)
    return grads


def grad_log_joint_params(model: GenerativeModel, z: list[np.ndarray], x: np.ndarray) -> ParamGrads:
    """Gradients of the log joint summed over any leading batch axes.

    Log-variance gradients are zero in fixed-variance mode.
    """
    errs = residuals(model, z, x)
    nodes = _nodes(z, x)
    gw, gb, gv = [], [], []
    for l, spec in enumerate(model.layers):
        e = errs[l + 1].reshape(-1, spec.out_dim)
        a = activation(spec.activation, nodes[l]).reshape(-1, spec.in_dim)
        weighted = e * model.precisions(l)
        gw.append(weighted.T @ a)
        gb.append(weighted.sum(axis=0))
        if model.variance_mode == "learned":
            gv.append(0.5 * np.sum(e**2 * model.precisions(l) - 1.0, axis=0))
        else:
            gv.append(np.zeros(spec.out_dim))
    return ParamGrads(gw, gb, gv)


def forward_topdown(model: GenerativeModel, layer: int, z_fixed: np.ndarray, rng=None) -> list[np.ndarray]:
    """Propagate means down from a fixed node; returns nodes ``layer..L``.

    The last entry is the observation mean. ``rng`` is accepted for call-site
    symmetry with ancestral sampling and is not used.
    """
    z_fixed = np.asarray(z_fixed, dtype=np.float64)
    if z_fixed.shape[-1] != model.dims[layer]:
        raise DimensionError(f"node {layer} has dim {model.dims[layer]}, got {z_fixed.shape[-1]}")
    means = [z_fixed]
    for l in range(layer, model.n_latent):
        means.append(layer_predict(model, l, means[-1]))
    return means


def concat_latents(z: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(z, axis=-1)


def split_latents(flat: np.ndarray, dims: list[int]) -> list[np.ndarray]:
    return np.split(flat, np.cumsum(dims)[:-1], axis=-1)


def save_checkpoint(model: GenerativeModel, path: str | Path, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write an ``.npz`` container; floats are stored raw so reloads are bit-exact."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "dims": model.dims,
        "activation": model.activation.kind,
        "slope": model.activation.slope,
        "skip": [s.skip for s in model.layers],
        "variance_mode": model.variance_mode,
        "var_min": model.var_min,
        "var_max": model.var_max,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for l in range(model.n_latent):
        arrays[f"W{l}"] = model.weights[l]
        arrays[f"b{l}"] = model.biases[l]
        arrays[f"logvar{l}"] = model.log_vars[l]
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[GenerativeModel, dict[str, np.ndarray]]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        act = Activation(meta["activation"], meta["slope"])
        dims = meta["dims"]
        layers = [LayerSpec(dims[l], dims[l + 1], act, meta["skip"][l]) for l in range(len(dims) - 1)]
        n = len(layers)
        model = GenerativeModel(
            layers,
            [data[f"W{l}"].copy() for l in range(n)],
            [data[f"b{l}"].copy() for l in range(n)],
            [data[f"logvar{l}"].copy() for l in range(n)],
            meta["variance_mode"],
            meta["var_min"],
            meta["var_max"],
        )
        extra = {k[len("extra/"):]: data[k].copy() for k in data.files if k.startswith("extra/")}
    return model, extra
