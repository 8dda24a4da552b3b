"""Curvature of the negative log joint with respect to the latents.

``block_hessian`` builds the per-layer Gauss-Newton style blocks
``diag(1/var_j) + J^T diag(1/var_child) J``, which are Gram matrices and
therefore PSD. ``full_hessian`` differentiates the analytic latent gradient
numerically and falls back to the identity for samples whose Hessian does not
factor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import GenerativeModel, concat_latents, grad_log_joint_latents, layer_jacobian, split_latents
from .numerics import CholFactor, NumericError, cholesky, default_fd_step, log_det_psd, max_eigenvalue, symmetrize

log = logging.getLogger(__name__)


@dataclass
class HessianBlocks:
    layers: list[int]
    blocks: list[np.ndarray]
    factors: list[CholFactor]
    fallback_flags: np.ndarray

    @property
    def log_dets(self) -> list[np.ndarray]:
        return [log_det_psd(f) for f in self.factors]

    @property
    def log_det_total(self) -> np.ndarray:
        return sum(self.log_dets)


@dataclass
class FullHessian:
    layers: list[int]
    matrix: np.ndarray
    factor: CholFactor
    fallback: np.ndarray

    @property
    def log_det(self) -> np.ndarray:
        return log_det_psd(self.factor)


def _own_precision(model: GenerativeModel, j: int) -> np.ndarray:
    return np.ones(model.latent_dims[0]) if j == 0 else model.precisions(j - 1)


def block_hessian(model: GenerativeModel, z: list[np.ndarray], layers: list[int] | None = None) -> HessianBlocks:
    """Block-diagonal PSD Hessian approximation, one block per latent layer.

    ``layers`` restricts which blocks are built (the combined objective skips
    the layers it holds at their MAP values).
    """
    layers = list(range(model.n_latent)) if layers is None else sorted(layers)
    blocks, factors = [], []
    for j in layers:
        zj = np.asarray(z[j], dtype=np.float64)
        jac = layer_jacobian(model, j, zj)
        gram = np.einsum("...oi,o,...ok->...ik", jac, model.precisions(j), jac)
        block = symmetrize(gram + np.diag(_own_precision(model, j)))
        factor = cholesky(block)
        if not np.all(factor.ok):
            raise NumericError(f"block {j} failed to factor; check for non-finite parameters")
        blocks.append(block)
        factors.append(factor)
    batch = np.shape(z[0])[:-1]
    return HessianBlocks(layers, blocks, factors, np.zeros(batch, dtype=bool))


def full_hessian(
    model: GenerativeModel,
    z: list[np.ndarray],
    x: np.ndarray,
    layers: list[int] | None = None,
) -> FullHessian:
    """Dense Hessian of -log P over the latents of ``layers`` (all by default).

    Columns come from central differences of the analytic gradient; every
    perturbation of every sample is evaluated in one batched gradient call.
    Samples whose symmetrised Hessian fails to factor get the identity.
    """
    layers = list(range(model.n_latent)) if layers is None else sorted(layers)
    z = [np.asarray(v, dtype=np.float64) for v in z]
    x = np.asarray(x, dtype=np.float64)
    sub_dims = [model.latent_dims[j] for j in layers]
    n = sum(sub_dims)
    flat = concat_latents([z[j] for j in layers])
    steps = default_fd_step(flat)

    # perturbed copies: axis 0 runs over +e_0..+e_{n-1}, -e_0..-e_{n-1}
    eye = np.eye(n)
    pert = np.broadcast_to(flat, (2 * n,) + flat.shape).copy()
    for i in range(n):
        pert[i, ..., i] += steps[..., i]
        pert[n + i, ..., i] -= steps[..., i]

    zs = [np.broadcast_to(v, (2 * n,) + v.shape) for v in z]
    for j, part in zip(layers, split_latents(pert, sub_dims)):
        zs[j] = part
    grads = grad_log_joint_latents(model, zs, np.broadcast_to(x, (2 * n,) + x.shape))
    g = concat_latents([grads[j] for j in layers])  # (2n, *batch, n)
    cols = -(g[:n] - g[n:]) / (2.0 * np.moveaxis(steps, -1, 0)[..., None])
    # cols[i] is d(-grad)/d z_i, i.e. row i of the Hessian
    hess = np.moveaxis(cols, 0, -2)
    if not np.all(np.isfinite(hess)):
        raise NumericError("non-finite entries in full Hessian")
    hess = symmetrize(hess)
    factor = cholesky(hess)
    fallback = ~np.asarray(factor.ok)
    if np.any(fallback):
        hess = np.where(fallback[..., None, None], eye, hess)
        lower = np.where(fallback[..., None, None], eye, factor.lower)
        factor = CholFactor(lower, np.ones_like(factor.ok))
    return FullHessian(layers, hess, factor, fallback)


def sharpness(h) -> float | np.ndarray:
    """Largest eigenvalue; for block input the max over blocks."""
    if isinstance(h, HessianBlocks):
        return np.max(np.stack([max_eigenvalue(b) for b in h.blocks]), axis=0)
    if isinstance(h, FullHessian):
        return max_eigenvalue(h.matrix)
    return max_eigenvalue(h)


def assemble_block_diagonal(blocks: HessianBlocks) -> np.ndarray:
    """Dense block-diagonal matrix with the blocks laid out in layer order."""
    dims = [b.shape[-1] for b in blocks.blocks]
    n = sum(dims)
    batch = blocks.blocks[0].shape[:-2]
    out = np.zeros(batch + (n, n))
    o = 0
    for b, d in zip(blocks.blocks, dims):
        out[..., o : o + d, o : o + d] = b
        o += d
    return out
