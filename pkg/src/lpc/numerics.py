"""Dense symmetric linear algebra, Gaussian sampling and finite differences.

Everything here is float64. Matrices may carry leading batch axes; the
trailing two axes are the matrix dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class CholFactor:
    """Lower-triangular factor of a symmetric positive definite matrix.

    ``lower`` has shape ``(..., n, n)``; ``ok`` flags which matrices in the
    batch factored successfully. Rows of failed entries are left as zeros.
    """

    lower: np.ndarray
    ok: np.ndarray

    @property
    def n(self) -> int:
        return self.lower.shape[-1]

    @property
    def log_det_source(self) -> np.ndarray:
        return log_det_psd(self)


def make_rng(seed: int | np.random.SeedSequence | None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child streams, deterministic given the parent's state."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


def symmetrize(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise DimensionError(f"expected square matrix, got shape {m.shape}")
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def cholesky(s: np.ndarray) -> CholFactor:
    """Column Cholesky with a relative pivot test.

    A matrix is declared not PSD when some pivot falls to or below
    ``1e-12 * max(1, max diagonal)``. Works on stacks of matrices; the
    returned ``ok`` array has the batch shape (a scalar bool for one matrix).
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim < 2 or s.shape[-1] != s.shape[-2]:
        raise DimensionError(f"expected square matrix, got shape {s.shape}")
    n = s.shape[-1]
    batch = s.shape[:-2]
    a = s.reshape(-1, n, n)
    lower = np.zeros_like(a)
    ok = np.ones(a.shape[0], dtype=bool)
    tol = 1e-12 * np.maximum(1.0, np.max(np.diagonal(a, axis1=1, axis2=2), axis=1))
    for j in range(n):
        lj = lower[:, j, :j]
        pivot = a[:, j, j] - np.einsum("bk,bk->b", lj, lj)
        ok &= pivot > tol
        d = np.sqrt(np.where(ok, pivot, 1.0))
        lower[:, j, j] = d
        if j + 1 < n:
            below = a[:, j + 1 :, j] - np.einsum("bik,bk->bi", lower[:, j + 1 :, :j], lj)
            lower[:, j + 1 :, j] = below / d[:, None]
    lower[~ok] = 0.0
    return CholFactor(lower.reshape(s.shape), ok.reshape(batch))


def log_det_psd(f: CholFactor) -> np.ndarray:
    diag = np.diagonal(f.lower, axis1=-2, axis2=-1)
    with np.errstate(divide="ignore"):
        return 2.0 * np.sum(np.log(diag), axis=-1)


def min_eigenvalue(s: np.ndarray) -> np.ndarray:
    return np.linalg.eigvalsh(symmetrize(s))[..., 0]


def max_eigenvalue(s: np.ndarray) -> np.ndarray:
    return -min_eigenvalue(-np.asarray(s, dtype=np.float64))


def solve_upper_transpose(lower: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``lower^T y = rhs`` by back substitution.

    ``lower`` is ``(..., n, n)``; ``rhs`` is ``(..., n)`` and may carry extra
    leading axes that broadcast against the factor's batch axes.
    """
    n = lower.shape[-1]
    y = np.array(np.broadcast_to(rhs, np.broadcast_shapes(rhs.shape, lower.shape[:-1])),
                 dtype=np.float64)
    for i in range(n - 1, -1, -1):
        # row i of L^T is column i of L
        acc = np.sum(lower[..., i + 1 :, i] * y[..., i + 1 :], axis=-1)
        y[..., i] = (y[..., i] - acc) / lower[..., i, i]
    return y


def sample_mvn_from_precision(
    mean: np.ndarray,
    prec_factor: CholFactor,
    temp: float,
    rng: np.random.Generator,
    size: tuple[int, ...] = (),
) -> np.ndarray:
    """Draw from N(mean, temp^2 * P^-1) given the Cholesky factor of P.

    ``size`` prepends sample axes. With ``temp == 0`` the mean is returned
    unchanged and no random numbers are consumed.
    """
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape[-1] != prec_factor.n:
        raise DimensionError(f"mean has dim {mean.shape[-1]}, factor has {prec_factor.n}")
    out_shape = tuple(size) + np.broadcast_shapes(mean.shape, prec_factor.lower.shape[:-1])
    if temp == 0:
        return np.array(np.broadcast_to(mean, out_shape))
    eps = rng.standard_normal(out_shape)
    return mean + temp * solve_upper_transpose(prec_factor.lower, eps)


def default_fd_step(x: np.ndarray) -> np.ndarray:
    return 1e-4 * (1.0 + np.abs(x))


def fd_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float | np.ndarray | None = None
) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    steps = default_fd_step(x) if h is None else np.broadcast_to(h, x.shape)
    grad = np.empty_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[i] += steps[i]
        xm[i] -= steps[i]
        fp, fm = float(f(xp)), float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * steps[i])
    return grad


def fd_hessian(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float | np.ndarray | None = None
) -> np.ndarray:
    """Central-difference Hessian of a scalar function of a vector."""
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    steps = default_fd_step(x) if h is None else np.broadcast_to(h, x.shape)

    def val(dx):
        v = float(f(x + dx))
        if not np.isfinite(v):
            raise NumericError("non-finite function value in fd_hessian")
        return v

    hess = np.empty((n, n))
    f0 = val(np.zeros(n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = steps[i]
        hess[i, i] = (val(ei) - 2.0 * f0 + val(-ei)) / steps[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = steps[j]
            hess[i, j] = (
                val(ei + ej) - val(ei - ej) - val(-ei + ej) + val(-ei - ej)
            ) / (4.0 * steps[i] * steps[j])
            hess[j, i] = hess[i, j]
    return symmetrize(hess)


def fd_jacobian(
    f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float | np.ndarray | None = None
) -> np.ndarray:
    """Central-difference Jacobian of a vector function; rows index outputs."""
    x = np.asarray(x, dtype=np.float64)
    steps = default_fd_step(x) if h is None else np.broadcast_to(h, x.shape)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = steps[i]
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * steps[i]))
    return np.stack(cols, axis=-1)

