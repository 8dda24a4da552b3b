import math

import numpy as np
import pytest

from lpc.model import Activation, GenerativeModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_model(rng, dims, act="tanh", variance_mode="learned", skip=None, weight_scale=1.0):
    """Model with random weights, biases and per-coordinate variances."""
    model = GenerativeModel.create(list(dims), act, variance_mode, skip=skip, rng=rng)
    for l in range(model.n_latent):
        model.weights[l] *= weight_scale
        model.biases[l][:] = rng.normal(0.0, 0.5, size=model.biases[l].shape)
        model.log_vars[l][:] = rng.uniform(math.log(0.3), math.log(1.5), size=model.log_vars[l].shape)
    return model


def random_state(rng, model, batch=(), scale=1.0):
    z = [scale * rng.normal(size=batch + (d,)) for d in model.latent_dims]
    x = scale * rng.normal(size=batch + (model.obs_dim,))
    return z, x


def linear_model(rng, dims, weight_scale=0.5, var_range=(0.5, 1.5), skip=False):
    model = GenerativeModel.create(list(dims), Activation("identity"), "fixed", skip=skip, rng=rng)
    for l in range(model.n_latent):
        model.weights[l] = rng.normal(0.0, weight_scale / math.sqrt(dims[l]), size=model.weights[l].shape)
        model.biases[l][:] = rng.normal(0.0, 0.5, size=model.biases[l].shape)
        model.log_vars[l][:] = np.log(rng.uniform(*var_range, size=model.log_vars[l].shape))
    return model


def joint_gaussian(model):
    """Mean and covariance over all nodes (latents then observation) of a linear model.

    Built by writing every node as an affine map of independent unit noises,
    without touching the model's gradient or Hessian code.
    """
    dims = model.dims
    total = sum(dims)
    offsets = np.concatenate([[0], np.cumsum(dims)])
    T = np.zeros((total, total))
    c = np.zeros(total)
    T[: dims[0], : dims[0]] = np.eye(dims[0])
    for l, spec in enumerate(model.layers):
        M = model.weights[l] + (np.eye(spec.in_dim) if spec.skip else 0.0)
        src = slice(offsets[l], offsets[l + 1])
        dst = slice(offsets[l + 1], offsets[l + 2])
        T[dst] = M @ T[src]
        T[dst, dst] += np.diag(np.sqrt(model.variances(l)))
        c[dst] = M @ c[src] + model.biases[l]
    return c, T @ T.T


def gaussian_posterior(model, x):
    """Posterior mean and covariance of the concatenated latents given x."""
    mean, cov = joint_gaussian(model)
    n = sum(model.latent_dims)
    czz, czx, cxx = cov[:n, :n], cov[:n, n:], cov[n:, n:]
    gain = np.linalg.solve(cxx, czx.T).T
    post_mean = mean[:n] + gain @ (x - mean[n:])
    post_cov = czz - gain @ czx.T
    return post_mean, 0.5 * (post_cov + post_cov.T)


def gaussian_log_marginal(model, x):
    mean, cov = joint_gaussian(model)
    n = sum(model.latent_dims)
    m, c = mean[n:], cov[n:, n:]
    d = x - m
    _, logdet = np.linalg.slogdet(c)
    return -0.5 * (d @ np.linalg.solve(c, d) + logdet + len(d) * math.log(2 * math.pi))
