"""Marginal likelihoods, bits/dim, curvature tracking, sampling and images."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .hessian import block_hessian, full_hessian
from .inference import Amortizer, InferenceConfig, amortizer_init, map_inference
from .model import LOG_2PI, GenerativeModel, concat_latents, forward_topdown, layer_predict, log_joint, split_latents
from .numerics import sample_mvn_from_precision

__all__ = [
    "EvalReport",
    "ImportanceEstimate",
    "analytic_laplace_elbo",
    "ancestral_sample",
    "bits_per_dim",
    "default_temps",
    "evaluate_dataset",
    "interpolate",
    "laplace_importance_ll",
    "read_pgm",
    "track_curvature",
    "write_pgm",
]


class EvaluationError(ArithmeticError):
    pass


def _initial_state(model: GenerativeModel, x: np.ndarray, am: Amortizer | None) -> list[np.ndarray]:
    if am is not None:
        return amortizer_init(am, x)
    return [np.zeros(x.shape[:-1] + (d,)) for d in model.latent_dims]


@dataclass
class ImportanceEstimate:
    ll: np.ndarray
    stderr: np.ndarray
    fallback: np.ndarray
    log_det: np.ndarray
    elbo: np.ndarray


def laplace_importance_ll(
    model: GenerativeModel,
    x: np.ndarray,
    S: int,
    infer_cfg: InferenceConfig,
    rng: np.random.Generator,
    am: Amortizer | None = None,
    temp: float = 1.0,
) -> ImportanceEstimate:
    """Importance-sampled log p(x) with the Laplace posterior as proposal.

    The proposal is N(z_map, He^-1) with He the full Hessian (identity where
    it is not positive definite). ``stderr`` is the delta-method standard
    error of the log of the mean weight. ``temp=0`` evaluates the single
    point at the mode.
    """
    if S < 1:
        raise ValueError("S must be positive")
    x = np.asarray(x, dtype=np.float64)
    z_map, _ = map_inference(model, x, _initial_state(model, x, am), infer_cfg)
    hess = full_hessian(model, z_map, x)
    mu = concat_latents(z_map)
    n = mu.shape[-1]
    samples = sample_mvn_from_precision(mu, hess.factor, temp, rng, size=(S,))
    # L^T (z - mu) is the standard normal draw that produced z
    white = np.einsum("...ji,...j->...i", hess.factor.lower, samples - mu)
    log_q = 0.5 * hess.log_det - 0.5 * np.sum(white**2, axis=-1) - 0.5 * n * LOG_2PI
    xs = np.broadcast_to(x, (S,) + x.shape)
    log_p = log_joint(model, split_latents(samples, model.latent_dims), xs, check=False)
    log_w = log_p - log_q
    if np.any(np.all(~np.isfinite(log_w), axis=0)):
        raise EvaluationError("all importance weights vanished for some sample")
    ll = logsumexp(log_w, axis=0) - math.log(S)
    w = np.exp(log_w - ll)
    stderr = np.std(w, axis=0) / math.sqrt(S)
    elbo = analytic_laplace_elbo(model, z_map, x, hess.log_det)
    return ImportanceEstimate(ll, stderr, hess.fallback, hess.log_det, elbo)


def bits_per_dim(ll_nats, D: int):
    """Bits per dimension for densities on [0,1)^D scaled up to 256 bins."""
    if D < 1:
        raise ValueError("D must be positive")
    return -np.asarray(ll_nats) / (D * math.log(2.0)) + 8.0


def analytic_laplace_elbo(model: GenerativeModel, z_map: list[np.ndarray], x: np.ndarray, log_det_he) -> np.ndarray:
    """log P(x, mu) + 0.5 * (N log 2pi - log det He)."""
    n = sum(model.latent_dims)
    return log_joint(model, z_map, x) + 0.5 * (n * LOG_2PI - np.asarray(log_det_he))


@dataclass
class CurvatureSummary:
    mean_logdet: float
    fallback_rate: float
    log_dets: np.ndarray


def track_curvature(
    model: GenerativeModel,
    heldout: np.ndarray,
    infer_cfg: InferenceConfig,
    am: Amortizer | None = None,
    hessian: str = "full",
) -> CurvatureSummary:
    """Mean log det of the Hessian at each held-out sample's MAP.

    Identity fallbacks contribute log det 0 and count toward the rate.
    """
    x = np.asarray(heldout, dtype=np.float64)
    z_map, _ = map_inference(model, x, _initial_state(model, x, am), infer_cfg)
    if hessian == "block":
        blocks = block_hessian(model, z_map)
        log_dets, fallback = blocks.log_det_total, blocks.fallback_flags
    else:
        hess = full_hessian(model, z_map, x)
        log_dets, fallback = hess.log_det, hess.fallback
    return CurvatureSummary(float(np.mean(log_dets)), float(np.mean(fallback)), log_dets)


def default_temps(model: GenerativeModel) -> list[float]:
    """One temperature per conditional, top prior first.

    Fixed-variance models sample at temp 1 except the bottom latent and the
    observation; learned-variance models only zero the observation.
    """
    n = model.n_latent + 1
    if model.variance_mode == "learned":
        return [1.0] * (n - 1) + [0.0]
    return [1.0] * max(n - 2, 0) + [0.0] * min(2, n)


def ancestral_sample(model: GenerativeModel, temps, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    temps = list(temps)
    if len(temps) != model.n_latent + 1:
        raise ValueError(f"need {model.n_latent + 1} temperatures, got {len(temps)}")
    h = np.zeros((n, model.dims[0]))
    if temps[0]:
        h = h + temps[0] * rng.standard_normal(h.shape)
    for l in range(model.n_latent):
        h = layer_predict(model, l, h)
        if temps[l + 1]:
            h = h + temps[l + 1] * np.sqrt(model.variances(l)) * rng.standard_normal(h.shape)
    return h


def interpolate(
    model: GenerativeModel,
    am: Amortizer | None,
    x_a: np.ndarray,
    x_b: np.ndarray,
    layer: int,
    steps: int,
    infer_cfg: InferenceConfig,
) -> np.ndarray:
    """Observation means along a straight line between two MAP latents."""
    if steps < 2:
        raise ValueError("steps must be at least 2")
    x = np.stack([np.asarray(x_a, dtype=np.float64), np.asarray(x_b, dtype=np.float64)])
    z_map, _ = map_inference(model, x, _initial_state(model, x, am), infer_cfg)
    t = np.linspace(0.0, 1.0, steps)[:, None]
    za, zb = z_map[layer]
    path = (1.0 - t) * za + t * zb
    return forward_topdown(model, layer, path)[-1]


def write_pgm(image: np.ndarray, width: int, height: int, path: str | Path) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64).reshape(height, width), 0.0, 1.0)
    data = np.rint(255.0 * img).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end : end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height = int(fields[1]), int(fields[2])
    pos += 1
    return np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=pos).reshape(height, width)


@dataclass
class EvalReport:
    mean_bpd: float
    bpd_stderr: float
    mean_ll: float
    mean_logdet_he: float
    psd_fallback_rate: float
    n_samples: int
    importance_sample_count: int
    exact_bpd: float | None = None

    def write_csv(self, path: str | Path) -> None:
        row = asdict(self)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow({k: "" if v is None else repr(v) for k, v in row.items()})


def evaluate_dataset(
    model: GenerativeModel,
    x: np.ndarray,
    S: int,
    infer_cfg: InferenceConfig,
    rng: np.random.Generator,
    am: Amortizer | None = None,
    batch_size: int = 256,
    exact_log_marginal=None,
) -> EvalReport:
    """Laplace importance-sampled bits/dim over ``x``, in fixed batch order."""
    x = np.asarray(x, dtype=np.float64)
    D = x.shape[-1]
    lls, log_dets, fallbacks = [], [], []
    for start in range(0, len(x), batch_size):
        est = laplace_importance_ll(model, x[start : start + batch_size], S, infer_cfg, rng, am)
        lls.append(est.ll)
        log_dets.append(est.log_det)
        fallbacks.append(est.fallback)
    ll = np.concatenate(lls)
    bpd = bits_per_dim(ll, D)
    exact = None
    if exact_log_marginal is not None:
        exact = float(np.mean(bits_per_dim(exact_log_marginal(x), D)))
    return EvalReport(
        mean_bpd=float(np.mean(bpd)),
        bpd_stderr=float(np.std(bpd) / math.sqrt(len(bpd))),
        mean_ll=float(np.mean(ll)),
        mean_logdet_he=float(np.mean(np.concatenate(log_dets))),
        psd_fallback_rate=float(np.mean(np.concatenate(fallbacks))),
        n_samples=len(x),
        importance_sample_count=S,
        exact_bpd=exact,
    )
