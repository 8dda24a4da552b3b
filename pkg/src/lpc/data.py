"""Datasets: IDX ingestion, dequantisation, synthetic benchmarks, batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.stats import multivariate_normal

from .model import Activation, GenerativeModel, LayerSpec, layer_predict

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Observation vectors, optionally backed by raw 8-bit pixels.

    When ``raw`` is present the continuous values are regenerated by
    dequantisation; ``values`` then holds a fixed-noise copy used for
    evaluation. Synthetic data has no raw pixels and is used as is.
    """

    values: np.ndarray
    raw: np.ndarray | None = None
    labels: np.ndarray | None = None
    split: str = "train"

    def __len__(self) -> int:
        return len(self.values)

    @property
    def D(self) -> int:
        return self.values.shape[-1]

    def observations(self, rng: np.random.Generator) -> np.ndarray:
        """Fresh dequantisation noise for training, or the fixed values."""
        if self.raw is None:
            return self.values
        return dequantize(self.raw, rng)

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.values[idx],
            None if self.raw is None else self.raw[idx],
            None if self.labels is None else self.labels[idx],
            self.split,
        )


def dequantize(raw: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """(v + u) / 256 with u ~ U[0, 1) per coordinate."""
    raw = np.asarray(raw)
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise ValueError("pixel values must lie in 0..255")
    v = raw.astype(np.float64)
    out = (v + rng.random(raw.shape)) / 256.0
    # v + u can round up to v + 1 for u close to 1; keep each value inside its cell
    return np.minimum(out, np.nextafter((v + 1.0) / 256.0, 0.0))


def from_raw(raw: np.ndarray, eval_seed: int, labels=None, split: str = "train") -> Dataset:
    raw = np.asarray(raw, dtype=np.uint8).reshape(len(raw), -1)
    return Dataset(dequantize(raw, np.random.default_rng(eval_seed)), raw, labels, split)


def _read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise DataFormatError(f"{path}: truncated header at byte offset {len(blob)}")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise DataFormatError(f"{path}: truncated header at byte offset {len(blob)}")
    shape = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) < header + count:
        raise DataFormatError(f"{path}: truncated payload at byte offset {len(blob)}, expected {header + count}")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=header).reshape(shape)


def load_idx(images_path: str | Path, labels_path: str | Path | None = None, eval_seed: int = 0) -> Dataset:
    """Read IDX images (and labels); pixels are flattened per sample."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    raw = images.reshape(images.shape[0], -1).copy()
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC).copy()
        if len(labels) != len(raw):
            raise DataFormatError(f"{labels_path}: {len(labels)} labels for {len(raw)} images")
    return from_raw(raw, eval_seed, labels)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def write_raw_tensor(path: str | Path, array: np.ndarray) -> None:
    """Header line ``dims: d0 d1 ...`` then little-endian float64 payload."""
    array = np.asarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(("dims: " + " ".join(str(d) for d in array.shape) + "\n").encode())
        fh.write(array.tobytes())


def read_raw_tensor(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    if nl < 0 or not blob.startswith(b"dims:"):
        raise DataFormatError(f"{path}: missing 'dims:' header line")
    shape = tuple(int(t) for t in blob[5:nl].split())
    count = int(np.prod(shape, dtype=np.int64))
    payload = blob[nl + 1 :]
    if len(payload) != 8 * count:
        raise DataFormatError(f"{path}: payload has {len(payload)} bytes, expected {8 * count}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


@dataclass(frozen=True)
class SyntheticSpec:
    """``kind`` is ``"chain"`` (linear-Gaussian hierarchy) or ``"mixture"``."""

    kind: str = "chain"
    dims: tuple[int, ...] = (2, 4, 8)
    weight_scale: float = 1.0
    noise_scale: float = 0.1
    bias: float = 0.5
    components: int = 4
    n_samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("chain", "mixture"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if any(d < 1 for d in self.dims):
            raise ValueError("dims must be positive")


@dataclass
class SyntheticTruth:
    model: GenerativeModel | None
    mean: np.ndarray
    cov: np.ndarray | None

    def log_marginal(self, x: np.ndarray) -> np.ndarray:
        if self.cov is None:
            raise ValueError("no closed-form marginal for this dataset")
        return np.asarray(multivariate_normal(self.mean, self.cov).logpdf(x))


def linear_chain_model(
    dims, rng: np.random.Generator, weight_scale: float = 1.0, noise_scale: float = 0.1, bias: float = 0.0
) -> GenerativeModel:
    """Identity-activation model; weights ~ N(0, weight_scale^2 / in_dim)."""
    act = Activation("identity")
    n = len(dims) - 1
    layers = [LayerSpec(dims[l], dims[l + 1], act, False) for l in range(n)]
    weights = [rng.normal(0.0, weight_scale / np.sqrt(dims[l]), size=(dims[l + 1], dims[l])) for l in range(n)]
    biases = [np.full(dims[l + 1], bias if l == n - 1 else 0.0) for l in range(n)]
    log_vars = [np.full(dims[l + 1], 2.0 * np.log(noise_scale if l == n - 1 else 1.0)) for l in range(n)]
    return GenerativeModel(layers, weights, biases, log_vars)


def linear_gaussian_marginal(model: GenerativeModel) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the observation under an all-linear model."""
    if any(s.activation.kind != "identity" for s in model.layers):
        raise ValueError("closed-form marginal needs identity activations")
    mean = np.zeros(model.dims[0])
    cov = np.eye(model.dims[0])
    for l, spec in enumerate(model.layers):
        m = model.weights[l] + (np.eye(spec.in_dim) if spec.skip else 0.0)
        mean = m @ mean + model.biases[l]
        cov = m @ cov @ m.T + np.diag(model.variances(l))
    return mean, cov


def ancestral_draw(model: GenerativeModel, n: int, rng: np.random.Generator) -> np.ndarray:
    h = rng.standard_normal((n, model.dims[0]))
    for l in range(model.n_latent):
        h = layer_predict(model, l, h) + np.sqrt(model.variances(l)) * rng.standard_normal((n, model.dims[l + 1]))
    return h


def make_synthetic(spec: SyntheticSpec, rng: np.random.Generator | None = None) -> tuple[Dataset, SyntheticTruth]:
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    if spec.kind == "chain":
        truth = linear_chain_model(spec.dims, rng, spec.weight_scale, spec.noise_scale, spec.bias)
        x = ancestral_draw(truth, spec.n_samples, rng)
        mean, cov = linear_gaussian_marginal(truth)
        return Dataset(x), SyntheticTruth(truth, mean, cov)
    dim = spec.dims[-1]
    centres = spec.bias + spec.weight_scale * rng.standard_normal((spec.components, dim))
    which = rng.integers(spec.components, size=spec.n_samples)
    x = centres[which] + spec.noise_scale * rng.standard_normal((spec.n_samples, dim))
    return Dataset(x, labels=which), SyntheticTruth(None, centres.mean(axis=0), None)


def batches(n: int, batch_size: int, shuffle_rng: np.random.Generator | None) -> Iterator[np.ndarray]:
    """Index blocks over a fresh permutation; the last partial block is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.arange(n) if shuffle_rng is None else shuffle_rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
