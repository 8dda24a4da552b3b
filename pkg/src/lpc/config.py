"""Run configuration: flat ``key = value`` files with a typed schema.

Lines starting with ``#`` are comments. Presets 1-3 expand to the
activation / variance / combined triples of the reference experiments
before any explicit key is applied, so explicit keys win.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .inference import InferenceConfig
from .objectives import OBJECTIVES, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"field '{key}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key = key
        self.line = line


PRESETS = {
    1: {"activation": "leaky_relu", "variance_mode": "learned", "combined": True},
    2: {"activation": "tanh", "variance_mode": "fixed", "combined": True},
    3: {"activation": "tanh", "variance_mode": "fixed", "combined": False},
}


@dataclass
class RunConfig:
    objective: str = "pc"
    combined: bool = False
    preset: int | None = None
    K: int = 20
    pc_layers: list[int] | None = None

    activation: str = "tanh"
    variance_mode: str = "fixed"
    init_variance: float = 1.0
    latent_dims: list[int] = field(default_factory=lambda: [4, 8])
    skip: bool = True

    infer_steps: int = 150
    infer_step_size: float | None = None
    infer_shrink: float = 0.9
    infer_min_step: float = 1e-5

    lr: float | None = None
    momentum: float = 0.9
    amortizer_lr: float = 0.01
    batch_size: int = 64
    epochs: int = 20

    seed: int = 0
    eval_seed: int = 1
    eval_samples: int = 512
    eval_size: int = 256
    curvature_hessian: str = "full"

    dataset: str = "synthetic_chain"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    raw_path: str | None = None
    n_train: int | None = None
    n_heldout: int = 256
    synth_dims: list[int] = field(default_factory=lambda: [4, 8, 16])
    synth_weight_scale: float = 1.0
    synth_noise: float = 0.3
    synth_bias: float = 0.5
    synth_samples: int = 768
    synth_seed: int = 100

    image_width: int | None = None
    image_height: int | None = None
    out_dir: str | None = None
    threads: int | None = None

    def resolved(self) -> "RunConfig":
        """Copy with presets folded in, auto values filled and invariants checked."""
        cfg = dataclasses.replace(self)
        if cfg.objective not in OBJECTIVES:
            raise ConfigError(f"must be one of {', '.join(OBJECTIVES)}", "objective")
        if cfg.objective == "pc" and cfg.combined:
            raise ConfigError("combined mode is not defined for the PC objective", "combined")
        if cfg.activation not in ("leaky_relu", "tanh"):
            raise ConfigError("must be leaky_relu or tanh", "activation")
        if cfg.variance_mode not in ("fixed", "learned"):
            raise ConfigError("must be fixed or learned", "variance_mode")
        if cfg.dataset not in ("synthetic_chain", "synthetic_mixture", "idx", "raw"):
            raise ConfigError("must be synthetic_chain, synthetic_mixture, idx or raw", "dataset")
        if cfg.dataset == "idx" and not cfg.train_images:
            raise ConfigError("required when dataset = idx", "train_images")
        if cfg.dataset == "raw" and not cfg.raw_path:
            raise ConfigError("required when dataset = raw", "raw_path")
        if cfg.K < 1:
            raise ConfigError("must be >= 1", "K")
        if cfg.infer_steps < 1:
            raise ConfigError("must be >= 1", "infer_steps")
        if cfg.batch_size < 1:
            raise ConfigError("must be >= 1", "batch_size")
        if cfg.curvature_hessian not in ("full", "block"):
            raise ConfigError("must be full or block", "curvature_hessian")
        if cfg.infer_step_size is None:
            cfg.infer_step_size = 0.001 if cfg.activation == "leaky_relu" else 0.05
        if cfg.lr is None:
            cfg.lr = 0.0001 if cfg.activation == "leaky_relu" else 0.01
        return cfg

    def inference_config(self) -> InferenceConfig:
        return InferenceConfig(
            steps=self.infer_steps,
            step_size=self.infer_step_size,
            shrink_factor=self.infer_shrink,
            min_step=self.infer_min_step,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            objective=self.objective,
            combined=self.combined,
            K=self.K,
            pc_layers=None if self.pc_layers is None else tuple(self.pc_layers),
            infer=self.inference_config(),
            lr=self.lr,
            momentum=self.momentum,
            amortizer_lr=self.amortizer_lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            eval_seed=self.eval_seed,
            curvature_hessian=self.curvature_hessian,
        )

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, list):
                text = " ".join(str(v) for v in value)
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


def _field_types() -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(RunConfig)}


def parse_value(key: str, text: str, line: int | None = None):
    types = _field_types()
    if key not in types:
        raise ConfigError("unknown key", key, line)
    t = types[key]
    text = text.strip()
    if text.lower() in ("none", "") and "None" in t:
        return None
    try:
        if t.startswith("bool"):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if t.startswith("list[int]"):
            return [int(v) for v in text.replace(",", " ").split()]
        if t.startswith("int"):
            return int(text)
        if t.startswith("float"):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(str(exc), key, line) from None


def apply_preset(values: dict, preset: int) -> dict:
    if preset not in PRESETS:
        raise ConfigError("must be 1, 2 or 3", "preset")
    expanded = dict(PRESETS[preset])
    expanded.update(values)
    # the combined setting is a no-op for PC
    if expanded.get("objective", "pc") == "pc" and "combined" not in values:
        expanded["combined"] = False
    expanded["preset"] = preset
    return expanded


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", None, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, value, lineno)
    return values


def build_config(values: dict) -> RunConfig:
    values = dict(values)
    preset = values.get("preset")
    if preset is not None:
        values = apply_preset(values, preset)
    return RunConfig(**values).resolved()


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        values = parse_config_text(text)
    values.update(overrides or {})
    return build_config(values)
