"""Command-line entry point: ``lpc train|eval|sample|interp|hessian-check``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from .config import ConfigError, RunConfig, load_config, parse_value
from .evaluate import ancestral_sample, default_temps, evaluate_dataset, interpolate, write_pgm
from .hessian import assemble_block_diagonal, block_hessian, full_hessian
from .inference import Amortizer, amortizer_init, map_inference
from .model import GenerativeModel, load_checkpoint, save_checkpoint
from .numerics import make_rng, min_eigenvalue
from .objectives import train

log = logging.getLogger("lpc")

EXIT_USAGE = 2
EXIT_DIM_MISMATCH = 3

METRIC_FIELDS = [
    "epoch",
    "objective_kind",
    "mean_objective",
    "heldout_logdet_mean",
    "psd_fallback_rate",
    "heldout_fallback_rate",
]


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def load_data(cfg: RunConfig):
    """Returns (train dataset, held-out observations, exact log-marginal or None)."""
    truth = None
    if cfg.dataset.startswith("synthetic"):
        spec = datamod.SyntheticSpec(
            kind="chain" if cfg.dataset == "synthetic_chain" else "mixture",
            dims=tuple(cfg.synth_dims),
            weight_scale=cfg.synth_weight_scale,
            noise_scale=cfg.synth_noise,
            bias=cfg.synth_bias,
            n_samples=cfg.synth_samples + cfg.n_heldout,
            seed=cfg.synth_seed,
        )
        full, truth = datamod.make_synthetic(spec)
        train_ds = full.subset(slice(0, cfg.synth_samples))
        heldout = full.values[cfg.synth_samples :]
    else:
        path = cfg.train_images if cfg.dataset == "idx" else cfg.raw_path
        key = "train_images" if cfg.dataset == "idx" else "raw_path"
        if not Path(path).exists():
            raise CliError(f"field '{key}': no such file {path}")
        if cfg.dataset == "idx":
            full = datamod.load_idx(path, cfg.train_labels, cfg.eval_seed)
        else:
            arr = datamod.read_raw_tensor(path)
            full = datamod.Dataset(arr.reshape(len(arr), -1))
        if cfg.test_images:
            if not Path(cfg.test_images).exists():
                raise CliError(f"field 'test_images': no such file {cfg.test_images}")
            heldout = datamod.load_idx(cfg.test_images, None, cfg.eval_seed).values[: cfg.n_heldout]
            train_ds = full
        else:
            train_ds = full.subset(slice(0, max(len(full) - cfg.n_heldout, 1)))
            heldout = full.values[len(train_ds) :]
    if cfg.n_train is not None:
        train_ds = train_ds.subset(slice(0, cfg.n_train))
    exact = truth.log_marginal if truth is not None and truth.cov is not None else None
    return train_ds, heldout, exact


def build_model(cfg: RunConfig, obs_dim: int) -> tuple[GenerativeModel, Amortizer]:
    rng = make_rng(cfg.seed)
    model = GenerativeModel.create(
        list(cfg.latent_dims) + [obs_dim],
        cfg.activation,
        cfg.variance_mode,
        cfg.init_variance,
        skip=cfg.skip,
        rng=rng,
    )
    return model, Amortizer.for_model(model, rng)


def save_run_checkpoint(path: Path, model: GenerativeModel, am: Amortizer) -> None:
    extra = {}
    for k, (w, b) in enumerate(zip(am.weights, am.biases)):
        extra[f"am_W{k}"] = w
        extra[f"am_b{k}"] = b
    save_checkpoint(model, path, extra)


def load_run_checkpoint(path: str | Path) -> tuple[GenerativeModel, Amortizer | None]:
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    model, extra = load_checkpoint(path)
    n = len([k for k in extra if k.startswith("am_W")])
    am = None
    if n:
        am = Amortizer(model.activation, [extra[f"am_W{k}"] for k in range(n)], [extra[f"am_b{k}"] for k in range(n)])
    return model, am


def _image_shape(cfg: RunConfig, D: int) -> tuple[int, int]:
    if cfg.image_width and cfg.image_height:
        return cfg.image_width, cfg.image_height
    side = math.isqrt(D)
    return (side, side) if side * side == D else (D, 1)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.out_dir or os.environ.get("LPC_OUT_DIR")
    if not out:
        raise CliError("no output directory: pass --out, set out_dir, or set LPC_OUT_DIR")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _overrides(args) -> dict:
    out = {}
    for key in ("preset", "seed", "objective", "epochs", "threads"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    if getattr(args, "combined", None) is not None:
        out["combined"] = parse_value("combined", args.combined)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(key.strip(), value)
    return out


def _config_for_checkpoint(args) -> RunConfig:
    path = args.config
    if path is None:
        guess = Path(args.checkpoint).resolve().parent.parent / "config.resolved"
        path = guess if guess.is_file() else None
    return load_config(path, _overrides(args))


def _check_dims(model: GenerativeModel, D: int) -> None:
    if model.obs_dim != D:
        raise CliError(f"checkpoint observation dim {model.obs_dim} does not match dataset dim {D}", EXIT_DIM_MISMATCH)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = _out_dir(args, cfg)
    train_ds, heldout, _ = load_data(cfg)
    model, am = build_model(cfg, train_ds.D)
    (out / "config.resolved").write_text(cfg.dumps())
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    metrics_fh = open(out / "metrics.csv", "w", newline="")
    timing_fh = open(out / "timing.csv", "w", newline="")
    with metrics_fh, timing_fh:
        metrics = csv.DictWriter(metrics_fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        metrics.writeheader()
        timing = csv.writer(timing_fh)
        timing.writerow(["epoch", "wall_seconds"])

        def on_epoch(epoch, record):
            metrics.writerow({k: _fmt(record.get(k, "")) for k in METRIC_FIELDS})
            metrics_fh.flush()
            timing.writerow([record["epoch"], f"{record['wall_seconds']:.3f}"])
            save_run_checkpoint(ckpt_dir / f"epoch_{epoch + 1:03d}.npz", model, am)

        train(model, am, train_ds, cfg.train_config(), heldout, on_epoch)

    save_run_checkpoint(ckpt_dir / "final.npz", model, am)
    report = evaluate_dataset(
        model, heldout[: cfg.eval_size], cfg.eval_samples, cfg.inference_config(), make_rng(cfg.eval_seed), am
    )
    report.write_csv(out / "eval.csv")
    print(f"final held-out bpd {report.mean_bpd:.4f} +- {report.bpd_stderr:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_for_checkpoint(args)
    model, am = load_run_checkpoint(args.checkpoint)
    _, heldout, _ = load_data(cfg)
    _check_dims(model, heldout.shape[-1])
    exact = None
    if args.exact:
        try:
            mean, cov = datamod.linear_gaussian_marginal(model)
        except ValueError:
            raise CliError("--exact needs a checkpoint with identity activations (closed-form marginal)") from None
        exact = datamod.SyntheticTruth(model, mean, cov).log_marginal
    S = args.samples or cfg.eval_samples
    n = args.n or cfg.eval_size
    report = evaluate_dataset(
        model, heldout[:n], S, cfg.inference_config(), make_rng(cfg.eval_seed), am,
        exact_log_marginal=exact,
    )
    out = _out_dir(args, cfg)
    report.write_csv(out / "eval.csv")
    print(f"estimated bpd {report.mean_bpd:.6f} (S={S}, n={n}, fallback rate {report.psd_fallback_rate:.3f})")
    if args.exact:
        print(f"exact bpd     {report.exact_bpd:.6f}  |delta| = {abs(report.exact_bpd - report.mean_bpd):.6f}")
    return 0


def _parse_temps(text: str | None, model: GenerativeModel) -> list[float]:
    if text is None:
        return default_temps(model)
    temps = [float(t) for t in text.replace(",", " ").split()]
    if len(temps) != model.n_latent + 1:
        raise CliError(f"--temps needs {model.n_latent + 1} values (one per conditional)")
    return temps


def cmd_sample(args) -> int:
    cfg = _config_for_checkpoint(args)
    model, _ = load_run_checkpoint(args.checkpoint)
    temps = _parse_temps(args.temps, model)
    xs = ancestral_sample(model, temps, make_rng(cfg.seed), args.n)
    out = _out_dir(args, cfg) / "images"
    w, h = _image_shape(cfg, model.obs_dim)
    for i, x in enumerate(xs):
        write_pgm(x, w, h, out / f"sample_{i}.pgm")
    print(f"wrote {len(xs)} samples to {out}")
    return 0


def cmd_interp(args) -> int:
    cfg = _config_for_checkpoint(args)
    model, am = load_run_checkpoint(args.checkpoint)
    _, heldout, _ = load_data(cfg)
    _check_dims(model, heldout.shape[-1])
    for name, idx in (("a", args.a), ("b", args.b)):
        if not 0 <= idx < len(heldout):
            raise CliError(f"--{name} index {idx} out of range 0..{len(heldout) - 1}")
    if not 0 <= args.layer < model.n_latent:
        raise CliError(f"--layer must lie in 0..{model.n_latent - 1}")
    means = interpolate(model, am, heldout[args.a], heldout[args.b], args.layer, args.steps, cfg.inference_config())
    out = _out_dir(args, cfg) / "images"
    w, h = _image_shape(cfg, model.obs_dim)
    for i, x in enumerate(means):
        write_pgm(x, w, h, out / f"interp_l{args.layer}_{i}.pgm")
    print(f"wrote {len(means)} interpolants to {out}")
    return 0


def cmd_hessian_check(args) -> int:
    cfg = _config_for_checkpoint(args)
    model, am = load_run_checkpoint(args.checkpoint)
    _, heldout, _ = load_data(cfg)
    _check_dims(model, heldout.shape[-1])
    x = heldout[: args.n_samples]
    init = amortizer_init(am, x) if am is not None else [np.zeros((len(x), d)) for d in model.latent_dims]
    z_map, _ = map_inference(model, x, init, cfg.inference_config())
    full = full_hessian(model, z_map, x)
    blocks = block_hessian(model, z_map)
    approx = assemble_block_diagonal(blocks)
    out = _out_dir(args, cfg) / "hessian"
    out.mkdir(parents=True, exist_ok=True)
    dims = model.latent_dims
    offsets = np.concatenate([[0], np.cumsum(dims)])
    kink = np.min(np.abs(np.concatenate(z_map, axis=-1)), axis=-1)
    worst_away = 0.0
    with open(out / "stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "fallback", "min_eig_full", "min_eig_block", "max_abs_block_diff", "min_abs_latent"])
        for i in range(len(x)):
            np.savetxt(out / f"full_{i}.csv", full.matrix[i], delimiter=",")
            np.savetxt(out / f"block_{i}.csv", approx[i], delimiter=",")
            diff = max(
                float(np.max(np.abs(blocks.blocks[j][i] - full.matrix[i, offsets[j] : offsets[j + 1], offsets[j] : offsets[j + 1]])))
                for j in range(model.n_latent)
            )
            if not full.fallback[i] and kink[i] >= 1e-3:
                worst_away = max(worst_away, diff)
            w.writerow([
                i, int(full.fallback[i]), repr(float(min_eigenvalue(full.matrix[i]))),
                repr(float(min_eigenvalue(approx[i]))), repr(diff), repr(float(kink[i])),
            ])
    print(f"max |block - full diagonal block| away from kinks: {worst_away:.3e}")
    print(f"full-Hessian fallback rate: {float(np.mean(full.fallback)):.3f}")
    print(f"min eigenvalue over blocks: {float(np.min(min_eigenvalue(approx))):.3e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lpc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint: bool):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--preset", type=int, choices=[1, 2, 3])
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (falls back to LPC_OUT_DIR)")
        p.add_argument("--threads", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("train", help="train a model")
    common(p, checkpoint=False)
    p.add_argument("--objective", choices=["pc", "lmc", "almc"])
    p.add_argument("--combined")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Laplace importance-sampled bits/dim")
    common(p, checkpoint=True)
    p.add_argument("--samples", "-S", type=int)
    p.add_argument("--n", type=int, help="number of held-out samples")
    p.add_argument("--exact", action="store_true", help="also report the closed-form marginal of a linear-Gaussian checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="ancestral samples as PGM images")
    common(p, checkpoint=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--temps", help="one temperature per conditional, top first")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("interp", help="latent interpolation between two held-out samples")
    common(p, checkpoint=True)
    p.add_argument("--a", type=int, default=0)
    p.add_argument("--b", type=int, default=1)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--steps", type=int, default=8)
    p.set_defaults(func=cmd_interp)

    p = sub.add_parser("hessian-check", help="dump full and block Hessians with PSD statistics")
    common(p, checkpoint=True)
    p.add_argument("--n-samples", type=int, default=8)
    p.set_defaults(func=cmd_hessian_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    limiter = contextlib.nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(args.threads)
    try:
        with limiter:
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
