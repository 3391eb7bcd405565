"""Declarative experiment runner.

One JSON config file describes a run; each verb reads the sections it needs,
validates everything up front, then computes. Commands are deterministic
given their config: reruns produce byte-identical artifacts (wall-clock
timings go to ``timing.log``, which is a log, not an artifact).

Verbs: generate | learn | quantize | bounds | compare.
Exit codes: 0 ok, 2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import math
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .archive import write_archive
from .calibration import (
    CalibrationSet,
    accumulate_from_arrays,
    bounds_experiment,
    bounds_to_csv,
    damp,
    synthetic_calibration,
)
from .linalg import NumericalError
from .metrics import reports_to_csv
from .model import (
    ToyModelSpec,
    build_toy_model,
    forward,
    load_model,
    model_layers,
    quantize_model,
    save_model,
)
from .quantize import QuantConfig
from .rotations import (
    ROLES,
    ObjectiveSpec,
    TrainConfig,
    identity_rotation_set,
    initial_rotation_set,
    learn_rotations,
    load_rotations,
    objective_value,
    save_rotations,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

ROTATION_METHODS = ("none", "hadamard", "optrot", "optrot-v2", "optrot+", "optrot+-v2")
_DATA_FREE = ("none", "hadamard", "optrot", "optrot-v2")


class ConfigError(ValueError):
    """The experiment configuration is inconsistent or incomplete."""


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return sec


def _model_spec(cfg: dict, seed: int) -> ToyModelSpec:
    sec = _section(cfg, "model")
    known = {k: sec[k] for k in sec if k != "seed"}
    try:
        return ToyModelSpec(seed=seed, **known)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model spec: {exc}") from exc


def _quant_config(cfg: dict, seed: int) -> QuantConfig:
    sec = _section(cfg, "quant")
    try:
        return QuantConfig(seed=seed, **sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid quant config: {exc}") from exc


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    sec = dict(_section(cfg, "rotation"))
    sec.pop("method", None)
    sec.pop("p", None)
    try:
        return TrainConfig(seed=seed, **sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid rotation training config: {exc}") from exc


def _calibration_sets(
    cfg: dict, dim: int, seed: int
) -> tuple[CalibrationSet | None, CalibrationSet | None]:
    sec = _section(cfg, "calibration")
    samples = int(sec.get("samples", 0))
    if samples <= 0:
        return None, None
    holdout_samples = int(sec.get("holdout_samples", max(32, samples // 4)))
    channels = int(sec.get("outlier_channels", 0))
    scale = float(sec.get("outlier_scale", 1.0))
    calib = synthetic_calibration(dim, samples, channels, scale, seed=[seed, 1])
    holdout = synthetic_calibration(dim, holdout_samples, channels, scale, seed=[seed, 2])
    return calib, holdout


@contextlib.contextmanager
def _output_lock(out: Path):
    """One command at a time per output directory."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"output directory {out} is locked by another run ({lock})")
    try:
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(OSError):
            os.unlink(lock)


def _refuse_overwrite(target: Path, force: bool):
    if target.exists() and not force:
        raise ConfigError(f"{target} already exists (use --force to overwrite)")


def _log_timing(out: Path, verb: str, elapsed: float):
    with (out / "timing.log").open("a") as fh:
        fh.write(f"{verb} wall_clock_s={elapsed:.3f}\n")


def cmd_generate(cfg: dict, out: Path, seed: int, force: bool, threads: int) -> int:
    spec = _model_spec(cfg, seed)
    target = out / "model"
    _refuse_overwrite(target / "manifest.json", force)
    t0 = time.perf_counter()
    model = build_toy_model(spec)
    save_model(model, target)
    _log_timing(out, "generate", time.perf_counter() - t0)
    print(f"generate: wrote {target} ({spec.n_layers} blocks, d_model={spec.d_model})")
    return EXIT_OK


def _loss_csv(history) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss"])
    for i, v in enumerate(history):
        writer.writerow([i, repr(float(v))])
    return buf.getvalue()


def cmd_learn(cfg: dict, out: Path, seed: int, force: bool, threads: int) -> int:
    sec = _section(cfg, "rotation")
    method = sec.get("method", "optrot")
    if method not in ROTATION_METHODS:
        raise ConfigError(f"unknown rotation method {method!r} (choose from {ROTATION_METHODS})")
    model_dir = out / "model"
    if not (model_dir / "manifest.json").exists():
        raise ConfigError(f"model archive {model_dir} not found; run generate first")
    target = out / "rotations"
    _refuse_overwrite(target / "manifest.json", force)

    calib_cfg = _section(cfg, "calibration")
    if method not in _DATA_FREE and int(calib_cfg.get("samples", 0)) <= 0:
        raise ConfigError(
            f"method {method!r} is data-dependent and needs a calibration section with samples > 0"
        )

    t0 = time.perf_counter()
    model = load_model(model_dir)
    layers = model_layers(model)
    head_dim = model.spec.d_head_block
    meta: dict = {"method": method, "seed": seed}

    if method == "none":
        rset = identity_rotation_set(layers, head_dim=head_dim)
        history = [objective_value(ObjectiveSpec(kind="optrot"), layers, rset)]
    elif method == "hadamard":
        rset = initial_rotation_set(layers, seed, head_dim=head_dim)
        history = [objective_value(ObjectiveSpec(kind="optrot"), layers, rset)]
    else:
        spec = ObjectiveSpec(kind=method, p=int(sec.get("p", 4)))
        train_cfg = _train_config(cfg, seed)
        hessians = None
        if spec.uses_hessian:
            calib, _ = _calibration_sets(cfg, model.spec.d_model, seed)
            hessians = _layer_hessians(model, calib)
        result = learn_rotations(spec, layers, train_cfg, hessians, head_dim=head_dim)
        rset = result.rotations
        history = result.loss_history
        meta.update(
            {
                "steps": train_cfg.steps,
                "learning_rate": train_cfg.learning_rate,
                "momentum": train_cfg.momentum,
                "top_k": train_cfg.top_k,
                "loss_scale": result.objective.loss_scale,
                "selected": result.selected,
            }
        )

    save_rotations(rset, target)
    (out / "loss.csv").write_text(_loss_csv(history))
    meta["final_loss"] = float(history[-1])
    (out / "learn_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _log_timing(out, "learn", time.perf_counter() - t0)
    print(f"learn[{method}]: wrote {target}, final loss {meta['final_loss']:.6e}")
    return EXIT_OK


def _layer_hessians(model, calib: CalibrationSet):
    """Per-layer input covariances of the unrotated model, damping applied."""
    caps: dict = {}
    for batch in calib.batches:
        _, c = forward(model, batch, capture_layers="all")
        for key, val in c.items():
            caps.setdefault(key, []).append(val)
    return [
        damp(accumulate_from_arrays(caps[(l, role)]), 0.01)
        for l in range(model.spec.n_layers)
        for role in ROLES
    ]


def cmd_quantize(cfg: dict, out: Path, seed: int, force: bool, threads: int) -> int:
    model_dir = out / "model"
    rot_dir = out / "rotations"
    for d, hint in ((model_dir, "generate"), (rot_dir, "learn")):
        if not (d / "manifest.json").exists():
            raise ConfigError(f"archive {d} not found; run {hint} first")
    target = out / "quantized"
    _refuse_overwrite(target / "manifest.json", force)
    qcfg = _quant_config(cfg, seed)
    t0 = time.perf_counter()
    model = load_model(model_dir)
    calib, holdout = _calibration_sets(cfg, model.spec.d_model, seed)
    if calib is None:
        raise ConfigError("quantize needs a calibration section with samples > 0")
    rset = load_rotations(rot_dir)
    damping = float(cfg.get("damping", 0.01))
    delta = float(cfg.get("delta", 0.1))
    result = quantize_model(
        model, rset, calib, qcfg, holdout=holdout, damping=damping, delta=delta
    )

    tensors = {"w_in": result.model.w_in, "w_out": result.model.w_out}
    if result.model.ffn_online_rotation is not None:
        tensors["ffn_online_rotation"] = result.model.ffn_online_rotation
    for rec in result.layers:
        tensors.update(rec.quantized.archive_entries(f"block{rec.layer}.{rec.role}"))
    write_archive(target, tensors)
    (out / "reports.csv").write_text(reports_to_csv(result.reports))

    finite_snrs = [r.snr_db for r in result.reports if math.isfinite(r.snr_db)]
    by_role: dict[str, list[float]] = {}
    for r in result.reports:
        by_role.setdefault(r.role, []).append(r.mu_w)
    summary = {
        "kl_proxy": result.kl_proxy,
        "mean_snr_db": sum(finite_snrs) / len(finite_snrs) if finite_snrs else "exact",
        "mu_w_by_role": {k: sum(v) / len(v) for k, v in sorted(by_role.items())},
        "bits": qcfg.bits,
        "group_size": qcfg.group_size,
        "model_seed": model.spec.seed,
        "model_spec": asdict(model.spec),
        "seed": seed,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _log_timing(out, "quantize", time.perf_counter() - t0)
    print(
        f"quantize[b={qcfg.bits}]: kl_proxy {result.kl_proxy:.6e}, "
        f"reports -> {out / 'reports.csv'}"
    )
    return EXIT_OK


def cmd_bounds(cfg: dict, out: Path, seed: int, force: bool, threads: int) -> int:
    sec = _section(cfg, "bounds")
    target = out / "bounds.csv"
    _refuse_overwrite(target, force)
    kwargs = {}
    for key in ("sizes", "spectra", "bases"):
        if key in sec:
            kwargs[key] = tuple(sec[key])
    for key, cast in (("seeds", int), ("exponent", float), ("rank", int)):
        if key in sec:
            kwargs[key] = cast(sec[key])
    t0 = time.perf_counter()
    try:
        rows = bounds_experiment(workers=threads, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid bounds grid: {exc}") from exc
    target.write_text(bounds_to_csv(rows))
    _log_timing(out, "bounds", time.perf_counter() - t0)
    print(f"bounds: wrote {len(rows)} rows -> {target}")
    return EXIT_OK


def _read_reports(run: Path) -> dict[tuple[int, str], dict]:
    rows = {}
    with (run / "reports.csv").open() as fh:
        for row in csv.DictReader(fh):
            rows[(int(row["layer"]), row["role"])] = row
    return rows


def cmd_compare(run_dirs: list[str], out: Path, force: bool) -> int:
    if len(run_dirs) < 2:
        raise ConfigError("compare needs at least two completed quantize runs")
    runs = [Path(r) for r in run_dirs]
    for r in runs:
        for needed in ("summary.json", "reports.csv"):
            if not (r / needed).exists():
                raise ConfigError(f"run {r} is missing {needed}; quantize first")
    target = out / "compare.json"
    _refuse_overwrite(target, force)
    summaries = [json.loads((r / "summary.json").read_text()) for r in runs]
    seeds = {s["model_seed"] for s in summaries}
    if len(seeds) != 1:
        raise ConfigError(f"runs quantize different model seeds {sorted(seeds)}")
    base_reports = _read_reports(runs[0])
    comparisons = []
    for other, summ in zip(runs[1:], summaries[1:]):
        other_reports = _read_reports(other)
        if set(other_reports) != set(base_reports):
            raise ConfigError(f"run {other} reports different layers than {runs[0]}")
        per_layer = []
        for key in sorted(base_reports):
            b, o = base_reports[key], other_reports[key]
            per_layer.append(
                {
                    "layer": key[0],
                    "role": key[1],
                    "delta_mu_w": float(o["mu_w"]) - float(b["mu_w"]),
                    "delta_snr_db": float(o["snr_db"]) - float(b["snr_db"]),
                    "delta_actual_error": float(o["actual_error"]) - float(b["actual_error"]),
                }
            )
        wins = sum(1 for d in per_layer if d["delta_actual_error"] < 0)
        comparisons.append(
            {
                "baseline": str(runs[0]),
                "candidate": str(other),
                "delta_kl_proxy": summ["kl_proxy"] - summaries[0]["kl_proxy"],
                "layers_with_lower_error": wins,
                "layer_count": len(per_layer),
                "per_layer": per_layer,
            }
        )
    payload = {"model_seed": summaries[0]["model_seed"], "comparisons": comparisons}
    target.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"compare: wrote {target}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rotquant",
        description="Rotation-aware quantization experiment runner",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("generate", "learn", "quantize", "bounds"):
        p = sub.add_parser(verb)
        p.add_argument("--config", default=None, help="JSON experiment config")
        p.add_argument("--out", default=None, help="run output directory")
        p.add_argument("--seed", type=int, default=None, help="overrides config seed")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--force", action="store_true")
    p = sub.add_parser("compare")
    p.add_argument("runs", nargs="*", help="completed quantize run directories")
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "compare":
            if args.out is None:
                raise ConfigError("--out is required")
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            return cmd_compare(args.runs, out, args.force)
        cfg = _load_config(args.config)
        out = Path(args.out or cfg.get("output_dir", ""))
        if str(out) in ("", "."):
            raise ConfigError("an output directory is required (--out or output_dir)")
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        with _output_lock(out):
            handler = {
                "generate": cmd_generate,
                "learn": cmd_learn,
                "quantize": cmd_quantize,
                "bounds": cmd_bounds,
            }[args.verb]
            return handler(cfg, out, seed, args.force, max(1, args.threads))
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:  # ConfigError and validation errors from modules
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
