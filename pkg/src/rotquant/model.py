"""Toy pre-norm residual-stream network with the seven quantizable roles.

Each block applies RMS normalization (unit scale), a q/k/v/o group in which
the value stream is gated per head block by a nonlinear function of the
matching q/k blocks, and a gate/up/down feed-forward with SiLU gating. The
gating acts as a per-block scalar on the value space, so conjugating the
residual stream by any orthogonal matrix and the value/out channel by any
blockwise head rotation preserves the computed function exactly once the
weights are rewritten; the fixed FFN Hadamard is materialized on the
down-projection input inside the forward pass.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .archive import read_archive, write_archive
from .calibration import CalibrationSet, accumulate_from_arrays, damp
from .linalg import is_power_of_two
from .metrics import BoundReport, build_bound_report, layerwise_error
from .quantize import QuantConfig, gptq_quantize, gptqs_quantize
from .rotations import ROLES, LayerRecord, RotationSet, rotated_weight

_RMS_EPS = 1e-12


@dataclass(frozen=True)
class ToyModelSpec:
    n_layers: int = 4
    d_model: int = 64
    d_head_block: int = 16
    d_ff: int = 128
    seed: int = 0
    weights: str = "gaussian"
    outlier_fraction: float = 0.005
    outlier_scale: float = 20.0

    def __post_init__(self):
        if min(self.d_model, self.d_ff, self.d_head_block) < 2 or self.n_layers < 1:
            raise ValueError("model dimensions must be >= 2 and n_layers >= 1")
        if not (is_power_of_two(self.d_model) and is_power_of_two(self.d_ff)):
            raise ValueError("d_model and d_ff must be powers of two")
        if self.d_model % self.d_head_block != 0:
            raise ValueError("d_head_block must divide d_model")
        if self.weights not in ("gaussian", "outliers"):
            raise ValueError(f"unknown weight distribution {self.weights!r}")


@dataclass
class ToyModel:
    spec: ToyModelSpec
    w_in: np.ndarray
    w_out: np.ndarray
    blocks: list[dict[str, np.ndarray]]
    ffn_online_rotation: np.ndarray | None = None
    rotated: bool = False


def _role_shape(spec: ToyModelSpec, role: str) -> tuple[int, int]:
    if role in ("q", "k", "v", "o"):
        return spec.d_model, spec.d_model
    if role in ("gate", "up"):
        return spec.d_ff, spec.d_model
    return spec.d_model, spec.d_ff  # down


def build_toy_model(spec: ToyModelSpec) -> ToyModel:
    """Seeded weight initialization, optionally with planted outliers.

    Weights are Gaussian with std 1/sqrt(fan_in); in outlier mode a seeded
    random subset of entries is multiplied by ``outlier_scale``.
    """
    rng = np.random.default_rng(spec.seed)
    blocks = []
    for _ in range(spec.n_layers):
        blk = {}
        for role in ROLES:
            shape = _role_shape(spec, role)
            w = rng.standard_normal(shape) / np.sqrt(shape[1])
            if spec.weights == "outliers":
                mask = rng.random(shape) < spec.outlier_fraction
                w = np.where(mask, w * spec.outlier_scale, w)
            blk[role] = w
        blocks.append(blk)
    eye = np.eye(spec.d_model)
    return ToyModel(spec=spec, w_in=eye.copy(), w_out=eye.copy(), blocks=blocks)


def _rmsnorm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=1, keepdims=True) + _RMS_EPS)


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _head_gates(qv: np.ndarray, kv: np.ndarray, d_head: int) -> np.ndarray:
    """Per-sample, per-head-block sigmoid gate from the q.k block inner product."""
    samples = qv.shape[0]
    blocks = qv.shape[1] // d_head
    dots = np.einsum(
        "sbd,sbd->sb",
        qv.reshape(samples, blocks, d_head),
        kv.reshape(samples, blocks, d_head),
    )
    return 1.0 / (1.0 + np.exp(-dots / d_head))


def forward(
    model: ToyModel, batch: np.ndarray, capture_layers=None
) -> tuple[np.ndarray, dict]:
    """Run the network; optionally capture per-layer input activations.

    ``capture_layers`` is None (capture nothing), "all", or a set of block
    indices. Captured activations are keyed by (layer, role) and are exactly
    the matrices the corresponding weight multiplies, i.e. for the
    down-projection they are taken after the online FFN rotation.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.d_model:
        raise ValueError(f"batch width must be d_model={model.spec.d_model}")
    capture: dict[tuple[int, str], np.ndarray] = {}

    def want(layer: int) -> bool:
        if capture_layers is None:
            return False
        if capture_layers == "all":
            return True
        return layer in capture_layers

    d_head = model.spec.d_head_block
    h = x @ model.w_in.T
    for l, blk in enumerate(model.blocks):
        a = _rmsnorm(h)
        qv = a @ blk["q"].T
        kv = a @ blk["k"].T
        vv = a @ blk["v"].T
        gates = _head_gates(qv, kv, d_head)
        mixed = (
            vv.reshape(vv.shape[0], -1, d_head) * gates[:, :, None]
        ).reshape(vv.shape)
        h = h + mixed @ blk["o"].T
        f = _rmsnorm(h)
        xff = _silu(f @ blk["gate"].T) * (f @ blk["up"].T)
        if model.ffn_online_rotation is not None:
            xff = xff @ model.ffn_online_rotation
        h = h + xff @ blk["down"].T
        if want(l):
            capture[(l, "q")] = a
            capture[(l, "k")] = a
            capture[(l, "v")] = a
            capture[(l, "o")] = mixed
            capture[(l, "gate")] = f
            capture[(l, "up")] = f
            capture[(l, "down")] = xff
    out = _rmsnorm(h) @ model.w_out.T
    return out, capture


def model_layers(model: ToyModel) -> list[LayerRecord]:
    """Flatten the blocks into (layer, role) records in deterministic order."""
    return [
        LayerRecord(layer=l, role=role, weight=blk[role])
        for l, blk in enumerate(model.blocks)
        for role in ROLES
    ]


def apply_fused_rotations(model: ToyModel, rset: RotationSet) -> ToyModel:
    """Rewrite every weight per its role; the result computes the same function.

    The input/output maps absorb the stream rotation, and the fixed FFN
    rotation's inverse is materialized in the activation path ahead of the
    rewritten down-projection.
    """
    if model.rotated:
        raise ValueError("model already carries fused rotations")
    rset.require_orthogonal()
    spec = model.spec
    if rset.r1.shape[0] != spec.d_model:
        raise ValueError("stream rotation does not match d_model")
    if rset.r4 is not None and rset.r4.shape[0] != spec.d_ff:
        raise ValueError("FFN rotation does not match d_ff")
    blocks = []
    for l, blk in enumerate(model.blocks):
        blocks.append(
            {
                role: rotated_weight(
                    LayerRecord(layer=l, role=role, weight=blk[role]), rset
                )
                for role in ROLES
            }
        )
    return ToyModel(
        spec=spec,
        w_in=rset.r1.T @ model.w_in,
        w_out=model.w_out @ rset.r1,
        blocks=blocks,
        ffn_online_rotation=None if rset.r4 is None else rset.r4.copy(),
        rotated=True,
    )


@dataclass
class QuantizeResult:
    model: ToyModel
    reports: list[BoundReport]
    kl_proxy: float
    layers: list[LayerRecord] = field(default_factory=list)


def quantize_model(
    model: ToyModel,
    rset: RotationSet,
    calib: CalibrationSet,
    qcfg: QuantConfig,
    holdout: CalibrationSet | None = None,
    damping: float = 0.01,
    delta: float = 0.1,
    clean_activations: bool = False,
) -> QuantizeResult:
    """Rotate, calibrate and quantize block by block.

    Hessians are accumulated from the partially quantized predecessor
    activations (set ``clean_activations`` to calibrate on the unquantized
    rotated model instead). The summed-error proxy is evaluated on held-out
    data against the clean rotated weights.
    """
    rotated = apply_fused_rotations(model, rset)
    work = copy.deepcopy(rotated)
    source = rotated if clean_activations else work
    reports: list[BoundReport] = []
    records: list[LayerRecord] = []
    for l in range(model.spec.n_layers):
        caps: dict[tuple[int, str], np.ndarray] = {}
        for batch in calib.batches:
            _, c = forward(source, batch, capture_layers={l})
            for key, val in c.items():
                caps.setdefault(key, []).append(val)
        for role in ROLES:
            h = damp(accumulate_from_arrays(caps[(l, role)]), damping)
            w = rotated.blocks[l][role]
            if qcfg.rounding == "stochastic":
                qw = gptqs_quantize(w, h, qcfg, delta=delta)
            else:
                qw = gptq_quantize(w, h, qcfg)
            work.blocks[l][role] = qw.dequantized
            reports.append(
                build_bound_report(l, role, w, qw.dequantized, h, qcfg.bits, delta)
            )
            records.append(
                LayerRecord(layer=l, role=role, weight=w, hessian=h, quantized=qw)
            )

    eval_set = holdout if holdout is not None else calib
    caps_all: dict[tuple[int, str], list[np.ndarray]] = {}
    for batch in eval_set.batches:
        _, c = forward(rotated, batch, capture_layers="all")
        for key, val in c.items():
            caps_all.setdefault(key, []).append(val)
    kl = 0.0
    for rec in records:
        h_eval = accumulate_from_arrays(caps_all[(rec.layer, rec.role)])
        kl += layerwise_error(rec.weight, rec.quantized.dequantized, h_eval)
    return QuantizeResult(model=work, reports=reports, kl_proxy=kl, layers=records)


def save_model(model: ToyModel, path) -> None:
    tensors = {"w_in": model.w_in, "w_out": model.w_out}
    for l, blk in enumerate(model.blocks):
        for role in ROLES:
            tensors[f"block{l}.{role}"] = blk[role]
    if model.ffn_online_rotation is not None:
        tensors["ffn_online_rotation"] = model.ffn_online_rotation
    write_archive(path, tensors)
    meta = {
        "spec": asdict(model.spec),
        "rotated": model.rotated,
        "has_online_ffn_rotation": model.ffn_online_rotation is not None,
    }
    (Path(path) / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path) -> ToyModel:
    meta = json.loads((Path(path) / "model.json").read_text())
    tensors = read_archive(path)
    spec = ToyModelSpec(**meta["spec"])
    blocks = [
        {role: tensors[f"block{l}.{role}"] for role in ROLES}
        for l in range(spec.n_layers)
    ]
    return ToyModel(
        spec=spec,
        w_in=tensors["w_in"],
        w_out=tensors["w_out"],
        blocks=blocks,
        ffn_online_rotation=tensors.get("ffn_online_rotation"),
        rotated=meta["rotated"],
    )
