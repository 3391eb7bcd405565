"""Fusible-rotation learning.

A rotation set holds one shared residual-stream rotation ``r1``, one small
per-layer head-space rotation ``r2`` (applied blockwise), and a fixed
Hadamard ``r4`` on the feed-forward contraction input. Weights are rewritten
per role so the rewritten network computes the same function; the training
objectives below only reshape how weight mass is distributed over entries.

Objectives (``ObjectiveSpec.kind``):

* ``optrot``      sum of fourth powers of rotated weight entries,
* ``optrot-v2``   square root of that sum (squared 4-norm),
* ``optrot+``     data-dependent: UB(H~) times the 4-norm,
* ``optrot+-v2``  UB(H~) times the squared 4-norm,

where UB is the smooth cap tr(H) - ||H||_off^2/(2 tr(H)) evaluated on the
rotated input covariance. Gradients are analytic and exact (checked against
central finite differences in the tests); optimization steps use the Cayley
transform of the skew-projected gradient, which keeps every iterate
orthogonal to machine precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import (
    NumericalError,
    as_matrix,
    hadamard_orthonormal,
    is_power_of_two,
    randomized_hadamard,
    require_symmetric,
)
from .metrics import off_diagonal_sq, ub_bound
from .quantize import QuantizedWeight

from .archive import read_archive, write_archive

ROLES = ("q", "k", "v", "o", "gate", "up", "down")
_STREAM_INPUT_ROLES = ("q", "k", "v", "gate", "up")
OBJECTIVE_KINDS = ("optrot", "optrot-v2", "optrot+", "optrot+-v2")

# exponent q in l = [UB *] (sum |W|^p)^(q/p) for each kind
_NORM_POWER = {"optrot": None, "optrot-v2": 2, "optrot+": 1, "optrot+-v2": 2}


@dataclass
class LayerRecord:
    """One quantizable weight: (layer id, role) with optional attachments."""

    layer: int
    role: str
    weight: np.ndarray
    hessian: np.ndarray | None = None
    quantized: QuantizedWeight | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        self.weight = as_matrix(self.weight, f"weight[{self.layer},{self.role}]")
        if self.hessian is not None and self.hessian.shape[0] != self.weight.shape[1]:
            raise ValueError("hessian dimension must match the weight input dimension")


@dataclass
class RotationSet:
    """Shared stream rotation, per-layer head rotations, fixed FFN Hadamard."""

    r1: np.ndarray
    r2: dict[int, np.ndarray] = field(default_factory=dict)
    r4: np.ndarray | None = None

    def orthogonality_defect(self) -> float:
        mats = [self.r1, *self.r2.values()]
        if self.r4 is not None:
            mats.append(self.r4)
        return max(
            float(np.linalg.norm(m.T @ m - np.eye(m.shape[0]))) for m in mats
        )

    def require_orthogonal(self, tol: float = 1e-6) -> None:
        defect = self.orthogonality_defect()
        if defect > tol:
            raise ValueError(f"rotation set is not orthogonal: defect {defect:.3e}")


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which rotation objective to minimize; see the module docstring."""

    kind: str = "optrot"
    p: int = 4
    loss_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.p < 4 or self.p % 2 != 0:
            raise ValueError(f"p must be an even integer >= 4, got {self.p}")

    @property
    def uses_hessian(self) -> bool:
        return self.kind.startswith("optrot+")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1.0
    steps: int = 1000
    momentum: float = 0.0
    top_k: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


def _block_expand(r2: np.ndarray, dim: int) -> np.ndarray:
    """kron(I, r2) matching a space of size ``dim`` (r2 tiles it blockwise)."""
    d = r2.shape[0]
    if dim % d != 0:
        raise ValueError(f"head rotation of size {d} does not tile dimension {dim}")
    return np.kron(np.eye(dim // d), r2)


def _layer_r2(rec: LayerRecord, rset: RotationSet) -> np.ndarray:
    if rec.layer not in rset.r2:
        raise ValueError(f"no head rotation for layer {rec.layer}")
    return rset.r2[rec.layer]


def rotated_weight(rec: LayerRecord, rset: RotationSet) -> np.ndarray:
    """Apply the role-specific rewrite to one weight (y = Wx convention).

    Roles reading the residual stream (q, k, v, gate, up) absorb r1 on the
    input side; roles writing to it (o, down) carry r1^T on the output side;
    the value/out pair additionally carries the blockwise head rotation, and
    the FFN contraction absorbs the fixed Hadamard on its input.
    """
    w, role = rec.weight, rec.role
    if role in ("q", "k", "gate", "up"):
        return w @ rset.r1
    if role == "v":
        big = _block_expand(_layer_r2(rec, rset), w.shape[0])
        return big.T @ w @ rset.r1
    if role == "o":
        big = _block_expand(_layer_r2(rec, rset), w.shape[1])
        return rset.r1.T @ w @ big
    if role == "down":
        r4 = rset.r4 if rset.r4 is not None else np.eye(w.shape[1])
        return rset.r1.T @ w @ r4
    raise ValueError(f"unknown role {role!r}")


def input_rotation(rec: LayerRecord, rset: RotationSet) -> np.ndarray:
    """Rotation acting on the layer's input space (used to rotate Hessians)."""
    if rec.role in _STREAM_INPUT_ROLES:
        return rset.r1
    if rec.role == "o":
        return _block_expand(_layer_r2(rec, rset), rec.weight.shape[1])
    if rec.role == "down":
        return rset.r4 if rset.r4 is not None else np.eye(rec.weight.shape[1])
    raise ValueError(f"unknown role {rec.role!r}")


def _resolve_hessians(spec, layers, hessians):
    if not spec.uses_hessian:
        return [None] * len(layers)
    if hessians is None:
        hessians = [rec.hessian for rec in layers]
    if len(hessians) != len(layers):
        raise ValueError("one hessian per layer record is required")
    missing = [i for i, h in enumerate(hessians) if h is None]
    if missing:
        raise ValueError(
            f"objective {spec.kind!r} is data-dependent but layers {missing} have no hessian"
        )
    return hessians


def _norm_sum(wt: np.ndarray, p: int) -> float:
    """sum |W|^p for even p (multiplication-based fast path for p = 4)."""
    if p == 4:
        w2 = wt * wt
        return float(np.sum(w2 * w2))
    return float(np.sum(wt**p))


def _norm_sum_grad(wt: np.ndarray, p: int) -> tuple[float, np.ndarray]:
    """(sum |W|^p, elementwise W^(p-1)) for even p."""
    if p == 4:
        w2 = wt * wt
        return float(np.sum(w2 * w2)), w2 * wt
    return float(np.sum(wt**p)), wt ** (p - 1)


def _layer_objective(spec: ObjectiveSpec, rec, rset, hessian) -> float:
    wt = rotated_weight(rec, rset)
    s = _norm_sum(wt, spec.p)
    q = _NORM_POWER[spec.kind]
    base = s if q is None else s ** (q / spec.p)
    if spec.uses_hessian:
        rin = input_rotation(rec, rset)
        base *= ub_bound(rin.T @ hessian @ rin)
    return spec.loss_scale * base


def objective_value(spec: ObjectiveSpec, layers, rset: RotationSet, hessians=None) -> float:
    """Total rotation loss over the given layer records."""
    hs = _resolve_hessians(spec, layers, hessians)
    return sum(_layer_objective(spec, rec, rset, h) for rec, h in zip(layers, hs))


def _ub_euclidean_grad(ht: np.ndarray) -> np.ndarray:
    """d UB / d H~ as a full Euclidean derivative (H~ treated as free)."""
    tr = float(np.trace(ht))
    off = ht - np.diag(np.diag(ht))
    return (1.0 + off_diagonal_sq(ht) / (2.0 * tr * tr)) * np.eye(ht.shape[0]) - off / tr


def objective_gradient(
    spec: ObjectiveSpec, layers, rset: RotationSet, hessians=None
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Exact gradients of the total loss w.r.t. r1 and each trained r2.

    Returns (g_r1, {layer id: g_r2}); contributions of all records sharing a
    rotation are summed in layer order. The fixed r4 receives no gradient.
    """
    hs = _resolve_hessians(spec, layers, hessians)
    g1 = np.zeros_like(rset.r1)
    g2: dict[int, np.ndarray] = {}

    def add_r2(layer_id: int, big_grad: np.ndarray, d: int):
        acc = g2.setdefault(layer_id, np.zeros((d, d)))
        k = big_grad.shape[0] // d
        for b in range(k):
            acc += big_grad[b * d : (b + 1) * d, b * d : (b + 1) * d]

    for rec, hessian in zip(layers, hs):
        w = rec.weight
        wt = rotated_weight(rec, rset)
        s, wt_pm1 = _norm_sum_grad(wt, spec.p)
        q = _NORM_POWER[spec.kind]
        if q is None:
            val_s, dval_s = s, 1.0
        elif s > 0.0:
            val_s = s ** (q / spec.p)
            dval_s = (q / spec.p) * s ** (q / spec.p - 1.0)
        else:
            val_s, dval_s = 0.0, 0.0
        ub_val = 1.0
        if spec.uses_hessian:
            rin = input_rotation(rec, rset)
            ht = rin.T @ hessian @ rin
            ub_val = ub_bound(ht)
        gw = (spec.loss_scale * ub_val * dval_s * spec.p) * wt_pm1

        if rec.role in ("q", "k", "gate", "up"):
            g1 += w.T @ gw
        elif rec.role == "v":
            r2 = _layer_r2(rec, rset)
            big = _block_expand(r2, w.shape[0])
            g1 += w.T @ big @ gw
            add_r2(rec.layer, w @ rset.r1 @ gw.T, r2.shape[0])
        elif rec.role == "o":
            r2 = _layer_r2(rec, rset)
            big = _block_expand(r2, w.shape[1])
            g1 += w @ big @ gw.T
            add_r2(rec.layer, w.T @ rset.r1 @ gw, r2.shape[0])
        elif rec.role == "down":
            r4 = rset.r4 if rset.r4 is not None else np.eye(w.shape[1])
            g1 += w @ r4 @ gw.T

        if spec.uses_hessian:
            gh = spec.loss_scale * val_s * 2.0 * (hessian @ rin @ _ub_euclidean_grad(ht))
            if rec.role in _STREAM_INPUT_ROLES:
                g1 += gh
            elif rec.role == "o":
                add_r2(rec.layer, gh, rset.r2[rec.layer].shape[0])
            # down: r4 is fixed, no gradient
    return g1, g2


@dataclass
class MomentumState:
    """Heavy-ball accumulator on the skew-projected gradient."""

    m: np.ndarray | None = None


def cayley_sgd_step(
    r: np.ndarray,
    grad: np.ndarray,
    lr: float,
    momentum: float = 0.0,
    state: MomentumState | None = None,
) -> np.ndarray:
    """One descent step staying on the orthogonal manifold.

    Projects the gradient to the tangent space, A = G R^T - R G^T (skew),
    optionally applies heavy-ball momentum to A, and moves along the Cayley
    transform r <- (I + (lr/2) A)^{-1} (I - (lr/2) A) r, which is orthogonal
    for every skew A and real lr.
    """
    a = grad @ r.T - r @ grad.T
    if state is not None:
        if momentum > 0.0 and state.m is not None:
            a = momentum * state.m + a
        state.m = a
    n = r.shape[0]
    eye = np.eye(n)
    try:
        return np.linalg.solve(eye + (lr / 2.0) * a, (eye - (lr / 2.0) * a) @ r)
    except np.linalg.LinAlgError as exc:  # cannot happen for skew a; guarded anyway
        raise NumericalError(f"Cayley solve failed: {exc}") from exc


def initial_rotation_set(
    layers, seed: int, head_dim: int | None = None
) -> RotationSet:
    """Training start point: sign-randomized Hadamard r1, identity r2,
    fixed Hadamard r4 (when a down-projection is present)."""
    d1 = _stream_dim(layers)
    if not is_power_of_two(d1):
        raise ValueError(f"stream dimension {d1} must be a power of two")
    r2 = _identity_r2(layers, head_dim)
    r4 = _fixed_r4(layers)
    return RotationSet(r1=randomized_hadamard(d1, seed), r2=r2, r4=r4)


def identity_rotation_set(layers, head_dim: int | None = None) -> RotationSet:
    """Identity r1/r2 and identity r4 (no online FFN rotation)."""
    d1 = _stream_dim(layers)
    r2 = _identity_r2(layers, head_dim)
    r4_dim = _down_dim(layers)
    r4 = np.eye(r4_dim) if r4_dim else None
    return RotationSet(r1=np.eye(d1), r2=r2, r4=r4)


def _stream_dim(layers) -> int:
    dims = set()
    for rec in layers:
        if rec.role in _STREAM_INPUT_ROLES:
            dims.add(rec.weight.shape[1])
        else:
            dims.add(rec.weight.shape[0])
    if len(dims) != 1:
        raise ValueError(f"inconsistent stream dimensions {sorted(dims)}")
    return dims.pop()


def _down_dim(layers) -> int | None:
    dims = {rec.weight.shape[1] for rec in layers if rec.role == "down"}
    if len(dims) > 1:
        raise ValueError(f"inconsistent down-projection input dimensions {sorted(dims)}")
    return dims.pop() if dims else None


def _identity_r2(layers, head_dim: int | None) -> dict[int, np.ndarray]:
    r2: dict[int, np.ndarray] = {}
    for rec in layers:
        if rec.role == "v":
            full = rec.weight.shape[0]
        elif rec.role == "o":
            full = rec.weight.shape[1]
        else:
            continue
        d = head_dim if head_dim is not None else full
        if full % d != 0:
            raise ValueError(f"head dimension {d} does not tile {full}")
        r2.setdefault(rec.layer, np.eye(d))
    return r2


def _fixed_r4(layers) -> np.ndarray | None:
    dim = _down_dim(layers)
    if dim is None:
        return None
    if not is_power_of_two(dim):
        raise ValueError(f"down-projection input dimension {dim} must be a power of two")
    return hadamard_orthonormal(dim)


def select_top_k(layers, spec: ObjectiveSpec, r_init: RotationSet, k: int, hessians=None):
    """Indices of the k records with the largest initial per-layer loss.

    Ties break deterministically by (layer id, role order).
    """
    if k < 1:
        raise ValueError("top_k must be >= 1")
    if k > len(layers):
        raise ValueError(f"top_k {k} exceeds the {len(layers)} candidate records")
    hs = _resolve_hessians(spec, layers, hessians)
    scored = [
        (-_layer_objective(spec, rec, r_init, h), rec.layer, ROLES.index(rec.role), i)
        for i, (rec, h) in enumerate(zip(layers, hs))
    ]
    scored.sort()
    return sorted(idx for *_unused, idx in scored[:k])


def save_rotations(rset: RotationSet, path) -> None:
    tensors = {"r1": rset.r1}
    for lid in sorted(rset.r2):
        tensors[f"r2.{lid}"] = rset.r2[lid]
    if rset.r4 is not None:
        tensors["r4"] = rset.r4
    write_archive(path, tensors)


def load_rotations(path) -> RotationSet:
    tensors = read_archive(path)
    r2 = {
        int(name.split(".", 1)[1]): mat
        for name, mat in tensors.items()
        if name.startswith("r2.")
    }
    return RotationSet(r1=tensors["r1"], r2=r2, r4=tensors.get("r4"))


@dataclass
class TrainResult:
    rotations: RotationSet
    loss_history: np.ndarray
    objective: ObjectiveSpec
    selected: list[int]


def learn_rotations(
    spec: ObjectiveSpec,
    layers,
    cfg: TrainConfig,
    hessians=None,
    head_dim: int | None = None,
) -> TrainResult:
    """Minimize the rotation loss with Cayley-SGD from a Hadamard start.

    For the data-dependent kinds the loss is rescaled once, at step 0, so the
    initial value matches the initial data-free loss; Hessians stay fixed and
    are rotated analytically inside the objective. With ``top_k`` set, only
    the k records with the largest initial loss contribute.
    """
    if not layers:
        raise ValueError("cannot learn rotations from an empty layer list")
    hs = _resolve_hessians(spec, layers, hessians)
    rset = initial_rotation_set(layers, cfg.seed, head_dim=head_dim)

    if spec.uses_hessian:
        raw = objective_value(replace(spec, loss_scale=1.0), layers, rset, hs)
        free = objective_value(ObjectiveSpec(kind="optrot", p=spec.p), layers, rset)
        spec = replace(spec, loss_scale=free / raw if raw > 0 else 1.0)

    selected = (
        list(range(len(layers)))
        if cfg.top_k is None
        else select_top_k(layers, spec, rset, cfg.top_k, hs)
    )
    sel_layers = [layers[i] for i in selected]
    sel_hs = [hs[i] for i in selected]

    history = [objective_value(spec, sel_layers, rset, sel_hs)]
    m1 = MomentumState()
    m2: dict[int, MomentumState] = {}
    for _ in range(cfg.steps):
        g1, g2 = objective_gradient(spec, sel_layers, rset, sel_hs)
        r1 = cayley_sgd_step(rset.r1, g1, cfg.learning_rate, cfg.momentum, m1)
        r2 = dict(rset.r2)
        for lid, grad in g2.items():
            state = m2.setdefault(lid, MomentumState())
            r2[lid] = cayley_sgd_step(r2[lid], grad, cfg.learning_rate, cfg.momentum, state)
        rset = RotationSet(r1=r1, r2=r2, r4=rset.r4)
        history.append(objective_value(spec, sel_layers, rset, sel_hs))
    return TrainResult(
        rotations=rset,
        loss_history=np.asarray(history),
        objective=spec,
        selected=selected,
    )
