"""Scalar weight quantizers.

Three quantizers share one grid/group machinery:

* ``rtn_quantize``     - round-to-nearest on the standard symmetric grid.
* ``gptq_quantize``    - sequential column quantization; residual error of
  each quantized column is propagated to later columns through the strictly
  upper factor of the upper-convention LDL of the Hessian.
* ``gptqs_quantize``   - the analyzable variant: norm-constrained LDL,
  shrunk grid with one level of headroom per side, stochastic rounding.

Rows are independent throughout; within a row, columns are strictly
sequential. Group scales are frozen from the input weights before any error
correction. ``brute_force_optimal`` enumerates every grid assignment of a
single row and is the oracle the sequential quantizers are tested against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import as_matrix, constrained_ldl, ldl_upper, require_symmetric

SCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class QuantConfig:
    """Grid and rounding choices for one quantization run.

    ``group_size`` counts contiguous input-dimension weights sharing a scale
    (0 means one scale per row). The ``shrunk`` grid leaves one level of
    headroom on each side for error-corrected values and needs bits >= 3.
    """

    bits: int = 4
    group_size: int = 256
    rounding: str = "nearest"
    grid: str = "standard"
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if self.rounding not in ("nearest", "stochastic"):
            raise ValueError(f"unknown rounding mode {self.rounding!r}")
        if self.grid not in ("standard", "shrunk"):
            raise ValueError(f"unknown grid convention {self.grid!r}")
        if self.grid == "shrunk" and self.bits < 3:
            raise ValueError("shrunk grid needs bits >= 3 (grid step 2^b-3 degenerates)")
        if self.group_size < 0:
            raise ValueError("group_size must be >= 0")


@dataclass(frozen=True)
class QuantizedWeight:
    """Codes, per-group scales and the exactly dequantized matrix."""

    codes: np.ndarray
    scales: np.ndarray
    dequantized: np.ndarray
    config: QuantConfig

    def archive_entries(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.codes": self.codes.astype(np.uint8),
            f"{prefix}.scales": self.scales,
            f"{prefix}.dequant": self.dequantized,
        }


def group_scales(w: np.ndarray, group_size: int) -> np.ndarray:
    """Per-group max-abs scales, shape (rows, n_groups); floor for zero groups."""
    m, n = w.shape
    gs = n if group_size == 0 else group_size
    if n % gs != 0:
        raise ValueError(f"group_size {gs} does not divide row length {n}")
    s = np.abs(w.reshape(m, n // gs, gs)).max(axis=2)
    return np.maximum(s, SCALE_FLOOR)


def _expand(scales: np.ndarray, n: int) -> np.ndarray:
    return np.repeat(scales, n // scales.shape[1], axis=1)


def _to_code(x, s, bits: int, grid: str):
    if grid == "standard":
        return ((2**bits - 1) / 2.0) * (x / s + 1.0)
    return ((2**bits - 3) / 2.0) * (x / s + 1.0) + 1.0


def _to_value(codes, s, bits: int, grid: str):
    if grid == "standard":
        return s * (2.0 * codes / (2**bits - 1) - 1.0)
    return s * (2.0 * (codes - 1.0) / (2**bits - 3) - 1.0)


def _row_uniforms(seed: int, m: int, n: int) -> np.ndarray:
    """One substream of n uniforms per row, independent of row order."""
    u = np.empty((m, n))
    for r in range(m):
        u[r] = np.random.default_rng([seed, r]).random(n)
    return u


def rtn_quantize(w, cfg: QuantConfig) -> QuantizedWeight:
    """Round-to-nearest quantization with per-group max-abs scales."""
    if cfg.rounding != "nearest" or cfg.grid != "standard":
        raise ValueError("rtn_quantize requires nearest rounding on the standard grid")
    wm = as_matrix(w, "weight")
    scales = group_scales(wm, cfg.group_size)
    s = _expand(scales, wm.shape[1])
    levels = 2**cfg.bits - 1
    codes = np.clip(np.rint(_to_code(wm, s, cfg.bits, cfg.grid)), 0, levels).astype(np.int64)
    deq = _to_value(codes, s, cfg.bits, cfg.grid)
    return QuantizedWeight(codes=codes, scales=scales, dequantized=deq, config=cfg)


def _sequential_quantize(
    wm: np.ndarray,
    corr: np.ndarray,
    cfg: QuantConfig,
    uniforms: np.ndarray | None,
) -> QuantizedWeight:
    """Column loop realizing W_hat = Q(W + (W - W_hat) C) for strictly upper C.

    Corrected values are clamped to the code range [0, 2^b - 1] before
    rounding (on the standard grid this is exactly [-s, s] in weight space).
    """
    m, n = wm.shape
    scales = group_scales(wm, cfg.group_size)
    s = _expand(scales, n)
    levels = 2**cfg.bits - 1
    codes = np.zeros((m, n), dtype=np.int64)
    deq = np.zeros((m, n))
    err = np.zeros((m, n))
    for j in range(n):
        col = wm[:, j] + err[:, :j] @ corr[:j, j]
        x = np.clip(_to_code(col, s[:, j], cfg.bits, cfg.grid), 0.0, float(levels))
        if uniforms is None:
            cj = np.rint(x)
        else:
            lo = np.floor(x)
            cj = lo + (uniforms[:, j] < (x - lo))
        codes[:, j] = np.clip(cj, 0, levels).astype(np.int64)
        deq[:, j] = _to_value(codes[:, j], s[:, j], cfg.bits, cfg.grid)
        err[:, j] = wm[:, j] - deq[:, j]
    return QuantizedWeight(codes=codes, scales=scales, dequantized=deq, config=cfg)


def gptq_quantize(w, h, cfg: QuantConfig) -> QuantizedWeight:
    """Sequential column quantization with LDL error propagation.

    For a diagonal Hessian the correction factor vanishes and the result is
    identical to ``rtn_quantize``.
    """
    if cfg.rounding != "nearest":
        raise ValueError("gptq_quantize uses nearest rounding")
    wm = as_matrix(w, "weight")
    hm = require_symmetric(h)
    if hm.shape[0] != wm.shape[1]:
        raise ValueError(
            f"hessian dimension {hm.shape[0]} does not match weight columns {wm.shape[1]}"
        )
    factors = ldl_upper(hm)
    return _sequential_quantize(wm, factors.u, cfg, uniforms=None)


def gptqs_quantize(
    w,
    h,
    cfg: QuantConfig,
    delta: float = 0.1,
    c_value: float | None = None,
    force_nearest: bool = False,
) -> QuantizedWeight:
    """Stochastic-rounding quantizer with norm-constrained error propagation.

    The constraint parameter defaults to c = 2 / log(4mn/delta), which keeps
    every correction inside the grid headroom with probability >= 1 - delta.
    ``c_value`` and ``force_nearest`` are degenerate test hooks: with
    c_value=inf and nearest rounding this reduces to ``gptq_quantize`` on the
    shrunk grid.
    """
    if cfg.rounding != "stochastic":
        raise ValueError("gptqs_quantize uses stochastic rounding")
    if cfg.grid != "shrunk":
        raise ValueError("gptqs_quantize uses the shrunk grid")
    wm = as_matrix(w, "weight")
    hm = require_symmetric(h)
    m, n = wm.shape
    if hm.shape[0] != n:
        raise ValueError(
            f"hessian dimension {hm.shape[0]} does not match weight columns {n}"
        )
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    c = 2.0 / math.log(4.0 * m * n / delta) if c_value is None else c_value
    if math.isinf(c):
        corr = ldl_upper(hm).u
    else:
        sol = constrained_ldl(hm, c)
        corr = np.linalg.solve(sol.l, np.eye(n)) - np.eye(n)
    uniforms = None if force_nearest else _row_uniforms(cfg.seed, m, n)
    return _sequential_quantize(wm, corr, cfg, uniforms=uniforms)


def brute_force_optimal(w_row, h, cfg: QuantConfig) -> tuple[np.ndarray, float]:
    """Exhaustively minimize (w_hat - w) H (w_hat - w)^T over all grid codes.

    Uses a single fixed scale s = max|w_row| for the whole row. Only viable
    for tiny instances: (2^bits)^n must not exceed 2^20.
    """
    wv = np.asarray(w_row, dtype=np.float64).reshape(-1)
    hm = require_symmetric(h)
    n = wv.shape[0]
    if hm.shape[0] != n:
        raise ValueError("hessian dimension does not match row length")
    levels = 2**cfg.bits
    total = levels**n
    if total > 2**20:
        raise ValueError(f"search space {levels}^{n} exceeds 2^20 assignments")
    s = max(float(np.abs(wv).max()), SCALE_FLOOR)
    best_err = math.inf
    best_codes = None
    chunk = 1 << 14
    place = levels ** np.arange(n - 1, -1, -1, dtype=np.int64)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        codes = (idx[:, None] // place) % levels
        diff = _to_value(codes.astype(np.float64), s, cfg.bits, cfg.grid) - wv
        errs = np.einsum("ki,ij,kj->k", diff, hm, diff)
        k = int(np.argmin(errs))
        if errs[k] < best_err:
            best_err = float(errs[k])
            best_codes = codes[k].copy()
    return best_codes, best_err
