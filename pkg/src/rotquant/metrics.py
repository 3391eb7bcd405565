"""Measurable quantities for quantization runs: incoherence statistics,
layerwise reconstruction error, worst-case error bounds, correction-norm
diagnostics, SNR and the summed-error divergence proxy.

Everything here is a pure read-only computation in float64.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, asdict

import numpy as np

from .linalg import (
    ConstrainedLdl,
    LdlFactors,
    as_matrix,
    clamped_psd_eigenvalues,
    constrained_ldl,
    jacobi_eigh,
    ldl_upper,
    require_symmetric,
)

DEGENERACY_RTOL = 1e-8


def weight_incoherence(w) -> float:
    """sqrt(m*n) * max|W| / ||W||_F. Minimum 1, attained by constant matrices."""
    wm = as_matrix(w, "weight")
    frob = float(np.linalg.norm(wm))
    if frob == 0.0:
        raise ValueError("weight incoherence is undefined for an all-zero matrix")
    m, n = wm.shape
    return math.sqrt(m * n) * float(np.abs(wm).max()) / frob


def _mu_and_degeneracy(eig, trace: float) -> tuple[float, bool]:
    n = eig.q.shape[0]
    mu = math.sqrt(n) * float(np.abs(eig.q).max())
    gaps = -np.diff(eig.lambdas)
    degenerate = bool(n > 1 and np.any(gaps < DEGENERACY_RTOL * abs(trace)))
    return mu, degenerate


def hessian_incoherence(h) -> tuple[float, bool]:
    """sqrt(n) * max|Q| over eigenvectors of H, plus a degeneracy flag.

    The flag is set when two adjacent sorted eigenvalues are closer than
    1e-8 * tr(H); in that case the eigenbasis (and hence the value) is
    basis-dependent rather than canonical.
    """
    hm = require_symmetric(h)
    return _mu_and_degeneracy(jacobi_eigh(hm), float(np.trace(hm)))


def layerwise_error(w, w_hat, h) -> float:
    """tr((W_hat - W) H (W_hat - W)^T): expected squared output deviation."""
    wm = as_matrix(w, "weight")
    wh = as_matrix(w_hat, "quantized weight")
    if wm.shape != wh.shape:
        raise ValueError(f"shape mismatch {wm.shape} vs {wh.shape}")
    hm = require_symmetric(h)
    if hm.shape[0] != wm.shape[1]:
        raise ValueError("hessian dimension does not match weight columns")
    d = wh - wm
    return float(np.einsum("ia,ab,ib->", d, hm, d))


def off_diagonal_sq(h: np.ndarray) -> float:
    """Sum of squared off-diagonal entries."""
    return float((h * h).sum() - (np.diag(h) ** 2).sum())


def ub_bound(h) -> float:
    """Smooth cap on the constrained-LDL objective: tr(H) - ||H||_off^2 / (2 tr(H))."""
    hm = require_symmetric(h)
    tr = float(np.trace(hm))
    if tr <= 0:
        raise ValueError("ub_bound requires positive trace")
    return tr - off_diagonal_sq(hm) / (2.0 * tr)


def rtn_error_bound(w, h, bits: int) -> float:
    """Worst-case round-to-nearest error: mu_W^2/(2^b-1)^2 * lambda_max(H) * ||W||_F^2."""
    wm = as_matrix(w, "weight")
    hm = require_symmetric(h)
    mu = weight_incoherence(wm)
    lam_max = float(jacobi_eigh(hm).lambdas[0])
    frob_sq = float(np.sum(wm * wm))
    return (mu**2 / (2**bits - 1) ** 2) * lam_max * frob_sq


def sqrt_trace(h) -> float:
    """tr(H^{1/2}) via the eigenvalues, with tiny negatives clamped to zero."""
    hm = require_symmetric(h)
    lam = jacobi_eigh(hm).lambdas
    lam = clamped_psd_eigenvalues(lam, float(np.trace(hm)))
    return float(np.sum(np.sqrt(lam)))


def _shrunk_grid_bounds(
    mu_w: float,
    frob_sq: float,
    m: int,
    n: int,
    objective: float,
    ub_val: float,
    mu_h: float,
    sqrt_tr: float,
    bits: int,
    delta: float,
) -> tuple[float, float, float]:
    step_sq = (2**bits - 3) ** 2
    log_small = 0.5 * math.log(2.0 * m * n / delta)
    log_big = math.log(4.0 * m * n / delta)
    trace_bound = (mu_w**2 / (n * step_sq)) * objective * frob_sq * log_small
    ub_bound_value = (mu_w**2 / (n * step_sq)) * 2.0 * ub_val * frob_sq * log_small
    inc_bound = (
        (mu_h**2 * mu_w**2 / (n**2 * step_sq)) * sqrt_tr**2 * frob_sq * log_big**2
    )
    return trace_bound, ub_bound_value, inc_bound


def gptq_error_bounds(
    w, h, l: ConstrainedLdl, bits: int, delta: float
) -> tuple[float, float, float]:
    """High-probability error caps for the stochastic sequential quantizer.

    Returns (trace_bound, ub_bound_value, incoherence_bound):

    * trace_bound       uses tr(H L^T L) at the constrained solution,
    * ub_bound_value    substitutes the smooth cap 2*UB for tr(H L^T L),
    * incoherence_bound uses mu_H^2 tr(H^{1/2})^2 / n with the larger log.

    All three assume the shrunk grid, hence bits >= 3.
    """
    if bits < 3:
        raise ValueError("shrunk-grid bounds need bits >= 3")
    wm = as_matrix(w, "weight")
    hm = require_symmetric(h)
    m, n = wm.shape
    mu_h, _ = hessian_incoherence(hm)
    return _shrunk_grid_bounds(
        weight_incoherence(wm),
        float(np.sum(wm * wm)),
        m,
        n,
        l.objective,
        ub_bound(hm),
        mu_h,
        sqrt_trace(hm),
        bits,
        delta,
    )


def correction_max(l: ConstrainedLdl | LdlFactors) -> float:
    """Largest squared column norm max_i ||L e_i||^2 of the correction map."""
    mat = l.l
    return float(np.sum(mat * mat, axis=0).max())


def snr_db(w, w_hat, h) -> float:
    """10 log10 of signal power over quantization-noise power.

    Exact reconstruction is reported as math.inf, a sentinel distinct from
    any floating overflow; serializers map it to the string "exact".
    """
    wm = as_matrix(w, "weight")
    hm = require_symmetric(h)
    signal = float(np.einsum("ia,ab,ib->", wm, hm, wm))
    if signal <= 0:
        raise ValueError("snr_db requires positive signal power tr(W H W^T)")
    err = layerwise_error(wm, w_hat, hm)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(signal / err)


def kl_proxy(layers) -> float:
    """Sum of layerwise errors over (W, W_hat, H) triples."""
    return float(sum(layerwise_error(w, w_hat, h) for w, w_hat, h in layers))


_REPORT_COLUMNS = [
    "layer",
    "role",
    "mu_w",
    "mu_h",
    "mu_h_degenerate",
    "w_max",
    "frob_sq",
    "tr_h",
    "tr_d",
    "ub",
    "off_diag_sq",
    "rtn_bound",
    "gptq_trace_bound",
    "gptq_ub_bound",
    "gptq_incoherence_bound",
    "actual_error",
    "snr_db",
]


@dataclass(frozen=True)
class BoundReport:
    """Per-layer diagnostics row; see ``_REPORT_COLUMNS`` for the CSV order."""

    layer: int
    role: str
    mu_w: float
    mu_h: float
    mu_h_degenerate: bool
    w_max: float
    frob_sq: float
    tr_h: float
    tr_d: float
    ub: float
    off_diag_sq: float
    rtn_bound: float
    gptq_trace_bound: float
    gptq_ub_bound: float
    gptq_incoherence_bound: float
    actual_error: float
    snr_db: float

    def __post_init__(self):
        tol = 1e-9 * max(1.0, abs(self.tr_h))
        if self.mu_w < 1.0 - 1e-9:
            raise ValueError(f"mu_w {self.mu_w} below its minimum 1")
        if self.ub > self.tr_h + tol:
            raise ValueError("UB exceeds tr(H)")
        if self.tr_d > 2.0 * self.ub + tol:
            raise ValueError("tr(D) exceeds 2*UB")
        if self.tr_d > self.tr_h + tol:
            raise ValueError("tr(D) exceeds tr(H)")
        if self.actual_error < -tol:
            raise ValueError("negative layerwise error")

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["snr_db"]):
            d["snr_db"] = "exact"
        return d


def build_bound_report(
    layer: int, role: str, w, w_hat, h, bits: int, delta: float = 0.1
) -> BoundReport:
    """Compute every diagnostic for one quantized layer.

    One eigendecomposition of H feeds the incoherence, the worst-case RTN cap
    and the square-root trace. Shrunk-grid bounds are NaN when bits < 3 (the
    grid degenerates there).
    """
    wm = as_matrix(w, "weight")
    hm = require_symmetric(h)
    m, n = wm.shape
    tr_h = float(np.trace(hm))
    eig = jacobi_eigh(hm)
    mu_h, degenerate = _mu_and_degeneracy(eig, tr_h)
    lam = clamped_psd_eigenvalues(eig.lambdas, tr_h)
    mu_w = weight_incoherence(wm)
    frob_sq = float(np.sum(wm * wm))
    ub_val = ub_bound(hm)
    tr_d = float(np.sum(ldl_upper(hm).d))
    if bits >= 3:
        c = 2.0 / math.log(4.0 * m * n / delta)
        sol = constrained_ldl(hm, c)
        trace_b, ub_b, inc_b = _shrunk_grid_bounds(
            mu_w,
            frob_sq,
            m,
            n,
            sol.objective,
            ub_val,
            mu_h,
            float(np.sum(np.sqrt(lam))),
            bits,
            delta,
        )
    else:
        trace_b = ub_b = inc_b = math.nan
    return BoundReport(
        layer=layer,
        role=role,
        mu_w=mu_w,
        mu_h=mu_h,
        mu_h_degenerate=degenerate,
        w_max=float(np.abs(wm).max()),
        frob_sq=frob_sq,
        tr_h=tr_h,
        tr_d=tr_d,
        ub=ub_val,
        off_diag_sq=off_diagonal_sq(hm),
        rtn_bound=(mu_w**2 / (2**bits - 1) ** 2) * float(lam[0]) * frob_sq,
        gptq_trace_bound=trace_b,
        gptq_ub_bound=ub_b,
        gptq_incoherence_bound=inc_b,
        actual_error=layerwise_error(wm, w_hat, hm),
        snr_db=snr_db(wm, w_hat, hm),
    )


def reports_to_csv(reports: list[BoundReport]) -> str:
    """Render reports as CSV with the documented stable column order."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        row = asdict(r)
        row["mu_h_degenerate"] = int(row["mu_h_degenerate"])
        writer.writerow(row)
    return buf.getvalue()
