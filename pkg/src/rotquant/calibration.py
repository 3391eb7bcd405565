"""Calibration data, Hessian accumulation/damping and synthetic spectrum
construction, plus the bound-comparison experiment over constructed spectra.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .archive import read_archive, write_archive
from .linalg import hadamard_orthonormal, is_power_of_two, ldl_upper, random_orthogonal
from .metrics import ub_bound


@dataclass
class CalibrationSet:
    """Activation batches (samples x dim) with provenance metadata."""

    batches: list[np.ndarray]
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.batches:
            raise ValueError("calibration set needs at least one batch")
        widths = {b.shape[1] for b in self.batches}
        if len(widths) != 1:
            raise ValueError(f"inconsistent batch widths {sorted(widths)}")
        for b in self.batches:
            if not np.all(np.isfinite(b)):
                raise ValueError("calibration batch contains non-finite values")

    @property
    def dim(self) -> int:
        return self.batches[0].shape[1]

    @property
    def sample_count(self) -> int:
        return sum(b.shape[0] for b in self.batches)


def accumulate_from_arrays(batches) -> np.ndarray:
    """(1/N) sum of x x^T over all rows, accumulated batch by batch in order."""
    total = 0
    h = None
    for b in batches:
        b = np.asarray(b, dtype=np.float64)
        if h is None:
            h = np.zeros((b.shape[1], b.shape[1]))
        h += b.T @ b
        total += b.shape[0]
    if total == 0:
        raise ValueError("no samples to accumulate")
    h /= total
    return 0.5 * (h + h.T)


def accumulate_hessian(calib: CalibrationSet) -> np.ndarray:
    """Uncentered second moment E[x x^T] of the calibration activations."""
    return accumulate_from_arrays(calib.batches)


def damp(h, fraction: float) -> np.ndarray:
    """H + fraction * mean(diag(H)) * I."""
    hm = np.asarray(h, dtype=np.float64)
    if fraction < 0:
        raise ValueError("damping fraction must be >= 0")
    if fraction == 0:
        return hm.copy()
    return hm + fraction * float(np.mean(np.diag(hm))) * np.eye(hm.shape[0])


def synthetic_calibration(
    n: int,
    samples: int,
    outlier_channels: int = 0,
    outlier_scale: float = 1.0,
    seed: int = 0,
    batch_size: int = 128,
) -> CalibrationSet:
    """Gaussian activations with a few seeded channels scaled up.

    The scaled channels mimic persistent per-channel activation outliers;
    deterministic per seed.
    """
    if outlier_channels > n:
        raise ValueError("more outlier channels than dimensions")
    rng = np.random.default_rng(seed)
    channels = np.sort(rng.choice(n, size=outlier_channels, replace=False))
    data = rng.standard_normal((samples, n))
    data[:, channels] *= outlier_scale
    batches = [data[i : i + batch_size] for i in range(0, samples, batch_size)]
    return CalibrationSet(
        batches=batches,
        source={
            "kind": "synthetic",
            "n": n,
            "samples": samples,
            "outlier_channels": [int(c) for c in channels],
            "outlier_scale": outlier_scale,
            "seed": seed,
        },
    )


def save_calibration(calib: CalibrationSet, path) -> None:
    write_archive(path, {f"batch.{i:04d}": b for i, b in enumerate(calib.batches)})


def load_calibration(path) -> CalibrationSet:
    tensors = read_archive(path)
    names = sorted(tensors)
    return CalibrationSet(
        batches=[tensors[k] for k in names], source={"kind": "archive", "path": str(path)}
    )


@dataclass(frozen=True)
class SpectrumSpec:
    """Constructed covariance: eigenvalues i^exponent with a chosen eigenbasis."""

    n: int
    spectrum: str = "polynomial"
    exponent: float = 1.5
    rank: int = 10
    eigenbasis: str = "hadamard"
    seed: int = 0

    def __post_init__(self):
        if self.spectrum not in ("polynomial", "low-rank"):
            raise ValueError(f"unknown spectrum {self.spectrum!r}")
        if self.eigenbasis not in ("hadamard", "random"):
            raise ValueError(f"unknown eigenbasis {self.eigenbasis!r}")
        if self.eigenbasis == "hadamard" and not is_power_of_two(self.n):
            raise ValueError("hadamard eigenbasis needs a power-of-two dimension")


def spectrum_ground_truth(spec: SpectrumSpec) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth eigenvectors and eigenvalues for a constructed spectrum."""
    lam = np.arange(1, spec.n + 1, dtype=np.float64) ** spec.exponent
    if spec.spectrum == "low-rank":
        lam[spec.rank :] = 0.0
    if spec.eigenbasis == "hadamard":
        q = hadamard_orthonormal(spec.n)
    else:
        q = random_orthogonal(spec.n, spec.seed)
    return q, lam


def build_spectrum_hessian(spec: SpectrumSpec) -> np.ndarray:
    """H = Q diag(lambda) Q^T for the requested spectrum and basis."""
    q, lam = spectrum_ground_truth(spec)
    h = (q * lam) @ q.T
    return 0.5 * (h + h.T)


def _incoherence_bound(q: np.ndarray, lam: np.ndarray) -> float:
    """mu_H^2 tr(H^{1/2})^2 / n at c = infinity (unconstrained comparison)."""
    n = q.shape[0]
    mu_sq = n * float(np.abs(q).max()) ** 2
    return mu_sq * float(np.sum(np.sqrt(np.maximum(lam, 0.0)))) ** 2 / n


BOUNDS_COLUMNS = [
    "n",
    "spectrum",
    "basis",
    "seed",
    "tr_h",
    "tr_d",
    "ub",
    "inc_bound_true_q",
    "inc_bound_recomputed_q",
]


def _bounds_row(spec: SpectrumSpec) -> dict:
    q, lam = spectrum_ground_truth(spec)
    h = (q * lam) @ q.T
    h = 0.5 * (h + h.T)
    tr_d = float(np.sum(ldl_upper(h).d))
    u, s, _ = np.linalg.svd(h)
    return {
        "n": spec.n,
        "spectrum": spec.spectrum,
        "basis": spec.eigenbasis,
        "seed": spec.seed,
        "tr_h": float(np.trace(h)),
        "tr_d": tr_d,
        "ub": ub_bound(h),
        "inc_bound_true_q": _incoherence_bound(q, lam),
        "inc_bound_recomputed_q": _incoherence_bound(u, s),
    }


def bounds_experiment(
    sizes=(16, 64, 256),
    spectra=("polynomial", "low-rank"),
    bases=("hadamard", "random"),
    seeds: int = 20,
    exponent: float = 1.5,
    rank: int = 10,
    workers: int = 1,
) -> list[dict]:
    """Grid of trace/UB/incoherence bound comparisons, one row per point.

    The recomputed-eigenvector variant runs a standard SVD on H, which picks
    an arbitrary basis for degenerate eigenspaces: that is precisely the
    practical scenario the comparison is about.
    """
    grid = [
        SpectrumSpec(
            n=n, spectrum=sp, exponent=exponent, rank=rank, eigenbasis=basis, seed=seed
        )
        for n in sizes
        for sp in spectra
        for basis in bases
        for seed in range(seeds)
    ]
    if workers <= 1:
        return [_bounds_row(s) for s in grid]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_bounds_row, grid))


def bounds_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BOUNDS_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()
