"""Dense linear-algebra kernels: Hadamard constructions, fast Walsh-Hadamard
transform, upper-convention LDL, norm-constrained LDL, and a cyclic-Jacobi
symmetric eigensolver.

All routines work on plain float64 ndarrays and are pure functions of their
inputs; seeded generators are the only randomness and are created per call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit


class NumericalError(RuntimeError):
    """A numerical routine failed on an input that passed validation."""


class FactorizationError(NumericalError):
    """LDL/Cholesky pivot failure. Carries the first failing pivot index."""

    def __init__(self, message: str, pivot: int):
        super().__init__(message)
        self.pivot = pivot


class ConvergenceError(NumericalError):
    """Iterative solver did not reach its tolerance. Carries the residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite values")
    return m


def require_symmetric(h, tol: float = 1e-10, name: str = "hessian") -> np.ndarray:
    """Validate symmetry within a relative tolerance and return (H + H^T)/2."""
    m = as_matrix(h, name)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    scale = np.linalg.norm(m)
    defect = np.linalg.norm(m - m.T)
    if defect > tol * max(scale, 1e-300):
        raise ValueError(
            f"{name} is not symmetric: relative defect {defect / max(scale, 1e-300):.3e}"
        )
    return 0.5 * (m + m.T)


def hadamard_orthonormal(n: int) -> np.ndarray:
    """Orthonormal Sylvester-Hadamard matrix H_n / sqrt(n); n must be 2^k."""
    if not is_power_of_two(n):
        raise ValueError(f"Hadamard order must be a power of two, got {n}")
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h / math.sqrt(n)


def randomized_hadamard(n: int, seed: int) -> np.ndarray:
    """Sign-randomized orthonormal Hadamard: diag(s) @ H_n/sqrt(n), s in {-1,+1}^n.

    Deterministic per seed. The sign diagonal breaks any adversarial alignment
    between the input basis and the fixed Hadamard pattern.
    """
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=n) * 2 - 1
    return signs[:, None] * hadamard_orthonormal(n)


def fwht_in_place(v: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Fast Walsh-Hadamard transform of a length-2^k vector, in place.

    With ``normalize`` the result equals ``hadamard_orthonormal(n) @ v``.
    O(n log n) butterfly; the input array is modified and returned.
    """
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    n = v.shape[0]
    if not is_power_of_two(n):
        raise ValueError(f"vector length must be a power of two, got {n}")
    if not np.issubdtype(v.dtype, np.floating):
        raise ValueError("fwht_in_place requires a float vector")
    h = 1
    while h < n:
        blocks = v.reshape(n // (2 * h), 2, h)
        top = blocks[:, 0, :].copy()
        blocks[:, 0, :] = top + blocks[:, 1, :]
        blocks[:, 1, :] = top - blocks[:, 1, :]
        h *= 2
    if normalize:
        v *= 1.0 / math.sqrt(n)
    return v


def random_orthogonal(n: int, seed: int) -> np.ndarray:
    """Haar-ish random orthogonal matrix: QR of a seeded Gaussian matrix.

    Signs are fixed so the R factor has a positive diagonal, which makes the
    result unique and deterministic per seed.
    """
    if n < 1:
        raise ValueError(f"dimension must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, n))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return q


@dataclass(frozen=True)
class LdlFactors:
    """Upper-convention LDL factors: H = (U + I) diag(d) (U + I)^T.

    ``u`` is strictly upper triangular and ``d`` is nonnegative.
    """

    u: np.ndarray
    d: np.ndarray

    @property
    def l(self) -> np.ndarray:
        """(U + I)^{-1}, the unit upper-triangular correction map."""
        n = self.u.shape[0]
        return np.linalg.solve(self.u + np.eye(n), np.eye(n))

    def reconstruct(self) -> np.ndarray:
        a = self.u + np.eye(self.u.shape[0])
        return (a * self.d) @ a.T


def ldl_upper(h, pivot_rtol: float = 1e-13) -> LdlFactors:
    """Upper-convention LDL of a symmetric PSD matrix.

    Equivalent to Cholesky of the index-reversed matrix: pivots are eliminated
    from the last index backwards. Pivots below ``pivot_rtol * tr(H)`` are
    clamped to zero (semidefinite inputs); a negative pivot or an inconsistent
    zero-pivot column raises FactorizationError with the failing index.
    """
    s = require_symmetric(h).copy()
    n = s.shape[0]
    u = np.zeros((n, n))
    d = np.zeros(n)
    trace = float(np.trace(s))
    floor = pivot_rtol * max(trace, 1e-300)
    col_tol = 1e-7 * max(np.linalg.norm(s), 1e-300)
    for j in range(n - 1, -1, -1):
        pivot = s[j, j]
        if pivot < -floor:
            raise FactorizationError(
                f"negative pivot {pivot:.3e} at index {j}: input is not PSD", pivot=j
            )
        if pivot <= floor:
            d[j] = 0.0
            if np.linalg.norm(s[:j, j]) > col_tol:
                raise FactorizationError(
                    f"zero pivot at index {j} with nonzero column: input is not PSD",
                    pivot=j,
                )
            continue
        d[j] = pivot
        u[:j, j] = s[:j, j] / pivot
        s[:j, :j] -= pivot * np.outer(u[:j, j], u[:j, j])
    return LdlFactors(u=u, d=d)


@dataclass(frozen=True)
class ConstrainedLdl:
    """Solution of the column-norm-capped LDL program.

    ``l`` is unit upper triangular with every column satisfying
    ||L e_i||^2 <= 1 + c, and ``objective`` is tr(H L^T L) at the solution.
    """

    l: np.ndarray
    c: float
    objective: float


def _trace_objective(h: np.ndarray, l: np.ndarray) -> float:
    return float(np.einsum("ia,ab,ib->", l, h, l))


def constrained_ldl_candidate(h: np.ndarray, c: float) -> np.ndarray:
    """Feasible closed-form candidate L = I - (alpha / tr(H)) * triu(H, 1).

    alpha = min(1, sqrt(c)); feasibility follows from |H_ij|^2 <= H_ii H_jj.
    """
    n = h.shape[0]
    alpha = min(1.0, math.sqrt(c))
    return np.eye(n) - (alpha / np.trace(h)) * np.triu(h, 1)


def constrained_ldl(
    h, c: float, tol: float = 1e-9, max_passes: int = 200
) -> ConstrainedLdl:
    """Minimize tr(H L^T L) over unit upper-triangular L with per-column caps.

    Every column must satisfy ||L e_i||^2 <= 1 + c. If the exact LDL inverse
    is feasible it is the unconstrained optimum and is returned directly.
    Otherwise projected cyclic coordinate descent runs column by column, each
    update a closed-form projection onto a norm ball, starting from the
    feasible closed-form candidate. The problem is convex, so the descent
    converges to the global solution.
    """
    hm = require_symmetric(h)
    n = hm.shape[0]
    if c <= 0:
        raise ValueError(f"constraint parameter c must be positive, got {c}")
    trace = float(np.trace(hm))
    if trace <= 0:
        raise ValueError("hessian must have positive trace")

    factors = ldl_upper(hm)
    l_true = factors.l
    col_sq = np.sum(l_true * l_true, axis=0)
    if np.all(col_sq <= 1.0 + c + 1e-10):
        return ConstrainedLdl(l=l_true, c=c, objective=float(np.sum(factors.d)))

    l = constrained_ldl_candidate(hm, c)
    obj = _trace_objective(hm, l)
    for _ in range(max_passes):
        for j in range(1, n):
            hj = hm[:, j]
            hjj = hj[j]
            g = (l[:j, :] @ hj) - l[:j, j] * hjj
            if hjj <= 0:
                l[:j, j] = 0.0
                continue
            x = -g / hjj
            norm_sq = float(x @ x)
            if norm_sq > c:
                x *= math.sqrt(c / norm_sq)
            l[:j, j] = x
        new_obj = _trace_objective(hm, l)
        if abs(obj - new_obj) <= tol * max(abs(obj), 1e-300):
            obj = new_obj
            break
        obj = new_obj
    return ConstrainedLdl(l=l, c=c, objective=obj)


@dataclass(frozen=True)
class EigenDecomposition:
    """Symmetric eigendecomposition H = Q diag(lambdas) Q^T.

    Columns of ``q`` are orthonormal eigenvectors matched to ``lambdas``,
    which are sorted in descending order.
    """

    q: np.ndarray
    lambdas: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.q * self.lambdas) @ self.q.T


@njit(cache=True)
def _jacobi_kernel(a, q, tol, max_sweeps):  # pragma: no cover - compiled
    n = a.shape[0]
    for sweep in range(max_sweeps):
        off = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    off += a[i, j] * a[i, j]
        off = math.sqrt(off)
        if off <= tol:
            return off
        for p in range(n - 1):
            for qi in range(p + 1, n):
                apq = a[p, qi]
                if apq == 0.0:
                    continue
                tau = (a[qi, qi] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = 1.0 / (tau - math.sqrt(1.0 + tau * tau))
                cth = 1.0 / math.sqrt(1.0 + t * t)
                sth = t * cth
                for k in range(n):
                    akp = a[p, k]
                    akq = a[qi, k]
                    a[p, k] = cth * akp - sth * akq
                    a[qi, k] = sth * akp + cth * akq
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, qi]
                    a[k, p] = cth * akp - sth * akq
                    a[k, qi] = sth * akp + cth * akq
                a[p, qi] = 0.0
                a[qi, p] = 0.0
                for k in range(n):
                    qkp = q[k, p]
                    qkq = q[k, qi]
                    q[k, p] = cth * qkp - sth * qkq
                    q[k, qi] = sth * qkp + cth * qkq
    off = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                off += a[i, j] * a[i, j]
    off = math.sqrt(off)
    if off <= tol:
        return off
    return -off


def jacobi_eigh(h, max_sweeps: int = 100) -> EigenDecomposition:
    """Cyclic-Jacobi eigendecomposition of a symmetric matrix.

    Sweeps until the off-diagonal Frobenius norm drops below 1e-12 * ||H||_F
    (or ``max_sweeps``); eigenvalues come back sorted descending with
    column-matched eigenvectors.
    """
    a = require_symmetric(h).copy()
    n = a.shape[0]
    scale = np.linalg.norm(a)
    q = np.eye(n)
    if scale > 0:
        result = _jacobi_kernel(a, q, 1e-12 * scale, max_sweeps)
        if result < 0:
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps "
                f"(off-diagonal residual {-result:.3e})",
                residual=float(-result),
            )
    lam = np.diag(a).copy()
    order = np.argsort(-lam, kind="stable")
    return EigenDecomposition(q=np.ascontiguousarray(q[:, order]), lambdas=lam[order])


def clamped_psd_eigenvalues(lam: np.ndarray, trace: float, rtol: float = 1e-8) -> np.ndarray:
    """Clamp small negative eigenvalues of a numerically PSD spectrum to zero.

    Raises if any eigenvalue is below -rtol * trace, i.e. genuinely indefinite.
    """
    floor = -rtol * max(abs(trace), 1e-300)
    if np.any(lam < floor):
        raise ValueError(
            f"matrix is not PSD: eigenvalue {lam.min():.3e} below tolerance {floor:.3e}"
        )
    return np.maximum(lam, 0.0)
