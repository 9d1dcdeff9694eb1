"""Closed-form optimal transport between Gaussians and location-scatter laws.

Conventions follow the halved quadratic cost, so for Gaussians

    BW2^2(P, Q) = 1/2 |m_P - m_Q|^2 + 1/2 tr S_P + 1/2 tr S_Q - tr (S_P^1/2 S_Q S_P^1/2)^1/2
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

COV_FLOOR = 1e-9
NEG_EIG_WINDOW = 1e-9


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=None, iterations=None):
        self.residual = residual
        self.iterations = iterations
        super().__init__(message)


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}


@dataclass(frozen=True)
class LinearMap:
    """x -> A x + b, applied row-wise to batches."""

    A: np.ndarray
    b: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.A.T + self.b

    def inverse(self) -> "LinearMap":
        Ainv = np.linalg.inv(self.A)
        return LinearMap(Ainv, -Ainv @ self.b)

    def potential(self, x: np.ndarray, const: float = 0.0) -> np.ndarray:
        """Quadratic potential whose gradient is this map (A symmetric)."""
        x = np.asarray(x)
        return 0.5 * np.einsum("ki,ij,kj->k", x, self.A, x) + x @ self.b + const


# ------------------------------------------------------------ linear algebra


def sym_eig(M, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ascending eigenvalues and the matching orthonormal eigenvectors
    as columns.
    """
    A = np.array(M, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("sym_eig needs a square matrix")
    if np.max(np.abs(A - A.T), initial=0.0) >= 1e-8:
        raise ValueError("sym_eig needs a symmetric matrix")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    V = np.eye(n)
    scale = np.sqrt(np.sum(A * A))
    offdiag = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps + 1):
        off = np.sqrt(np.sum(A[offdiag] ** 2))
        if off <= 1e-15 * scale or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap = A[p, :].copy()
                aq = A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps", residual=off)
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def _spectral(M, fn) -> np.ndarray:
    w, Q = sym_eig(0.5 * (np.asarray(M) + np.asarray(M).T))
    if w.size and w[0] < -NEG_EIG_WINDOW * max(1.0, abs(w[-1])):
        raise ValueError(f"matrix is not positive semidefinite (eigenvalue {w[0]:.3e})")
    w = np.maximum(w, 0.0)
    R = (Q * fn(w)) @ Q.T
    return 0.5 * (R + R.T)


def sqrtm_psd(M) -> np.ndarray:
    return _spectral(M, np.sqrt)


def inv_sqrtm_spd(M) -> np.ndarray:
    return _spectral(M, _safe_inv_sqrt)


def _safe_inv_sqrt(w):
    if np.any(w <= 0):
        raise np.linalg.LinAlgError("matrix is singular")
    return 1.0 / np.sqrt(w)


# ------------------------------------------------------------------- OT


def bures_w2_sq(P: GaussianMoments, Q: GaussianMoments) -> float:
    rP = sqrtm_psd(P.cov)
    cross = np.trace(sqrtm_psd(rP @ Q.cov @ rP))
    d = P.mean - Q.mean
    val = 0.5 * float(d @ d) + 0.5 * np.trace(P.cov) + 0.5 * np.trace(Q.cov) - cross
    if val < 0:
        if val < -NEG_EIG_WINDOW * max(1.0, np.trace(P.cov) + np.trace(Q.cov)):
            raise ArithmeticError(f"negative Bures-Wasserstein value {val}")
        val = 0.0
    return float(val)


def gaussian_ot_map(P: GaussianMoments, Q: GaussianMoments) -> LinearMap:
    """Optimal (symmetric PSD) affine map pushing N(P) to N(Q)."""
    rP = sqrtm_psd(P.cov)
    try:
        rPinv = inv_sqrtm_spd(P.cov)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("source covariance is singular") from exc
    A = rPinv @ sqrtm_psd(rP @ Q.cov @ rP) @ rPinv
    A = 0.5 * (A + A.T)
    return LinearMap(A, Q.mean - A @ P.mean)


def _fixed_point_step(S: np.ndarray, covs, weights) -> np.ndarray:
    r = sqrtm_psd(S)
    rinv = inv_sqrtm_spd(S)
    acc = sum(a * sqrtm_psd(r @ C @ r) for a, C in zip(weights, covs))
    out = rinv @ acc @ acc @ rinv
    return 0.5 * (out + out.T)


@dataclass
class FixedPointInfo:
    iterations: int
    residual: float


def fixed_point_barycenter(
    moments: Sequence[GaussianMoments],
    weights,
    tol: float = 1e-10,
    max_iter: int = 500,
    return_info: bool = False,
):
    """Bures-Wasserstein barycenter of Gaussians by the covariance fixed point.

    Starts from the identity and stops once successive iterates differ by
    less than ``tol`` in max-norm.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if len(moments) != weights.size or weights.size == 0:
        raise ValueError("need one weight per distribution")
    if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError("weights must be positive and sum to 1")
    covs = [m.cov for m in moments]
    mean = sum(a * m.mean for a, m in zip(weights, moments))
    S = np.eye(moments[0].dim)
    residual = np.inf
    for it in range(1, max_iter + 1):
        S_next = _fixed_point_step(S, covs, weights)
        residual = float(np.max(np.abs(S_next - S)))
        S = S_next
        if residual < tol:
            break
    else:
        raise ConvergenceError(
            f"fixed point did not converge in {max_iter} iterations (residual {residual:.3e})",
            residual=residual,
            iterations=max_iter,
        )
    out = GaussianMoments(mean, S)
    if return_info:
        return out, FixedPointInfo(it, residual)
    return out


def fixed_point_residual(S: np.ndarray, moments: Sequence[GaussianMoments], weights) -> float:
    S_next = _fixed_point_step(S, [m.cov for m in moments], np.asarray(weights, dtype=np.float64))
    return float(np.max(np.abs(S_next - S)))


def ls_ground_truth(family, weights) -> tuple[GaussianMoments, list[LinearMap]]:
    """True barycenter and optimal maps for a whitened location-scatter family.

    ``family`` members need ``S`` (SPD scatter) and ``u`` (shift); member n is
    the law of ``S_n z + u_n`` with ``z`` zero-mean, identity-covariance.
    """
    members = [GaussianMoments(f.u, f.S @ f.S) for f in family]
    bar = fixed_point_barycenter(members, weights)
    maps = [gaussian_ot_map(m, bar) for m in members]
    return bar, maps


def optimal_potential_constants(maps: Sequence[LinearMap], weights) -> np.ndarray:
    """Additive constants making the quadratic potentials congruent with c = 0.

    With psi_n(x) = x'A_n x/2 + b_n'x + c_n the conjugates sum to |y|^2/2
    exactly when sum_n alpha_n (b_n' A_n^-1 b_n / 2 - c_n) = 0; we split it as
    c_n = b_n' A_n^-1 b_n / 2.
    """
    return np.array([0.5 * float(m.b @ np.linalg.solve(m.A, m.b)) for m in maps])
