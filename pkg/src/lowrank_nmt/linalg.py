"""One-sided Jacobi SVD, Eckart-Young truncation and singular-spectrum helpers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError


class DomainError(ValueError):
    pass


@dataclass
class SvdResult:
    U: np.ndarray  # (n, n)
    S: np.ndarray  # (min(n, m),), decreasing
    V: np.ndarray  # (m, m)

    def reconstruct(self) -> np.ndarray:
        k = self.S.shape[0]
        return (self.U[:, :k] * self.S) @ self.V[:, :k].T


@dataclass
class SingularSpectrum:
    values: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(np.diff(self.values) > 0):
            raise ContractError("singular spectrum must be nonincreasing")

    def __len__(self) -> int:
        return len(self.values)


def _round_robin(m: int):
    """Yield rounds of disjoint column pairs covering every pair once."""
    players = list(range(m)) + ([-1] if m % 2 else [])
    k = len(players)
    for _ in range(k - 1):
        pairs = [(players[i], players[k - 1 - i]) for i in range(k // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            yield np.array(pairs, dtype=np.intp)
        players = [players[0], players[-1]] + players[1:-1]


def _complete_basis(Q: np.ndarray, n: int, rng_seed: int = 0) -> np.ndarray:
    """Extend orthonormal columns ``Q`` (n, r) to an orthogonal (n, n) matrix."""
    r = Q.shape[1]
    if r == n:
        return Q
    rng = np.random.default_rng(rng_seed)
    extra = rng.standard_normal((n, n - r))
    # two passes of projection keep the complement orthogonal to working precision
    for _ in range(2):
        extra -= Q @ (Q.T @ extra)
    qe, _ = np.linalg.qr(extra)
    return np.concatenate([Q, qe], axis=1)


def _jacobi_tall(M: np.ndarray, tol: float, max_sweeps: int):
    n, m = M.shape
    A = M.copy()
    V = np.eye(m)
    rounds = list(_round_robin(m))
    for _ in range(max_sweeps):
        rotated = False
        for pairs in rounds:
            p, q = pairs[:, 0], pairs[:, 1]
            ap, aq = A[:, p], A[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            active &= gamma != 0
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = A[:, p], A[:, q]
            A[:, p] = c * ap - s * aq
            A[:, q] = s * ap + c * aq
            vp, vq = V[:, p], V[:, q]
            V[:, p] = c * vp - s * vq
            V[:, q] = s * vp + c * vq
        if not rotated:
            break
    sigma = np.linalg.norm(A, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, A, V = sigma[order], A[:, order], V[:, order]
    scale = sigma[0] if sigma.size and sigma[0] > 0 else 1.0
    nonzero = sigma > scale * n * np.finfo(np.float64).eps
    U = np.zeros((n, m))
    U[:, nonzero] = A[:, nonzero] / sigma[nonzero]
    sigma = np.where(nonzero, sigma, 0.0)
    r = int(nonzero.sum())
    U = _complete_basis(U[:, :r], n)
    return U, sigma, V


def svd(M, tol: float = 1e-15, max_sweeps: int = 60) -> SvdResult:
    """Full SVD ``M = U diag(S) V^T`` by one-sided (Hestenes) Jacobi rotations."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ContractError(f"svd expects a matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise DomainError("svd input contains NaN or Inf")
    n, m = M.shape
    if n >= m:
        U, S, V = _jacobi_tall(M, tol, max_sweeps)
    else:
        V, S, U = _jacobi_tall(M.T, tol, max_sweeps)
    return SvdResult(U=U, S=S, V=V)


def truncate_to_rank(M, p: int, result: SvdResult | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Best rank-``p`` factors ``(A, B)`` of ``M`` split as ``U_p sqrt(D_p)`` and ``sqrt(D_p) V_p^T``."""
    M = np.asarray(M, dtype=np.float64)
    n, m = M.shape
    if not isinstance(p, (int, np.integer)) or not 1 <= p <= min(n, m):
        raise ContractError(f"rank {p} outside [1, {min(n, m)}] for a {n}x{m} matrix")
    res = svd(M) if result is None else result
    root = np.sqrt(res.S[:p])
    A = res.U[:, :p] * root
    B = root[:, None] * res.V[:, :p].T
    return A, B


def spectrum(M, source: str = "") -> SingularSpectrum:
    return SingularSpectrum(svd(M).S, source)


def relevant_rank(spec: SingularSpectrum | np.ndarray, ratio: float = 0.1) -> int:
    """Count singular values strictly greater than ``ratio`` times the largest."""
    values = spec.values if isinstance(spec, SingularSpectrum) else np.asarray(spec, dtype=np.float64)
    if values.size == 0:
        raise ContractError("relevant_rank of an empty spectrum")
    top = values.max()
    return int(np.count_nonzero(values > ratio * top))
