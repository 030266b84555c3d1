"""Spectrum of the factorised score matrix ``U V^T`` without forming it.

Everything heavy happens on a small core: with thin QR factors ``U = Qu Ru``
and ``V = Qv Rv`` the score matrix is ``Qu (Ru Rv^T) Qv^T``, so its singular
values are those of the (at most d x d) core ``C = Ru Rv^T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PopularityVector
from .exceptions import DegenerateError, SizeLimitError
from .model import EmbeddingPair, sigmoid

ORACLE_MAX_DIM = 200
DENSE_CAP = 40_000
DEGENERACY_GAP = 1e-6


@dataclass
class _Core:
    Qu: np.ndarray
    Qv: np.ndarray
    C: np.ndarray


def _core(E: EmbeddingPair) -> _Core:
    Qu, Ru = np.linalg.qr(E.U)
    Qv, Rv = np.linalg.qr(E.V)
    return _Core(Qu, Qv, Ru @ Rv.T)


@dataclass
class TopTriplet:
    sigma1: float
    p1: np.ndarray
    q1: np.ndarray
    iterations: int
    converged: bool
    degenerate: bool


@dataclass
class SpectralReport:
    sigma1: float
    q1: np.ndarray | None
    p1: np.ndarray | None
    frobenius_sq: float
    principal_ratio: float
    cos_r_q1: float | None
    singular_values: np.ndarray
    degenerate: bool = False
    converged: bool = True

    def to_dict(self):
        def vec(x):
            return None if x is None else [float(v) for v in x]

        return {
            "sigma1": float(self.sigma1),
            "q1": vec(self.q1),
            "p1": vec(self.p1),
            "frobenius_sq": float(self.frobenius_sq),
            "principal_ratio": float(self.principal_ratio),
            "cos_r_q1": None if self.cos_r_q1 is None else float(self.cos_r_q1),
            "singular_values": vec(self.singular_values),
            "degenerate": bool(self.degenerate),
            "converged": bool(self.converged),
        }


def _fix_sign(p, q):
    k = int(np.argmax(np.abs(q)))
    if q[k] < 0:
        return -p, -q
    return p, q


def symmetric_power_iteration(S, z0, tol, max_iters):
    """Top eigenpair of a symmetric PSD matrix; stops on ``||Sz - lz|| <= tol * l``."""
    z = z0 / np.linalg.norm(z0)
    lam = 0.0
    for it in range(1, max_iters + 1):
        y = S @ z
        lam = float(z @ y)
        if lam <= 0.0:
            return lam, z, it, False
        if np.linalg.norm(y - lam * z) <= tol * lam:
            return lam, z, it, True
        z = y / np.linalg.norm(y)
    return lam, z, max_iters, False


def all_singular_values(E: EmbeddingPair) -> np.ndarray:
    """Descending singular values of ``U V^T`` (length ``min(n, m, d)``)."""
    s = np.linalg.svd(_core(E).C, compute_uv=False)
    return np.maximum(s, 0.0)


def frobenius_sq(E: EmbeddingPair) -> float:
    """``||U V^T||_F^2 = trace((U^T U)(V^T V))``."""
    return float(np.sum((E.U.T @ E.U) * (E.V.T @ E.V)))


def top_singular_triplet(E: EmbeddingPair, tol: float = 1e-12, max_iters: int = 10_000) -> TopTriplet:
    core = _core(E)
    C = core.C
    S = C.T @ C
    # warm start from the surrogate direction V U^T e, expressed in the Qv basis
    z0 = core.Qv.T @ (E.V @ E.U.sum(axis=0))
    if not np.linalg.norm(z0) > 0:
        z0 = np.ones(S.shape[0])
    lam, z, iters, converged = symmetric_power_iteration(S, z0, tol, max_iters)
    if not lam > 0:
        raise DegenerateError("score matrix is zero; principal triplet undefined")
    q1 = core.Qv @ z
    q1 /= np.linalg.norm(q1)
    y = E.U @ (E.V.T @ q1)
    sigma1 = float(np.linalg.norm(y))
    p1, q1 = _fix_sign(y / sigma1, q1)
    s = np.linalg.svd(C, compute_uv=False)
    degenerate = s.size > 1 and (s[0] - s[1]) / s[0] < DEGENERACY_GAP
    return TopTriplet(sigma1, p1, q1, iters, converged, bool(degenerate))


def cos_alignment(r, q1) -> float:
    """Cosine between popularity ``r`` and the unit vector ``q1``."""
    r = np.asarray(r.values if isinstance(r, PopularityVector) else r, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    if r.shape != q1.shape:
        raise ValueError(f"length mismatch: r has {r.size} items, q1 has {q1.size}")
    norm = np.linalg.norm(r)
    if not norm > 0:
        raise DegenerateError("popularity vector is zero")
    return float(np.clip(r @ q1 / norm, -1.0, 1.0))


def spectral_report(E: EmbeddingPair, r=None, *, tol: float = 1e-12, vectors: bool = True) -> SpectralReport:
    """Full implicit report; ``vectors=False`` drops p1/q1 to keep snapshots small."""
    top = top_singular_triplet(E, tol=tol)
    sv = all_singular_values(E)
    fro = frobenius_sq(E)
    cos = cos_alignment(r, top.q1) if r is not None else None
    return SpectralReport(
        sigma1=top.sigma1,
        q1=top.q1 if vectors else None,
        p1=top.p1 if vectors else None,
        frobenius_sq=fro,
        principal_ratio=min(1.0, top.sigma1**2 / fro),
        cos_r_q1=cos,
        singular_values=sv,
        degenerate=top.degenerate,
        converged=top.converged,
    )


def _round_robin(k):
    """Disjoint pair schedule covering every column pair once per sweep."""
    players = list(range(k + (k % 2)))
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < k and b < k]
        if pairs:
            rounds.append((np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])))
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def _complete_basis(P, ok):
    """Replace columns of ``P`` not flagged in ``ok`` by an orthonormal completion."""
    n = P.shape[0]
    basis = [P[:, j] for j in np.flatnonzero(ok)]
    out = P.copy()
    candidates = iter(range(n))
    for j in np.flatnonzero(~ok):
        while True:
            e = np.zeros(n)
            e[next(candidates)] = 1.0
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            norm = np.linalg.norm(e)
            if norm > 0.5:
                break
        e /= norm
        basis.append(e)
        out[:, j] = e
    return out


def dense_svd_oracle(M, *, max_sweeps: int = 100):
    """Thin SVD ``M = P diag(sigma) Q^T`` by one-sided (Hestenes) Jacobi.

    Written from scratch and independent of LAPACK so it can serve as the
    reference for the implicit path. Refuses matrices larger than 200 x 200.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("oracle expects a 2-D matrix")
    if max(M.shape) > ORACLE_MAX_DIM:
        raise SizeLimitError(f"oracle limited to {ORACLE_MAX_DIM}x{ORACLE_MAX_DIM}, got {M.shape}")
    transposed = M.shape[0] < M.shape[1]
    A = (M.T if transposed else M).copy()
    k = A.shape[1]
    W = np.eye(k)
    eps = np.finfo(np.float64).eps
    schedule = _round_robin(k)
    for _ in range(max_sweeps):
        rotated = False
        for I, J in schedule:
            ai, aj = A[:, I], A[:, J]
            alpha = np.einsum("ij,ij->j", ai, ai)
            beta = np.einsum("ij,ij->j", aj, aj)
            gamma = np.einsum("ij,ij->j", ai, aj)
            act = np.abs(gamma) > eps * np.sqrt(alpha * beta)
            if not act.any():
                continue
            rotated = True
            I, J = I[act], J[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for X in (A, W):
                xi, xj = X[:, I].copy(), X[:, J]
                X[:, I] = c * xi - s * xj
                X[:, J] = s * xi + c * xj
        if not rotated:
            break
    sigma = np.linalg.norm(A, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, A, W = sigma[order], A[:, order], W[:, order]
    ok = sigma > (sigma[0] if sigma.size else 0.0) * k * eps
    P = np.zeros_like(A)
    P[:, ok] = A[:, ok] / sigma[ok]
    sigma = np.where(ok, sigma, 0.0)
    if not ok.all():
        P = _complete_basis(P, ok)
    if transposed:
        return W, sigma, P
    return P, sigma, W


def dense_postactivation_spectrum(E: EmbeddingPair, activation: str = "sigmoid", r=None) -> SpectralReport:
    """Report for the materialised ``mu(U V^T)``; small instances only."""
    if E.n * E.m > DENSE_CAP:
        raise SizeLimitError(
            f"dense spectrum limited to n*m <= {DENSE_CAP}; use spectral_report for the pre-activation path"
        )
    M = E.U @ E.V.T
    if activation == "sigmoid":
        M = sigmoid(M)
    elif activation != "identity":
        raise ValueError(f"unknown activation {activation!r}")
    P, s, Q = dense_svd_oracle(M)
    if not s[0] > 0:
        raise DegenerateError("score matrix is zero; principal triplet undefined")
    p1, q1 = _fix_sign(P[:, 0], Q[:, 0])
    fro = float(np.sum(s**2))
    degenerate = s.size > 1 and (s[0] - s[1]) / s[0] < DEGENERACY_GAP
    return SpectralReport(
        sigma1=float(s[0]),
        q1=q1,
        p1=p1,
        frobenius_sq=fro,
        principal_ratio=min(1.0, s[0] ** 2 / fro),
        cos_r_q1=cos_alignment(r, q1) if r is not None else None,
        singular_values=s,
        degenerate=bool(degenerate),
    )
