"""Spectral-norm regulariser: fast surrogate, exact value and the dense baseline.

The surrogate replaces the principal right singular vector of ``U V^T`` by
the mirror direction ``q~ = V U^T e / ||V U^T e||`` and penalises
``||U V^T q~||^2``. Evaluated right to left it costs O((n + m) d).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateError, SizeLimitError
from .model import EmbeddingPair
from .spectral import _core

DENOMINATOR_FLOOR = 1e-30
RANK1_TOL = 1e-12


@dataclass
class ResnPenaltyValue:
    value: float
    numerator: float
    denominator: float
    degenerate: bool = False


@dataclass
class _Forward:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    f: np.ndarray
    N: float
    D: float


def _forward(E: EmbeddingPair) -> _Forward:
    a = E.U.sum(axis=0)  # U^T e
    b = E.V @ a
    c = E.V.T @ b
    f = E.U @ c
    return _Forward(a, b, c, f, float(f @ f), float(b @ b))


def resn_penalty(E: EmbeddingPair) -> ResnPenaltyValue:
    fw = _forward(E)
    if fw.D < DENOMINATOR_FLOOR:
        return ResnPenaltyValue(0.0, fw.N, fw.D, degenerate=True)
    return ResnPenaltyValue(fw.N / fw.D, fw.N, fw.D)


def resn_value_and_grad(E: EmbeddingPair):
    """Penalty and its exact gradient ``(dP/dU, dP/dV)``; zeros when degenerate.

    With ``P = N / D``, ``N = ||U V^T V U^T e||^2`` and ``D = ||V U^T e||^2``,
    reverse-mode through a -> b -> c -> f gives

        dN/dU = 2 f c^T + e (V^T V c~)^T,          dD/dU = 2 e c^T
        dN/dV = b c~^T + (V c~) a^T,               dD/dV = 2 b a^T

    where ``c~ = 2 U^T f``. Both gradients are rank-2 updates.
    """
    fw = _forward(E)
    if fw.D < DENOMINATOR_FLOOR:
        return ResnPenaltyValue(0.0, fw.N, fw.D, degenerate=True), np.zeros_like(E.U), np.zeros_like(E.V)
    P = fw.N / fw.D
    cbar = 2.0 * (E.U.T @ fw.f)
    bbar = E.V @ cbar
    abar = E.V.T @ bbar
    inv = 1.0 / fw.D
    # rows of dP/dU: f_u * (2c/D) + 1 * ((abar - 2 P c)/D)
    gU = np.column_stack([fw.f, np.ones(E.n)]) @ np.vstack([2.0 * inv * fw.c, inv * (abar - 2.0 * P * fw.c)])
    # rows of dP/dV: b_i * (cbar/D) + bbar_i * (a/D) - b_i * (2 P a / D)
    gV = np.column_stack([fw.b, bbar]) @ np.vstack([inv * (cbar - 2.0 * P * fw.a), inv * fw.a])
    return ResnPenaltyValue(P, fw.N, fw.D), gU, gV


def resn_gradient(E: EmbeddingPair):
    _, gU, gV = resn_value_and_grad(E)
    return gU, gV


@dataclass
class SpectralNorm:
    sigma1: float
    iterations: int
    converged: bool


def spectral_norm_exact(
    E: EmbeddingPair, tol: float = 1e-13, max_iters: int = 10_000, mode: str = "gram"
) -> SpectralNorm:
    """``||U V^T||_2`` by power iteration.

    ``gram`` iterates on the d x d product of the two Gram matrices, taken in
    its symmetric form ``Rv (U^T U) Rv^T`` with ``V = Qv Rv``. ``dense``
    materialises ``U V^T`` and iterates on it; it exists for the timing baseline.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if mode == "gram":
        C = _core(E).C
        S = C.T @ C
        lam, _, iters, conv = _rayleigh_power(lambda z: S @ z, np.ones(S.shape[0]), tol, max_iters)
        return SpectralNorm(float(np.sqrt(max(lam, 0.0))), iters, conv)
    if mode == "dense":
        Y = E.U @ E.V.T
        lam, _, iters, conv = _rayleigh_power(lambda q: Y.T @ (Y @ q), np.ones(E.m), tol, max_iters)
        return SpectralNorm(float(np.sqrt(max(lam, 0.0))), iters, conv)
    raise ValueError(f"unknown mode {mode!r}")


def _rayleigh_power(apply, z0, tol, max_iters):
    """Power iteration that stops when successive Rayleigh quotients agree to ``tol``."""
    z = z0 / np.linalg.norm(z0)
    lam = 0.0
    for it in range(1, max_iters + 1):
        y = apply(z)
        new = float(z @ y)
        ny = np.linalg.norm(y)
        if not ny > 0:
            return 0.0, z, it, True
        z = y / ny
        if abs(new - lam) <= tol * abs(new):
            return new, z, it, True
        lam = new
    return lam, z, max_iters, False


def dense_power_iteration(Y: np.ndarray, tol: float = 1e-8, max_iters: int = 1000):
    """Leading singular triplet of a dense matrix, cold-started from the ones vector."""
    lam, q, iters, conv = _rayleigh_power(lambda v: Y.T @ (Y @ v), np.ones(Y.shape[1]), tol, max_iters)
    Yq = Y @ q
    s = float(np.linalg.norm(Yq))
    p = Yq / s if s > 0 else Yq
    return s, p, q, iters, conv


def direct_value_and_grad(E: EmbeddingPair, tol: float = 1e-8, max_iters: int = 1000):
    """Brute-force baseline: materialise ``U V^T`` and differentiate ``sigma1^2``.

    The iteration runs to convergence (``tol`` ~ sqrt(eps)) so the baseline
    computes the exact penalty rather than a truncated estimate.

    ``d sigma1^2 = 2 sigma1 p q^T`` chained through ``U V^T``.
    """
    Y = E.U @ E.V.T
    s, p, q, _, _ = dense_power_iteration(Y, tol, max_iters)
    if not s > 0:
        return ResnPenaltyValue(0.0, 0.0, 0.0, degenerate=True), np.zeros_like(E.U), np.zeros_like(E.V)
    gU = 2.0 * s * np.outer(p, E.V.T @ q)
    gV = 2.0 * s * np.outer(q, E.U.T @ p)
    return ResnPenaltyValue(s * s, s * s, 1.0), gU, gV


@dataclass
class EstimateComparison:
    exact: float
    estimate: float
    relative_gap: float
    rank1_exact: bool

    def to_dict(self):
        return {
            "exact": float(self.exact),
            "estimate": float(self.estimate),
            "relative_gap": float(self.relative_gap),
            "rank1_exact": bool(self.rank1_exact),
        }

    def to_json(self):
        return json.dumps(self.to_dict())


def is_rank1(E: EmbeddingPair, tol: float = RANK1_TOL) -> bool:
    s = np.linalg.svd(_core(E).C, compute_uv=False)
    return bool(s.size and s[0] > 0 and (s.size == 1 or s[1] <= tol * s[0]))


def compare_estimates(E: EmbeddingPair) -> EstimateComparison:
    """Exact ``||U V^T||_2^2`` against the surrogate ``||U V^T q~||^2``.

    The surrogate is a Rayleigh quotient with a unit vector, so it never
    exceeds the exact value; roundoff in the iterative exact value is clipped
    so the reported gap stays in [0, 1]. Rank-1 inputs report a zero gap
    because the mirror direction is then the principal vector itself.
    """
    pv = resn_penalty(E)
    if pv.degenerate:
        raise DegenerateError("V U^T e vanishes; the surrogate direction is undefined")
    exact = spectral_norm_exact(E).sigma1 ** 2
    rank1 = is_rank1(E)
    exact = max(exact, pv.value)
    gap = 0.0 if rank1 else (exact - pv.value) / exact
    return EstimateComparison(exact, pv.value, float(gap), rank1)


def center_items(V: np.ndarray) -> np.ndarray:
    """``V - 1 vbar^T``: item embeddings with zero column means."""
    V = np.asarray(V, dtype=np.float64)
    return V - V.mean(axis=0)


def hyper_items(V: np.ndarray) -> np.ndarray:
    """All m^2 ordered hyper-item embeddings ``v_i - v_j`` (row ``i * m + j``)."""
    V = np.asarray(V, dtype=np.float64)
    m = V.shape[0]
    if m > 64:
        raise SizeLimitError("hyper-item enumeration is for small m only")
    return (V[:, None, :] - V[None, :, :]).reshape(m * m, -1)


def popularity_rayleigh_dense(E: EmbeddingPair, r) -> float:
    """``||Y r||^2 / ||r||^2`` on the materialised scores (diagnostic, small sizes)."""
    if E.n * E.m > 10**7:
        raise SizeLimitError("dense diagnostic limited to n*m <= 1e7")
    r = np.asarray(getattr(r, "values", r), dtype=np.float64)
    rr = float(r @ r)
    if not rr > 0:
        raise DegenerateError("popularity vector is zero")
    y = (E.U @ E.V.T) @ r
    return float(y @ y) / rr
