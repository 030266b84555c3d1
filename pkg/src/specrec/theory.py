"""Numerical evaluation of the popularity-memorisation and bias-amplification bounds."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import PopularityVector, PowerLawFit, fit_power_law
from .exceptions import DivergenceError
from .model import EmbeddingPair
from .spectral import SpectralReport, spectral_report

ALIGNMENT_PREMISE = 0.95


def zeta(alpha: float, tol: float = 1e-13) -> float:
    """Riemann zeta for real ``alpha > 1``.

    Partial sum up to N plus the Euler-Maclaurin tail
    ``N^(1-a)/(a-1) - N^-a/2 + a N^(-a-1)/12``; N is picked so the first
    omitted term, ``a(a+1)(a+2) N^(-a-3)/720``, is below ``tol``.
    """
    alpha = float(alpha)
    if not alpha > 1.0 + 1e-6:
        raise DivergenceError(f"zeta diverges for alpha={alpha} <= 1")
    lead = alpha * (alpha + 1.0) * (alpha + 2.0) / 720.0
    N = max(10, math.ceil((lead / tol) ** (1.0 / (alpha + 3.0))))
    j = np.arange(1, N + 1, dtype=np.float64)
    partial = float(np.sum(j[::-1] ** -alpha))  # small terms first
    tail = N ** (1.0 - alpha) / (alpha - 1.0) - 0.5 * N**-alpha + alpha * N ** (-alpha - 1.0) / 12.0
    return partial + tail


@dataclass
class Thm1Bounds:
    general: float
    simple: float | None
    raw_general: float
    vacuous: bool


def thm1_bounds(sigma1_sq: float, r_max: float, alpha: float) -> Thm1Bounds:
    """Lower bounds on cos(r, q1): the general form and, for alpha > 2, the simple form.

    ``raw_general`` is the unclamped value; ``general`` is clamped to [0, 1].
    A negative radicand makes the general bound vacuous (reported as 0).
    """
    if not r_max > 0 or not sigma1_sq > 0:
        raise ValueError("sigma1_sq and r_max must be positive")
    za, z2a = zeta(alpha), zeta(2 * alpha)
    radicand = 1.0 - r_max * (za - 1.0) / sigma1_sq
    if radicand < 0:
        general, raw, vacuous = 0.0, float("nan"), True
    else:
        raw = sigma1_sq / (r_max * math.sqrt(z2a)) * math.sqrt(radicand)
        general, vacuous = min(1.0, max(0.0, raw)), False
    simple = math.sqrt((2.0 - za) / z2a) if alpha > 2 else None
    return Thm1Bounds(general, simple, raw, vacuous)


@dataclass
class Thm2Bound:
    bound: float
    x: float
    phi: int


def thm2_bound(singular_values, p1, alpha: float, n: int) -> Thm2Bound:
    """Lower bound on the share of users whose top-1 item is the most popular one."""
    s = np.asarray(singular_values, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    if not s.size or not s[0] > 0:
        raise ValueError("singular_values[0] must be positive")
    if n < 1:
        raise ValueError("n must be >= 1")
    s = s[s > 0]
    ratio = float(np.sum(s) / s[0]) - 1.0
    x = math.sqrt(2.0 * zeta(2 * alpha)) / (1.0 - 2.0**-alpha) * max(ratio, 0.0)
    phi = int(np.count_nonzero(p1 > x))
    return Thm2Bound(phi / n, x, phi)


def observed_top1_ratio(E: EmbeddingPair, r, block: int = 4_000_000) -> float:
    """Share of users whose strictly best-scoring item is the most popular item."""
    r = np.asarray(r.values if isinstance(r, PopularityVector) else r)
    if r.size != E.m:
        raise ValueError("popularity vector and embeddings disagree on m")
    if E.m == 1:
        return 1.0
    l = int(np.argmax(r))
    others = np.delete(E.V, l, axis=0)
    rows = max(1, block // E.m)
    wins = 0
    for lo in range(0, E.n, rows):
        Ub = E.U[lo : lo + rows]
        wins += int(np.count_nonzero(Ub @ E.V[l] > (Ub @ others.T).max(axis=1)))
    return wins / E.n


def sv_trajectory(s_k, sigma0, t):
    """Singular-value growth curve ``s e^{2st} / (e^{2st} - 1 + s/sigma0)``.

    Evaluated as ``s / (1 + (s/sigma0 - 1) e^{-2st})``, which cannot overflow
    and returns ``s`` once the exponential underflows.
    """
    s_k = np.asarray(s_k, dtype=np.float64)
    sigma0 = np.asarray(sigma0, dtype=np.float64)
    if np.any(s_k <= 0) or np.any(sigma0 <= 0):
        raise ValueError("s_k and sigma0 must be positive")
    t = np.asarray(t, dtype=np.float64)
    out = s_k / (1.0 + (s_k / sigma0 - 1.0) * np.exp(-2.0 * s_k * t))
    return float(out) if out.ndim == 0 else out


def sv_half_time(s_k: float, sigma0: float) -> float:
    """Time at which the curve reaches ``s_k / 2`` (0 if it starts above it)."""
    if s_k <= 0 or sigma0 <= 0:
        raise ValueError("s_k and sigma0 must be positive")
    q = s_k / sigma0 - 1.0
    return math.log(q) / (2.0 * s_k) if q > 1.0 else 0.0


def half_growth_epochs(epochs, trajectory, top: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """First logged epoch at which each sigma_k exceeds half its final value.

    ``trajectory`` is (snapshots x k); returns (final values, epochs) for the
    ``top`` largest final values, ordered by decreasing final value.
    """
    epochs = np.asarray(epochs)
    T = np.asarray(trajectory, dtype=np.float64)
    final = T[-1]
    order = np.argsort(-final, kind="stable")[:top]
    hit = []
    for k in order:
        above = np.flatnonzero(T[:, k] > 0.5 * final[k])
        hit.append(epochs[above[0]] if above.size else epochs[-1])
    return final[order], np.array(hit)


@dataclass
class BoundReport:
    alpha: float
    r_squared: float
    zeta_alpha: float
    zeta_2alpha: float
    sigma1_sq: float
    r_max: float
    thm1_general: float
    thm1_general_raw: float
    thm1_vacuous: bool
    thm1_simple: float | None
    observed_cos: float
    thm2_bound: float
    thm2_x: float
    thm2_applicable: bool
    thm2_vacuous: bool
    observed_eta: float
    satisfied: dict = field(default_factory=dict)
    premises: dict = field(default_factory=dict)

    def to_dict(self):
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, float) and not math.isfinite(v):
                out[k] = None
        return out

    def table(self) -> str:
        rows = [
            ("thm1_general", self.thm1_general, self.observed_cos, self.satisfied.get("thm1_general")),
            ("thm1_simple", self.thm1_simple, self.observed_cos, self.satisfied.get("thm1_simple")),
            ("thm2", self.thm2_bound, self.observed_eta, self.satisfied.get("thm2")),
        ]

        def fmt(v):
            return f"{v:>12.6f}" if isinstance(v, float) else f"{'n/a':>12}"

        lines = [
            f"alpha={self.alpha:.4f} r_squared={self.r_squared:.4f} sigma1_sq={self.sigma1_sq:.6g} r_max={self.r_max:.6g}",
            f"{'bound':<14}{'value':>12}{'observed':>12}{'satisfied':>11}",
        ]
        for name, bound, obs, ok in rows:
            flag = "n/a" if ok is None else str(ok).lower()
            lines.append(f"{name:<14}{fmt(bound)}{fmt(obs)}{flag:>11}")
        return "\n".join(lines)


def bound_report(
    E: EmbeddingPair,
    r: PopularityVector,
    *,
    fit: PowerLawFit | None = None,
    report: SpectralReport | None = None,
) -> BoundReport:
    """Evaluate both theorems for a trained model against training popularity ``r``."""
    fit = fit or fit_power_law(r.values)
    alpha = fit.alpha
    rep = report or spectral_report(E, r)
    if rep.q1 is None or rep.p1 is None:
        rep = spectral_report(E, r)
    cos = rep.cos_r_q1 if rep.cos_r_q1 is not None else float(np.dot(r.values, rep.q1) / np.linalg.norm(r.values))
    r_max = float(r.r_max)
    s1sq = rep.sigma1**2
    t1 = thm1_bounds(s1sq, r_max, alpha)
    za, z2a = zeta(alpha), zeta(2 * alpha)
    t2 = thm2_bound(rep.singular_values, rep.p1, alpha, E.n)
    eta = observed_top1_ratio(E, r)
    applicable = cos >= ALIGNMENT_PREMISE

    vals = np.sort(np.asarray(r.values, dtype=np.float64))[::-1]
    premises = {
        "sigma1_sq_ge_rmax": bool(s1sq >= r_max),
        "norm_le_rmax_sqrt_zeta2a": bool(np.linalg.norm(vals) <= r_max * math.sqrt(z2a)),
        "tail_le_rmax_zeta_minus1": bool(vals[1:].sum() <= r_max * (za - 1.0)),
        "alignment_ge_0.95": bool(applicable),
        "power_law_r_squared": float(fit.r_squared),
    }
    satisfied = {
        "thm1_general": bool(cos >= t1.general),
        "thm1_simple": None if t1.simple is None else bool(cos >= t1.simple),
        "thm2": bool(eta >= t2.bound) if applicable else None,
    }
    return BoundReport(
        alpha=alpha,
        r_squared=fit.r_squared,
        zeta_alpha=za,
        zeta_2alpha=z2a,
        sigma1_sq=s1sq,
        r_max=r_max,
        thm1_general=t1.general,
        thm1_general_raw=t1.raw_general,
        thm1_vacuous=t1.vacuous,
        thm1_simple=t1.simple,
        observed_cos=cos,
        thm2_bound=t2.bound,
        thm2_x=t2.x,
        thm2_applicable=applicable,
        thm2_vacuous=t2.phi == 0,
        observed_eta=eta,
        satisfied=satisfied,
        premises=premises,
    )
