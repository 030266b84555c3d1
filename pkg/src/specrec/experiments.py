"""Experiment drivers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
import os
import time
from dataclasses import replace

import numpy as np

from .data import SplitBundle, popularity, synth_powerlaw
from .metrics import evaluate, group_by_popularity
from .model import EmbeddingPair, TrainConfig, init_embeddings, scoring_embeddings, train
from .spectral import spectral_report

_log = logging.getLogger(__name__)

BETA_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 0.5, 1.0, 5.0)
DIM_GRID = (8, 32, 128)


def _thread_count():
    try:
        from threadpoolctl import threadpool_info

        counts = [p.get("num_threads", 1) for p in threadpool_info()]
        return max(counts) if counts else 1
    except Exception:
        return os.cpu_count() or 1


def run_point(bundle: SplitBundle, config: TrainConfig, *, K: int = 20, G: int = 5) -> dict:
    """Train on ``bundle.train`` and report spectrum, exposure and NDCG on ``bundle.test``."""
    E, log = train(bundle.train, config)
    Es = scoring_embeddings(E, bundle.train, config)
    r = popularity(bundle.train)
    rep = spectral_report(Es, r, vectors=False)
    groups = group_by_popularity(r, G)
    ev = evaluate(Es, bundle.train, bundle.test, K=K, G=G, groups=groups)
    return {
        "beta": config.beta,
        "d": config.d,
        "principal_ratio": rep.principal_ratio,
        "cos_r_q1": rep.cos_r_q1,
        "popular_ratio": ev.popular_ratio,
        "ndcg": ev.ndcg_at_k,
        "group_shares": ev.group_shares,
        "final_loss": float(log.losses[-1]),
    }


def sweep_beta(bundle: SplitBundle, config: TrainConfig, betas=BETA_GRID, **kw) -> list[dict]:
    return [run_point(bundle, replace(config, beta=float(b)), **kw) for b in betas]


def sweep_dim(bundle: SplitBundle, config: TrainConfig, dims=DIM_GRID, **kw) -> list[dict]:
    return [run_point(bundle, replace(config, d=int(d)), **kw) for d in dims]


def time_epochs(Y, config: TrainConfig, epochs: int, init: EmbeddingPair) -> np.ndarray:
    _, log = train(Y, replace(config, epochs=epochs, log_spectrum_every=0), init=init)
    return log.seconds


def timing_study(
    n: int = 2000,
    m: int = 2000,
    d: int = 64,
    *,
    alpha: float = 1.5,
    per_user: int = 20,
    epochs: int = 3,
    direct_epochs: int = 1,
    seed: int = 0,
    config: TrainConfig | None = None,
) -> dict:
    """Per-epoch wall time of plain MF, the fast surrogate and the dense baseline.

    All three runs start from the same initial embeddings on the same data;
    the reported time is the median epoch.
    """
    Y = synth_powerlaw(n, m, alpha, per_user, seed)
    base = config or TrainConfig(d=d, loss="mse", learning_rate=1e-3, batch_size=2048, seed=seed)
    base = replace(base, d=d, epochs=max(epochs, direct_epochs))
    E0 = init_embeddings(n, m, d, base.seed, base.init_scale)
    beta = base.beta if base.beta > 0 else 0.1

    t_mf = time_epochs(Y, replace(base, beta=0.0), epochs, E0)
    t_resn = time_epochs(Y, replace(base, beta=beta, regularizer="resn"), epochs, E0)
    t_direct = time_epochs(Y, replace(base, beta=beta, regularizer="direct"), direct_epochs, E0)
    mf, resn, direct = (float(np.median(t)) for t in (t_mf, t_resn, t_direct))
    batches = int(np.ceil(Y.nnz / base.batch_size))
    out = {
        "n": n,
        "m": m,
        "d": d,
        "nnz": Y.nnz,
        "batches_per_epoch": batches,
        "threads": _thread_count(),
        "seconds_per_epoch": {"mf": mf, "resn": resn, "direct": direct},
        "resn_overhead": resn / mf,
        "direct_slowdown": direct / resn,
        "epochs_timed": {"mf": len(t_mf), "resn": len(t_resn), "direct": len(t_direct)},
    }
    _log.info("timing: %s", out)
    return out


def trajectory_run(Y, config: TrainConfig, top: int = 8):
    """Train with spectrum logging; returns epochs, the (snapshots x k) trajectory and the log."""
    from .theory import half_growth_epochs

    if not config.log_spectrum_every:
        config = replace(config, log_spectrum_every=1)
    _, log = train(Y, config)
    epochs, traj = log.singular_value_trajectory()
    finals, halves = half_growth_epochs(epochs, traj, top)
    return {"epochs": epochs, "trajectory": traj, "final": finals, "half_epochs": halves, "log": log}


def time_call(fn, *args, repeat: int = 1, **kw):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        best = min(best, time.perf_counter() - t0)
    return out, best
