"""Inner-product embedding models trained with Adam under MSE, BCE or BPR."""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import scipy.sparse as sp

from .data import InteractionMatrix, popularity
from .exceptions import ConfigError, NonFiniteGradientError, SizeLimitError, TrainingDivergedError
from .random import rng_for

_log = logging.getLogger(__name__)

LossKind = Literal["mse", "bce", "bpr"]
CHECKPOINT_MAGIC = b"SBL1"
FULL_BATCH_LIMIT = 10**7
_EPS = 1e-12


@dataclass
class EmbeddingPair:
    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.U.ndim != 2 or self.V.ndim != 2 or self.U.shape[1] != self.V.shape[1]:
            raise ValueError(f"incompatible embedding shapes {self.U.shape} and {self.V.shape}")

    @property
    def n(self):
        return self.U.shape[0]

    @property
    def m(self):
        return self.V.shape[0]

    @property
    def d(self):
        return self.U.shape[1]

    def copy(self):
        return EmbeddingPair(self.U.copy(), self.V.copy())

    def scaled(self, t):
        return EmbeddingPair(self.U * t, self.V * t)

    def scores(self):
        """Dense pre-activation score matrix; only for small instances."""
        return self.U @ self.V.T

    def is_finite(self):
        return bool(np.isfinite(self.U).all() and np.isfinite(self.V).all())


@dataclass
class TrainConfig:
    d: int = 64
    loss: LossKind = "mse"
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    beta: float = 0.0
    epochs: int = 100
    negatives_per_positive: int = 1
    batch_size: int = 2048
    seed: int = 0
    backbone: Literal["mf", "lightgcn"] = "mf"
    lightgcn_layers: int = 3
    log_spectrum_every: int = 0
    full_batch: bool = False
    # multiplier on the Xavier bound; 1.0 is plain Xavier-uniform
    init_scale: float = 1.0
    # "resn" is the fast surrogate, "direct" the dense power-iteration baseline
    regularizer: Literal["resn", "direct"] = "resn"

    def validate(self):
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if self.loss not in ("mse", "bce", "bpr"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0 or self.beta < 0:
            raise ConfigError("weight_decay and beta must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.loss in ("bce", "bpr") and self.negatives_per_positive < 1:
            raise ConfigError("negatives_per_positive must be >= 1 for bce/bpr")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.backbone not in ("mf", "lightgcn"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.backbone == "lightgcn" and self.lightgcn_layers < 1:
            raise ConfigError("lightgcn_layers must be >= 1")
        if self.full_batch and self.loss != "mse":
            raise ConfigError("full-batch training is only defined for the mse loss")
        if self.regularizer not in ("resn", "direct"):
            raise ConfigError(f"unknown regularizer {self.regularizer!r}")
        if not self.init_scale > 0:
            raise ConfigError("init_scale must be positive")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    penalty: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    # (epoch, SpectralReport); epoch 0 is the initialisation
    spectra: list = field(default_factory=list)
    degenerate_penalty_steps: int = 0

    @property
    def losses(self):
        return np.array([r.loss for r in self.records])

    @property
    def penalties(self):
        return np.array([r.penalty for r in self.records])

    @property
    def seconds(self):
        return np.array([r.seconds for r in self.records])

    def singular_value_trajectory(self) -> tuple[np.ndarray, np.ndarray]:
        """Epochs and an (epochs x k) array of logged singular values."""
        epochs = np.array([e for e, _ in self.spectra])
        k = min(len(rep.singular_values) for _, rep in self.spectra)
        return epochs, np.array([rep.singular_values[:k] for _, rep in self.spectra])

    def write_spectrum_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,k,sigma_k\n")
            for epoch, rep in self.spectra:
                for k, s in enumerate(rep.singular_values, start=1):
                    fh.write(f"{epoch},{k},{float(s)!r}\n")

    def to_dict(self):
        return {
            "records": [asdict(r) for r in self.records],
            "degenerate_penalty_steps": self.degenerate_penalty_steps,
        }


def init_embeddings(n: int, m: int, d: int, seed: int, scale: float = 1.0) -> EmbeddingPair:
    """Xavier-uniform init with fan-in = fan-out = d: U(-sqrt(6/2d), sqrt(6/2d))."""
    if min(n, m, d) < 1:
        raise ConfigError("n, m and d must all be >= 1")
    bound = scale * np.sqrt(6.0 / (2 * d))
    rng = rng_for(seed, "init")
    U = rng.uniform(-bound, bound, size=(n, d))
    V = rng.uniform(-bound, bound, size=(m, d))
    return EmbeddingPair(U, V)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def predict_scores(E: EmbeddingPair, pairs, activation: Literal["identity", "sigmoid"] = "identity") -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    u, i = pairs[:, 0], pairs[:, 1]
    if pairs.size and (u.min() < 0 or u.max() >= E.n or i.min() < 0 or i.max() >= E.m):
        raise IndexError("user or item index out of range")
    s = np.einsum("ij,ij->i", E.U[u], E.V[i])
    if activation == "identity":
        return s
    if activation == "sigmoid":
        return sigmoid(s)
    raise ValueError(f"unknown activation {activation!r}")


@dataclass
class Batch:
    """Pointwise examples ``(users, items, labels)`` or BPR triples ``(users, items, negatives)``."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray | None = None
    negatives: np.ndarray | None = None

    def __len__(self):
        return int(self.users.size)


@dataclass
class RowGradient:
    """Gradient restricted to the user and item rows touched by a batch."""

    user_rows: np.ndarray
    dU: np.ndarray
    item_rows: np.ndarray
    dV: np.ndarray

    def dense(self, n, m):
        d = self.dU.shape[1]
        gU = np.zeros((n, d))
        gV = np.zeros((m, d))
        gU[self.user_rows] = self.dU
        gV[self.item_rows] = self.dV
        return gU, gV


def _scatter(idx, values):
    rows, inv = np.unique(idx, return_inverse=True)
    out = np.zeros((rows.size, values.shape[1]))
    np.add.at(out, inv, values)
    return rows, out


def _pointwise(loss, s, y):
    """Loss terms and d(loss)/d(score) for pointwise examples."""
    if loss == "mse":
        r = y - s
        return r * r, -2.0 * r
    if loss == "bce":
        # -[y log sig(s) + (1-y) log(1 - sig(s))] written with softplus, never log(0)
        terms = np.logaddexp(0.0, -s) * y + np.logaddexp(0.0, s) * (1.0 - y)
        return terms, sigmoid(s) - y
    raise ValueError(f"unknown pointwise loss {loss!r}")


def loss_and_grad(E: EmbeddingPair, batch: Batch, loss: LossKind) -> tuple[float, RowGradient]:
    """Summed batch loss and its exact gradient w.r.t. the touched rows of U and V."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    u = batch.users
    Uu = E.U[u]
    if loss == "bpr":
        if batch.negatives is None:
            raise ValueError("bpr batches need negatives")
        Vi, Vj = E.V[batch.items], E.V[batch.negatives]
        x = np.einsum("ij,ij->i", Uu, Vi - Vj)
        value = float(np.logaddexp(0.0, -x).sum())
        g = -sigmoid(-x)[:, None]
        user_rows, dU = _scatter(u, g * (Vi - Vj))
        items = np.concatenate([batch.items, batch.negatives])
        item_rows, dV = _scatter(items, np.concatenate([g * Uu, -g * Uu]))
        return value, RowGradient(user_rows, dU, item_rows, dV)

    Vi = E.V[batch.items]
    s = np.einsum("ij,ij->i", Uu, Vi)
    terms, g = _pointwise(loss, s, batch.labels.astype(np.float64))
    user_rows, dU = _scatter(u, g[:, None] * Vi)
    item_rows, dV = _scatter(batch.items, g[:, None] * Uu)
    return float(terms.sum()), RowGradient(user_rows, dU, item_rows, dV)


def full_mse_loss_and_grad(E: EmbeddingPair, Y_dense: np.ndarray):
    """``||Y - U V^T||_F^2`` over the whole matrix, with dense gradients."""
    R = Y_dense - E.U @ E.V.T
    return float(np.einsum("ij,ij->", R, R)), -2.0 * (R @ E.V), -2.0 * (R.T @ E.U)


@dataclass
class AdamState:
    mU: np.ndarray
    vU: np.ndarray
    mV: np.ndarray
    vV: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, E: EmbeddingPair):
        return cls(np.zeros_like(E.U), np.zeros_like(E.U), np.zeros_like(E.V), np.zeros_like(E.V))


def adam_step(state: AdamState, E: EmbeddingPair, gU, gV, learning_rate, weight_decay=0.0, *, where=(None, None)):
    """One Adam update with decoupled weight decay, applied in place.

    Weight decay shrinks ``theta <- theta - lr * wd * theta`` before the
    moment update. ``where`` carries (epoch, batch) for diagnostics only.
    """
    if state.mU.shape != E.U.shape or state.mV.shape != E.V.shape:
        raise ValueError("Adam buffers do not match embedding shapes")
    if not (np.isfinite(gU).all() and np.isfinite(gV).all()):
        with np.errstate(invalid="ignore"):
            worst = float(np.nanmax(np.abs(np.concatenate([gU.ravel(), gV.ravel()]))))
        raise NonFiniteGradientError(where[0], where[1], worst)

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for P, G, M, S in ((E.U, gU, state.mU, state.vU), (E.V, gV, state.mV, state.vV)):
        if weight_decay:
            P *= 1.0 - learning_rate * weight_decay
        M *= b1
        M += (1.0 - b1) * G
        S *= b2
        S += (1.0 - b2) * (G * G)
        P -= (learning_rate / bc1) * M / (np.sqrt(S / bc2) + state.eps)
    return E, state


class LightGCNPropagator:
    """Symmetric-normalised bipartite propagation averaged over layers 0..L.

    The operator is self-adjoint, so the same ``apply`` maps gradients w.r.t.
    the propagated embeddings back to the base embeddings.
    """

    def __init__(self, Y: InteractionMatrix, layers: int):
        if layers < 0:
            raise ConfigError("layers must be >= 0")
        du = Y.user_degrees().astype(np.float64)
        di = Y.item_degrees().astype(np.float64)
        inv_u = np.divide(1.0, np.sqrt(du), out=np.zeros_like(du), where=du > 0)
        inv_i = np.divide(1.0, np.sqrt(di), out=np.zeros_like(di), where=di > 0)
        self.A = sp.csr_matrix(sp.diags(inv_u) @ Y.csr @ sp.diags(inv_i))
        self.At = sp.csr_matrix(self.A.T)
        self.layers = int(layers)
        # zero-degree rows are passed through unchanged instead of being zeroed
        self.iso_u = du == 0
        self.iso_i = di == 0

    def apply(self, U, V):
        accU, accV = U.copy(), V.copy()
        cu, cv = U, V
        for _ in range(self.layers):
            nu = self.A @ cv
            nv = self.At @ cu
            nu[self.iso_u] = U[self.iso_u]
            nv[self.iso_i] = V[self.iso_i]
            cu, cv = nu, nv
            accU += cu
            accV += cv
        k = self.layers + 1
        return accU / k, accV / k


def lightgcn_propagate(Y: InteractionMatrix, E0: EmbeddingPair, layers: int) -> EmbeddingPair:
    U, V = LightGCNPropagator(Y, layers).apply(E0.U, E0.V)
    return EmbeddingPair(U, V)


def sample_negatives(Y: InteractionMatrix, users: np.ndarray, k: int, rng) -> np.ndarray:
    """``k`` uniform non-interacted items for each entry of ``users`` (shape (len, k))."""
    users = np.repeat(users, k)
    out = rng.integers(0, Y.m, size=users.size)
    bad = np.flatnonzero(Y.contains(users, out))
    while bad.size:
        out[bad] = rng.integers(0, Y.m, size=bad.size)
        bad = bad[Y.contains(users[bad], out[bad])]
    return out.reshape(-1, k)


def iter_batches(Y: InteractionMatrix, config: TrainConfig, shuffle_rng, neg_rng):
    """Yield the epoch's mini-batches: shuffled positives plus fresh negatives."""
    ok = Y.user_degrees()[Y.rows] < Y.m
    pos = np.flatnonzero(ok)
    pos = pos[shuffle_rng.permutation(pos.size)]
    k = config.negatives_per_positive
    for lo in range(0, pos.size, config.batch_size):
        sel = pos[lo : lo + config.batch_size]
        u, i = Y.rows[sel], Y.cols[sel]
        if config.loss == "bpr":
            neg = sample_negatives(Y, u, k, neg_rng)
            yield Batch(np.repeat(u, k), np.repeat(i, k), negatives=neg.ravel())
        elif k > 0:
            neg = sample_negatives(Y, u, k, neg_rng).ravel()
            yield Batch(
                np.concatenate([u, np.repeat(u, k)]),
                np.concatenate([i, neg]),
                labels=np.concatenate([np.ones(u.size), np.zeros(neg.size)]),
            )
        else:
            yield Batch(u, i, labels=np.ones(u.size))


def _regularizer(config: TrainConfig):
    from . import resn

    if config.regularizer == "direct":
        return resn.direct_value_and_grad
    return resn.resn_value_and_grad


def train(
    Y_train: InteractionMatrix,
    config: TrainConfig,
    *,
    init: EmbeddingPair | None = None,
    callback: Callable[[int, EmbeddingPair, TrainLog], None] | None = None,
) -> tuple[EmbeddingPair, TrainLog]:
    """Optimise ``L_R + beta * penalty`` with Adam; returns the base embeddings and the log."""
    from .spectral import spectral_report

    config.validate()
    if Y_train.nnz == 0:
        raise ConfigError("cannot train on an empty interaction matrix")
    n, m = Y_train.shape
    E = init.copy() if init is not None else init_embeddings(n, m, config.d, config.seed, config.init_scale)
    if E.U.shape != (n, config.d) or E.V.shape != (m, config.d):
        raise ConfigError("initial embeddings do not match the data and config")
    state = AdamState.zeros_like(E)
    shuffle_rng = rng_for(config.seed, "shuffle")
    neg_rng = rng_for(config.seed, "negatives")
    prop = LightGCNPropagator(Y_train, config.lightgcn_layers) if config.backbone == "lightgcn" else None
    reg = _regularizer(config)
    r = popularity(Y_train).values.astype(np.float64)

    Y_dense = None
    if config.full_batch:
        if n * m > FULL_BATCH_LIMIT:
            raise SizeLimitError(f"full-batch mode is limited to n*m <= {FULL_BATCH_LIMIT}")
        Y_dense = Y_train.to_dense()

    log = TrainLog()
    last_good = 0

    def snapshot(epoch):
        Es = EmbeddingPair(*prop.apply(E.U, E.V)) if prop else E
        log.spectra.append((epoch, spectral_report(Es, r, vectors=False)))

    if config.log_spectrum_every:
        snapshot(0)

    def step(batch, ep, b):
        if prop is not None:
            Pu, Pv = prop.apply(E.U, E.V)
            Ep = EmbeddingPair(Pu, Pv)
        else:
            Ep = E
        if batch is None:
            value, gU, gV = full_mse_loss_and_grad(Ep, Y_dense)
        else:
            value, rg = loss_and_grad(Ep, batch, config.loss)
            gU, gV = rg.dense(n, m)
        if not np.isfinite(value):
            raise TrainingDivergedError(ep, last_good)
        pen = 0.0
        if config.beta > 0:
            pv, rU, rV = reg(Ep)
            if pv.degenerate:
                log.degenerate_penalty_steps += 1
            else:
                pen = pv.value
                gU += config.beta * rU
                gV += config.beta * rV
        if prop is not None:
            gU, gV = prop.apply(gU, gV)
        adam_step(state, E, gU, gV, config.learning_rate, config.weight_decay, where=(ep, b))
        return value, pen

    for ep in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        total, pens = 0.0, []
        if config.full_batch:
            value, pen = step(None, ep, 0)
            total, pens = value, [pen]
        else:
            for b, batch in enumerate(iter_batches(Y_train, config, shuffle_rng, neg_rng)):
                value, pen = step(batch, ep, b)
                total += value
                pens.append(pen)
        seconds = time.perf_counter() - t0
        if not np.isfinite(total) or not E.is_finite():
            raise TrainingDivergedError(ep, last_good)
        last_good = ep
        log.records.append(EpochRecord(ep, total, float(np.mean(pens)) if pens else 0.0, max(seconds, 1e-12)))
        if config.log_spectrum_every and ep % config.log_spectrum_every == 0:
            snapshot(ep)
        if callback is not None:
            callback(ep, E, log)
        _log.debug("epoch %d loss %.6g penalty %.6g (%.3fs)", ep, total, log.records[-1].penalty, seconds)
    return E, log


def scoring_embeddings(E: EmbeddingPair, Y_train: InteractionMatrix, config: TrainConfig) -> EmbeddingPair:
    """Embeddings whose inner products are the model's scores (propagated for LightGCN)."""
    if config.backbone == "lightgcn":
        return lightgcn_propagate(Y_train, E, config.lightgcn_layers)
    return E


def save_checkpoint(E: EmbeddingPair, path, config: TrainConfig | None = None, extra: dict | None = None):
    """Write ``SBL1`` header, n, m, d (int64 LE), then U and V as row-major float64 LE.

    A ``model_meta.json`` sidecar with the training config is written next to it.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<qqq", E.n, E.m, E.d))
        fh.write(np.ascontiguousarray(E.U, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(E.V, dtype="<f8").tobytes())
    meta = {"n": E.n, "m": E.m, "d": E.d, "config": config.to_dict() if config else None}
    if extra:
        meta.update(extra)
    with open(path.parent / "model_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
    return path


def load_checkpoint(path) -> tuple[EmbeddingPair, dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        n, m, d = struct.unpack("<qqq", fh.read(24))
        U = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d)
        V = np.frombuffer(fh.read(8 * m * d), dtype="<f8").reshape(m, d)
        if U.size != n * d or V.size != m * d:
            raise ValueError(f"{path}: truncated checkpoint")
    meta_path = path.parent / "model_meta.json"
    meta = {}
    if meta_path.exists():
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    return EmbeddingPair(U.astype(np.float64), V.astype(np.float64)), meta
