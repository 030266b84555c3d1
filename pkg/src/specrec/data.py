"""Implicit-feedback interaction data: loading, synthesis, popularity and splits."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import (
    ConfigError,
    EmptyInputError,
    EmptyTestError,
    InsufficientDataError,
    ParseError,
)
from .random import rng_for

_log = logging.getLogger(__name__)

Paradigm = Literal["common", "debiased", "uniform_exposure"]


class InteractionMatrix:
    """Immutable sparse binary user x item matrix.

    Entries are kept in row-major order (``rows``/``cols``) together with CSR
    and CSC adjacency so both ``items_of(u)`` and ``users_of(i)`` are
    O(degree).
    """

    def __init__(
        self,
        rows,
        cols,
        n: int,
        m: int,
        *,
        user_tokens: Sequence[str] | None = None,
        item_tokens: Sequence[str] | None = None,
        duplicates: int = 0,
    ):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        if rows.shape != cols.shape:
            raise ValueError("rows and cols must have the same length")
        n, m = int(n), int(m)
        if n < 0 or m < 0:
            raise ValueError("matrix dimensions must be non-negative")
        if rows.size:
            if rows.min() < 0 or rows.max() >= n:
                raise IndexError("user index out of range")
            if cols.min() < 0 or cols.max() >= m:
                raise IndexError("item index out of range")

        keys = rows * m + cols
        keys, first = np.unique(keys, return_index=True)
        dup = rows.size - keys.size
        self.duplicates = int(duplicates) + int(dup)
        self._keys = keys
        self.rows = keys // m if m else keys
        self.cols = keys % m if m else keys
        self.n = n
        self.m = m
        for arr in (self._keys, self.rows, self.cols):
            arr.setflags(write=False)

        data = np.ones(keys.size, dtype=np.float64)
        self.csr = sp.csr_matrix((data, (self.rows, self.cols)), shape=(n, m))
        self.csc = self.csr.tocsc()
        self.user_tokens = list(user_tokens) if user_tokens is not None else None
        self.item_tokens = list(item_tokens) if item_tokens is not None else None
        # latent cluster labels, only set by the clustered synthetic generator
        self.user_cluster = None
        self.item_cluster = None

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]], n=None, m=None, **kwargs):
        arr = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
        if n is None:
            n = int(arr[:, 0].max()) + 1 if arr.size else 0
        if m is None:
            m = int(arr[:, 1].max()) + 1 if arr.size else 0
        return cls(arr[:, 0], arr[:, 1], n, m, **kwargs)

    @classmethod
    def from_dense(cls, Y):
        Y = np.asarray(Y)
        rows, cols = np.nonzero(Y)
        return cls(rows, cols, Y.shape[0], Y.shape[1])

    @classmethod
    def from_sparse(cls, X):
        X = sp.coo_matrix(X)
        keep = X.data != 0
        return cls(X.row[keep], X.col[keep], X.shape[0], X.shape[1])

    @property
    def shape(self):
        return (self.n, self.m)

    @property
    def nnz(self):
        return int(self._keys.size)

    def __len__(self):
        return self.nnz

    def __repr__(self):
        return f"InteractionMatrix(n={self.n}, m={self.m}, nnz={self.nnz})"

    @property
    def keys(self):
        """Sorted linear keys ``u * m + i``, handy for vectorised membership."""
        return self._keys

    def entries(self) -> set[tuple[int, int]]:
        return set(zip(self.rows.tolist(), self.cols.tolist()))

    def pairs(self) -> np.ndarray:
        return np.column_stack([self.rows, self.cols])

    def contains(self, users, items) -> np.ndarray:
        q = np.asarray(users, dtype=np.int64) * self.m + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self._keys, q)
        pos = np.minimum(pos, max(self._keys.size - 1, 0))
        if self._keys.size == 0:
            return np.zeros(q.shape, dtype=bool)
        return self._keys[pos] == q

    def items_of(self, u: int) -> np.ndarray:
        return self.csr.indices[self.csr.indptr[u] : self.csr.indptr[u + 1]]

    def users_of(self, i: int) -> np.ndarray:
        return self.csc.indices[self.csc.indptr[i] : self.csc.indptr[i + 1]]

    def user_degrees(self) -> np.ndarray:
        return np.diff(self.csr.indptr)

    def item_degrees(self) -> np.ndarray:
        return np.diff(self.csc.indptr)

    def to_dense(self, dtype=np.float64) -> np.ndarray:
        return self.csr.toarray().astype(dtype, copy=False)

    def subset(self, mask) -> "InteractionMatrix":
        """Matrix with the same shape and token maps, keeping entries where ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        return InteractionMatrix(
            self.rows[mask],
            self.cols[mask],
            self.n,
            self.m,
            user_tokens=self.user_tokens,
            item_tokens=self.item_tokens,
        )


@dataclass(frozen=True)
class PopularityVector:
    values: np.ndarray
    total: int

    @property
    def r_max(self):
        return self.values.max() if self.values.size else 0

    @property
    def argmax(self) -> int:
        # np.argmax returns the first maximum, i.e. the smallest index on ties
        return int(np.argmax(self.values))

    def __len__(self):
        return int(self.values.size)


@dataclass(frozen=True)
class PowerLawFit:
    """Rank-frequency fit ``log r_g = intercept - alpha * log g``.

    ``rank_freq`` holds ``(rank, popularity)`` rows, ranks starting at 1;
    zero-popularity items are excluded and counted in ``dropped_zeros``.
    """

    alpha: float
    intercept: float
    rank_freq: np.ndarray
    r_squared: float
    dropped_zeros: int = 0


@dataclass
class SplitBundle:
    train: InteractionMatrix
    validation: InteractionMatrix
    test: InteractionMatrix
    paradigm: Paradigm
    seed: int | None
    meta: dict = field(default_factory=dict)

    def sizes(self):
        return {"train": self.train.nnz, "validation": self.validation.nnz, "test": self.test.nnz}


def load_interactions(path, format: Literal["tsv_pairs", "csv_pairs"] = "tsv_pairs") -> InteractionMatrix:
    """Read ``user<sep>item`` lines, reindexing tokens in first-appearance order.

    Lines starting with ``#`` and blank lines are skipped. Duplicate pairs are
    dropped and counted in ``InteractionMatrix.duplicates``.
    """
    if format not in ("tsv_pairs", "csv_pairs"):
        raise ConfigError(f"unknown interaction format {format!r}")
    sep = "\t" if format == "tsv_pairs" else ","

    users: dict[str, int] = {}
    items: dict[str, int] = {}
    rows, cols = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split(sep)
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise ParseError(f"expected 2 fields separated by {sep!r}, got {line!r}", line=lineno)
            ut, it = parts[0].strip(), parts[1].strip()
            rows.append(users.setdefault(ut, len(users)))
            cols.append(items.setdefault(it, len(items)))

    if not rows:
        raise EmptyInputError(f"no interactions in {path}")
    Y = InteractionMatrix(rows, cols, len(users), len(items), user_tokens=list(users), item_tokens=list(items))
    if Y.duplicates:
        _log.warning("%s: dropped %d duplicate interactions", path, Y.duplicates)
    return Y


def write_interactions(Y: InteractionMatrix, path, format="tsv_pairs", tokens=True):
    sep = "\t" if format == "tsv_pairs" else ","
    ut = Y.user_tokens if tokens and Y.user_tokens is not None else None
    it = Y.item_tokens if tokens and Y.item_tokens is not None else None
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in zip(Y.rows.tolist(), Y.cols.tolist()):
            fh.write(f"{ut[u] if ut else u}{sep}{it[i] if it else i}\n")


def popularity(Y: InteractionMatrix) -> PopularityVector:
    values = np.bincount(Y.cols, minlength=Y.m).astype(np.int64)
    return PopularityVector(values=values, total=int(values.sum()))


def fit_power_law(r) -> PowerLawFit:
    """Fit a Zipf law to popularity by OLS on the log-log rank-frequency curve."""
    values = r.values if isinstance(r, PopularityVector) else r
    values = np.asarray(values, dtype=np.float64).ravel()
    positive = np.sort(values[values > 0])[::-1]
    if positive.size < 2:
        raise InsufficientDataError("power-law fit needs at least 2 items with positive popularity")

    ranks = np.arange(1, positive.size + 1, dtype=np.float64)
    x = np.log(ranks)
    y = np.log(positive)
    xc = x - x.mean()
    yc = y - y.mean()
    slope = float(xc @ yc / (xc @ xc))
    intercept = float(y.mean() - slope * x.mean())
    ss_tot = float(yc @ yc)
    resid = yc - slope * xc
    ss_res = float(resid @ resid)
    # a perfectly flat curve is fitted exactly by a zero slope
    r_squared = 1.0 if ss_tot <= 1e-300 else max(0.0, 1.0 - ss_res / ss_tot)
    return PowerLawFit(
        alpha=-slope if slope != 0 else 0.0,
        intercept=intercept,
        rank_freq=np.column_stack([ranks, positive]),
        r_squared=r_squared,
        dropped_zeros=int(values.size - positive.size),
    )


def _part_sizes(total: int, fractions: Sequence[float]) -> list[int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError("fractions must be three non-negative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)!r}")
    valid = int(math.floor(total * fractions[1] + 1e-9))
    test = int(math.floor(total * fractions[2] + 1e-9))
    return [total - valid - test, valid, test]


def split_common(Y: InteractionMatrix, seed: int, fractions=(0.70, 0.10, 0.20)) -> SplitBundle:
    """Uniformly random train/validation/test partition of the entries."""
    sizes = _part_sizes(Y.nnz, fractions)
    if Y.nnz < 10:
        raise InsufficientDataError("common split needs at least 10 interactions")
    perm = rng_for(seed, "splits").permutation(Y.nnz)
    labels = np.empty(Y.nnz, dtype=np.int8)
    labels[perm[: sizes[0]]] = 0
    labels[perm[sizes[0] : sizes[0] + sizes[1]]] = 1
    labels[perm[sizes[0] + sizes[1] :]] = 2
    return SplitBundle(
        train=Y.subset(labels == 0),
        validation=Y.subset(labels == 1),
        test=Y.subset(labels == 2),
        paradigm="common",
        seed=seed,
        meta={"fractions": list(fractions)},
    )


def split_debiased(Y: InteractionMatrix, seed: int, test_per_item: int = 1) -> SplitBundle:
    """Test set with exactly ``test_per_item`` interactions for every eligible item.

    An item is eligible when it has at least ``test_per_item + 1`` interactions,
    so it keeps at least one outside the test set. The remaining entries are
    split 7:1 into train and validation.
    """
    if test_per_item < 1:
        raise ConfigError("test_per_item must be >= 1")
    rng = rng_for(seed, "splits")
    # entries grouped by item: position of each entry in column-major order
    order = np.lexsort((Y.rows, Y.cols))
    deg = Y.item_degrees()
    starts = np.concatenate([[0], np.cumsum(deg)[:-1]])
    eligible = np.flatnonzero(deg >= test_per_item + 1)
    if eligible.size == 0:
        raise EmptyTestError(f"no item has at least {test_per_item + 1} interactions")

    is_test = np.zeros(Y.nnz, dtype=bool)
    for i in eligible:
        pick = rng.choice(deg[i], size=test_per_item, replace=False)
        is_test[order[starts[i] + pick]] = True

    rest = np.flatnonzero(~is_test)
    rest = rest[rng.permutation(rest.size)]
    n_valid = rest.size // 8
    is_valid = np.zeros(Y.nnz, dtype=bool)
    is_valid[rest[:n_valid]] = True
    return SplitBundle(
        train=Y.subset(~is_test & ~is_valid),
        validation=Y.subset(is_valid),
        test=Y.subset(is_test),
        paradigm="debiased",
        seed=seed,
        meta={"test_per_item": test_per_item, "eligible_items": int(eligible.size)},
    )


def uniform_exposure_bundle(train: InteractionMatrix, test: InteractionMatrix) -> SplitBundle:
    """Wrap an externally collected random-exposure test set."""
    if test.shape != train.shape:
        raise ConfigError(f"test shape {test.shape} does not match train shape {train.shape}")
    empty = train.subset(np.zeros(train.nnz, dtype=bool))
    return SplitBundle(train=train, validation=empty, test=test, paradigm="uniform_exposure", seed=None)


def align_to(reference: InteractionMatrix, path, format="tsv_pairs") -> InteractionMatrix:
    """Load a file whose tokens are mapped through ``reference``'s token maps.

    Pairs with unknown users or items are skipped (they cannot be scored).
    """
    raw = load_interactions(path, format)
    if reference.user_tokens is None or reference.item_tokens is None:
        users = np.array([int(t) for t in raw.user_tokens])
        items = np.array([int(t) for t in raw.item_tokens])
    else:
        umap = {t: k for k, t in enumerate(reference.user_tokens)}
        imap = {t: k for k, t in enumerate(reference.item_tokens)}
        users = np.array([umap.get(t, -1) for t in raw.user_tokens])
        items = np.array([imap.get(t, -1) for t in raw.item_tokens])
    u = users[raw.rows]
    i = items[raw.cols]
    ok = (u >= 0) & (i >= 0) & (u < reference.n) & (i < reference.m)
    if not ok.all():
        _log.warning("%s: skipped %d interactions with unknown users/items", path, int((~ok).sum()))
    return InteractionMatrix(
        u[ok], i[ok], reference.n, reference.m,
        user_tokens=reference.user_tokens, item_tokens=reference.item_tokens,
    )


def write_split(bundle: SplitBundle, outdir, format="tsv_pairs") -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for name, Y in (("train", bundle.train), ("valid", bundle.validation), ("test", bundle.test)):
        write_interactions(Y, outdir / f"{name}.tsv", format=format)
    meta = {
        "paradigm": bundle.paradigm,
        "seed": bundle.seed,
        "sizes": bundle.sizes(),
        "n": bundle.train.n,
        "m": bundle.train.m,
        "user_tokens": bundle.train.user_tokens,
        "item_tokens": bundle.train.item_tokens,
        **bundle.meta,
    }
    with open(outdir / "split_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
    return outdir


def zipf_weights(m: int, alpha: float) -> np.ndarray:
    w = np.arange(1, m + 1, dtype=np.float64) ** (-float(alpha))
    return w / w.sum()


def synth_powerlaw(
    n: int,
    m: int,
    alpha: float,
    interactions_per_user: int,
    seed: int,
    *,
    clusters: int = 0,
    affinity: float = 1.0,
    cluster_decay: float = 1.0,
    chunk: int = 4096,
) -> InteractionMatrix:
    """Sample ``interactions_per_user`` distinct Zipf-distributed items per user.

    Item ``g`` (0-based rank ``g``) is drawn with probability proportional to
    ``(g + 1) ** -alpha``; duplicates are rejected, which is the same
    distribution as successive sampling without replacement. That is drawn
    here with the Gumbel-top-k trick so whole chunks of users are vectorised.

    With ``clusters > 0`` every item and user gets a latent cluster, and
    in-cluster items have their weight multiplied by ``affinity``. User
    cluster sizes are proportional to ``cluster_decay ** c``. This adds a
    personal preference signal on top of the popularity skew.
    """
    k = int(interactions_per_user)
    if k > m:
        raise ConfigError("interactions_per_user must not exceed the number of items")
    if alpha < 0:
        raise ConfigError("alpha must be non-negative")
    rng = rng_for(seed, "synth")
    logw = np.log(zipf_weights(m, alpha))

    if clusters > 0:
        item_cluster = rng.integers(0, clusters, size=m)
        pc = float(cluster_decay) ** np.arange(clusters)
        user_cluster = rng.choice(clusters, size=n, p=pc / pc.sum())
        boost = np.log(float(affinity)) * (item_cluster[None, :] == np.arange(clusters)[:, None])
        cluster_logw = logw[None, :] + boost
    rows = np.repeat(np.arange(n, dtype=np.int64), k)
    cols = np.empty(n * k, dtype=np.int64)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        base = cluster_logw[user_cluster[lo:hi]] if clusters > 0 else logw[None, :]
        keys = base + rng.gumbel(size=(hi - lo, m))
        top = np.argpartition(-keys, k - 1, axis=1)[:, :k] if k < m else np.tile(np.arange(m), (hi - lo, 1))
        cols[lo * k : hi * k] = np.sort(top, axis=1).ravel()
    Y = InteractionMatrix(rows, cols, n, m)
    if clusters > 0:
        Y.user_cluster = user_cluster
        Y.item_cluster = item_cluster
    return Y


def nested_zipf(n: int, m: int, alpha: float) -> InteractionMatrix:
    """Deterministic matrix with popularity ``max(1, floor(n * g ** -alpha))``.

    Item ``g`` is interacted by the first ``r_g`` users, so columns are nested.
    For ``m <= n ** (1 / alpha)`` no item hits the floor of 1 and the profile
    is noiseless Zipf up to integer rounding.
    """
    r = np.floor(n * np.arange(1, m + 1, dtype=np.float64) ** (-float(alpha)) + 1e-9).astype(np.int64)
    r = np.maximum(r, 1)
    cols = np.repeat(np.arange(m, dtype=np.int64), r)
    rows = np.concatenate([np.arange(c, dtype=np.int64) for c in r])
    return InteractionMatrix(rows, cols, n, m)
