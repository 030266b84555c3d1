"""scikit-learn style wrapper around training, scoring and spectral diagnostics."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import InteractionMatrix, popularity
from .metrics import evaluate, topk_recommend
from .model import TrainConfig, predict_scores, scoring_embeddings, train
from .spectral import spectral_report
from .theory import bound_report


def check_interactions(X, shape=None) -> InteractionMatrix:
    """Coerce ``X`` (InteractionMatrix, sparse/dense 0-1 matrix or (u, i) pairs) to an InteractionMatrix."""
    if isinstance(X, InteractionMatrix):
        Y = X
    elif sp.issparse(X):
        Y = InteractionMatrix.from_sparse(X)
    else:
        arr = np.asarray(X)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
        if shape is not None and arr.shape[1] == 2 and arr.shape != tuple(shape):
            n, m = shape
            Y = InteractionMatrix.from_pairs(arr.astype(np.int64), n=n, m=m)
        else:
            Y = InteractionMatrix.from_dense(arr)
    if shape is not None and Y.shape != tuple(shape):
        raise ValueError(f"interaction matrix has shape {Y.shape}, expected {tuple(shape)}")
    return Y


def check_pairs(pairs, n: int, m: int) -> np.ndarray:
    pairs = np.asarray(pairs)
    if pairs.ndim == 1 and pairs.size == 2:
        pairs = pairs.reshape(1, 2)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValueError("pairs must have shape (k, 2)")
    if not np.issubdtype(pairs.dtype, np.integer):
        if not np.all(np.equal(np.mod(pairs, 1), 0)):
            raise ValueError("pairs must hold integer indices")
        pairs = pairs.astype(np.int64)
    if pairs.size and (pairs.min() < 0 or pairs[:, 0].max() >= n or pairs[:, 1].max() >= m):
        raise IndexError("user or item index out of range")
    return pairs


class SpectralMF(BaseEstimator):
    """Embedding recommender with an optional spectral-norm penalty.

    Parameters mirror ``TrainConfig``; ``fit`` accepts anything
    ``check_interactions`` understands.
    """

    def __init__(
        self,
        d=64,
        loss="mse",
        learning_rate=1e-3,
        weight_decay=0.0,
        beta=0.0,
        epochs=100,
        negatives_per_positive=1,
        batch_size=2048,
        seed=0,
        backbone="mf",
        lightgcn_layers=3,
        log_spectrum_every=0,
        full_batch=False,
        init_scale=1.0,
        regularizer="resn",
    ):
        self.d = d
        self.loss = loss
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta = beta
        self.epochs = epochs
        self.negatives_per_positive = negatives_per_positive
        self.batch_size = batch_size
        self.seed = seed
        self.backbone = backbone
        self.lightgcn_layers = lightgcn_layers
        self.log_spectrum_every = log_spectrum_every
        self.full_batch = full_batch
        self.init_scale = init_scale
        self.regularizer = regularizer

    def _config(self):
        return TrainConfig(**self.get_params()).validate()

    def fit(self, X, y=None):
        Y = check_interactions(X)
        config = self._config()
        E, log = train(Y, config)
        self.config_ = config
        self.train_ = Y
        self.embeddings_ = E
        self.scoring_embeddings_ = scoring_embeddings(E, Y, config)
        self.log_ = log
        self.n_users_, self.n_items_ = Y.shape
        return self

    def predict(self, pairs, activation="identity"):
        check_is_fitted(self, "embeddings_")
        pairs = check_pairs(pairs, self.n_users_, self.n_items_)
        return predict_scores(self.scoring_embeddings_, pairs, activation)

    def recommend(self, K=20):
        check_is_fitted(self, "embeddings_")
        return topk_recommend(self.scoring_embeddings_, self.train_, K)

    def evaluate(self, X_test, K=20, G=5):
        check_is_fitted(self, "embeddings_")
        test = check_interactions(X_test, shape=(self.n_users_, self.n_items_))
        return evaluate(self.scoring_embeddings_, self.train_, test, K=K, G=G)

    def score(self, X_test, y=None, K=20):
        """NDCG@K on held-out interactions."""
        return self.evaluate(X_test, K=K).ndcg_at_k

    def spectrum(self):
        check_is_fitted(self, "embeddings_")
        return spectral_report(self.scoring_embeddings_, popularity(self.train_))

    def bounds(self):
        check_is_fitted(self, "embeddings_")
        return bound_report(self.scoring_embeddings_, popularity(self.train_))
