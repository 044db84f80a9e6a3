"""scikit-learn style front end for HGCH."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .graph import SplitDataset
from .metrics import head_tail_partition, top_k_items
from .model import ModelConfig, forward_values, parameter_count, score_values
from .training import TrainConfig, evaluate_split, train

__all__ = ["HGCHRecommender"]

_MODEL_FIELDS = (
    "dim", "n_layers", "curvature", "score_curvature", "init_scale", "power",
    "fusion", "aggregation", "init", "include_layer0",
)
_TRAIN_FIELDS = (
    "margin", "alpha", "n_neg", "sampling", "lr", "batch_size", "max_epochs",
    "patience", "seed", "eval_k",
)


class HGCHRecommender(BaseEstimator):
    """Hyperbolic graph-convolution recommender over a heterogeneous graph.

    ``fit`` takes a :class:`~hgch.graph.SplitDataset`; the fitted model
    scores (user, item) pairs by negative squared hyperbolic distance.
    The four ablation switches are ``sampling`` (hyperbolic / uniform),
    ``init`` (power_law / uniform), ``aggregation`` (gyromidpoint /
    tangent) and ``fusion`` (none / gate / prior / gate_prior).

    Attributes
    ----------
    params_ : ModelParams
        Best-validation parameters.
    embeddings_ : ndarray (n_nodes, dim)
        Final tangent embeddings after graph convolution.
    history_ : list of dict
        Per-epoch training log.
    best_epoch_ : int
    n_params_ : int
    """

    def __init__(
        self,
        dim=64,
        n_layers=3,
        curvature=1.0,
        score_curvature=1.0,
        init_scale=0.1,
        power=1.1,
        fusion="gate_prior",
        aggregation="gyromidpoint",
        init="power_law",
        include_layer0=False,
        margin=0.1,
        alpha=0.01,
        n_neg=20,
        sampling="hyperbolic",
        lr=1e-3,
        batch_size=1024,
        max_epochs=1000,
        patience=100,
        seed=0,
        eval_k=10,
    ):
        self.dim = dim
        self.n_layers = n_layers
        self.curvature = curvature
        self.score_curvature = score_curvature
        self.init_scale = init_scale
        self.power = power
        self.fusion = fusion
        self.aggregation = aggregation
        self.init = init
        self.include_layer0 = include_layer0
        self.margin = margin
        self.alpha = alpha
        self.n_neg = n_neg
        self.sampling = sampling
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.eval_k = eval_k

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{f: getattr(self, f) for f in _MODEL_FIELDS}).validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{f: getattr(self, f) for f in _TRAIN_FIELDS}).validate()

    def fit(self, X: SplitDataset, y=None, log=None):
        if not isinstance(X, SplitDataset):
            raise TypeError(f"fit expects a SplitDataset, got {type(X).__name__}")
        result = train(X, self.model_config(), self.train_config(), log=log)
        self.data_ = X
        self.context_ = result.context
        self.params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.best_score_ = result.best_score
        self.n_params_ = parameter_count(result.params)
        self.embeddings_ = forward_values(result.params, result.context, self.model_config())
        return self

    def transform(self, X=None):
        """Final tangent embeddings of the nodes in ``X`` (all nodes by default)."""
        check_is_fitted(self, "embeddings_")
        if X is None:
            return self.embeddings_.copy()
        return self.embeddings_[np.asarray(X, dtype=np.int64)]

    def _item_rows(self, items):
        return self.embeddings_[self.data_.hcg.offset("item") + np.asarray(items, dtype=np.int64)]

    def predict(self, X):
        """Scores for an ``(n, 2)`` array of (user, item) local indices."""
        check_is_fitted(self, "embeddings_")
        X = np.asarray(X, dtype=np.int64).reshape(-1, 2)
        if len(X) and (X[:, 0].max() >= self.data_.n_users or X[:, 1].max() >= self.data_.n_items or X.min() < 0):
            raise ValueError("pair indices out of range")
        return score_values(self.embeddings_[X[:, 0]], self._item_rows(X[:, 1]), self.score_curvature)

    def recommend(self, users, k=10, exclude="seen"):
        """Top-``k`` items per user, excluding the user's ``exclude`` positives."""
        check_is_fitted(self, "embeddings_")
        users = np.asarray(users, dtype=np.int64)
        excl = self.data_.positives(exclude) if exclude else [np.array([], np.int64)] * self.data_.n_users
        return top_k_items(
            self.embeddings_[users],
            self._item_rows(np.arange(self.data_.n_items)),
            [excl[u] for u in users],
            k,
            self.score_curvature,
        )

    def evaluate(self, split="test", ks=(10, 20)):
        """Recall@K / NDCG@K for all items and for the H20 / T80 strata."""
        check_is_fitted(self, "embeddings_")
        head, _ = head_tail_partition(np.bincount(self.data_.train[:, 1], minlength=self.data_.n_items))
        return evaluate_split(self.embeddings_, self.data_, split, ks, self.score_curvature, head)

    def score(self, X=None, y=None):
        """Test NDCG@``eval_k``."""
        return self.evaluate("test", (self.eval_k,)).get("ndcg", self.eval_k)
