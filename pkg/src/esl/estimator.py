"""Sklearn-style front end over the sub-center trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import synth, trainer
from .evolution import EvolutionConfig
from .margin_loss import MarginConfig


class EvolvingSubcentersClassifier(TransformerMixin, BaseEstimator):
    """Margin-softmax classifier with evolving per-class sub-centers.

    fit(X, y) trains the linear encoder and sub-center bank on unit-norm
    feature rows; predict(X) returns the (possibly merged) class label of the
    nearest active sub-center; transform(X) returns unit-norm embeddings.
    """

    def __init__(self, epochs=40, batch_size=128, lr=0.1, momentum=0.9,
                 weight_decay=5e-4, scale=64.0, margin=0.5, m_init=3,
                 lambda1=2.0, lambda2=2.0, lambda3=0.25, lambda4=3.0,
                 min_support=0, epsilon_start=1, embed_dim=None,
                 mask_enabled=True, evolution_enabled=True, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.scale = scale
        self.margin = margin
        self.m_init = m_init
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.lambda4 = lambda4
        self.min_support = min_support
        self.epsilon_start = epsilon_start
        self.embed_dim = embed_dim
        self.mask_enabled = mask_enabled
        self.evolution_enabled = evolution_enabled
        self.seed = seed

    def _config(self, dim: int) -> trainer.TrainConfig:
        return trainer.TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.seed,
            margin=MarginConfig.arcface(scale=self.scale, m2=self.margin),
            evolution=EvolutionConfig(
                lambda1=self.lambda1, lambda2=self.lambda2,
                lambda3=self.lambda3, lambda4=self.lambda4,
                m_init=self.m_init, min_support=self.min_support,
                epsilon_start=self.epsilon_start,
                total_epochs=self.epochs),
            embed_dim=self.embed_dim or dim,
            mask_enabled=self.mask_enabled,
            evolution_enabled=self.evolution_enabled,
            holdout_fraction=0.0,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        X = np.asarray(X, dtype=np.float64)
        classes, encoded = np.unique(y, return_inverse=True)
        self.classes_ = classes
        specs = [synth.NkcClassSpec(j, 1, 1, 0, 2) for j in range(len(classes))]
        ds = synth.Dataset(
            dim=X.shape[1],
            inputs=X,
            noisy_labels=encoded.astype(np.int64),
            true_identity=np.full(len(X), -1, dtype=np.int64),
            class_specs=specs,
            noise_ratio=float("nan"),
            seed=self.seed,
        )
        self.config_ = self._config(X.shape[1])
        self.state_ = trainer.train(ds, self.config_)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        return trainer.embed(self.state_, X, self.config_)

    def decision_function(self, X):
        emb = self.transform(X)
        W, labels, _ = self.state_.bank.matrices()
        Wn = W / np.linalg.norm(W, axis=1, keepdims=True)
        return emb @ Wn.T, labels

    def predict(self, X):
        scores, labels = self.decision_function(X)
        best = labels[np.argmax(scores, axis=1)]
        return self.classes_[best]

    def score(self, X, y):
        return float(np.mean(self.predict(X) == np.asarray(y)))
