"""Logistic regression and Gaussian naive Bayes written against numpy only."""

from __future__ import annotations

import logging
import math
import warnings

import numpy as np

from .data import Dataset

logger = logging.getLogger(__name__)


def design_matrix(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Features as floats (binary codes, raw numbers, or one-hot) and 0/1 labels."""
    schema = dataset.schema
    cols = []
    for j, f in enumerate(schema.features):
        x = dataset.data[:, j]
        if not f.is_categorical or f.is_binary:
            cols.append(x)
        else:
            cols.extend((x == i).astype(float) for i in range(f.size))
    X = np.column_stack(cols) if cols else np.zeros((len(dataset), 0))
    pos = schema.label.domain.index(schema.positive_label)
    y = (dataset.data[:, -1] == pos).astype(float)
    return X, y


class LogisticRegression:
    """Sigmoid-linear classifier fit by full-batch gradient descent on log-loss."""

    def __init__(self, epochs: int = 500, learning_rate: float = 0.1, seed=0):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.seed = seed
        self.weights = None
        self.bias = 0.0
        self.loss_history: list[float] = []

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        rng = np.random.default_rng(self.seed)
        w = rng.normal(0.0, 0.01, X.shape[1])
        b = 0.0
        n = len(y)
        for _ in range(self.epochs):
            z = X @ w + b
            with np.errstate(over="ignore"):
                p = 1.0 / (1.0 + np.exp(-z))
            eps = 1e-12
            loss = -np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))
            if not math.isfinite(loss) or not np.all(np.isfinite(w)):
                raise FloatingPointError("logistic regression diverged (non-finite loss or weights)")
            self.loss_history.append(float(loss))
            grad = p - y
            w = w - self.learning_rate * (X.T @ grad) / n
            b = b - self.learning_rate * grad.mean()
        self.weights, self.bias = w, b
        return self

    def predict_proba(self, X):
        with np.errstate(over="ignore"):
            return 1.0 / (1.0 + np.exp(-(np.asarray(X, dtype=float) @ self.weights + self.bias)))

    def predict(self, X):
        return (self.predict_proba(X) >= 0.5).astype(int)


class GaussianNB:
    """Per-class Gaussian likelihoods (variance floored at ``var_floor``) times class prior."""

    def __init__(self, var_floor: float = 1e-9):
        self.var_floor = var_floor

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y).astype(int)
        self.classes_ = np.array([0, 1])
        self.prior_ = np.array([(y == c).mean() for c in self.classes_])
        if np.any(self.prior_ == 0):
            warnings.warn("training set contains a single class; the prior is degenerate")
        self.mean_ = np.zeros((2, X.shape[1]))
        self.var_ = np.full((2, X.shape[1]), self.var_floor)
        for c in self.classes_:
            Xc = X[y == c]
            if len(Xc):
                self.mean_[c] = Xc.mean(axis=0)
                self.var_[c] = np.maximum(Xc.var(axis=0), self.var_floor)
        return self

    def joint_log_likelihood(self, X):
        X = np.asarray(X, dtype=float)
        out = np.empty((len(X), 2))
        with np.errstate(divide="ignore"):
            log_prior = np.log(self.prior_)
        for c in self.classes_:
            ll = -0.5 * np.sum(np.log(2 * np.pi * self.var_[c]) + (X - self.mean_[c]) ** 2 / self.var_[c], axis=1)
            out[:, c] = log_prior[c] + ll
        return out

    def predict_proba(self, X):
        jll = self.joint_log_likelihood(X)
        jll = jll - jll.max(axis=1, keepdims=True)
        p = np.exp(jll)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.joint_log_likelihood(X), axis=1)


def train_logistic_regression(train: Dataset, epochs=500, learning_rate=0.1, seed=0) -> LogisticRegression:
    X, y = design_matrix(train)
    return LogisticRegression(epochs, learning_rate, seed).fit(X, y)


def train_gaussian_nb(train: Dataset, seed=0) -> GaussianNB:
    # deterministic fit; ``seed`` kept for a uniform trainer signature
    X, y = design_matrix(train)
    return GaussianNB().fit(X, y)


def evaluate(classifier, test: Dataset) -> dict:
    """Accuracy plus TP and TN as fractions of all test records."""
    X, y = design_matrix(test)
    pred = classifier.predict(X)
    n = max(len(y), 1)
    tp = float(np.sum((pred == 1) & (y == 1))) / n
    tn = float(np.sum((pred == 0) & (y == 0))) / n
    return {"accuracy": tp + tn, "tp_rate": tp, "tn_rate": tn}

