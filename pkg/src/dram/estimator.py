"""sklearn-style estimator facade over the attention model.

`GlimpseClassifier` wraps the single-label tasks (one label per image) and
`SequenceTranscriber` the multi-digit task, both with fit/predict/get_params
so they compose with the usual tooling. The CLI remains the primary
interface for long runs; these wrappers target notebook-scale use.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import decode as dec
from .config import parse_config
from .model import init_params
from .optim import OptimizerState
from .rng import stream
from .tensor import set_default_dtype
from .training import train_epoch


def _check_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"X must be (n_samples, height, width), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("X has no samples")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    return X


class _Frame:
    """Shared fit/predict plumbing for both wrappers."""

    def _build(self, overrides, num_classes, canvas_hw):
        over = list(overrides)
        over += [f"num_classes={num_classes}",
                 f"canvas_h={canvas_hw[0]}", f"canvas_w={canvas_hw[1]}"]
        cfg = parse_config(overrides=over)
        return cfg

    def _train(self, cfg, images, label_seqs):
        set_default_dtype(cfg.train.dtype)
        mcfg, scfg, tcfg = cfg.model, cfg.sensor, cfg.train

        class _DS:
            pass

        ds = _DS()
        ds.images = np.asarray(images, dtype=np.float32)
        ds.labels = label_seqs
        params = init_params(mcfg, scfg, stream(tcfg.seed, "init"))
        opt = OptimizerState(tcfg.lr, tcfg.momentum, tcfg.lr_decay)
        rng = stream(tcfg.seed, "train")
        history = []
        for epoch in range(1, tcfg.epochs + 1):
            history.append(train_epoch(params, opt, mcfg, scfg, tcfg, ds, epoch, rng))
        return params, mcfg, scfg, history

    def _require_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")


class GlimpseClassifier(_Frame, ClassifierMixin, BaseEstimator):
    """Recurrent attention classifier for one label per image."""

    def __init__(self, task: str = "pairs", epochs: int = 3, lstm_units: int = 64,
                 glimpse_dim: int = 64, hidden: int = 64, glimpses_per_target: int = 4,
                 batch_size: int = 64, lr: float = 0.01, lr_decay: float = 0.97,
                 momentum: float = 0.9, location_std: float = 0.03,
                 reinforce_weight: float = 1.0, no_context: bool = False,
                 unit_width_px: float | None = None, seed: int = 0):
        self.task = task
        self.epochs = epochs
        self.lstm_units = lstm_units
        self.glimpse_dim = glimpse_dim
        self.hidden = hidden
        self.glimpses_per_target = glimpses_per_target
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.momentum = momentum
        self.location_std = location_std
        self.reinforce_weight = reinforce_weight
        self.no_context = no_context
        self.unit_width_px = unit_width_px
        self.seed = seed

    def _overrides(self):
        over = [
            f"task={self.task}", f"epochs={self.epochs}", f"lstm_units={self.lstm_units}",
            f"glimpse_dim={self.glimpse_dim}", f"glimpse_hidden={self.hidden}",
            f"emission_hidden={self.hidden}", f"classifier_hidden={self.hidden}",
            f"baseline_hidden={self.hidden}",
            f"glimpses_per_target={self.glimpses_per_target}",
            f"batch_size={self.batch_size}", f"lr={self.lr}", f"lr_decay={self.lr_decay}",
            f"momentum={self.momentum}", f"location_std={self.location_std}",
            f"reinforce_weight={self.reinforce_weight}", f"no_context={self.no_context}",
            f"seed={self.seed}",
        ]
        if self.unit_width_px is not None:
            over.append(f"unit_width_px={self.unit_width_px}")
        return over

    def fit(self, X, y):
        X = _check_images(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y must be (n_samples,), got {y.shape}")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        cfg = self._build(self._overrides(), len(self.classes_), X.shape[1:])
        labels = [[int(v)] for v in y_idx]
        self.params_, self.model_config_, self.sensor_config_, self.history_ = \
            self._train(cfg, X, labels)
        return self

    def predict_log_proba(self, X):
        self._require_fitted()
        X = _check_images(X)
        out = np.empty((X.shape[0], len(self.classes_)))
        for i, img in enumerate(X):
            pred = dec.decode_one(self.params_, self.model_config_, self.sensor_config_, img)
            out[i] = pred.log_probs[0]
        return out

    def predict_proba(self, X):
        return np.exp(self.predict_log_proba(X))

    def predict(self, X):
        logp = self.predict_log_proba(X)
        return self.classes_[np.argmax(logp, axis=1)]


class SequenceTranscriber(_Frame, BaseEstimator):
    """Recurrent attention transcriber for left-to-right digit sequences."""

    def __init__(self, epochs: int = 3, lstm_units: int = 64, glimpse_dim: int = 64,
                 hidden: int = 64, glimpses_per_target: int = 3, max_digits: int = 3,
                 batch_size: int = 64, lr: float = 0.01, lr_decay: float = 0.97,
                 momentum: float = 0.9, location_std: float = 0.03,
                 reinforce_weight: float = 1.0, no_context: bool = False, seed: int = 0):
        self.epochs = epochs
        self.lstm_units = lstm_units
        self.glimpse_dim = glimpse_dim
        self.hidden = hidden
        self.glimpses_per_target = glimpses_per_target
        self.max_digits = max_digits
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.momentum = momentum
        self.location_std = location_std
        self.reinforce_weight = reinforce_weight
        self.no_context = no_context
        self.seed = seed

    def fit(self, X, y):
        X = _check_images(X)
        if len(y) != X.shape[0]:
            raise ValueError("one label sequence per image required")
        seqs = [list(map(int, s)) for s in y]
        if any(len(s) == 0 or len(s) > self.max_digits for s in seqs):
            raise ValueError(f"label sequences must have 1..{self.max_digits} entries")
        classes = sorted({v for s in seqs for v in s})
        self.classes_ = np.asarray(classes)
        index = {c: i for i, c in enumerate(classes)}
        over = [
            "task=sequence", f"epochs={self.epochs}", f"lstm_units={self.lstm_units}",
            f"glimpse_dim={self.glimpse_dim}", f"glimpse_hidden={self.hidden}",
            f"emission_hidden={self.hidden}", f"classifier_hidden={self.hidden}",
            f"baseline_hidden={self.hidden}",
            f"glimpses_per_target={self.glimpses_per_target}",
            f"max_digits={self.max_digits}", f"batch_size={self.batch_size}",
            f"lr={self.lr}", f"lr_decay={self.lr_decay}", f"momentum={self.momentum}",
            f"location_std={self.location_std}",
            f"reinforce_weight={self.reinforce_weight}",
            f"no_context={self.no_context}", f"seed={self.seed}",
        ]
        cfg = self._build(over, len(classes) + 1, X.shape[1:])  # +1 for EOS
        labels = [[index[v] for v in s] for s in seqs]
        self.params_, self.model_config_, self.sensor_config_, self.history_ = \
            self._train(cfg, X, labels)
        return self

    def predict(self, X):
        self._require_fitted()
        X = _check_images(X)
        out = []
        for img in X:
            pred = dec.decode_one(self.params_, self.model_config_, self.sensor_config_, img)
            out.append([int(self.classes_[v]) for v in pred.labels])
        return out

    def score(self, X, y):
        """Whole-sequence accuracy."""
        preds = self.predict(X)
        truth = [list(map(int, s)) for s in y]
        return float(np.mean([p == t for p, t in zip(preds, truth)]))
