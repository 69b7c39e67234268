"""scikit-learn style wrapper around training and perturbed scoring."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from . import detector
from .model import ModelConfig
from .trainer import TrainConfig, train


def check_cubes(X, flows, config: ModelConfig):
    """Validate a batch of context cubes and their flow targets.

    Returns float32 arrays of shapes (n, 2T+1, C, H, W) and (n, 2T+1, 2, H, W).
    """
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    expected = (config.positions, config.C, config.H, config.W)
    if X.ndim != 5 or X.shape[1:] != expected:
        raise ValueError(f"X must have shape (n, {', '.join(map(str, expected))}), got {X.shape}")
    if flows is None:
        raise ValueError("flow targets are required")
    flows = check_array(flows, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if flows.shape != (X.shape[0], config.positions, 2, config.H, config.W):
        raise ValueError(f"flows shape {flows.shape} does not match cubes {X.shape}")
    return X, flows


class StateDetector(BaseEstimator):
    """Two-branch STATE anomaly detector over spatio-temporal context cubes.

    ``fit`` trains the raw and motion branches on normal cubes.
    ``score_samples`` returns the standardized anomaly score of every cube
    after the input perturbation (higher means more anomalous), and
    ``predict`` thresholds it at the ``quantile`` of the training scores
    (1 anomalous, 0 normal).
    """

    def __init__(self, T=3, patch_size=32, d=128, n_heads=4, n_stacks=3, groups=8,
                 epochs=20, batch_size=32, lr=1e-3, eta=0.002, w_r=0.3, w_m=1.0,
                 quantile=0.99, random_state=0):
        self.T = T
        self.patch_size = patch_size
        self.d = d
        self.n_heads = n_heads
        self.n_stacks = n_stacks
        self.groups = groups
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.eta = eta
        self.w_r = w_r
        self.w_m = w_m
        self.quantile = quantile
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        d = self.d
        return ModelConfig(H=self.patch_size, W=self.patch_size, T=self.T, d=d, n_heads=self.n_heads,
                           n_stacks=self.n_stacks, groups=self.groups, encoder_widths=(d // 4, d // 2, d))

    def fit(self, X, flows=None):
        config = self._model_config()
        if not 0.0 < self.quantile <= 1.0:
            raise ValueError(f"quantile must lie in (0, 1], got {self.quantile}")
        X, flows = check_cubes(X, flows, config)
        tcfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr)
        self.checkpoint_ = train(X, flows, config, tcfg, seed=self.random_state)
        self.loss_curve_ = self.checkpoint_.metadata["loss_curve"]
        self.threshold_ = float(np.quantile(self.score_samples(X, flows), self.quantile))
        return self

    def score_samples(self, X, flows=None):
        check_is_fitted(self, "checkpoint_")
        ckpt = self.checkpoint_
        X, flows = check_cubes(X, flows, ckpt.config)
        scores = np.empty(len(X))
        for start in range(0, len(X), 16):
            sl = slice(start, start + 16)
            if self.eta > 0:
                g, _, _ = detector.input_gradient(ckpt.raw, ckpt.motion, X[sl], flows[sl])
                y_hat = X[sl] - np.float32(self.eta) * ad.sign(g).astype(np.float32)
            else:
                y_hat = X[sl]
            s_r, s_m = detector.branch_errors(ckpt.raw, ckpt.motion, y_hat, flows[sl])
            scores[sl] = detector.standardized_score(s_r, s_m, ckpt.stats, self.w_r, self.w_m)
        return scores

    def decision_function(self, X, flows=None):
        """Score minus the fitted threshold; positive means anomalous."""
        return self.score_samples(X, flows) - self.threshold_

    def predict(self, X, flows=None):
        return (self.decision_function(X, flows) > 0).astype(int)
