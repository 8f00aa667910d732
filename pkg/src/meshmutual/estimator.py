"""Scikit-learn style front door for the deform-then-refine network.

MeshRefiner packages configuration, training, and prediction behind the
familiar fit/predict/score triple so the model slots into sklearn tooling
(grid search over the loss weights, cloning, pipelines). X is a sequence of
Sample objects; there is no separate y, the supervision lives inside each
sample.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .losses import LossConfig
from .pipeline import (
    NetworkConfig,
    TrainHistory,
    build_network,
    evaluate_losses,
    forward,
    load_checkpoint,
    save_checkpoint,
    training_step,
)
from .validation import check_sample_sequence


class MeshRefiner(BaseEstimator):
    """Deform-then-refine mesh reconstruction as an sklearn estimator.

    Parameters mirror NetworkConfig; the collaborative loss weights are
    exposed flat so they can be searched directly. fit trains in place for
    `steps` optimizer updates cycling through X; predict returns one
    (body mesh, camera, refined surface) triple per sample.
    """

    def __init__(self, subdivisions=1, encoder_dim=32, vertex_width=64, edge_width=32,
                 image_size=64, pattern_size=3, n_joints=6, learning_rate=0.05,
                 lr_final=0.002, warmup_learning_rate=None, momentum=0.9, grad_clip=1.0,
                 steps=1000, warmup_steps=200, lambda_trace=1.0, lambda_cloth=1.0,
                 clamp_trace=True, seed=0):
        self.subdivisions = subdivisions
        self.encoder_dim = encoder_dim
        self.vertex_width = vertex_width
        self.edge_width = edge_width
        self.image_size = image_size
        self.pattern_size = pattern_size
        self.n_joints = n_joints
        self.learning_rate = learning_rate
        self.lr_final = lr_final
        self.warmup_learning_rate = warmup_learning_rate
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.steps = steps
        self.warmup_steps = warmup_steps
        self.lambda_trace = lambda_trace
        self.lambda_cloth = lambda_cloth
        self.clamp_trace = clamp_trace
        self.seed = seed

    def _network_config(self) -> NetworkConfig:
        loss = LossConfig(
            lambda_trace=self.lambda_trace,
            lambda_cloth=self.lambda_cloth,
            clamp_trace=self.clamp_trace,
        )
        return NetworkConfig(
            subdivisions=self.subdivisions,
            encoder_dim=self.encoder_dim,
            vertex_width=self.vertex_width,
            edge_width=self.edge_width,
            image_size=self.image_size,
            pattern_size=self.pattern_size,
            n_joints=self.n_joints,
            learning_rate=self.learning_rate,
            lr_final=self.lr_final,
            warmup_learning_rate=self.warmup_learning_rate,
            momentum=self.momentum,
            grad_clip=self.grad_clip,
            steps=self.steps,
            warmup_steps=self.warmup_steps,
            seed=self.seed,
            loss=loss,
        )

    def fit(self, X, y=None):
        """Train on a sequence of Samples; y is ignored."""
        cfg = self._network_config()
        samples = check_sample_sequence(X, image_size=cfg.image_size)
        net = build_network(cfg)
        history = TrainHistory()
        history.add(0, evaluate_losses(net, samples[0]))
        for step in range(1, cfg.steps + 1):
            net, report = training_step(net, samples[(step - 1) % len(samples)])
            history.add(step, report)
        self.network_ = net
        self.history_ = history
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError(
                "This MeshRefiner instance is not fitted yet; call fit first."
            )

    def predict(self, X):
        """Per sample: the (body mesh, camera, refined surface) triple."""
        self._check_fitted()
        samples = check_sample_sequence(X, image_size=self.network_.cfg.image_size)
        return [forward(self.network_, s) for s in samples]

    def score(self, X, y=None) -> float:
        """Negative mean total loss over X (higher is better)."""
        self._check_fitted()
        samples = check_sample_sequence(X, image_size=self.network_.cfg.image_size)
        totals = [evaluate_losses(self.network_, s).total for s in samples]
        return -float(np.mean(totals))

    def save(self) -> bytes:
        """Checkpoint bytes for the fitted network."""
        self._check_fitted()
        return save_checkpoint(self.network_)

    @classmethod
    def from_checkpoint(cls, data: bytes) -> "MeshRefiner":
        """Rebuild a fitted estimator from checkpoint bytes."""
        net = load_checkpoint(data)
        cfg = net.cfg
        est = cls(
            subdivisions=cfg.subdivisions,
            encoder_dim=cfg.encoder_dim,
            vertex_width=cfg.vertex_width,
            edge_width=cfg.edge_width,
            image_size=cfg.image_size,
            pattern_size=cfg.pattern_size,
            n_joints=cfg.n_joints,
            learning_rate=cfg.learning_rate,
            lr_final=cfg.lr_final,
            warmup_learning_rate=cfg.warmup_learning_rate,
            momentum=cfg.momentum,
            grad_clip=cfg.grad_clip,
            steps=cfg.steps,
            warmup_steps=cfg.warmup_steps,
            lambda_trace=cfg.loss.lambda_trace,
            lambda_cloth=cfg.loss.lambda_cloth,
            clamp_trace=cfg.loss.clamp_trace,
            seed=cfg.seed,
        )
        est.network_ = net
        est.history_ = TrainHistory()
        return est
