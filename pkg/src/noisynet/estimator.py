"""Scikit-learn style wrapper around the noisy-network trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .harness import fit_network, preset_specs
from .network import build_network, forward, predict
from .tensor import RngStream
from .validation import check_batch, check_labels


class NoisyNetClassifier(BaseEstimator, ClassifierMixin):
    """Feed-forward classifier with trainable per-neuron Gaussian noise.

    The noise level of every neuron is optimized jointly with the synaptic
    weights: its pathwise gradient comes out of the same backward pass that
    produces the weight gradients.  Presets mirror the ablation variants
    (plain network, fixed unit noise, trained noise) for both MLP and small
    CNN stacks.

    Parameters follow scikit-learn conventions; ``fit`` accepts flat
    ``(n, features)`` arrays for MLP presets and ``(n, C, H, W)`` image
    arrays for CNN presets.
    """

    def __init__(self, preset: str = "mlp_n", activation: str = "sigmoid",
                 sigma_init: float = 1.0, epochs: int = 10,
                 batch_size: int = 128, lr: float = 1e-3,
                 weight_decay: float = 1e-4, sigma_lr: float = 1e-3,
                 eval_noise: str = "disabled", random_state: int = 0):
        self.preset = preset
        self.activation = activation
        self.sigma_init = sigma_init
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.sigma_lr = sigma_lr
        self.eval_noise = eval_noise
        self.random_state = random_state

    def fit(self, X, y):
        X = check_batch(X, "X")
        y = check_labels(y, name="y")
        if len(X) != len(y):
            raise ValueError(f"{len(X)} samples but {len(y)} labels")
        self.classes_ = np.unique(y)
        encoded = np.searchsorted(self.classes_, y)
        n_classes = len(self.classes_)

        if self.preset.startswith("mlp"):
            images = X.reshape(len(X), 1, 1, -1) if X.ndim == 2 else X
            input_shape = (int(np.prod(X.shape[1:])),)
        else:
            if X.ndim != 4:
                raise ValueError(f"{self.preset} needs (n, C, H, W) input")
            images = X
            input_shape = X.shape[1:]
        self.n_features_in_ = int(np.prod(X.shape[1:]))

        specs = preset_specs(self.preset, input_shape, n_classes,
                             activation=self.activation,
                             sigma_init=self.sigma_init)
        self.network_ = build_network(specs, input_shape,
                                      seed=self.random_state)
        self.loss_curve_ = fit_network(
            self.network_, images, encoded, epochs=self.epochs,
            batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, sigma_lr=self.sigma_lr,
            seed=self.random_state)
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError(
                "This NoisyNetClassifier instance is not fitted yet."
            )

    def _eval_args(self):
        mode = self.eval_noise
        if mode == "auto":
            mode = "active" if self.network_.has_noise() else "disabled"
        rng = RngStream(self.random_state, 0xE57) if mode == "active" else None
        return mode, rng

    def decision_function(self, X):
        self._check_fitted()
        X = check_batch(X, "X")
        mode, rng = self._eval_args()
        logits, _ = forward(self.network_, X, noise_mode=mode, rng=rng)
        return logits

    def predict_proba(self, X):
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        self._check_fitted()
        X = check_batch(X, "X")
        mode, rng = self._eval_args()
        return self.classes_[predict(self.network_, X, noise_mode=mode, rng=rng)]

    def noise_levels(self) -> list:
        """Per-layer noise-level vectors (None for noise-free layers)."""
        self._check_fitted()
        return [None if l.sigma is None else l.sigma.copy()
                for l in self.network_.layers]
