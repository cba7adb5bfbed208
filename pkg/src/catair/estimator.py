"""scikit-learn style wrappers around the restorer and the degradation synthesiser."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_pair, to_numpy, to_tensor
from .backbone import DEFAULT_TASKS, ModelConfig
from .degrade import CleanImage, sample_degradation
from .metrics import psnr


class CatAIRRestorer(RegressorMixin, BaseEstimator):
    """Fit on ``(degraded, clean)`` image stacks of shape ``(N, H, W, 3)`` in ``[0, 1]``.

    ``predict`` returns restored images of the same shape; ``score`` is mean PSNR in dB.
    """

    def __init__(self, channels=16, enc_blocks=(2, 4, 4, 4), dec_blocks=(4, 4, 2), window=8, tau=1.5,
                 gamma0=0.5, tasks=DEFAULT_TASKS, steps=500, lr=2e-4, batch_size=4, crop=64,
                 use_ema=True, ema_beta=0.999, gamma=None, random_state=0):
        self.channels = channels
        self.enc_blocks = enc_blocks
        self.dec_blocks = dec_blocks
        self.window = window
        self.tau = tau
        self.gamma0 = gamma0
        self.tasks = tasks
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.crop = crop
        self.use_ema = use_ema
        self.ema_beta = ema_beta
        self.gamma = gamma
        self.random_state = random_state

    def _model_config(self):
        return ModelConfig(channels=self.channels, enc_blocks=tuple(self.enc_blocks),
                           dec_blocks=tuple(self.dec_blocks), window=self.window, tau=self.tau,
                           gamma0=self.gamma0, tasks=tuple(self.tasks))

    def fit(self, X, y):
        from .training import build_model, train

        config = self._model_config()
        X, y = check_pair(X, y)
        config.check_input(*X.shape[1:3])
        seed = 0 if self.random_state is None else int(self.random_state)
        result = train(build_model(config, seed), list(zip(X, y)), self.steps, self.lr, seed, self.use_ema,
                       batch_size=self.batch_size, crop=min(self.crop, *X.shape[1:3]), ema_beta=self.ema_beta)
        self.model_ = result.best
        self.train_log_ = result.log
        self.n_features_in_ = 3
        return self

    @torch.no_grad()
    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, multiple_of=self.model_.config.input_multiple)
        out = self.model_(to_tensor(X), gamma=self.gamma, mode="infer")
        return np.clip(to_numpy(out.restored), 0.0, 1.0)

    def score(self, X, y, sample_weight=None):
        y = check_images(y, name="y")
        pred = self.predict(X)
        scores = [psnr(p, t) for p, t in zip(pred, y)]
        return float(np.average(scores, weights=sample_weight))


class Degrader(TransformerMixin, BaseEstimator):
    """Stateless transformer that applies one synthetic degradation to each clean image."""

    def __init__(self, task="denoise", random_state=0):
        self.task = task
        self.random_state = random_state

    def fit(self, X, y=None):
        check_images(X)
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        X = check_images(X, multiple_of=8)
        seed = 0 if self.random_state is None else int(self.random_state)
        return np.stack([sample_degradation(CleanImage(x, f"x{i}"), self.task, seed, i).degraded for i, x in enumerate(X)])
