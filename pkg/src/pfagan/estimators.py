"""scikit-learn style wrappers around the age estimator and the aging generator.

Images may be given as uint8 arrays shaped ``(n, H, W, 3)`` or as float
arrays/tensors shaped ``(n, 3, H, W)`` already scaled to [-1, 1].
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import AGING, AgeGroupPartition, orient
from .evaluation import make_ager
from .training import AgePretrainConfig, PFATrainer, TrainConfig, predict_ages, pretrain_age_estimator


def check_images(X, size: int | None = None) -> torch.Tensor:
    """Validate a batch of RGB images and return a float32 tensor in [-1, 1], NCHW."""
    if isinstance(X, torch.Tensor):
        x = X.detach().cpu()
    else:
        arr = np.asarray(X)
        if arr.dtype == np.uint8:
            if arr.ndim != 4 or arr.shape[-1] != 3:
                raise ValueError(f"uint8 images must be shaped (n, H, W, 3), got {arr.shape}")
            arr = arr.transpose(0, 3, 1, 2).astype(np.float32) / 127.5 - 1.0
        x = torch.as_tensor(np.asarray(arr, dtype=np.float32))
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected images shaped (n, 3, H, W), got {tuple(x.shape)}")
    if len(x) == 0:
        raise ValueError("empty image batch")
    x = x.float()
    if not torch.isfinite(x).all():
        raise ValueError("images contain NaN or infinite values")
    if x.min() < -1 - 1e-6 or x.max() > 1 + 1e-6:
        raise ValueError("float images must lie in [-1, 1]")
    if size is not None and tuple(x.shape[-2:]) != (size, size):
        raise ValueError(f"expected {size}x{size} images, got {tuple(x.shape[-2:])}")
    return x


def check_ages(y, n: int) -> np.ndarray:
    ages = np.asarray(y, dtype=np.float64).ravel()
    if len(ages) != n:
        raise ValueError(f"got {len(ages)} ages for {n} images")
    if not np.all(np.isfinite(ages)) or np.any(ages < 0):
        raise ValueError("ages must be finite and non-negative")
    return ages


class DEXAgeRegressor(RegressorMixin, BaseEstimator):
    """Age regressor: the DEX network trained with the age loss; ``predict`` gives expected ages."""

    def __init__(self, bounds=(30, 40, 50), epochs: int = 50, batch_size: int = 128, lr: float = 1e-4,
                 base_channels: int = 64, random_state: int = 0):
        self.bounds = bounds
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.base_channels = base_channels
        self.random_state = random_state

    def fit(self, X, y):
        x = check_images(X)
        ages = check_ages(y, len(x))
        self.partition_ = AgeGroupPartition(tuple(self.bounds))
        groups = [self.partition_.group_of(a) for a in ages]
        cfg = AgePretrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                                seed=self.random_state, base_channels=self.base_channels)
        self.network_, self.report_ = pretrain_age_estimator(x, np.rint(ages).astype(int), groups, cfg,
                                                             self.partition_.n_groups)
        self.image_size_ = x.shape[-1]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        return predict_ages(self.network_, check_images(X, self.image_size_))

    @torch.no_grad()
    def predict_group_proba(self, X) -> np.ndarray:
        """Softmax over the age groups from the group head."""
        check_is_fitted(self, "network_")
        _, _, logits = self.network_(check_images(X, self.image_size_))
        return torch.softmax(logits.double(), dim=1).numpy()

    def predict_group(self, X) -> np.ndarray:
        return np.array([self.partition_.group_of(a) for a in self.predict(X)])


class PFAGANTransformer(TransformerMixin, BaseEstimator):
    """Progressive aging model; ``transform`` ages faces from their group to ``target``.

    ``fit(X, y)`` takes face images and their ages in years. Unless a fitted
    ``age_estimator`` is supplied, a :class:`DEXAgeRegressor` is trained first.
    """

    def __init__(self, bounds=(30, 40, 50), max_iterations: int = 2000, batch_size: int = 12,
                 mode: str = "pfa_end_to_end", direction: str = AGING, base_channels: int = 32,
                 n_residual: int = 4, age_estimator: DEXAgeRegressor | None = None, age_epochs: int = 50,
                 random_state: int = 0):
        self.bounds = bounds
        self.max_iterations = max_iterations
        self.batch_size = batch_size
        self.mode = mode
        self.direction = direction
        self.base_channels = base_channels
        self.n_residual = n_residual
        self.age_estimator = age_estimator
        self.age_epochs = age_epochs
        self.random_state = random_state

    def fit(self, X, y):
        x = check_images(X)
        ages = check_ages(y, len(x))
        partition = AgeGroupPartition(tuple(self.bounds))
        if self.age_estimator is None:
            estimator = DEXAgeRegressor(self.bounds, epochs=self.age_epochs,
                                        random_state=self.random_state).fit(x, ages)
        else:
            check_is_fitted(self.age_estimator, "network_")
            estimator = self.age_estimator
        cfg = TrainConfig(max_iterations=self.max_iterations, batch_size=self.batch_size, mode=self.mode,
                          direction=self.direction, image_size=x.shape[-1], seed=self.random_state,
                          base_channels=self.base_channels, n_residual=self.n_residual)
        int_ages = np.rint(ages).astype(int)
        trainer = PFATrainer(cfg, partition, estimator.network_, x,
                             [partition.group_of(a) for a in int_ages], int_ages)
        self.history_ = [trainer.train_step() for _ in range(cfg.max_iterations)]
        self.generator_ = trainer.generator.eval()
        self.age_estimator_ = estimator
        self.partition_ = partition
        self.image_size_ = x.shape[-1]
        return self

    def transform(self, X, source=None, target: int | None = None) -> torch.Tensor:
        """Age ``X`` to natural group ``target`` (default: the last group in the chain direction).

        ``source`` is one group for the whole batch or one per face; when
        omitted it is estimated with the fitted age estimator.
        """
        check_is_fitted(self, "generator_")
        x = check_images(X, self.image_size_)
        n = self.partition_.n_groups
        if target is None:
            target = orient(n, n, self.direction)
        if source is None:
            source = self.age_estimator_.predict_group(x)
        sources = np.broadcast_to(np.asarray(source), (len(x),))
        ager = make_ager(self.generator_, self.direction)
        t = orient(target, n, self.direction)
        out = torch.empty_like(x)
        for s in np.unique(sources):
            rows = torch.as_tensor(np.flatnonzero(sources == s))
            position = orient(int(s), n, self.direction)
            if position > t:
                raise ValueError(f"cannot move faces from group {int(s)} to group {target} ({self.direction})")
            out[rows] = ager(x[rows], position, t)
        return out
