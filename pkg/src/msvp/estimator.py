"""scikit-learn style classifier around the training protocol."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .backbones import BackboneSpec, ViTSettings, build_backbone, count_params, wrap_with_msvp
from .datasets import AugmentPolicy, compute_stats, normalize, split
from .prompt import PromptScales, count_msvp_params, init_prompts
from .trainer import TrainConfig, predict_logits, train


def check_images(X, channels=None) -> np.ndarray:
    """Validate an image batch and return it as uint8 ``[N,C,H,W]``.

    Accepts ``[N,H,W]`` (single channel) or ``[N,C,H,W]`` arrays of pixel
    values in [0, 255].
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape [N,H,W] or [N,C,H,W], got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image batch")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"estimator was fitted on {channels}-channel images, got {X.shape[1]}")
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 255:
        raise ValueError("pixel values must be finite and lie in [0, 255]")
    return np.rint(X).astype(np.uint8) if X.dtype != np.uint8 else X


class MSVPClassifier(ClassifierMixin, BaseEstimator):
    """Backbone (optionally wrapped with multi-scale prompts) trained with Adam + cosine schedule.

    ``fit`` holds out ``validation_fraction`` of the samples for best-epoch
    selection. Labels must be integers in [0, 10).
    """

    def __init__(self, backbone="cnn4", prompt=True, fusion="addition", scales=("g", "m", "l"), s_mid=4,
                 s_local=8, epochs=10, batch_size=128, lr=1e-3, weight_decay=1e-4, seed=42,
                 validation_fraction=0.1, augment=None, threads=1):
        self.backbone = backbone
        self.prompt = prompt
        self.fusion = fusion
        self.scales = scales
        self.s_mid = s_mid
        self.s_local = s_local
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed
        self.validation_fraction = validation_fraction
        self.augment = augment
        self.threads = threads

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y, dtype=np.int64)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        if y.min() < 0 or y.max() > 9:
            raise ValueError("labels must lie in [0, 10)")
        c, res = X.shape[1], X.shape[2]
        sp = split(len(X), 1.0 - self.validation_fraction, self.seed)
        self.mean_, self.std_ = compute_stats(X[np.sort(sp.train_idx)])
        self.std_ = [s if s > 0 else 1.0 for s in self.std_]

        spec = BackboneSpec(self.backbone, c, res, 10, ViTSettings())
        model = build_backbone(spec, self.seed)
        self.n_prompt_params_ = 0
        if self.prompt:
            scales = PromptScales(1, self.s_mid, self.s_local, tuple(self.scales))
            model = wrap_with_msvp(model, init_prompts(c, scales, self.fusion, res))
            self.n_prompt_params_ = count_msvp_params(c, scales, self.fusion)
        cfg = TrainConfig(batch_size=self.batch_size, epochs=self.epochs, lr=self.lr,
                          weight_decay=self.weight_decay, seed=self.seed, threads=self.threads)
        policy = self.augment
        if policy is True:
            policy = AugmentPolicy.for_dataset("cifar10" if c == 3 else "mnist")
        result = train(model, X[sp.train_idx], y[sp.train_idx], X[sp.val_idx], y[sp.val_idx], cfg,
                       self.mean_, self.std_, policy or None)
        model.load_state_dict(result.best_state)
        model.eval()
        self.model_ = model
        self.history_ = result.epochs
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.arange(10)
        self.n_channels_ = c
        self.n_params_ = count_params(model)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.n_channels_)
        logits = predict_logits(self.model_, torch.from_numpy(normalize(X, self.mean_, self.std_)))
        return logits.numpy()

    def predict_proba(self, X):
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)
