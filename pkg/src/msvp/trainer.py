"""Training protocol: Adam, cosine schedule, seeded epoch loop, best-val selection."""
from __future__ import annotations

import copy
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import numcore as nc
from .backbones import PromptedModel
from .datasets import AugmentPolicy, augment, augment_streams, normalize
from .errors import MissingGradientError, NumericalAbort
from .prompt import prompt_drift_penalty, prompt_l2_penalty
from .rng import Stream

DEFAULT_EPOCHS = {"mnist": 10, "fashion_mnist": 10, "cifar10": 150}


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 10
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 42
    eta_min: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    decoupled_wd: bool = False
    prompt_lr_scale: float = 1.0
    drift_weight: float = 0.0
    l2_weight: float = 0.0
    threads: int = 1

    @classmethod
    def for_dataset(cls, name: str, **overrides) -> "TrainConfig":
        return cls(epochs=DEFAULT_EPOCHS[name], **overrides)


def cosine_lr(t: int, total: int, lr0: float, eta_min: float = 0.0) -> float:
    if total < 1:
        raise ValueError("total steps must be >= 1")
    if t < 0:
        raise ValueError("step index must be >= 0")
    if t >= total:
        return eta_min
    return eta_min + 0.5 * (lr0 - eta_min) * (1 + math.cos(math.pi * t / total))


class Adam:
    """Adam with bias correction and coupled L2 decay (``g += wd * theta``).

    ``groups`` is a list of ``(params, lr_scale)`` pairs.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, decoupled=False):
        if isinstance(groups, (list, tuple)) and groups and isinstance(groups[0], torch.Tensor):
            groups = [(list(groups), 1.0)]
        self.groups = [(list(ps), float(scale)) for ps, scale in groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self.m = {}
        self.v = {}

    def zero_grad(self):
        for ps, _ in self.groups:
            for p in ps:
                p.grad = None

    @torch.no_grad()
    def step(self, lr: float):
        self.t += 1
        bc1 = 1 - self.b1 ** self.t
        bc2 = 1 - self.b2 ** self.t
        for ps, scale in self.groups:
            step_lr = lr * scale
            for p in ps:
                if not p.requires_grad:
                    continue
                if p.grad is None:
                    raise MissingGradientError(f"trainable parameter of shape {tuple(p.shape)} has no gradient")
                g = p.grad
                if self.weight_decay and not self.decoupled:
                    g = g + p * self.weight_decay
                key = id(p)
                if key not in self.m:
                    self.m[key] = torch.zeros_like(p)
                    self.v[key] = torch.zeros_like(p)
                m, v = self.m[key], self.v[key]
                m.mul_(self.b1).add_(g * (1 - self.b1))
                v.mul_(self.b2).add_((g * g) * (1 - self.b2))
                update = (m / bc1) / ((v / bc2).sqrt() + self.eps)
                if self.weight_decay and self.decoupled:
                    p.sub_(p * (step_lr * self.weight_decay))
                p.sub_(update * step_lr)

    def state_arrays(self, named_params):
        """Moment buffers keyed by parameter name (for checkpointing)."""
        out = {}
        for name, p in named_params:
            if id(p) in self.m:
                out[f"adam.m.{name}"] = self.m[id(p)]
                out[f"adam.v.{name}"] = self.v[id(p)]
        return out


def param_groups(model, prompt_lr_scale: float = 1.0):
    if isinstance(model, PromptedModel):
        return [(list(model.backbone.parameters()), 1.0), (list(model.msvp.parameters()), prompt_lr_scale)]
    return [(list(model.parameters()), 1.0)]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = -1.0
    best_state: dict | None = None

    def metrics(self) -> dict:
        """Everything except wall-clock timings (the deterministic part)."""
        return {
            "epochs": [(e.epoch, e.train_loss, e.val_acc, e.lr) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_val_acc": self.best_val_acc,
        }


def set_determinism(threads: int = 1) -> None:
    torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(True, warn_only=True)


@torch.no_grad()
def predict_logits(model, images: torch.Tensor, batch: int = 256) -> torch.Tensor:
    was = model.training
    model.eval()
    out = [model(images[i:i + batch]) for i in range(0, len(images), batch)]
    model.train(was)
    return torch.cat(out) if out else torch.empty(0, 10)


def accuracy_from_logits(logits: torch.Tensor, labels) -> float:
    pred = np.argmax(logits.detach().cpu().numpy(), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def train(model, train_images, train_labels, val_images, val_labels, config: TrainConfig,
          mean, std, policy: AugmentPolicy | None = None, log=None) -> TrainResult:
    """Run the full protocol.

    ``train_images`` / ``val_images`` are uint8 ``[N,C,H,W]``. Training batches
    are augmented (if ``policy``) then normalised; validation is only
    normalised. The state with the best validation accuracy is kept
    (earliest epoch on ties).
    """
    set_determinism(config.threads)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    val_x = torch.from_numpy(normalize(val_images, mean, std))
    opt = Adam(param_groups(model, config.prompt_lr_scale), config.betas, config.eps,
               config.weight_decay, config.decoupled_wd)
    penalise = isinstance(model, PromptedModel) and (config.drift_weight > 0 or config.l2_weight > 0)
    if isinstance(model, PromptedModel):
        model.keep_fused = config.drift_weight > 0

    result = TrainResult()
    n = len(train_labels)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, config.epochs, config.lr, config.eta_min)
        order = Stream(config.seed, "shuffle", epoch).permutation(n)
        model.train()
        total, seen = 0.0, 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb = train_images[idx].astype(np.float32)
            if policy is not None:
                xb = augment(xb, policy, augment_streams(config.seed, epoch, idx))
            x = torch.from_numpy(normalize(xb, mean, std))
            y = torch.from_numpy(train_labels[idx])
            opt.zero_grad()
            logits = model(x)
            loss = nc.cross_entropy(logits, y)
            if penalise:
                x0, fused = model.last_pair if model.last_pair else (x, x)
                loss = loss + prompt_drift_penalty(x0, fused, config.drift_weight)
                loss = loss + prompt_l2_penalty(model.msvp.prompts(), config.l2_weight)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalAbort(epoch, step, value)
            nc.backward(loss)
            opt.step(lr)
            total += value * len(idx)
            seen += len(idx)
        val_acc = accuracy_from_logits(predict_logits(model, val_x), val_labels)
        rec = EpochRecord(epoch + 1, total / seen, val_acc, lr, time.perf_counter() - t0)
        result.epochs.append(rec)
        if log:
            log(rec)
        if val_acc > result.best_val_acc:
            result.best_val_acc = val_acc
            result.best_epoch = epoch + 1
            result.best_state = copy.deepcopy(model.state_dict())
    if isinstance(model, PromptedModel):
        model.keep_fused = False
        model.last_pair = None
    return result


def epoch_record_dict(rec: EpochRecord) -> dict:
    return asdict(rec)
