"""Accuracy, confusion matrices, parameter overhead and GradCAM."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbones import CNN4, ResNet18Small, ViTTiny, count_params, unwrap
from .errors import UnsupportedArchitectureError
from .numcore import bilinear_resize
from .prompt import format_grid
from .trainer import predict_logits

DEFAULT_CAM_LAYER = {"cnn4": "blocks.3.act", "resnet18_small": "layer4"}


def predictions(model, images, batch: int = 256) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest index."""
    logits = predict_logits(model, torch.as_tensor(images), batch)
    return np.argmax(logits.numpy(), axis=1)


def top1_accuracy(model, images, labels, batch: int = 256) -> float:
    if len(labels) == 0:
        raise ValueError("cannot compute accuracy of an empty set")
    return float(np.mean(predictions(model, images, batch) == np.asarray(labels)))


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [K, K], rows true, cols predicted

    @classmethod
    def from_predictions(cls, labels, preds, k: int = 10) -> "ConfusionMatrix":
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (np.asarray(labels), np.asarray(preds)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def to_csv(self, class_names=None) -> str:
        k = self.counts.shape[0]
        names = class_names or [str(i) for i in range(k)]
        rows = [",".join(names)]
        rows += [",".join(str(int(v)) for v in row) for row in self.counts]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ConfusionMatrix":
        lines = text.strip().splitlines()[1:]
        return cls(np.array([[int(v) for v in ln.split(",")] for ln in lines], dtype=np.int64))


def confusion(model, images, labels, k: int = 10) -> ConfusionMatrix:
    return ConfusionMatrix.from_predictions(labels, predictions(model, images), k)


def overhead_report(baseline_model, msvp_model) -> dict:
    base = count_params(baseline_model)
    full = count_params(msvp_model)
    return overhead_from_counts(base, full)


def overhead_from_counts(params_base: int, params_msvp: int) -> dict:
    if params_base == 0:
        raise ValueError("baseline parameter count is zero")
    delta = (float(params_msvp) - float(params_base)) / float(params_base) * 100.0
    return {"params_base": int(params_base), "params_msvp": int(params_msvp), "delta_pct": delta}


@dataclass
class GradCamMap:
    heat: np.ndarray
    target_layer: str
    target_class: int


def _family(model) -> str | None:
    inner = unwrap(model)
    if isinstance(inner, ViTTiny):
        return "vit_tiny"
    if isinstance(inner, CNN4):
        return "cnn4"
    if isinstance(inner, ResNet18Small):
        return "resnet18_small"
    return None


def gradcam(model, image, target_class: int, layer_name: str | None = None) -> GradCamMap:
    """GradCAM for one image ``[C,H,W]`` (already normalised).

    ``layer_name`` is relative to the backbone; defaults per family.
    """
    family = _family(model)
    if family == "vit_tiny":
        raise UnsupportedArchitectureError("GradCAM is only supported for convolutional backbones")
    if layer_name is None:
        if family is None:
            raise ValueError("layer_name is required for custom models")
        layer_name = DEFAULT_CAM_LAYER[family]
    backbone = unwrap(model)
    modules = dict(backbone.named_modules())
    if layer_name not in modules:
        raise KeyError(f"layer {layer_name!r} not found in model")
    captured = {}

    def hook(_module, _inp, out):
        out.retain_grad()
        captured["act"] = out

    handle = modules[layer_name].register_forward_hook(hook)
    was = model.training
    model.eval()
    try:
        # input on the tape so layers with no trainable parameters upstream still get a gradient
        x = torch.as_tensor(image).unsqueeze(0).detach().requires_grad_(True)
        with torch.enable_grad():
            logits = model(x)
            model.zero_grad(set_to_none=True)
            logits[0, int(target_class)].backward()
    finally:
        handle.remove()
        model.train(was)
    act = captured["act"]
    grad = act.grad if act.grad is not None else torch.zeros_like(act)
    act, grad = act.detach()[0], grad.detach()[0]
    weights = grad.mean(dim=(1, 2))
    cam = torch.relu((weights.view(-1, 1, 1) * act).sum(dim=0))
    h, w = x.shape[-2:]
    cam = bilinear_resize(cam.unsqueeze(0), h, w)[0].double().numpy()
    lo, hi = cam.min(), cam.max()
    heat = (cam - lo) / (hi - lo) if hi > lo else np.zeros_like(cam)
    return GradCamMap(heat, layer_name, int(target_class))


def write_gradcam(cam: GradCamMap, out_dir, stem: str) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pgm = out / f"{stem}.pgm"
    txt = out / f"{stem}.txt"
    px = np.rint(cam.heat * 255).astype(np.uint8)
    h, w = px.shape
    pgm.write_bytes(f"P5\n{w} {h}\n255\n".encode() + px.tobytes())
    txt.write_text(format_grid(cam.heat[None]))
    return [pgm, txt]
