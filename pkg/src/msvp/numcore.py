"""Differentiable op surface and gradient checking.

Tensors are plain ``torch.Tensor`` objects and reverse-mode differentiation
is torch autograd. This module pins the exact semantics the rest of the
package relies on (bilinear convention, softmax stabilisation, attention
layout, label checking) and provides a finite-difference checker.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = 1e-6


def conv2d(input, weight, bias=None, stride: int = 1, padding: int = 0):
    if input.dim() != 4 or weight.dim() != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {tuple(input.shape)} and {tuple(weight.shape)}")
    if input.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {input.shape[1]} channels, weight expects {weight.shape[1]}"
        )
    if stride < 1:
        raise ValueError("stride must be >= 1")
    kh, kw = weight.shape[2:]
    if kh > input.shape[2] + 2 * padding or kw > input.shape[3] + 2 * padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {tuple(input.shape[2:])}")
    return F.conv2d(input, weight, bias, stride=stride, padding=padding)


def _axis_taps(n_in: int, n_out: int):
    """Source indices and fractional weights along one axis (half-pixel centres, edge clamp)."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(input, out_h: int, out_w: int):
    """Resize ``[..., h, w]`` to ``[..., out_h, out_w]``.

    Source coordinate for output index i is ``(i + 0.5) * h / out_h - 0.5``
    clamped to ``[0, h - 1]``. The arithmetic per pixel is
    ``(a*(1-fx) + b*fx)*(1-fy) + (c*(1-fx) + d*fx)*fy``.
    """
    h, w = input.shape[-2:]
    if h < 1 or w < 1 or out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize needs positive sizes")
    y0, y1, fy = _axis_taps(h, out_h)
    x0, x1, fx = _axis_taps(w, out_w)
    dev = input.device
    y0, y1 = torch.as_tensor(y0, device=dev), torch.as_tensor(y1, device=dev)
    x0, x1 = torch.as_tensor(x0, device=dev), torch.as_tensor(x1, device=dev)
    fy = torch.as_tensor(fy, dtype=input.dtype, device=dev).unsqueeze(-1)
    fx = torch.as_tensor(fx, dtype=input.dtype, device=dev)

    top = input.index_select(-2, y0)
    bot = input.index_select(-2, y1)
    a, b = top.index_select(-1, x0), top.index_select(-1, x1)
    c, d = bot.index_select(-1, x0), bot.index_select(-1, x1)
    upper = a * (1 - fx) + b * fx
    lower = c * (1 - fx) + d * fx
    return upper * (1 - fy) + lower * fy


def batchnorm2d(input, running_mean, running_var, weight, bias, training: bool,
                momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    if input.dim() != 4 or input.shape[1] != weight.shape[0]:
        raise ValueError(f"batchnorm2d: input {tuple(input.shape)} incompatible with {weight.shape[0]} features")
    return F.batch_norm(input, running_mean, running_var, weight, bias, training, momentum, eps)


def relu(x):
    return torch.relu(x)


def maxpool2d(x, kernel: int = 2):
    if x.dim() != 4:
        raise ValueError("maxpool2d expects [N,C,H,W]")
    return F.max_pool2d(x, kernel)


def adaptive_avg_pool(x):
    """Global average pool to 1x1."""
    if x.dim() != 4:
        raise ValueError("adaptive_avg_pool expects [N,C,H,W]")
    return x.mean(dim=(2, 3), keepdim=True)


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    return F.linear(x, weight, bias)


def layer_norm(x, weight, bias, eps: float = LN_EPS):
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"layer_norm: last dim {x.shape[-1]} != {weight.shape[0]}")
    return F.layer_norm(x, (weight.shape[0],), weight, bias, eps)


def gelu(x):
    # exact erf form
    return F.gelu(x)


def softmax(x, dim: int = -1):
    shifted = x - x.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def multi_head_attention(x, w_qkv, b_qkv, w_out, b_out, heads: int):
    """Self-attention over ``x`` of shape ``[N, T, D]``.

    ``w_qkv`` is ``[3D, D]`` laid out as (q, k, v) blocks, each block split
    into ``heads`` contiguous slices of ``D // heads`` features.
    """
    n, t, d = x.shape
    if d % heads:
        raise ValueError(f"embedding dim {d} not divisible by {heads} heads")
    if w_qkv.shape != (3 * d, d) or w_out.shape != (d, d):
        raise ValueError("multi_head_attention: projection shapes do not match embedding dim")
    hd = d // heads
    qkv = F.linear(x, w_qkv, b_qkv).reshape(n, t, 3, heads, hd).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(-2, -1)) * (1.0 / math.sqrt(hd))
    attn = softmax(scores, dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(n, t, d)
    return F.linear(out, w_out, b_out)


def cross_entropy(logits, labels):
    if logits.dim() != 2:
        raise ValueError("cross_entropy expects [N, K] logits")
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    k = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return F.cross_entropy(logits, labels)


def backward(loss):
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    valid: bool = True
    message: str = ""


def grad_check(op: Callable, input_shapes: Sequence[Sequence[int]], tolerance: float = 1e-4,
               eps: float = 1e-5, seed: int = 0, inputs: Sequence[torch.Tensor] | None = None) -> GradCheckReport:
    """Compare autograd gradients of ``op`` with central finite differences.

    The scalar under test is ``sum(op(*inputs) * R)`` for a fixed random
    projection R, so every output element contributes. Runs in float64.
    """
    gen = torch.Generator().manual_seed(seed)
    if inputs is None:
        inputs = [torch.randn(*s, generator=gen, dtype=torch.float64) for s in input_shapes]
    inputs = [t.detach().clone().to(torch.float64).requires_grad_(True) for t in inputs]

    with torch.no_grad():
        out1 = op(*inputs)
        out2 = op(*inputs)
    if not torch.equal(out1, out2):
        return GradCheckReport(float("nan"), tolerance, False, valid=False,
                               message="op is non-deterministic: two forward passes differ")
    proj = torch.randn(out1.shape, generator=gen, dtype=torch.float64)

    def scalar():
        return (op(*inputs) * proj).sum()

    loss = scalar()
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, inputs, allow_unused=True)
    else:
        grads = [None] * len(inputs)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(inputs, grads):
            g = torch.zeros_like(x) if g is None else g
            flat = x.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = scalar().item()
                flat[i] = orig - eps
                fm = scalar().item()
                flat[i] = orig
                fd = (fp - fm) / (2 * eps)
                ga = gflat[i].item()
                rel = abs(ga - fd) / (abs(ga) + abs(fd) + 1e-10)
                worst = max(worst, rel)
    return GradCheckReport(worst, tolerance, worst < tolerance)
