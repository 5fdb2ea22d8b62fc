"""Backbone networks and the prompt wrapper."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from . import numcore as nc
from .prompt import MultiScalePrompt
from .rng import Stream

FAMILIES = ("cnn4", "resnet18_small", "vit_tiny")


@dataclass
class ViTSettings:
    embed_dim: int = 192
    depth: int = 12
    heads: int = 3
    patch: int | None = None  # None -> 7 for 28px inputs, 4 for 32px
    mlp_ratio: int = 4


@dataclass
class BackboneSpec:
    family: str
    in_channels: int = 1
    resolution: int = 28
    num_classes: int = 10
    vit: ViTSettings = field(default_factory=ViTSettings)

    def patch_size(self) -> int:
        if self.vit.patch is not None:
            return self.vit.patch
        return 7 if self.resolution == 28 else 4

    def validate(self) -> list:
        problems = []
        if self.family not in FAMILIES:
            problems.append(f"backbone must be one of {FAMILIES}, got {self.family!r}")
        if self.in_channels not in (1, 3):
            problems.append(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.family == "vit_tiny":
            if self.resolution % self.patch_size():
                problems.append(f"vit patch {self.patch_size()} does not divide resolution {self.resolution}")
            if self.vit.embed_dim % self.vit.heads:
                problems.append(f"vit embed_dim {self.vit.embed_dim} not divisible by heads {self.vit.heads}")
        return problems


# -- layers -----------------------------------------------------------------

class BatchNorm2d(nn.BatchNorm2d):
    def __init__(self, features):
        super().__init__(features, eps=nc.BN_EPS, momentum=nc.BN_MOMENTUM)

    def forward(self, x):
        return nc.batchnorm2d(x, self.running_mean, self.running_var, self.weight, self.bias,
                              self.training or not self.track_running_stats)


class ReLU(nn.Module):
    def forward(self, x):
        return nc.relu(x)


class ConvBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.bn = BatchNorm2d(cout)
        self.act = ReLU()

    def forward(self, x):
        x = self.act(self.bn(nc.conv2d(x, self.conv.weight, self.conv.bias, 1, 1)))
        return nc.maxpool2d(x, 2)


class CNN4(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        widths = [spec.in_channels, 32, 64, 128, 256]
        self.blocks = nn.Sequential(*[ConvBlock(a, b) for a, b in zip(widths[:-1], widths[1:])])
        self.head = nn.Linear(256, spec.num_classes)

    def forward(self, x):
        x = nc.adaptive_avg_pool(self.blocks(x)).flatten(1)
        return nc.linear(x, self.head.weight, self.head.bias)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.stride = stride
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), BatchNorm2d(cout))

    def forward(self, x):
        out = nc.relu(self.bn1(nc.conv2d(x, self.conv1.weight, None, self.stride, 1)))
        out = self.bn2(nc.conv2d(out, self.conv2.weight, None, 1, 1))
        if self.shortcut is None:
            skip = x
        else:
            skip = self.shortcut[1](nc.conv2d(x, self.shortcut[0].weight, None, self.stride, 0))
        return nc.relu(out + skip)


class ResNet18Small(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.stem = nn.Conv2d(spec.in_channels, 64, 3, stride=1, padding=1, bias=False)
        self.stem_bn = BatchNorm2d(64)
        stages, cin = [], 64
        for i, width in enumerate((64, 128, 256, 512)):
            stride = 1 if i == 0 else 2
            stages.append(nn.Sequential(BasicBlock(cin, width, stride), BasicBlock(width, width)))
            cin = width
        self.layer1, self.layer2, self.layer3, self.layer4 = stages
        self.head = nn.Linear(512, spec.num_classes)

    def features(self, x):
        x = nc.relu(self.stem_bn(nc.conv2d(x, self.stem.weight, None, 1, 1)))
        return self.layer4(self.layer3(self.layer2(self.layer1(x))))

    def forward(self, x):
        x = nc.adaptive_avg_pool(self.features(x)).flatten(1)
        return nc.linear(x, self.head.weight, self.head.bias)


class LayerNorm(nn.LayerNorm):
    def __init__(self, dim):
        super().__init__(dim, eps=nc.LN_EPS)

    def forward(self, x):
        return nc.layer_norm(x, self.weight, self.bias, self.eps)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        return nc.multi_head_attention(x, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias, self.heads)


class EncoderBlock(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        h = nc.gelu(nc.linear(self.norm2(x), self.fc1.weight, self.fc1.bias))
        return x + nc.linear(h, self.fc2.weight, self.fc2.bias)


class ViTTiny(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        v = spec.vit
        self.patch = spec.patch_size()
        self.n_tokens = (spec.resolution // self.patch) ** 2 + 1
        self.patch_embed = nn.Conv2d(spec.in_channels, v.embed_dim, self.patch, stride=self.patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, v.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.n_tokens, v.embed_dim))
        self.blocks = nn.Sequential(*[EncoderBlock(v.embed_dim, v.heads, v.mlp_ratio) for _ in range(v.depth)])
        self.norm = LayerNorm(v.embed_dim)
        self.head = nn.Linear(v.embed_dim, spec.num_classes)

    def forward(self, x):
        t = nc.conv2d(x, self.patch_embed.weight, self.patch_embed.bias, self.patch, 0)
        t = t.flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(t.shape[0], -1, -1)
        t = torch.cat([cls, t], dim=1) + self.pos_embed
        t = self.norm(self.blocks(t))
        return nc.linear(t[:, 0], self.head.weight, self.head.bias)


# -- init -------------------------------------------------------------------

def init_weights(model: nn.Module, seed: int = 42) -> nn.Module:
    """Deterministic init from purpose-keyed streams.

    Conv/linear weights: uniform(+-sqrt(6/fan_in)); biases zero; norm scale 1,
    shift 0; class token and positional embeddings normal(0, 0.02).
    """
    with torch.no_grad():
        for idx, (name, p) in enumerate(model.named_parameters()):
            stream = Stream(seed, "init", 0, idx)
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("cls_token", "pos_embed"):
                vals = stream.normal(tuple(p.shape), 0.0, 0.02)
            elif leaf == "weight" and p.dim() >= 2:
                fan_in = p[0].numel()
                bound = math.sqrt(2.0) * math.sqrt(3.0 / fan_in)
                vals = stream.uniform(tuple(p.shape), -bound, bound)
            elif leaf == "weight":
                vals = torch.ones(p.shape, dtype=torch.float64)
            else:
                vals = torch.zeros(p.shape, dtype=torch.float64)
            p.copy_(torch.as_tensor(vals, dtype=p.dtype))
    return model


def build_cnn4(spec: BackboneSpec, seed: int = 42) -> CNN4:
    if spec.family != "cnn4":
        raise ValueError("spec.family must be cnn4")
    return init_weights(CNN4(spec), seed)


def build_resnet18_small(spec: BackboneSpec, seed: int = 42) -> ResNet18Small:
    if spec.family != "resnet18_small":
        raise ValueError("spec.family must be resnet18_small")
    return init_weights(ResNet18Small(spec), seed)


def build_vit_tiny(spec: BackboneSpec, seed: int = 42) -> ViTTiny:
    if spec.family != "vit_tiny":
        raise ValueError("spec.family must be vit_tiny")
    problems = spec.validate()
    if problems:
        raise ValueError("; ".join(problems))
    return init_weights(ViTTiny(spec), seed)


BUILDERS = {"cnn4": build_cnn4, "resnet18_small": build_resnet18_small, "vit_tiny": build_vit_tiny}


def build_backbone(spec: BackboneSpec, seed: int = 42) -> nn.Module:
    return BUILDERS[spec.family](spec, seed)


class PromptedModel(nn.Module):
    """``backbone(prompt(x))``; prompt parameters are registered under ``msvp.``."""

    def __init__(self, backbone: nn.Module, prompt: MultiScalePrompt):
        super().__init__()
        self.msvp = prompt
        self.backbone = backbone
        self.last_pair = None
        self.keep_fused = False

    def forward(self, x):
        fused = self.msvp(x)
        if self.keep_fused:
            self.last_pair = (x, fused)
        return self.backbone(fused)


def wrap_with_msvp(model: nn.Module, prompt: MultiScalePrompt) -> PromptedModel:
    return PromptedModel(model, prompt)


def unwrap(model: nn.Module) -> nn.Module:
    return model.backbone if isinstance(model, PromptedModel) else model


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
