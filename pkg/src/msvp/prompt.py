"""Multi-scale pixel-space prompting.

Three learnable maps (global 1x1, mid, local) are bilinearly upsampled to the
input resolution and fused with the image by addition, 1x1-conv
concatenation, or a sigmoid-gated addition. Everything is zero or
pass-through initialised, so a fresh prompt module is an exact identity.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .numcore import bilinear_resize

SCALE_ORDER = ("g", "m", "l")
FUSIONS = ("addition", "concatenation", "gated")


@dataclass(frozen=True)
class PromptScales:
    s_global: int = 1
    s_mid: int = 4
    s_local: int = 8
    enabled: tuple = SCALE_ORDER

    def __post_init__(self):
        enabled = tuple(s for s in SCALE_ORDER if s in self.enabled)
        if not enabled or len(enabled) != len(set(self.enabled)):
            raise ValueError(f"enabled scales must be a non-empty subset of {SCALE_ORDER}, got {self.enabled!r}")
        object.__setattr__(self, "enabled", enabled)
        if self.s_global != 1:
            raise ValueError("global prompt is always 1x1")
        if not 1 <= self.s_global <= self.s_mid <= self.s_local:
            raise ValueError(f"need 1 <= s_mid <= s_local, got s_mid={self.s_mid}, s_local={self.s_local}")

    def size(self, scale: str) -> int:
        return {"g": self.s_global, "m": self.s_mid, "l": self.s_local}[scale]

    def check_resolution(self, h: int, w: int) -> None:
        for s in self.enabled:
            if self.size(s) > min(h, w):
                raise ValueError(f"prompt scale {s}={self.size(s)} exceeds input resolution {h}x{w}")


def count_msvp_params(channels: int, scales: PromptScales, fusion: str) -> int:
    c = channels
    base = c * sum(scales.size(s) ** 2 for s in scales.enabled)
    if fusion == "addition":
        return base
    if fusion == "gated":
        return base + c
    if fusion == "concatenation":
        k = len(scales.enabled)
        return base + (1 + k) * c * c + c
    raise ValueError(f"unknown fusion {fusion!r}")


def upsampled(prompts, h: int, w: int) -> list:
    return [bilinear_resize(p, h, w) for p in prompts]


def mean_prompt(prompts, h: int, w: int):
    ups = upsampled(prompts, h, w)
    total = ups[0]
    for u in ups[1:]:
        total = total + u
    return total / len(ups)


def fuse_addition(x, prompts):
    """``x + mean_k(upsample(P_k))`` broadcast over the batch."""
    p = mean_prompt(prompts, x.shape[-2], x.shape[-1])
    if p.shape[0] != x.shape[1]:
        raise ValueError(f"prompt channels {p.shape[0]} != input channels {x.shape[1]}")
    return x + p


def fuse_gated(x, prompts, gate):
    if gate.shape != (x.shape[1],):
        raise ValueError(f"gate must have shape ({x.shape[1]},), got {tuple(gate.shape)}")
    p = mean_prompt(prompts, x.shape[-2], x.shape[-1])
    return x + torch.sigmoid(gate).view(-1, 1, 1) * p


def fuse_concatenation(x, prompts, weight, bias):
    """1x1 conv over ``concat(x, upsample(P_g), upsample(P_m), upsample(P_l))``.

    ``weight`` is ``[C, (1+k)*C]``.
    """
    n, c, h, w = x.shape
    ups = upsampled(prompts, h, w)
    stack = torch.cat(ups, dim=0).unsqueeze(0).expand(n, -1, -1, -1)
    u = torch.cat([x, stack], dim=1)
    if weight.shape != (c, u.shape[1]):
        raise ValueError(f"projection must map {u.shape[1]} channels to {c}, got weight {tuple(weight.shape)}")
    out = torch.einsum("oi,nihw->nohw", weight, u)
    return out + bias.view(1, -1, 1, 1)


def prompt_drift_penalty(x, x_fused, weight: float):
    if weight < 0:
        raise ValueError("penalty weight must be >= 0")
    if weight == 0:
        return x.new_zeros(())
    return weight * ((x_fused - x) ** 2).mean()


def prompt_l2_penalty(prompts, weight: float):
    if weight < 0:
        raise ValueError("penalty weight must be >= 0")
    total = prompts[0].new_zeros(())
    if weight == 0:
        return total
    for p in prompts:
        total = total + (p * p).sum()
    return weight * total


class MultiScalePrompt(nn.Module):
    """Learnable prompt maps plus the fusion parameters."""

    def __init__(self, channels: int, scales: PromptScales = PromptScales(), fusion: str = "addition",
                 resolution: int | None = None):
        super().__init__()
        if fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {fusion!r}")
        if resolution is not None:
            scales.check_resolution(resolution, resolution)
        self.channels = channels
        self.scales = scales
        self.fusion = fusion
        for s in scales.enabled:
            n = scales.size(s)
            self.register_parameter(f"prompt_{s}", nn.Parameter(torch.zeros(channels, n, n)))
        if fusion == "concatenation":
            k = len(scales.enabled)
            # x passes through; prompt blocks start at I/k so the zero prompts still
            # receive gradient (an all-zero block would leave both stuck at a saddle)
            w = torch.zeros(channels, (1 + k) * channels)
            w[:, :channels] = torch.eye(channels)
            for i in range(k):
                w[:, (1 + i) * channels:(2 + i) * channels] = torch.eye(channels) / k
            self.proj_weight = nn.Parameter(w)
            self.proj_bias = nn.Parameter(torch.zeros(channels))
        elif fusion == "gated":
            self.gate = nn.Parameter(torch.zeros(channels))

    def prompts(self) -> list:
        return [getattr(self, f"prompt_{s}") for s in self.scales.enabled]

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"prompt module built for {self.channels} channels, input has {x.shape[1]}")
        if self.fusion == "addition":
            return fuse_addition(x, self.prompts())
        if self.fusion == "gated":
            return fuse_gated(x, self.prompts(), self.gate)
        return fuse_concatenation(x, self.prompts(), self.proj_weight, self.proj_bias)

    def param_count(self) -> int:
        return count_msvp_params(self.channels, self.scales, self.fusion)


def init_prompts(channels: int, scales: PromptScales = PromptScales(), fusion: str = "addition",
                 resolution: int | None = None) -> MultiScalePrompt:
    return MultiScalePrompt(channels, scales, fusion, resolution)


# -- export -----------------------------------------------------------------

def to_pgm_bytes(grid: np.ndarray) -> bytes:
    """Min-max scale a 2-d map to 8 bits; a flat map becomes mid-gray 128."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    if hi > lo:
        px = np.rint((g - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        px = np.full(g.shape, 128, dtype=np.uint8)
    h, w = g.shape
    return f"P5\n{w} {h}\n255\n".encode() + px.tobytes()


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)


def format_grid(maps: np.ndarray) -> str:
    """``[C,h,w]`` as text: a ``# channel c`` line, then one row per line (9 significant digits)."""
    lines = []
    for c, m in enumerate(np.asarray(maps)):
        lines.append(f"# channel {c}")
        for row in m:
            lines.append(" ".join(f"{float(v):.9g}" for v in row))
    return "\n".join(lines) + "\n"


def parse_grid(text: str) -> np.ndarray:
    chans, cur = [], None
    for line in text.splitlines():
        if line.startswith("#"):
            cur = []
            chans.append(cur)
        elif line.strip():
            cur.append([float(v) for v in line.split()])
    return np.array(chans, dtype=np.float64)


def export_prompts(module: MultiScalePrompt, out_dir, resolution: int | None = None) -> list:
    """Write each enabled map as text plus per-channel PGMs, and the combined upsampled map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with torch.no_grad():
        for s, p in zip(module.scales.enabled, module.prompts()):
            arr = p.detach().cpu().numpy()
            written.append(out / f"prompt_{s}.txt")
            written[-1].write_text(format_grid(arr))
            for c in range(arr.shape[0]):
                written.append(out / f"prompt_{s}_c{c}.pgm")
                written[-1].write_bytes(to_pgm_bytes(arr[c]))
        if resolution:
            comb = mean_prompt(module.prompts(), resolution, resolution).cpu().numpy()
            written.append(out / "prompt_combined.txt")
            written[-1].write_text(format_grid(comb))
            for c in range(comb.shape[0]):
                written.append(out / f"prompt_combined_c{c}.pgm")
                written[-1].write_bytes(to_pgm_bytes(comb[c]))
    return written
