"""EDSR-style backbone whose convolutions can run at a fraction of their width.

The full-width network is the teacher and owns every weight. A student at width
``r`` reuses the leading ``ceil(r * C)`` channels of each layer, so the student
parameters are always a prefix-slice of the teacher parameters.
"""

from __future__ import annotations

import copy
import math
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "csd-checkpoint/1"
RGB_MEAN = (0.4488, 0.4371, 0.4040)


class ConfigError(ValueError):
    pass


def check_width(r: float) -> float:
    r = float(r)
    if not (0.0 < r <= 1.0):
        raise ConfigError(f"width multiplier must lie in (0, 1], got {r}")
    return r


def scaled_channels(channels: int, r: float) -> int:
    """Number of channels kept at width ``r``: ``ceil(r * channels)``, at least 1."""
    # 1e-9 guards against products like 0.1 * 30 = 3.0000000000000004.
    return max(1, math.ceil(r * channels - 1e-9))


class SliceableConv2d(nn.Module):
    """3x3 (or any odd k) convolution that can be evaluated on a channel prefix.

    ``out_mult`` groups output channels for a following pixel shuffle: the layer
    has ``base_out * out_mult`` outputs and keeps ``c(r) * out_mult`` of them.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, in_fixed=False,
                 out_fixed=False, out_mult=1, bias=True):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ConfigError("kernel size must be odd")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.out_mult = out_mult
        self.kernel_size = kernel_size
        self.in_fixed = in_fixed
        self.out_fixed = out_fixed
        self.weight = nn.Parameter(
            torch.empty(out_channels * out_mult, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.empty(out_channels * out_mult)) if bias else None
        self.reset_parameters()

    def reset_parameters(self):
        # uniform fan-in scaling, same as nn.Conv2d
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        if self.bias is not None:
            bound = 1.0 / math.sqrt(self.in_channels * self.kernel_size ** 2)
            nn.init.uniform_(self.bias, -bound, bound)

    def active_channels(self, r):
        c_in = self.in_channels if self.in_fixed else scaled_channels(self.in_channels, r)
        c_out = self.out_channels if self.out_fixed else scaled_channels(self.out_channels, r)
        return c_in, c_out * self.out_mult

    def forward(self, x, r=1.0):
        c_in, c_out = self.active_channels(r)
        if x.shape[1] != c_in:
            raise ValueError(f"expected {c_in} input channels at width {r}, got {x.shape[1]}")
        w = self.weight[:c_out, :c_in]
        b = self.bias[:c_out] if self.bias is not None else None
        return F.conv2d(x, w, b, padding=self.kernel_size // 2)

    def extra_repr(self):
        return (f"{self.in_channels}, {self.out_channels * self.out_mult}, "
                f"k={self.kernel_size}, in_fixed={self.in_fixed}, out_fixed={self.out_fixed}")


class ResBlock(nn.Module):
    def __init__(self, channels, res_scale=1.0):
        super().__init__()
        self.conv1 = SliceableConv2d(channels, channels)
        self.conv2 = SliceableConv2d(channels, channels)
        self.res_scale = res_scale

    def forward(self, x, r=1.0):
        res = self.conv2(F.relu(self.conv1(x, r)), r)
        return x + res * self.res_scale


class Upsampler(nn.Module):
    """x4 as two x2 stages, x2 and x3 as a single stage."""

    def __init__(self, scale, channels):
        super().__init__()
        if scale == 4:
            factors = [2, 2]
        elif scale in (2, 3):
            factors = [scale]
        else:
            raise ConfigError(f"unsupported scale {scale}; expected 2, 3 or 4")
        self.factors = factors
        self.convs = nn.ModuleList(
            SliceableConv2d(channels, channels, out_mult=f * f) for f in factors)

    def forward(self, x, r=1.0):
        for f, conv in zip(self.factors, self.convs):
            x = F.pixel_shuffle(conv(x, r), f)
        return x


class SRBackbone(nn.Module):
    """EDSR layout: mean shift, head conv, residual body, pixel-shuffle tail.

    ``forward(x, r)`` takes an ``N x 3 x H x W`` batch in ``[0, 1]`` and returns
    ``N x 3 x sH x sW``.
    """

    def __init__(self, base_width, n_blocks, scale, res_scale=None):
        super().__init__()
        if scale not in (2, 3, 4):
            raise ConfigError(f"unsupported scale {scale}; expected 2, 3 or 4")
        if base_width < 1 or n_blocks < 1:
            raise ConfigError("base_width and n_blocks must be positive")
        if res_scale is None:
            res_scale = default_res_scale(base_width)
        self.base_width = base_width
        self.n_blocks = n_blocks
        self.scale = scale
        self.res_scale = float(res_scale)

        self.register_buffer("rgb_mean", torch.tensor(RGB_MEAN).view(1, 3, 1, 1))
        self.head = SliceableConv2d(3, base_width, in_fixed=True)
        self.body = nn.ModuleList(ResBlock(base_width, self.res_scale) for _ in range(n_blocks))
        self.body_tail = SliceableConv2d(base_width, base_width)
        self.upsampler = Upsampler(scale, base_width)
        self.tail = SliceableConv2d(base_width, 3, out_fixed=True)

    def forward(self, x, r=1.0):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected an N x 3 x H x W batch, got shape {tuple(x.shape)}")
        r = check_width(r)
        x = x - self.rgb_mean
        feat = self.head(x, r)
        res = feat
        for block in self.body:
            res = block(res, r)
        res = self.body_tail(res, r) + feat
        out = self.tail(self.upsampler(res, r), r)
        return out + self.rgb_mean

    def config(self):
        return {"base_width": self.base_width, "n_blocks": self.n_blocks,
                "scale": self.scale, "res_scale": self.res_scale}


def default_res_scale(base_width):
    return 0.1 if base_width >= 256 else 1.0


def build_backbone(base_width=256, n_blocks=32, scale=4, res_scale=None, seed=None) -> SRBackbone:
    if base_width < 4:
        raise ConfigError(f"base_width must be >= 4, got {base_width}")
    if n_blocks < 1:
        raise ConfigError(f"n_blocks must be >= 1, got {n_blocks}")
    if scale not in (2, 3, 4):
        raise ConfigError(f"unsupported scale {scale}; expected 2, 3 or 4")
    if seed is None:
        return SRBackbone(base_width, n_blocks, scale, res_scale)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SRBackbone(base_width, n_blocks, scale, res_scale)


def forward(net: SRBackbone, img: torch.Tensor, r: float = 1.0) -> torch.Tensor:
    """Run ``net`` at width ``r``; accepts a single ``3 x H x W`` image or a batch."""
    if img.dim() == 3:
        return net(img.unsqueeze(0), r).squeeze(0)
    return net(img, r)


def _slices(conv: SliceableConv2d, r):
    c_in, c_out = conv.active_channels(r)
    return (slice(0, c_out), slice(0, c_in)), (slice(0, c_out),)


def sliceable_convs(net: nn.Module):
    return [(name, m) for name, m in net.named_modules() if isinstance(m, SliceableConv2d)]


def student_masks(net: SRBackbone, r: float) -> dict[str, torch.Tensor]:
    """Boolean mask per parameter: True where the entry is used at width ``r``."""
    r = check_width(r)
    masks = {}
    for name, conv in sliceable_convs(net):
        w_idx, b_idx = _slices(conv, r)
        m = torch.zeros_like(conv.weight, dtype=torch.bool)
        m[w_idx] = True
        masks[f"{name}.weight"] = m
        if conv.bias is not None:
            mb = torch.zeros_like(conv.bias, dtype=torch.bool)
            mb[b_idx] = True
            masks[f"{name}.bias"] = mb
    return masks


def parameter_count(net: SRBackbone, r: float = 1.0) -> int:
    r = check_width(r)
    total = 0
    for _, conv in sliceable_convs(net):
        c_in, c_out = conv.active_channels(r)
        total += c_out * c_in * conv.kernel_size ** 2
        if conv.bias is not None:
            total += c_out
    return total


@torch.no_grad()
def extract_student(net: SRBackbone, r: float) -> SRBackbone:
    """Standalone backbone holding physical copies of the width-``r`` weights."""
    r = check_width(r)
    if r == 1.0:
        return copy.deepcopy(net)
    width = scaled_channels(net.base_width, r)
    student = SRBackbone(width, net.n_blocks, net.scale, net.res_scale).to(
        device=net.rgb_mean.device, dtype=net.head.weight.dtype)
    src = dict(sliceable_convs(net))
    for name, conv in sliceable_convs(student):
        w_idx, b_idx = _slices(src[name], r)
        conv.weight.copy_(src[name].weight[w_idx])
        if conv.bias is not None:
            conv.bias.copy_(src[name].bias[b_idx])
    student.rgb_mean.copy_(net.rgb_mean)
    return student


def save_checkpoint(net: SRBackbone, path, r_exported: float = 1.0, **extra) -> Path:
    """Write weights plus a metadata record; ``extra`` lands in ``meta["extra"]``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(net.config(), r_exported=float(r_exported), upsampler_sliced=True,
                extra=extra)
    state = {k: v.detach().cpu().clone() for k, v in net.state_dict().items()}
    torch.save({"format": CHECKPOINT_FORMAT, "meta": meta, "state_dict": state}, path)
    return path


def load_checkpoint(path, map_location="cpu") -> tuple[SRBackbone, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location=map_location, weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    meta = blob["meta"]
    net = SRBackbone(meta["base_width"], meta["n_blocks"], meta["scale"], meta["res_scale"])
    net.load_state_dict(blob["state_dict"])
    return net, meta
