"""Frozen feature extractor used by the contrastive and perceptual losses."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# conv positions counted from 1; weights double per selected layer
DEFAULT_LAYERS = (1, 3, 5, 9, 13)
DEFAULT_LAYER_WEIGHTS = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)


class EmbeddingLoadError(RuntimeError):
    pass


@dataclass
class EmbeddingSpec:
    """Which conv activations to tap (1-based, post-ReLU) and how to weight them."""

    layer_indices: list[int] = field(default_factory=lambda: list(DEFAULT_LAYERS))
    layer_weights: list[float] = field(default_factory=lambda: list(DEFAULT_LAYER_WEIGHTS))
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        self.layer_indices = [int(i) for i in self.layer_indices]
        self.layer_weights = [float(w) for w in self.layer_weights]
        if not self.layer_indices:
            raise ValueError("at least one embedding layer is required")
        if len(self.layer_indices) != len(self.layer_weights):
            raise ValueError("layer_indices and layer_weights must have equal length")
        if any(w <= 0 for w in self.layer_weights):
            raise ValueError("layer weights must be positive")
        if any(i < 1 for i in self.layer_indices):
            raise ValueError("layer indices count convolutions from 1")
        if sorted(set(self.layer_indices)) != self.layer_indices:
            raise ValueError("layer indices must be strictly increasing")


class Extractor(nn.Module):
    """Runs a conv stack and collects activations after selected ReLUs.

    Parameters are frozen at construction and the module is pinned to eval
    mode; ``train()`` is a no-op.
    """

    def __init__(self, layers: nn.Sequential, spec: EmbeddingSpec):
        super().__init__()
        taps = _relu_positions(layers, spec.layer_indices)
        layers = nn.Sequential(*(nn.ReLU() if isinstance(m, nn.ReLU) else m
                                 for m in layers[: taps[-1] + 1]))
        self.layers = layers
        self.taps = taps
        self.spec = spec
        self.register_buffer("mean", torch.tensor(spec.mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(spec.std).view(1, 3, 1, 1))
        self.min_size = _min_input_size(self.layers)
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)

    @property
    def layer_weights(self):
        return self.spec.layer_weights

    def train(self, mode=True):
        return self

    def forward(self, x):
        if x.shape[-1] < self.min_size or x.shape[-2] < self.min_size:
            raise ValueError(
                f"input {tuple(x.shape[-2:])} smaller than the extractor minimum {self.min_size}")
        x = (x - self.mean) / self.std
        feats = []
        tap = iter(self.taps)
        nxt = next(tap)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i == nxt:
                feats.append(x)
                nxt = next(tap, None)
        return feats


def features(extractor: Extractor, x: torch.Tensor) -> list[torch.Tensor]:
    return extractor(x)


def _relu_positions(layers, conv_indices):
    """Map 1-based conv counts to the index of the activation that follows."""
    positions = []
    n_conv = 0
    wanted = set(conv_indices)
    for i, layer in enumerate(layers):
        if isinstance(layer, nn.Conv2d):
            n_conv += 1
            if n_conv in wanted:
                if i + 1 >= len(layers) or not isinstance(layers[i + 1], nn.ReLU):
                    raise EmbeddingLoadError(f"conv #{n_conv} is not followed by a ReLU")
                positions.append(i + 1)
    if len(positions) != len(conv_indices):
        raise EmbeddingLoadError(
            f"extractor has {n_conv} convolutions; cannot tap layers {conv_indices}")
    return positions


def _min_input_size(layers):
    size = 1
    for layer in layers:
        if isinstance(layer, (nn.MaxPool2d, nn.AvgPool2d)):
            k = layer.kernel_size if isinstance(layer.kernel_size, int) else layer.kernel_size[0]
            size *= k
    return size


def vgg19_layers() -> nn.Sequential:
    from torchvision.models import vgg19

    return vgg19(weights=None).features


def toy_layers(seed: int = 0, channels=(8, 8, 16)) -> nn.Sequential:
    """Three random conv+ReLU layers with a pooling step; a stand-in for VGG in tests."""
    g = torch.Generator().manual_seed(seed)
    c1, c2, c3 = channels
    layers = nn.Sequential(
        nn.Conv2d(3, c1, 3, padding=1), nn.ReLU(),
        nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(),
        nn.AvgPool2d(2),
        nn.Conv2d(c2, c3, 3, padding=1), nn.ReLU(),
    )
    with torch.no_grad():
        for m in layers:
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * 9
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                m.bias.copy_(torch.randn(m.bias.shape, generator=g) * 0.01)
    return layers


def toy_extractor(layer_indices=(1, 2, 3), layer_weights=(0.25, 0.5, 1.0), seed=0,
                  dtype=torch.float32) -> Extractor:
    spec = EmbeddingSpec(list(layer_indices), list(layer_weights))
    return Extractor(toy_layers(seed), spec).to(dtype)


def default_weights_path() -> Path:
    cache = os.environ.get("CSD_CACHE", Path.home() / ".cache" / "csd")
    return Path(cache) / "vgg19.pth"


def load_embedding(weights_path, spec: EmbeddingSpec | None = None) -> Extractor:
    """Build a VGG-19 extractor from a state-dict file.

    Accepts either a full torchvision VGG-19 state dict (``features.*`` keys)
    or one holding only the ``features`` submodule. Never falls back to random
    weights.
    """
    spec = spec or EmbeddingSpec()
    path = Path(weights_path) if weights_path is not None else default_weights_path()
    if not path.is_file():
        raise EmbeddingLoadError(f"embedding weights not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt or non-torch file
        raise EmbeddingLoadError(f"cannot read embedding weights {path}: {exc}") from exc
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    if any(k.startswith("features.") for k in state):
        state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}

    layers = vgg19_layers()
    try:
        layers.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise EmbeddingLoadError(f"weights in {path} do not match VGG-19: {exc}") from exc
    return Extractor(layers, spec)


def build_extractor(kind="vgg19", weights=None, spec: EmbeddingSpec | None = None,
                    seed=0) -> Extractor:
    if kind == "toy":
        if spec is None:
            return toy_extractor(seed=seed)
        return Extractor(toy_layers(seed), spec)
    if kind == "vgg19":
        return load_embedding(weights, spec)
    raise ValueError(f"unknown embedding kind {kind!r}")
