"""Small differentiable classifiers for desk-scale runs."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

ARCHITECTURES = ("mlp", "small-cnn", "linear")


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "mlp"
    widths: tuple = (128,)
    num_classes: int = 10
    input_shape: tuple = (1, 28, 28)
    channels: tuple = field(default=(16, 32))

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def input_dim(self) -> int:
        n = 1
        for d in self.input_shape:
            n *= d
        return n

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "widths": list(self.widths),
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "channels": list(self.channels),
        }


class MLP(nn.Module):
    def __init__(self, input_dim: int, widths, num_classes: int):
        super().__init__()
        layers = [nn.Flatten()]
        prev = input_dim
        for w in widths:
            layers += [nn.Linear(prev, w), nn.ReLU()]
            prev = w
        layers.append(nn.Linear(prev, num_classes))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class SmallCNN(nn.Module):
    """Two conv/pool stages followed by an MLP head."""

    def __init__(self, input_shape, channels, widths, num_classes: int):
        super().__init__()
        c, h, w = input_shape
        convs = []
        for out in channels:
            convs += [nn.Conv2d(c, out, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c, h, w = out, h // 2, w // 2
        self.features = nn.Sequential(*convs)
        self.head = MLP(c * h * w, widths, num_classes)

    def forward(self, x):
        return self.head(self.features(x))


def build_model(spec: ModelSpec) -> nn.Module:
    if spec.architecture == "linear":
        return MLP(spec.input_dim, (), spec.num_classes)
    if spec.architecture == "mlp":
        return MLP(spec.input_dim, spec.widths, spec.num_classes)
    if len(spec.input_shape) != 3:
        raise ValueError("small-cnn needs a (channels, height, width) input shape")
    return SmallCNN(spec.input_shape, spec.channels, spec.widths, spec.num_classes)


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
