"""Small CNN classifiers operating on raw-pixel NHWC batches.

Three built-in families cover residual, plain, and depthwise-separable
convolutional nets so that source and target roles in an experiment can be
kept architecture-disjoint. Pixel normalization lives inside the classifier:
attacks and datasets speak raw [0, 255] pixels only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .determinism import generator
from .errors import ConfigError

FAMILIES = ("resnet-small", "plain-cnn", "depthwise-cnn", "user-defined")


@dataclass
class ArchitectureSpec:
    """Declarative description of a classifier backbone.

    block_widths lists the channel count of each stage; num_blocks, when
    given, must agree with its length. input_shape is (height, width,
    channels) of the raw images. normalization_mean/std are per-channel
    constants in pixel units applied inside the model; the defaults map
    [0, 255] to roughly [-1, 1].
    """

    family: str
    block_widths: list[int]
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (32, 32, 3)
    num_blocks: Optional[int] = None
    normalization_mean: Optional[list[float]] = None
    normalization_std: Optional[list[float]] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown architecture family {self.family!r}")
        self.block_widths = [int(w) for w in self.block_widths]
        if any(w <= 0 for w in self.block_widths):
            raise ConfigError("block_widths must be positive")
        if self.num_blocks is None:
            self.num_blocks = len(self.block_widths)
        elif self.num_blocks != len(self.block_widths):
            raise ConfigError("num_blocks must equal len(block_widths)")
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if len(self.input_shape) != 3 or any(v <= 0 for v in self.input_shape):
            raise ConfigError("input_shape must be positive (height, width, channels)")
        c = self.input_shape[2]
        if self.normalization_mean is None:
            self.normalization_mean = [127.5] * c
        if self.normalization_std is None:
            self.normalization_std = [127.5] * c
        if len(self.normalization_mean) != c or len(self.normalization_std) != c:
            raise ConfigError("normalization constants must have one entry per channel")
        if self.family != "user-defined":
            side = min(self.input_shape[0], self.input_shape[1])
            if side < 2 ** self.num_blocks:
                raise ConfigError(
                    f"input side {side} too small for {self.num_blocks} pooling stages"
                )

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "block_widths": list(self.block_widths),
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "num_blocks": self.num_blocks,
            "normalization_mean": list(self.normalization_mean),
            "normalization_std": list(self.normalization_std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(
            family=d["family"],
            block_widths=list(d["block_widths"]),
            num_classes=int(d["num_classes"]),
            input_shape=tuple(d["input_shape"]),
            num_blocks=d.get("num_blocks"),
            normalization_mean=d.get("normalization_mean"),
            normalization_std=d.get("normalization_std"),
        )


def resnet13_spec(num_classes: int = 10, input_shape: tuple[int, int, int] = (32, 32, 3),
                  widths: Sequence[int] = (64, 128, 256, 512)) -> ArchitectureSpec:
    """Four-stage residual preset with the default stage widths."""
    return ArchitectureSpec(family="resnet-small", block_widths=list(widths),
                            num_classes=num_classes, input_shape=input_shape)


class _ResidualBlock(nn.Module):
    """Two 3x3 convolutions plus a 1x1 convolution on the shortcut path."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.shortcut = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        main = self.conv2(F.relu(self.conv1(x)))
        return F.relu(main + self.shortcut(x))


class _DepthwiseBlock(nn.Module):
    """Depthwise 3x3 followed by a pointwise 1x1 convolution."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.depthwise = nn.Conv2d(cin, cin, 3, padding=1, groups=cin)
        self.pointwise = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        return F.relu(self.pointwise(F.relu(self.depthwise(x))))


def _make_backbone(spec: ArchitectureSpec) -> nn.Module:
    cin = spec.input_shape[2]
    stages: list[nn.Module] = []
    for i, width in enumerate(spec.block_widths):
        if spec.family == "resnet-small":
            stages.append(_ResidualBlock(cin, width))
        elif spec.family == "plain-cnn":
            stages.append(nn.Sequential(nn.Conv2d(cin, width, 3, padding=1), nn.ReLU()))
        elif spec.family == "depthwise-cnn":
            if i == 0:
                # conv stem: depthwise separation needs channels to separate
                stages.append(nn.Sequential(nn.Conv2d(cin, width, 3, padding=1), nn.ReLU()))
            else:
                stages.append(_DepthwiseBlock(cin, width))
        else:
            raise ConfigError("user-defined family requires an explicit backbone")
        stages.append(nn.MaxPool2d(2))
        cin = width
    stages += [nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(cin, spec.num_classes)]
    return nn.Sequential(*stages)


class Classifier(nn.Module):
    """Backbone plus built-in pixel normalization.

    forward takes (batch, height, width, channels) raw pixels and returns
    (batch, num_classes) logits. Raises ConfigError when the image shape
    disagrees with the architecture's input spec.
    """

    def __init__(self, spec: ArchitectureSpec, backbone: nn.Module):
        super().__init__()
        self.spec = spec
        self.backbone = backbone
        mean = torch.tensor(spec.normalization_mean, dtype=torch.float32)
        std = torch.tensor(spec.normalization_std, dtype=torch.float32)
        self.register_buffer("pixel_mean", mean.view(1, -1, 1, 1))
        self.register_buffer("pixel_std", std.view(1, -1, 1, 1))

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or tuple(images.shape[1:]) != self.spec.input_shape:
            raise ConfigError(
                f"batch shape {tuple(images.shape[1:])} does not match model input "
                f"spec {self.spec.input_shape}"
            )
        x = images.permute(0, 3, 1, 2)
        x = (x - self.pixel_mean) / self.pixel_std
        return self.backbone(x)


def _reinit_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic fan-in-scaled uniform init from a dedicated generator."""
    gen = generator(seed)
    with torch.no_grad():
        for param in model.parameters():
            if param.dim() > 1:
                fan_in = param[0].numel()
                bound = (6.0 / fan_in) ** 0.5
                param.uniform_(-bound, bound, generator=gen)
            else:
                param.zero_()


def build_model(spec: ArchitectureSpec, seed: int, backbone: Optional[nn.Module] = None) -> Classifier:
    """Construct a classifier with seed-determined initial weights.

    The same (spec, seed) pair always yields bit-identical parameters. A
    user-defined family must supply its own backbone module; built-in
    families must not.
    """
    if spec.family == "user-defined":
        if backbone is None:
            raise ConfigError("user-defined architecture requires a backbone module")
    elif backbone is not None:
        raise ConfigError("backbone can only be supplied for the user-defined family")
    else:
        backbone = _make_backbone(spec)
    model = Classifier(spec, backbone)
    _reinit_parameters(model, seed)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
