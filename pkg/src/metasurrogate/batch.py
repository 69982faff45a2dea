"""Batches of labeled images in raw pixel space."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import torch

from .errors import ConfigError


@dataclass
class ExampleBatch:
    """Images with labels, and optionally attack target labels.

    `images` is a rank-4 float tensor laid out (batch, height, width, channels)
    with values in pixel units on [pixel_lo, pixel_hi]. `labels` holds integer
    class ids. `target_labels`, when set, holds the class each example should
    be pushed toward in targeted mode and must differ from `labels` everywhere.
    """

    images: torch.Tensor
    labels: torch.Tensor
    target_labels: Optional[torch.Tensor] = None
    pixel_lo: float = 0.0
    pixel_hi: float = 255.0
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        if self.images.dim() != 4:
            raise ConfigError(
                f"images must be rank-4 (batch, height, width, channels), got rank {self.images.dim()}"
            )
        if self.labels.dim() != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise ConfigError("labels must be a vector with one entry per image")
        if not self.labels.dtype.is_floating_point and self.labels.dtype != torch.long:
            self.labels = self.labels.long()
        if self.validate:
            lo = self.images.detach().min()
            hi = self.images.detach().max()
            if lo < self.pixel_lo - 1e-6 or hi > self.pixel_hi + 1e-6:
                raise ConfigError(
                    f"pixel values [{lo:.4g}, {hi:.4g}] outside [{self.pixel_lo}, {self.pixel_hi}]"
                )
            if (self.labels < 0).any():
                raise ConfigError("labels must be non-negative class ids")
            if self.target_labels is not None and bool(
                (self.target_labels == self.labels).any()
            ):
                raise ConfigError("target_labels must differ from labels element-wise")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        """(height, width, channels) of one example."""
        return tuple(self.images.shape[1:])

    def with_images(self, images: torch.Tensor) -> "ExampleBatch":
        """Same labels and bounds, different pixels (no revalidation of range)."""
        return replace(self, images=images, validate=False)

    def subset(self, indices: torch.Tensor) -> "ExampleBatch":
        tl = self.target_labels[indices] if self.target_labels is not None else None
        return replace(
            self,
            images=self.images[indices],
            labels=self.labels[indices],
            target_labels=tl,
            validate=False,
        )

    def batches(self, batch_size: int) -> Iterator["ExampleBatch"]:
        """Split into consecutive mini-batches (last one may be short)."""
        for start in range(0, len(self), batch_size):
            idx = torch.arange(start, min(start + batch_size, len(self)))
            yield self.subset(idx)

    def to(self, dtype: torch.dtype) -> "ExampleBatch":
        return replace(self, images=self.images.to(dtype), validate=False)
