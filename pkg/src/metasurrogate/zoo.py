"""Classifier training, adversarial fine-tuning, and checkpoint persistence.

Checkpoints are a weight archive plus a JSON sidecar carrying the
architecture spec and training provenance, so a load rebuilds the exact
forward function (bit-identical logits on a probe batch).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .attacks import AttackConfig, fgsm
from .batch import ExampleBatch
from .determinism import derive_seed, generator
from .errors import CheckpointError, ConfigError, NumericError
from .models import ArchitectureSpec, Classifier, build_model

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class AdversarialRecipe:
    """Adversarial-augmentation settings: one FGSM example per training image."""

    attack: str = "fgsm"
    epsilon: float = 3.0

    def __post_init__(self):
        if self.attack != "fgsm":
            raise ConfigError("adversarial training supports only the fgsm attack")
        if self.epsilon < 0:
            raise ConfigError("adversarial epsilon must be >= 0")


@dataclass
class TrainRecipe:
    learning_rate: float = 0.01
    l2_weight_decay: float = 1e-5
    batch_size: int = 128
    epochs: int = 5
    seed: int = 0
    adversarial: Optional[AdversarialRecipe] = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ConfigError("learning_rate and batch_size must be positive, epochs >= 0")
        if self.l2_weight_decay < 0:
            raise ConfigError("l2_weight_decay must be >= 0")
        if isinstance(self.adversarial, dict):
            self.adversarial = AdversarialRecipe(**self.adversarial)


@dataclass
class CheckpointMetadata:
    arch: dict
    dataset: str
    seed: int
    epochs: int
    clean_accuracy: float
    training_kind: str  # standard | adversarial | msm
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.clean_accuracy <= 1.0:
            raise ConfigError("clean_accuracy must lie in [0, 1]")


@dataclass
class Checkpoint:
    model: Classifier
    metadata: CheckpointMetadata


def accuracy(model: Classifier, batch: ExampleBatch, batch_size: int = 512) -> float:
    """Fraction of `batch` classified correctly (argmax, first index on ties)."""
    correct = 0
    with torch.no_grad():
        for part in batch.batches(batch_size):
            pred = model(part.images).argmax(dim=1)
            correct += int((pred == part.labels).sum())
    return correct / len(batch)


def train_classifier(model: Classifier, train: ExampleBatch, test: ExampleBatch,
                     recipe: TrainRecipe, dataset_id: str = "",
                     training_kind: str = "standard") -> tuple[CheckpointMetadata, list[float]]:
    """Plain-SGD training; returns metadata and the per-epoch accuracy curve.

    The model is mutated in place. Aborts with NumericError, naming the last
    finite epoch, if the loss diverges.
    """
    opt = torch.optim.SGD(model.parameters(), lr=recipe.learning_rate,
                          weight_decay=recipe.l2_weight_decay)
    loss_fn = torch.nn.CrossEntropyLoss()
    curve = [accuracy(model, test)]
    for epoch in range(recipe.epochs):
        perm = torch.randperm(len(train), generator=generator(derive_seed(recipe.seed, "epoch", epoch)))
        shuffled = train.subset(perm)
        model.train()
        for part in shuffled.batches(recipe.batch_size):
            opt.zero_grad(set_to_none=True)
            loss = loss_fn(model(part.images), part.labels)
            if not torch.isfinite(loss):
                raise NumericError(
                    f"training diverged in epoch {epoch}; last finite epoch was {epoch - 1}"
                )
            loss.backward()
            opt.step()
        model.eval()
        curve.append(accuracy(model, test))
    model.eval()
    meta = CheckpointMetadata(
        arch=model.spec.to_dict(), dataset=dataset_id, seed=recipe.seed,
        epochs=recipe.epochs, clean_accuracy=curve[-1], training_kind=training_kind,
    )
    return meta, curve


def adversarial_examples(base: Classifier, train: ExampleBatch, epsilon: float,
                         batch_size: int = 256) -> ExampleBatch:
    """One FGSM example per training image, crafted on the frozen base model."""
    cfg = AttackConfig(epsilon=epsilon, pixel_lo=train.pixel_lo, pixel_hi=train.pixel_hi)
    parts = [fgsm(base, part, cfg).images for part in train.batches(batch_size)]
    return train.with_images(torch.cat(parts))


def adversarial_train(base: Checkpoint, train: ExampleBatch, test: ExampleBatch,
                      recipe: TrainRecipe, dataset_id: str = "") -> tuple[Classifier, CheckpointMetadata, list[float]]:
    """Fine-tune a copy of the base model on clean plus FGSM-perturbed images.

    The adversarial images are generated once, from the normally trained base
    model, so the augmented set has exactly one extra example per clean image.
    """
    if recipe.adversarial is None:
        raise ConfigError("adversarial_train needs recipe.adversarial settings")
    adv = adversarial_examples(base.model, train, recipe.adversarial.epsilon)
    union = ExampleBatch(
        images=torch.cat([train.images, adv.images]),
        labels=torch.cat([train.labels, adv.labels]),
        pixel_lo=train.pixel_lo, pixel_hi=train.pixel_hi, validate=False,
    )
    spec = ArchitectureSpec.from_dict(base.metadata.arch)
    model = build_model(spec, seed=base.metadata.seed)
    model.load_state_dict(base.model.state_dict())
    meta, curve = train_classifier(model, union, test, recipe, dataset_id=dataset_id,
                                   training_kind="adversarial")
    return model, meta, curve


def _atomic_write_bytes(path: Path, write_fn) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write_fn(tmp)
    os.replace(tmp, path)


def save_checkpoint(model: Classifier, metadata: CheckpointMetadata, path: str | Path) -> None:
    """Write the weight archive at `path` and its JSON metadata sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write_bytes(path, lambda tmp: torch.save(model.state_dict(), tmp))
    sidecar = {"format_version": CHECKPOINT_FORMAT_VERSION, **asdict(metadata)}
    _atomic_write_bytes(
        path.with_suffix(".json"),
        lambda tmp: tmp.write_text(json.dumps(sidecar, indent=2, sort_keys=True)),
    )


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Rebuild the classifier saved at `path`; logits round-trip bit-exactly."""
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not path.exists() or not sidecar.exists():
        raise CheckpointError(f"checkpoint not found at {path}")
    raw = json.loads(sidecar.read_text())
    version = raw.pop("format_version", None)
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    metadata = CheckpointMetadata(**raw)
    model = build_model(ArchitectureSpec.from_dict(metadata.arch), seed=metadata.seed)
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return Checkpoint(model=model, metadata=metadata)
