"""Transfer-attack evaluation against black-box targets.

For each target: keep only test examples the target already classifies
correctly, craft adversarial examples on the surrogate with a standard
attack, query the target once per example, and report the success rate.
Targets are queried only on finished, detached batches; their gradients are
never taken.
"""

from __future__ import annotations

import csv
import datetime
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import torch
import torch.nn as nn

from .attacks import AttackConfig, diverse_input_pgd, fgsm, momentum_pgd, pgd
from .batch import ExampleBatch
from .determinism import derive_seed, generator
from .errors import ConfigError
from .models import Classifier

ATTACKS = ("pgd", "fgsm", "momentum_pgd", "diverse_input_pgd")

CSV_COLUMNS = ["attack", "surrogate", "target", "epsilon", "T_v", "n", "success_rate"]


@dataclass
class SurrogateSpec:
    """Either a single trained surrogate or a logit-ensembled source list."""

    kind: str  # "msm" | "ensemble"
    ids: list[str]

    def __post_init__(self):
        if self.kind not in ("msm", "ensemble"):
            raise ConfigError("surrogate kind must be 'msm' or 'ensemble'")
        if not self.ids:
            raise ConfigError("surrogate needs at least one model id")
        if self.kind == "msm" and len(self.ids) != 1:
            raise ConfigError("an msm surrogate is a single model")

    @property
    def label(self) -> str:
        return self.ids[0] if self.kind == "msm" else "+".join(self.ids)


@dataclass
class EvalSpec:
    surrogate: SurrogateSpec
    targets: list[str]
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=15.0, steps=10))
    attack_name: str = "pgd"
    n_examples: int = 1000
    targeted: bool = False
    seed: int = 0
    dataset: str = "cifar10"

    def __post_init__(self):
        if not self.targets:
            raise ConfigError("targets must be non-empty")
        if self.attack_name not in ATTACKS:
            raise ConfigError(f"unknown attack {self.attack_name!r}; expected one of {ATTACKS}")
        if isinstance(self.surrogate, dict):
            self.surrogate = SurrogateSpec(**self.surrogate)
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)


@dataclass
class TransferReport:
    """Success-rate rows plus run metadata; CSV column schema is fixed."""

    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add_row(self, attack: str, surrogate: str, target: str, epsilon: float,
                t_v: int, n: int, success_rate: float) -> None:
        if not 0.0 <= success_rate <= 1.0 or n <= 0:
            raise ConfigError("success_rate must lie in [0, 1] and n must be positive")
        self.rows.append({
            "attack": attack, "surrogate": surrogate, "target": target,
            "epsilon": epsilon, "T_v": t_v, "n": n, "success_rate": success_rate,
        })

    def mean_rate(self) -> float:
        return sum(r["success_rate"] for r in self.rows) / len(self.rows)

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            if self.metadata.get("config_hash"):
                f.write(f"# config_hash={self.metadata['config_hash']}\n")
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            for row in self.rows:
                writer.writerow([row["attack"], row["surrogate"], row["target"],
                                 repr(float(row["epsilon"])), row["T_v"], row["n"],
                                 repr(float(row["success_rate"]))])

    def to_json(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"metadata": self.metadata, "rows": self.rows},
                                   indent=2, sort_keys=True))

    @classmethod
    def from_csv(cls, path: str | Path) -> "TransferReport":
        path = Path(path)
        metadata = {}
        with open(path, newline="") as f:
            first = f.readline()
            if first.startswith("# config_hash="):
                metadata["config_hash"] = first.strip().split("=", 1)[1]
                header_line = f.readline()
            else:
                header_line = first
            header = next(csv.reader([header_line]))
            if header != CSV_COLUMNS:
                raise ConfigError(f"unexpected report schema in {path}: {header}")
            report = cls(metadata=metadata)
            for rec in csv.reader(f):
                report.add_row(rec[0], rec[1], rec[2], float(rec[3]), int(rec[4]),
                               int(rec[5]), float(rec[6]))
        return report

    @classmethod
    def from_json(cls, path: str | Path) -> "TransferReport":
        raw = json.loads(Path(path).read_text())
        return cls(rows=raw["rows"], metadata=raw["metadata"])


class EnsembleClassifier(nn.Module):
    """Averages the logits of several same-task classifiers."""

    def __init__(self, sources: Sequence[Classifier]):
        super().__init__()
        if not sources:
            raise ConfigError("ensemble needs at least one source")
        classes = {s.num_classes for s in sources}
        if len(classes) != 1:
            raise ConfigError(f"sources disagree on class count: {sorted(classes)}")
        self.sources = nn.ModuleList(sources)
        self.num_classes = classes.pop()

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        logits = self.sources[0](images)
        for source in list(self.sources)[1:]:
            logits = logits + source(images)
        return logits / len(self.sources)


def ensemble_logits(sources: Sequence[Classifier], images: torch.Tensor) -> torch.Tensor:
    """Unweighted mean of the sources' logits on `images`."""
    return EnsembleClassifier(list(sources))(images)


def filter_correct(target: Classifier, dataset: ExampleBatch, batch_size: int = 512) -> ExampleBatch:
    """The subset of `dataset` that `target` classifies correctly.

    Prediction is the argmax of the logits with ties broken by the lowest
    class index. The result may be empty; downstream evaluation treats that
    as a configuration error.
    """
    preds = []
    with torch.no_grad():
        for part in dataset.batches(batch_size):
            preds.append(target(part.images).argmax(dim=1))
    correct = (torch.cat(preds) == dataset.labels).nonzero(as_tuple=True)[0]
    return dataset.subset(correct)


def _craft(attack_name: str, surrogate, batch: ExampleBatch, config: AttackConfig,
           seed: int) -> ExampleBatch:
    if attack_name == "pgd":
        return pgd(surrogate, batch, config)
    if attack_name == "fgsm":
        return fgsm(surrogate, batch, config)
    if attack_name == "momentum_pgd":
        return momentum_pgd(surrogate, batch, config)
    return diverse_input_pgd(surrogate, batch, config, rng_seed=seed)


def _query(target: Classifier, images: torch.Tensor) -> torch.Tensor:
    # Black-box contract: detached inputs, no gradient tracking.
    with torch.no_grad():
        return target(images.detach()).argmax(dim=1)


def default_target_rule(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Deterministic targeted-label assignment: next class cyclically."""
    return (labels + 1) % num_classes


def evaluation_pool(target: Classifier, dataset: ExampleBatch, n_examples: int,
                    seed: int, target_name: str = "target") -> ExampleBatch:
    """Seeded sample of the target's correctly classified subset."""
    filtered = filter_correct(target, dataset)
    if len(filtered) == 0:
        raise ConfigError(
            f"target {target_name!r} classifies nothing correctly; cannot evaluate"
        )
    perm = torch.randperm(len(filtered), generator=generator(seed))
    return filtered.subset(perm[: min(n_examples, len(filtered))])


def transfer_eval(spec: EvalSpec, models: Mapping[str, Classifier],
                  dataset: ExampleBatch,
                  target_rule: Optional[Callable] = None) -> TransferReport:
    """Run the crafting-and-querying loop for every target in the spec.

    `models` maps ids to loaded classifiers for both the surrogate and the
    targets. Untargeted success counts predictions different from the true
    label; targeted success counts exact hits on the assigned target label.
    """
    missing = [i for i in (*spec.surrogate.ids, *spec.targets) if i not in models]
    if missing:
        raise ConfigError(f"models missing for ids: {missing}")
    if spec.surrogate.kind == "msm":
        surrogate = models[spec.surrogate.ids[0]]
    else:
        surrogate = EnsembleClassifier([models[i] for i in spec.surrogate.ids])
    attack_cfg = replace(spec.attack, targeted=spec.targeted)
    report = TransferReport(metadata={
        "seed": spec.seed,
        "dataset": spec.dataset,
        "targeted": spec.targeted,
        "attack": spec.attack_name,
        "surrogate": spec.surrogate.label,
        "target_rule": "(y+1) mod num_classes" if spec.targeted else None,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    })
    for tid in spec.targets:
        target = models[tid]
        pool = evaluation_pool(target, dataset, spec.n_examples,
                               derive_seed(spec.seed, "eval-sample", tid), tid)
        if spec.targeted:
            rule = target_rule or default_target_rule
            pool = replace(pool, target_labels=rule(pool.labels, target.num_classes),
                           validate=False)
        adv = _craft(spec.attack_name, surrogate, pool, attack_cfg,
                     derive_seed(spec.seed, "attack", spec.surrogate.label, tid))
        pred = _query(target, adv.images)
        if spec.targeted:
            hits = int((pred == pool.target_labels).sum())
        else:
            hits = int((pred != pool.labels).sum())
        report.add_row(spec.attack_name, spec.surrogate.label, tid,
                       attack_cfg.epsilon, attack_cfg.steps, len(pool), hits / len(pool))
    return report


def targeted_eval(spec: EvalSpec, models: Mapping[str, Classifier],
                  dataset: ExampleBatch,
                  target_rule: Optional[Callable] = None) -> TransferReport:
    """transfer_eval with targeted success counting forced on."""
    return transfer_eval(replace(spec, targeted=True), models, dataset, target_rule)


def sweep(spec: EvalSpec, axis: str, values: Sequence, models: Mapping[str, Classifier],
          dataset: ExampleBatch) -> TransferReport:
    """One transfer_eval per axis value, merged into a long-format report.

    axis 'T_v' varies the step count, 'epsilon' the budget, and
    'T_t-checkpoints' the surrogate id (values are model ids present in
    `models`).
    """
    if axis not in ("T_v", "epsilon", "T_t-checkpoints"):
        raise ConfigError(f"unknown sweep axis {axis!r}")
    merged = TransferReport(metadata={"sweep_axis": axis, "values": list(values)})
    for value in values:
        if axis == "T_v":
            sub = replace(spec, attack=replace(spec.attack, steps=int(value)))
        elif axis == "epsilon":
            sub = replace(spec, attack=replace(spec.attack, epsilon=float(value)))
        else:
            sub = replace(spec, surrogate=SurrogateSpec(kind="msm", ids=[str(value)]))
        part = transfer_eval(sub, models, dataset)
        merged.rows.extend(part.rows)
        merged.metadata.setdefault("parts", []).append(part.metadata)
    return merged
