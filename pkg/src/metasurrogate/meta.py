"""Bi-level training of the meta-surrogate model (MSM).

Each step unrolls the customized (differentiable) attack on the MSM, feeds the
resulting adversarial batch to the frozen source classifiers, and ascends the
summed source losses into the MSM weights. The attack magnitude follows an
exponentially decaying schedule, and transfer success against held-out target
models is logged periodically during training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch

from .attacks import AttackConfig, cross_entropy, customized_pgd, pgd
from .batch import ExampleBatch
from .datasets import load_dataset
from .determinism import derive_seed, generator
from .errors import ConfigError, NumericError
from .models import ArchitectureSpec, Classifier, build_model
from .zoo import CheckpointMetadata, accuracy, load_checkpoint


@dataclass
class MetaTrainConfig:
    """Hyperparameters of the bi-level loop.

    epsilon_c decays as epsilon_c_init * epsilon_c_decay^(iteration //
    epsilon_c_decay_every). inner_steps is the unroll depth of the
    differentiable attack during training; the evaluation attack is the
    standard sign-based one configured in eval_attack.
    """

    source_checkpoints: list[str] = field(default_factory=list)
    msm_arch: Optional[ArchitectureSpec] = None
    dataset: str = "cifar10"
    alpha: float = 0.001
    batch_size: int = 64
    inner_steps: int = 7
    epochs: int = 60
    epsilon_c_init: float = 1600.0
    epsilon_c_decay: float = 0.9
    epsilon_c_decay_every: int = 4000
    gamma1: float = 0.01
    gamma2: float = 0.01
    seed: int = 0
    grad_clip_norm: float = 10.0
    train_limit: Optional[int] = None
    eval_targets: list[str] = field(default_factory=list)
    eval_every: int = 250
    eval_examples: int = 128
    eval_attack: AttackConfig = field(default_factory=AttackConfig)

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")
        if not 0.0 < self.epsilon_c_decay <= 1.0:
            raise ConfigError("epsilon_c_decay must lie in (0, 1]")
        if self.epsilon_c_decay_every < 1 or self.eval_every < 1:
            raise ConfigError("decay and eval intervals must be >= 1")
        if isinstance(self.msm_arch, dict):
            self.msm_arch = ArchitectureSpec.from_dict(self.msm_arch)
        if isinstance(self.eval_attack, dict):
            self.eval_attack = AttackConfig(**self.eval_attack)


@dataclass
class MetaTrainLog:
    """Per-iteration loss records plus periodic transfer-success snapshots."""

    source_ids: list[str]
    target_ids: list[str]
    records: list[dict] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)

    def add_record(self, iteration: int, epsilon_c: float, loss_sum: float,
                   loss_per_source: Sequence[float]) -> None:
        if self.records and iteration <= self.records[-1]["iteration"]:
            raise ConfigError("log iterations must be strictly increasing")
        self.records.append({
            "iteration": iteration, "epsilon_c": epsilon_c,
            "loss_sum": loss_sum, "loss_per_source": list(loss_per_source),
        })

    def add_snapshot(self, iteration: int, rates: dict[str, float]) -> None:
        self.snapshots.append({"iteration": iteration, "rates": dict(rates)})

    def snapshot_means(self) -> list[tuple[int, float]]:
        """(iteration, mean target success) per snapshot, in order."""
        out = []
        for snap in self.snapshots:
            rates = list(snap["rates"].values())
            out.append((snap["iteration"], sum(rates) / len(rates)))
        return out

    def to_csv(self, path: str | Path, config_hash: str = "") -> None:
        """One row per training iteration; eval columns filled on snapshot rows."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        by_iter = {s["iteration"]: s["rates"] for s in self.snapshots}
        header = (["iteration", "epsilon_c", "loss_sum"]
                  + [f"loss_src_{i}" for i in range(len(self.source_ids))]
                  + [f"eval_{t}" for t in self.target_ids])
        with open(path, "w", newline="") as f:
            if config_hash:
                f.write(f"# config_hash={config_hash}\n")
            writer = csv.writer(f)
            writer.writerow(header)
            for rec in self.records:
                row = [rec["iteration"], repr(rec["epsilon_c"]), repr(rec["loss_sum"])]
                row += [repr(v) for v in rec["loss_per_source"]]
                rates = by_iter.get(rec["iteration"])
                if rates:
                    row += [repr(rates[t]) for t in self.target_ids]
                else:
                    row += [""] * len(self.target_ids)
                writer.writerow(row)


def epsilon_c_schedule(iteration: int, config: MetaTrainConfig) -> float:
    """Exponentially decayed attack magnitude at a given training iteration."""
    if iteration < 0:
        raise ConfigError("iteration must be >= 0")
    return config.epsilon_c_init * config.epsilon_c_decay ** (iteration // config.epsilon_c_decay_every)


def _global_grad_norm(grads: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.sqrt(sum(g.pow(2).sum() for g in grads))


def meta_step(msm: Classifier, sources: Sequence[Classifier], batch: ExampleBatch,
              config: MetaTrainConfig, iteration: int = 0) -> dict:
    """One ascent step on the MSM weights; returns step metrics.

    Crafts the differentiable attack on the MSM, sums the sources'
    cross-entropy on the result, and moves the weights along the gradient of
    that sum (clipped in global norm). Source weights are never touched.
    """
    eps_c = epsilon_c_schedule(iteration, config)
    attack_cfg = AttackConfig(
        epsilon_c=eps_c, steps=config.inner_steps,
        gamma1=config.gamma1, gamma2=config.gamma2,
        pixel_lo=batch.pixel_lo, pixel_hi=batch.pixel_hi,
    )
    adv = customized_pgd(msm, batch, attack_cfg, track_weight_gradients=True)
    per_source = []
    objective = None
    for idx, source in enumerate(sources):
        try:
            _, loss = cross_entropy(source(adv.images), batch.labels)
        except NumericError as exc:
            raise NumericError(f"source {idx}: {exc}") from exc
        if not torch.isfinite(loss):
            raise NumericError(f"source {idx} produced a non-finite adversarial loss")
        per_source.append(loss)
        objective = loss if objective is None else objective + loss
    params = [p for p in msm.parameters() if p.requires_grad]
    grads = torch.autograd.grad(objective, params)
    norm = _global_grad_norm(grads)
    scale = 1.0
    if config.grad_clip_norm > 0 and norm > config.grad_clip_norm:
        scale = config.grad_clip_norm / float(norm)
    with torch.no_grad():
        for p, g in zip(params, grads):
            p.add_(config.alpha * scale * g)
    return {
        "iteration": iteration,
        "epsilon_c": eps_c,
        "loss_sum": float(objective.detach()),
        "loss_per_source": [float(v.detach()) for v in per_source],
        "grad_norm": float(norm),
    }


def _freeze(model: Classifier) -> Classifier:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def transfer_success_snapshot(msm: Classifier, targets: dict[str, Classifier],
                              pools: dict[str, ExampleBatch], attack: AttackConfig) -> dict[str, float]:
    """Success rate of the standard attack crafted on the MSM, per target."""
    rates = {}
    for tid, target in targets.items():
        pool = pools[tid]
        adv = pgd(msm, pool, attack)
        with torch.no_grad():
            pred = target(adv.images.detach()).argmax(dim=1)
        rates[tid] = float((pred != pool.labels).float().mean())
    return rates


def _eval_pool(target: Classifier, test: ExampleBatch, n: int, seed: int) -> ExampleBatch:
    with torch.no_grad():
        parts = [target(p.images).argmax(dim=1) == p.labels for p in test.batches(512)]
    correct = torch.cat(parts).nonzero(as_tuple=True)[0]
    perm = torch.randperm(len(correct), generator=generator(seed))
    return test.subset(correct[perm[: min(n, len(correct))]])


def train_msm(config: MetaTrainConfig) -> tuple[Classifier, CheckpointMetadata, MetaTrainLog]:
    """Run the full bi-level loop per the training algorithm.

    Returns the trained MSM, checkpoint metadata (training kind "msm"), and
    the training log. With epochs=0 the MSM equals its initialization and the
    log is empty.
    """
    if not config.source_checkpoints:
        raise ConfigError("at least one source checkpoint is required")
    if config.msm_arch is None:
        raise ConfigError("msm_arch is required")
    sources = []
    for path in config.source_checkpoints:
        ckpt = load_checkpoint(path)
        sources.append(_freeze(ckpt.model))
    source_states = [
        {k: v.clone() for k, v in s.state_dict().items()} for s in sources
    ]

    targets: dict[str, Classifier] = {}
    for path in config.eval_targets:
        ckpt = load_checkpoint(path)
        targets[Path(path).stem] = _freeze(ckpt.model)

    msm = build_model(config.msm_arch, seed=derive_seed(config.seed, "msm-init"))
    train = load_dataset(config.dataset, "train", seed=derive_seed(config.seed, "train-order"),
                         limit=config.train_limit)
    test = load_dataset(config.dataset, "test", seed=derive_seed(config.seed, "test-order"))

    pools = {
        tid: _eval_pool(t, test, config.eval_examples, derive_seed(config.seed, "eval-pool", tid))
        for tid, t in targets.items()
    }
    eval_attack = AttackConfig(
        epsilon=config.eval_attack.epsilon, steps=config.eval_attack.steps,
        pixel_lo=train.pixel_lo, pixel_hi=train.pixel_hi,
    )

    log = MetaTrainLog(
        source_ids=[Path(p).stem for p in config.source_checkpoints],
        target_ids=list(targets.keys()),
    )
    batches_per_epoch = len(train) // config.batch_size
    total = config.epochs * batches_per_epoch
    iteration = 0
    for epoch in range(config.epochs):
        perm = torch.randperm(len(train), generator=generator(derive_seed(config.seed, "meta-epoch", epoch)))
        shuffled = train.subset(perm)
        for b in range(batches_per_epoch):
            idx = torch.arange(b * config.batch_size, (b + 1) * config.batch_size)
            batch = shuffled.subset(idx)
            metrics = meta_step(msm, sources, batch, config, iteration)
            log.add_record(iteration, metrics["epsilon_c"], metrics["loss_sum"],
                           metrics["loss_per_source"])
            if targets and (iteration % config.eval_every == 0 or iteration == total - 1):
                log.add_snapshot(iteration,
                                 transfer_success_snapshot(msm, targets, pools, eval_attack))
            iteration += 1

    for src, ref in zip(sources, source_states):
        state = src.state_dict()
        for key, tensor in ref.items():
            if not torch.equal(state[key], tensor):
                raise NumericError("source model weights changed during meta-training")

    meta = CheckpointMetadata(
        arch=config.msm_arch.to_dict(), dataset=config.dataset, seed=config.seed,
        epochs=config.epochs, clean_accuracy=accuracy(msm, test),
        training_kind="msm",
        extra={"iterations": iteration, "sources": log.source_ids},
    )
    return msm, meta, log
