"""Attack mathematics: losses, input gradients, the gradient ensemble, and the
FGSM / PGD / momentum / diverse-input / customized update loops.

All operations work in raw pixel space; classifiers normalize internally. The
sign-based attacks detach between iterations (they are evaluation tools). The
customized update keeps the whole unrolled loop on the autograd graph so the
final adversarial batch is differentiable with respect to the attacked model's
weights, which is what makes meta-training of a surrogate possible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .batch import ExampleBatch
from .errors import ConfigError, NumericError


@dataclass
class AttackConfig:
    """Hyperparameters shared by all attack loops.

    epsilon: L-inf budget of the sign-based attacks, in pixel units.
    epsilon_c: total magnitude scale of the customized (differentiable) update;
        each of its `steps` iterations moves by epsilon_c / steps times the
        ensemble direction, which is not a sign vector.
    steps: number of iterations T (sign-based attacks use step size epsilon/T).
    gamma1 / gamma2: weights of the arctan-squashed and sign terms in the
        gradient ensemble.
    momentum_mu: decay of the momentum accumulator.
    di_probability: per-step probability of the diverse-input transform.
    di_resize_max: upper bound of the random resize side; None picks
        round(1.1 * native side).
    """

    epsilon: float = 15.0
    epsilon_c: float = 1600.0
    steps: int = 10
    gamma1: float = 0.01
    gamma2: float = 0.01
    momentum_mu: float = 1.0
    di_probability: float = 0.8
    di_resize_max: Optional[int] = None
    targeted: bool = False
    pixel_lo: float = 0.0
    pixel_hi: float = 255.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.epsilon_c < 0:
            raise ConfigError("epsilon_c must be >= 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ConfigError("gamma1 and gamma2 must be >= 0")
        if not 0.0 <= self.di_probability <= 1.0:
            raise ConfigError("di_probability must lie in [0, 1]")
        if self.pixel_hi <= self.pixel_lo:
            raise ConfigError("pixel_hi must exceed pixel_lo")


@dataclass
class GradientEnsemble:
    """The four gradient maps combined by the customized update.

    g: raw input gradient.
    g1: g divided by the per-example sum of |g| (unit L1 mass per example).
    gt: (2/pi) * arctan of g divided by the per-example mean of |g|; the
        rescaling keeps arctan out of its saturated and near-linear regions.
    gs: element-wise sign of g; contributes a fixed lower bound gamma2 to the
        per-pixel step magnitude wherever g is nonzero.
    g_ens: g1 + gamma1 * gt + gamma2 * gs.

    Examples whose gradient is identically zero get all-zero maps.
    """

    g: torch.Tensor
    g1: torch.Tensor
    gt: torch.Tensor
    gs: torch.Tensor
    g_ens: torch.Tensor


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-example cross-entropy losses and their batch mean.

    loss_i = -log softmax(logits_i)[labels_i]. Raises NumericError on
    non-finite logits.
    """
    if not torch.isfinite(logits).all():
        raise NumericError("cross_entropy received non-finite logits")
    per_example = F.cross_entropy(logits, labels, reduction="none")
    return per_example, per_example.mean()


def _loss_direction_labels(batch: ExampleBatch, targeted: bool) -> torch.Tensor:
    if targeted:
        if batch.target_labels is None:
            raise ConfigError("targeted attack requires batch.target_labels")
        return batch.target_labels
    return batch.labels


def _raw_input_gradient(model, x: torch.Tensor, labels: torch.Tensor, targeted: bool,
                        create_graph: bool = False) -> torch.Tensor:
    """Per-example gradient of the attack loss at `x`.

    Examples are independent, so differentiating the summed per-example
    losses yields each example's own gradient with no batch-size scaling.
    Untargeted: gradient of the cross-entropy at the true labels (ascent
    direction). Targeted: negated gradient at the target labels (descent
    toward the target class). `x` must already require grad.
    """
    per_example, _ = cross_entropy(model(x), labels)
    (g,) = torch.autograd.grad(per_example.sum(), x, create_graph=create_graph)
    return -g if targeted else g


def input_gradient(model, batch: ExampleBatch, targeted: bool = False,
                   create_graph: bool = False) -> torch.Tensor:
    """Gradient map of the attack loss with respect to the batch images."""
    labels = _loss_direction_labels(batch, targeted)
    x = batch.images.detach().clone().requires_grad_(True)
    g = _raw_input_gradient(model, x, labels, targeted, create_graph=create_graph)
    return g if create_graph else g.detach()


def gradient_ensemble(g: torch.Tensor, gamma1: float = 0.01, gamma2: float = 0.01) -> GradientEnsemble:
    """Build the ensemble maps from a raw gradient.

    Reductions (sum and mean of |g|) run over each example's entire gradient
    independently, so the maps are invariant to positive rescaling of g and
    examples never couple through batch statistics. A rank-1 input is treated
    as a single example.
    """
    if g.dim() == 0:
        raise ConfigError("gradient_ensemble needs at least a rank-1 gradient")
    batched = g.dim() >= 2
    dims = tuple(range(1, g.dim())) if batched else (0,)
    per_example = g[0].numel() if batched else g.numel()
    abs_sum = g.abs().sum(dim=dims, keepdim=True)
    zero = abs_sum == 0
    # Safe denominators keep the masked-out branch NaN-free in both passes.
    sum_safe = torch.where(zero, torch.ones_like(abs_sum), abs_sum)
    mean_safe = sum_safe / per_example
    zeros = torch.zeros_like(g)
    g1 = torch.where(zero, zeros, g / sum_safe)
    gt = torch.where(zero, zeros, (2.0 / math.pi) * torch.atan(g / mean_safe))
    gs = torch.sign(g)
    g_ens = g1 + gamma1 * gt + gamma2 * gs
    return GradientEnsemble(g=g, g1=g1, gt=gt, gs=gs, g_ens=g_ens)


def _clip(x: torch.Tensor, config: AttackConfig) -> torch.Tensor:
    return torch.clamp(x, config.pixel_lo, config.pixel_hi)


def _contain_budget(x_adv: torch.Tensor, x0: torch.Tensor, eps: float) -> torch.Tensor:
    """Absorb IEEE rounding spill so the measured offset never exceeds eps.

    The step sizing bounds |x_adv - x0| by eps in exact arithmetic; iterated
    float adds can still land a few ulp outside. Pixels are nudged one
    representable value toward the original until the measured offset is
    inside the budget (and therefore still inside the pixel range).
    """
    with torch.no_grad():
        while True:
            over = (x_adv - x0).abs() > eps
            if not bool(over.any()):
                return x_adv
            x_adv = torch.where(over, torch.nextafter(x_adv, x0), x_adv)


def fgsm(model, batch: ExampleBatch, config: AttackConfig) -> ExampleBatch:
    """One-step sign attack: x + epsilon * sign(g), clipped to the pixel range."""
    g = input_gradient(model, batch, config.targeted)
    x_adv = _clip(batch.images + config.epsilon * torch.sign(g), config)
    x_adv = _contain_budget(x_adv.detach(), batch.images, config.epsilon)
    return batch.with_images(x_adv)


def pgd(model, batch: ExampleBatch, config: AttackConfig) -> ExampleBatch:
    """Iterated sign attack with step size epsilon / steps.

    The step sizing alone bounds the total L-inf perturbation by epsilon;
    no separate ball projection is applied.
    """
    labels = _loss_direction_labels(batch, config.targeted)
    alpha = config.epsilon / config.steps
    x = batch.images.detach()
    for _ in range(config.steps):
        xk = x.clone().requires_grad_(True)
        g = _raw_input_gradient(model, xk, labels, config.targeted)
        with torch.no_grad():
            x = _clip(x + alpha * torch.sign(g), config)
    return batch.with_images(_contain_budget(x, batch.images.detach(), config.epsilon))


def _per_example_l1(g: torch.Tensor) -> torch.Tensor:
    dims = tuple(range(1, g.dim()))
    return g.abs().sum(dim=dims, keepdim=True)


def momentum_pgd(model, batch: ExampleBatch, config: AttackConfig) -> ExampleBatch:
    """PGD with an L1-normalized gradient accumulator.

    m_k = mu * m_{k-1} + g / ||g||_1 per example; the update steps along
    sign(m_k). A zero-gradient example contributes nothing that step.
    """
    labels = _loss_direction_labels(batch, config.targeted)
    alpha = config.epsilon / config.steps
    x = batch.images.detach()
    m = torch.zeros_like(x)
    for _ in range(config.steps):
        xk = x.clone().requires_grad_(True)
        g = _raw_input_gradient(model, xk, labels, config.targeted)
        with torch.no_grad():
            l1 = _per_example_l1(g)
            safe = torch.where(l1 == 0, torch.ones_like(l1), l1)
            m = config.momentum_mu * m + torch.where(l1 == 0, torch.zeros_like(g), g / safe)
            x = _clip(x + alpha * torch.sign(m), config)
    return batch.with_images(_contain_budget(x, batch.images.detach(), config.epsilon))


def _diverse_transform(x: torch.Tensor, resize_max: int, gen: torch.Generator) -> torch.Tensor:
    """Randomly resize, zero-pad at a random offset, and return to native size.

    Differentiable, so gradients taken through the transformed copy land back
    on the native-resolution input. Requires square images.
    """
    b, h, w, c = x.shape
    if h != w:
        raise ConfigError("diverse-input transform requires square images")
    side = int(torch.randint(h, resize_max + 1, (1,), generator=gen).item())
    pad_room = resize_max - side
    top = int(torch.randint(0, pad_room + 1, (1,), generator=gen).item())
    left = int(torch.randint(0, pad_room + 1, (1,), generator=gen).item())
    nchw = x.permute(0, 3, 1, 2)
    resized = F.interpolate(nchw, size=(side, side), mode="bilinear", align_corners=False)
    padded = F.pad(resized, (left, pad_room - left, top, pad_room - top), value=0.0)
    restored = F.interpolate(padded, size=(h, w), mode="bilinear", align_corners=False)
    return restored.permute(0, 2, 3, 1)


def diverse_input_pgd(model, batch: ExampleBatch, config: AttackConfig, rng_seed: int) -> ExampleBatch:
    """PGD whose gradient is taken, with probability di_probability per step,
    on a randomly resized-and-padded copy of the current iterate.

    All randomness comes from a generator seeded with `rng_seed`, so a fixed
    seed gives bit-identical output.
    """
    h, w = batch.image_shape[0], batch.image_shape[1]
    native = max(h, w)
    resize_max = config.di_resize_max
    if resize_max is None:
        resize_max = int(round(1.1 * native))
    if resize_max < native:
        raise ConfigError(f"di_resize_max={resize_max} is smaller than the native side {native}")
    gen = torch.Generator(device="cpu")
    gen.manual_seed(rng_seed)
    labels = _loss_direction_labels(batch, config.targeted)
    alpha = config.epsilon / config.steps
    x = batch.images.detach()
    for _ in range(config.steps):
        transform = bool(torch.rand((), generator=gen) < config.di_probability)
        xk = x.clone().requires_grad_(True)
        view = _diverse_transform(xk, resize_max, gen) if transform else xk
        _, loss = cross_entropy(model(view), labels)
        (g,) = torch.autograd.grad(loss, xk)
        if config.targeted:
            g = -g
        with torch.no_grad():
            x = _clip(x + alpha * torch.sign(g), config)
    return batch.with_images(_contain_budget(x, batch.images.detach(), config.epsilon))


def customized_pgd(model, batch: ExampleBatch, config: AttackConfig,
                   track_weight_gradients: bool = True) -> ExampleBatch:
    """Iterated attack stepping along the gradient ensemble instead of its sign.

    Each of the `steps` iterations moves by (epsilon_c / steps) * g_ens and
    clips to the pixel range. With `track_weight_gradients` the whole unrolled
    loop stays on the autograd graph: the returned images admit gradients with
    respect to the model's weights wherever the clip is inactive (clipped
    pixels propagate zero). Raises NumericError naming the offending step if
    an iterate goes non-finite.
    """
    labels = _loss_direction_labels(batch, config.targeted)
    alpha = config.epsilon_c / config.steps
    x = batch.images
    if not x.requires_grad:
        x = x.detach().clone().requires_grad_(True)
    for step in range(config.steps):
        g = _raw_input_gradient(model, x, labels, config.targeted,
                                create_graph=track_weight_gradients)
        ens = gradient_ensemble(g, config.gamma1, config.gamma2)
        x = _clip(x + alpha * ens.g_ens, config)
        if not torch.isfinite(x).all():
            raise NumericError(f"customized_pgd produced non-finite pixels at step {step}")
        if not track_weight_gradients:
            x = x.detach().requires_grad_(True)
    if not track_weight_gradients:
        x = x.detach()
    return batch.with_images(x)
