import pytest
import torch
import torch.nn as nn

from metasurrogate import ArchitectureSpec, ExampleBatch, build_model
from metasurrogate.determinism import enable_determinism, generator


def pytest_configure(config):
    enable_determinism()


class ConstantModel(nn.Module):
    """Logits independent of the input; every input gradient is zero."""

    def __init__(self, num_classes=2, dtype=torch.float32):
        super().__init__()
        self.bias = nn.Parameter(torch.zeros(num_classes, dtype=dtype))

    def forward(self, x):
        b = x.shape[0]
        return self.bias.unsqueeze(0).expand(b, -1) + 0.0 * x.sum(dim=(1, 2, 3), keepdim=False).unsqueeze(1)


class ScalarProbe(nn.Module):
    """Two-class logits [w * sum(x), 0] on single-pixel images.

    With label 1 the untargeted loss is log(1 + exp(w*x)), whose input
    gradient has the sign of w everywhere, which makes sign-attack endpoints
    predictable in closed form.
    """

    def __init__(self, w=0.01, dtype=torch.float32):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(float(w), dtype=dtype))

    def forward(self, x):
        s = x.sum(dim=(1, 2, 3))
        zeros = torch.zeros_like(s)
        return torch.stack([self.w * s, zeros], dim=1)


def rand_batch(n=8, shape=(6, 6, 3), num_classes=4, seed=0, lo=0.0, hi=255.0,
               dtype=torch.float32):
    gen = generator(seed)
    images = torch.rand((n, *shape), generator=gen, dtype=dtype) * (hi - lo) + lo
    labels = torch.randint(0, num_classes, (n,), generator=gen)
    return ExampleBatch(images=images, labels=labels, pixel_lo=lo, pixel_hi=hi)


def tiny_classifier(seed=0, shape=(4, 4, 1), num_classes=2, widths=(2,), family="plain-cnn"):
    spec = ArchitectureSpec(family=family, block_widths=list(widths),
                            num_classes=num_classes, input_shape=shape)
    return build_model(spec, seed=seed)


def small_cnn(seed=0, shape=(8, 8, 1), num_classes=10, widths=(4, 8), family="plain-cnn"):
    spec = ArchitectureSpec(family=family, block_widths=list(widths),
                            num_classes=num_classes, input_shape=shape)
    return build_model(spec, seed=seed)


@pytest.fixture
def rng():
    return generator(1234)
