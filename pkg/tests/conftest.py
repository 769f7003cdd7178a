"""Shared fixtures: tiny float64 toy networks for gradient checks and small
real networks for fast pipeline tests."""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest
import torch
import torch.nn as nn

from decgan import datasets as ds
from decgan.networks import BackboneConfig, GaussianPosterior

torch.set_num_threads(1)


class ToyEncoder(nn.Module):
    """Pixel-linear encoder with Gaussian heads and a final FC layer."""

    def __init__(self, pixels: int, d: int):
        super().__init__()
        self.cfg = SimpleNamespace(latent_dim=d)
        self.heads = nn.Linear(pixels, 2 * d)
        self.final_fc = nn.Linear(d, d)

    def posterior(self, x):
        mean, logvar = self.heads(torch.tanh(x.flatten(1))).chunk(2, dim=1)
        return GaussianPosterior(mean, 0.3 * logvar)


class ToyGenerator(nn.Module):
    def __init__(self, d: int, shape=(1, 2, 2)):
        super().__init__()
        self.shape = shape
        self.fc1 = nn.Linear(d, 6)
        self.fc2 = nn.Linear(6, int(np.prod(shape)))

    def forward(self, z):
        return torch.tanh(self.fc2(torch.tanh(self.fc1(z)))).view(-1, *self.shape)


class ToyClassifier(nn.Module):
    def __init__(self, pixels: int, k: int):
        super().__init__()
        self.fc = nn.Linear(pixels, k)

    def forward(self, x):
        return self.fc(x.flatten(1))


def n_params(*modules) -> int:
    return sum(p.numel() for m in modules for p in m.parameters())


@pytest.fixture
def toy_nets():
    """(E_c, E_a, G, C) in float64, each well under 200 parameters."""
    torch.manual_seed(0)
    nets = (ToyEncoder(4, 3), ToyEncoder(4, 3), ToyGenerator(3), ToyClassifier(4, 3))
    return tuple(m.double() for m in nets)


@pytest.fixture(scope="session")
def tiny_backbone():
    return BackboneConfig(resolution=16, channels=1, latent_dim=8, base_width=4, num_attribute_classes=4)


@pytest.fixture(scope="session")
def synthetic16():
    return ds.make_synthetic(240, num_classes=4, resolution=16, seed=3)


@pytest.fixture(scope="session")
def tiny_pretrained(tmp_path_factory, tiny_backbone, synthetic16):
    """A briefly trained backbone + classifier on a 16x16 synthetic corpus."""
    from decgan.pretrain import PretrainConfig, pretrain_classifier, pretrain_vaegan
    out = tmp_path_factory.mktemp("tiny_pretrained")
    cfg = PretrainConfig(backbone=tiny_backbone, epochs=1, batch_size=24, seed=0)
    g = pretrain_vaegan(synthetic16, cfg, out)
    c = pretrain_classifier(synthetic16, PretrainConfig(backbone=tiny_backbone, epochs=2, lr=1e-3,
                                                        batch_size=24, seed=0), out)
    return SimpleNamespace(g=g, c=c, out=out)
