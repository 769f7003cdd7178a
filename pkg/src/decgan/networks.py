"""Network roles for latent decomposition: encoders, generator, discriminator
and attribute classifier, for the ``vaegan`` and ``resgan`` backbones.

The generator is only ever driven through :func:`generate`, which feeds it
the elementwise sum of a content and an attribute code.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

BACKBONES = ("vaegan", "resgan")
LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
LEAK = 0.2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    backbone: str = "vaegan"
    resolution: int = 32
    channels: int = 1
    latent_dim: int = 64
    base_width: int = 32
    num_attribute_classes: int = 10

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.latent_dim < 2:
            raise ConfigError("latent_dim must be >= 2")
        if self.resolution < 8 or self.resolution % 8:
            raise ConfigError(f"resolution {self.resolution} incompatible with the 3-stage stride-2 plan")
        if self.num_attribute_classes < 2:
            raise ConfigError("num_attribute_classes must be >= 2")
        if self.channels < 1 or self.base_width < 1:
            raise ConfigError("channels and base_width must be positive")

    @property
    def bottom(self) -> int:
        return self.resolution // 8

    @property
    def widths(self) -> tuple[int, int, int]:
        w = self.base_width
        return w, 2 * w, 4 * w

    @property
    def feature_dim(self) -> int:
        """Width of the classifier's penultimate layer (the FID embedding)."""
        return 4 * self.base_width

    def to_dict(self) -> dict:
        return asdict(self)


def init_weights(module: nn.Module, seed: int) -> nn.Module:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                w = torch.randn(m.weight.shape, generator=gen, dtype=m.weight.dtype)
                # truncate at two standard deviations by resampling
                bad = w.abs() > 2
                while bad.any():
                    w[bad] = torch.randn(int(bad.sum()), generator=gen, dtype=w.dtype)
                    bad = w.abs() > 2
                m.weight.copy_(0.02 * w)
                if m.bias is not None:
                    m.bias.zero_()
    return module


class ResBlock(nn.Module):
    def __init__(self, ch: int, act: nn.Module):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.conv2 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.act = act

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


def _conv_trunk(cfg: BackboneConfig, in_ch: int, res_blocks: int = 0) -> nn.Sequential:
    w1, w2, w3 = cfg.widths
    layers = [
        nn.Conv2d(in_ch, w1, 5, 2, 2), nn.LeakyReLU(LEAK),
        nn.Conv2d(w1, w2, 5, 2, 2), nn.LeakyReLU(LEAK),
        nn.Conv2d(w2, w3, 5, 2, 2), nn.LeakyReLU(LEAK),
    ]
    layers += [ResBlock(w3, nn.LeakyReLU(LEAK)) for _ in range(res_blocks)]
    return nn.Sequential(*layers, nn.Flatten())


@dataclass
class GaussianPosterior:
    mean: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self):
        self.log_variance = self.log_variance.clamp(LOGVAR_MIN, LOGVAR_MAX)


@dataclass
class LatentTriple:
    z_c: torch.Tensor
    z_a: torch.Tensor

    @property
    def z(self) -> torch.Tensor:
        return self.z_c + self.z_a


def reparameterize(mean: torch.Tensor, log_variance: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return mean + torch.exp(0.5 * log_variance) * eps


class EncoderNet(nn.Module):
    """Conv trunk, Gaussian posterior heads, then the final FC layer that
    turns a posterior sample into a usable code."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        blocks = 4 if cfg.backbone == "resgan" else 0
        self.trunk = _conv_trunk(cfg, cfg.channels, res_blocks=blocks)
        self.heads = nn.Linear(cfg.widths[2] * cfg.bottom ** 2, 2 * cfg.latent_dim)
        self.final_fc = nn.Linear(cfg.latent_dim, cfg.latent_dim)

    def posterior(self, x: torch.Tensor) -> GaussianPosterior:
        if tuple(x.shape[1:]) != (self.cfg.channels, self.cfg.resolution, self.cfg.resolution):
            raise ValueError(f"encoder expects C x {self.cfg.resolution} x {self.cfg.resolution}, "
                             f"got {tuple(x.shape[1:])}")
        mean, logvar = self.heads(self.trunk(x)).chunk(2, dim=1)
        return GaussianPosterior(mean, logvar)

    def forward(self, x, eps=None):
        post = self.posterior(x)
        z_prime = post.mean if eps is None else reparameterize(post.mean, post.log_variance, eps)
        return post, self.final_fc(z_prime)


class GeneratorNet(nn.Module):
    """FC layer then conv upsampling to ``channels x resolution x resolution``
    with a tanh output. Batch norm keeps the deep small-init stack from
    saturating the tanh early in training; a frozen generator runs in eval
    mode, where it is a fixed affine map per layer."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w1, w2, w3 = cfg.widths
        self.fc = nn.Linear(cfg.latent_dim, w3 * cfg.bottom ** 2)
        self.fc_norm = nn.BatchNorm1d(w3 * cfg.bottom ** 2)
        if cfg.backbone == "vaegan":
            self.body = nn.Sequential(
                nn.ReLU(),
                nn.ConvTranspose2d(w3, w2, 4, 2, 1), nn.BatchNorm2d(w2), nn.ReLU(),
                nn.ConvTranspose2d(w2, w1, 4, 2, 1), nn.BatchNorm2d(w1), nn.ReLU(),
                nn.Conv2d(w1, w1, 3, 1, 1), nn.BatchNorm2d(w1), nn.ReLU(),
                # full-resolution convs are the CPU bottleneck; upsample last
                nn.ConvTranspose2d(w1, cfg.channels, 4, 2, 1),
            )
        else:
            self.body = nn.Sequential(
                nn.ReLU(),
                *[ResBlock(w3, nn.ReLU()) for _ in range(4)],
                nn.ConvTranspose2d(w3, w2, 4, 2, 1), nn.BatchNorm2d(w2), nn.ReLU(),
                nn.ConvTranspose2d(w2, w1, 4, 2, 1), nn.BatchNorm2d(w1), nn.ReLU(),
                nn.ConvTranspose2d(w1, cfg.channels, 4, 2, 1),
            )

    def forward(self, z):
        if z.shape[-1] != self.cfg.latent_dim:
            raise ValueError(f"generator expects latent_dim {self.cfg.latent_dim}, got {z.shape[-1]}")
        h = self.fc_norm(self.fc(z)).view(-1, self.cfg.widths[2], self.cfg.bottom, self.cfg.bottom)
        return torch.tanh(self.body(h))


class BeganDiscriminator(nn.Module):
    """Autoencoder discriminator; its reconstruction error is the energy."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = nn.Sequential(_conv_trunk(cfg, cfg.channels),
                                     nn.Linear(cfg.widths[2] * cfg.bottom ** 2, cfg.latent_dim))
        self.decoder = GeneratorNet(cfg)

    def forward(self, x):
        return self.decoder(self.encoder(x))

    def energy(self, x):
        return (self(x) - x).abs().mean()


class MultiscaleDiscriminator(nn.Module):
    """Five-conv patch critic applied at full and half resolution."""

    scales = (1, 2)

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w1, w2, w3 = cfg.widths
        self.trunk = nn.Sequential(
            nn.Conv2d(cfg.channels, w1, 4, 2, 1), nn.LeakyReLU(LEAK),
            nn.Conv2d(w1, w2, 4, 2, 1), nn.LeakyReLU(LEAK),
            nn.Conv2d(w2, w3, 4, 2, 1), nn.LeakyReLU(LEAK),
            nn.Conv2d(w3, w3, 3, 1, 1), nn.LeakyReLU(LEAK),
            nn.Conv2d(w3, 1, 3, 1, 1),
        )

    def forward(self, x):
        return [self.trunk(x if s == 1 else F.avg_pool2d(x, s)) for s in self.scales]


class ClassifierNet(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = _conv_trunk(cfg, cfg.channels)
        self.fc1 = nn.Linear(cfg.widths[2] * cfg.bottom ** 2, cfg.feature_dim)
        self.fc2 = nn.Linear(cfg.feature_dim, cfg.num_attribute_classes)

    def features(self, x):
        """Penultimate activations, used as the FID embedding."""
        return F.relu(self.fc1(self.trunk(x)))

    def forward(self, x):
        return self.fc2(self.features(x))


def build_encoder(cfg: BackboneConfig, seed: int = 0) -> EncoderNet:
    return init_weights(EncoderNet(cfg), seed)


def build_generator(cfg: BackboneConfig, seed: int = 0) -> GeneratorNet:
    return init_weights(GeneratorNet(cfg), seed)


def build_discriminator(cfg: BackboneConfig, seed: int = 0) -> nn.Module:
    net = BeganDiscriminator(cfg) if cfg.backbone == "vaegan" else MultiscaleDiscriminator(cfg)
    return init_weights(net, seed)


def build_classifier(cfg: BackboneConfig, seed: int = 0) -> ClassifierNet:
    return init_weights(ClassifierNet(cfg), seed)


def _generator(seed) -> torch.Generator | None:
    if seed is None or isinstance(seed, torch.Generator):
        return seed
    return torch.Generator().manual_seed(int(seed))


def encode(enc: EncoderNet, x: torch.Tensor, rng_seed=None, sample: bool = True):
    """Return ``(posterior, code)`` with code = final_fc(mean + exp(logvar/2) * eps).

    ``rng_seed`` may be an int or a ``torch.Generator``. With ``sample=False``
    the posterior mean is used instead of a draw.
    """
    post = enc.posterior(x)
    z_prime = post.mean
    if sample:
        eps = torch.randn(post.mean.shape, generator=_generator(rng_seed), dtype=post.mean.dtype)
        z_prime = reparameterize(post.mean, post.log_variance, eps)
    return post, enc.final_fc(z_prime)


def sample_code(enc: EncoderNet, batch: int, rng_seed=None) -> torch.Tensor:
    """Pass a standard normal draw through the encoder's final FC layer."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    w = enc.final_fc.weight
    z = torch.randn((batch, w.shape[1]), generator=_generator(rng_seed), dtype=w.dtype)
    return enc.final_fc(z)


def generate(G: nn.Module, z_c: torch.Tensor, z_a: torch.Tensor) -> torch.Tensor:
    if z_c.shape != z_a.shape:
        raise ValueError(f"code shapes differ: {tuple(z_c.shape)} vs {tuple(z_a.shape)}")
    return G(z_c + z_a)


def classify(C: ClassifierNet, x: torch.Tensor) -> torch.Tensor:
    return F.softmax(C(x), dim=1)
