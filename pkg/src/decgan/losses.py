"""Decomposition objectives, closed-form Gaussian KL, and BEGAN pretraining
losses. Every ``|a - b|`` objective uses mean reduction over batch and
elements, so the loss weights do not depend on image or code size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch

from decgan.networks import GaussianPosterior, classify, encode, generate

BEGAN_GAMMA = 0.5
BEGAN_LAMBDA_K = 0.001


@dataclass(frozen=True)
class LossWeights:
    rec: float = 5.0          # λ1
    kl_c: float = 1e-5        # λ2
    const_c: float = 1.0      # λ3
    kl_a: float = 1e-5        # λ4
    const_a: float = 1.0      # λ5
    guide: float = 5.0        # λ6

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and v < float("inf")):
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    def as_lambdas(self) -> tuple[float, ...]:
        """(λ1, ..., λ6) in the conventional order."""
        return (self.rec, self.kl_c, self.const_c, self.kl_a, self.const_a, self.guide)

    @classmethod
    def from_lambdas(cls, lambdas) -> "LossWeights":
        l1, l2, l3, l4, l5, l6 = lambdas
        return cls(rec=l1, kl_c=l2, const_c=l3, kl_a=l4, const_a=l5, guide=l6)


@dataclass
class LossReport:
    rec: float
    kl_c: float
    kl_a: float
    guide: float
    const_c: float
    const_a: float
    total_Ec: float
    total_Ea: float

    def to_record(self, step: int) -> dict:
        return {"step": step, **asdict(self)}


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_recon(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    _check_shapes(x_hat, x)
    return (x_hat - x).abs().mean()


def kl_standard_normal(p: GaussianPosterior) -> torch.Tensor:
    """Batch mean of KL(N(mean, exp(logvar)) || N(0, I)) in closed form."""
    if not (torch.isfinite(p.mean).all() and torch.isfinite(p.log_variance).all()):
        raise ValueError("non-finite posterior parameters")
    mu, lv = p.mean, p.log_variance
    per_row = 0.5 * (mu.pow(2) + lv.exp() - 1.0 - lv).sum(dim=1)
    return per_row.mean()


def guide_loss(C, x: torch.Tensor, x_swapped: torch.Tensor) -> torch.Tensor:
    """Mean |C(x) - C(x_swapped)| over softmax probabilities; C(x) is a constant."""
    _check_shapes(x, x_swapped)
    with torch.no_grad():
        target = classify(C, x)
    return (target - classify(C, x_swapped)).abs().mean()


def content_consistency(E_c, G, z_c: torch.Tensor, z_tilde_a: torch.Tensor,
                        rng_seed=None, sample: bool = True) -> torch.Tensor:
    """|E_c(G(z_c + z~_a)) - z_c|: re-encoding must recover the content code."""
    _check_shapes(z_c, z_tilde_a)
    _, recoded = encode(E_c, generate(G, z_c, z_tilde_a), rng_seed, sample=sample)
    return (recoded - z_c).abs().mean()


def attribute_consistency(E_a, G, z_tilde_c: torch.Tensor, z_a: torch.Tensor,
                          rng_seed=None, sample: bool = True) -> torch.Tensor:
    """|E_a(G(z~_c + z_a)) - z_a|: re-encoding must recover the attribute code."""
    _check_shapes(z_tilde_c, z_a)
    _, recoded = encode(E_a, generate(G, z_tilde_c, z_a), rng_seed, sample=sample)
    return (recoded - z_a).abs().mean()


def total_Ec(losses, w: LossWeights):
    """λ1·rec + λ2·kl_c + λ3·const_c; ``losses`` is any object with those attributes or keys."""
    get = losses.__getitem__ if isinstance(losses, dict) else lambda k: getattr(losses, k)
    return w.rec * get("rec") + w.kl_c * get("kl_c") + w.const_c * get("const_c")


def total_Ea(losses, w: LossWeights):
    get = losses.__getitem__ if isinstance(losses, dict) else lambda k: getattr(losses, k)
    return (w.rec * get("rec") + w.kl_a * get("kl_a") + w.const_a * get("const_a")
            + w.guide * get("guide"))


def energy(D, u: torch.Tensor) -> torch.Tensor:
    return (D(u) - u).abs().mean()


def began_losses(D, x_real, x_fake, k_t: float, gamma: float = BEGAN_GAMMA,
                 lambda_k: float = BEGAN_LAMBDA_K):
    """Return ``(L_D, L_G, k_next)``; ``k_next`` is a detached float in [0, 1]."""
    if not 0.0 <= k_t <= 1.0:
        raise ValueError(f"k_t must lie in [0, 1], got {k_t}")
    _check_shapes(x_real, x_fake)
    e_real = energy(D, x_real)
    e_fake = energy(D, x_fake)
    loss_d = e_real - k_t * e_fake
    loss_g = e_fake
    k_next = k_t + lambda_k * (gamma * e_real.item() - e_fake.item())
    return loss_d, loss_g, min(max(k_next, 0.0), 1.0)
