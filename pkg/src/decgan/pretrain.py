"""Pretraining of the frozen prerequisites: a generative backbone (encoder,
generator, discriminator) and an attribute classifier."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from decgan import datasets as ds
from decgan.checkpoint import module_arrays, save_checkpoint
from decgan.losses import BEGAN_GAMMA, BEGAN_LAMBDA_K, began_losses, energy, kl_standard_normal, l1_recon
from decgan.networks import (BackboneConfig, ClassifierNet, build_classifier, build_discriminator,
                             build_encoder, build_generator, classify, encode)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_checkpoint=None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


@dataclass
class PretrainConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    epochs: int = 5
    lr: float = 2e-4
    batch_size: int = 64
    seed: int = 0
    gamma: float = BEGAN_GAMMA
    lambda_k: float = BEGAN_LAMBDA_K
    kl_weight: float = 1e-5
    max_steps: int | None = None
    checkpoint_dir: str = "checkpoints"

    def __post_init__(self):
        if self.epochs <= 0 or self.lr <= 0 or self.batch_size <= 0:
            raise ValueError("epochs, lr and batch_size must be positive")


def _finite(*values):
    return all(math.isfinite(v) for v in values)


class JsonlLog:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(self.path, "w")

    def write(self, record: dict):
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _identity_(linear):
    with torch.no_grad():
        linear.weight.copy_(torch.eye(linear.weight.shape[0]))
        linear.bias.zero_()
    linear.requires_grad_(False)


def _gan_arrays(enc, G, D):
    return {**module_arrays(enc, "encoder."), **module_arrays(G, "generator."),
            **module_arrays(D, "discriminator.")}


@torch.no_grad()
def recalibrate_batchnorm(G, enc, data: ds.Dataset, batch_size: int, seed: int, max_batches: int = 100):
    """Recompute G's running statistics as an exact average over encoder
    posterior samples, the inputs a frozen G will see after pretraining."""
    norms = [m for m in G.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not norms:
        return
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    G.train()
    gen = torch.Generator().manual_seed(seed)
    for i, batch in enumerate(ds.batches(data, batch_size, seed + 7919)):
        if i >= max_batches:
            break
        G(encode(enc, batch.images, gen)[1])
    for m, mom in zip(norms, saved):
        m.momentum = mom
    G.eval()


def _lsgan(scores, target: float):
    return sum(F.mse_loss(s, torch.full_like(s, target)) for s in scores) / len(scores)


def pretrain_vaegan(data: ds.Dataset, cfg: PretrainConfig, out_dir=None) -> Path:
    """Train encoder + generator against a discriminator; returns the checkpoint path.

    The objective on the encoder/generator side is L1 reconstruction plus
    ``kl_weight`` times the posterior KL plus the adversarial generator term.
    For ``vaegan`` the adversary is a BEGAN autoencoder; for ``resgan`` a
    least-squares multiscale critic. The native encoder's final FC layer is
    pinned to the identity so the generator consumes posterior samples directly.
    """
    bb = cfg.backbone
    out = Path(out_dir or cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    enc = build_encoder(bb, cfg.seed)
    _identity_(enc.final_fc)
    G = build_generator(bb, cfg.seed + 1)
    D = build_discriminator(bb, cfg.seed + 2)
    opt_eg = torch.optim.Adam([p for p in [*enc.parameters(), *G.parameters()] if p.requires_grad],
                              lr=cfg.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
    ckpt_path = out / "gan"
    logger = JsonlLog(out / "gan_log.jsonl")
    k_t = 0.0
    step = 0
    per_epoch = ds.num_batches(data, cfg.batch_size)
    total = cfg.epochs * per_epoch if cfg.max_steps is None else min(cfg.max_steps, cfg.epochs * per_epoch)

    def save():
        return save_checkpoint(ckpt_path, kind="gan", backbone=bb.to_dict(), arrays=_gan_arrays(enc, G, D),
                               frozen={"generator."}, seed=cfg.seed,
                               extra={"steps": step, "k_t": k_t, "config": _cfg_dict(cfg)})

    save()
    try:
        for epoch in range(cfg.epochs):
            for batch in ds.batches(data, cfg.batch_size, cfg.seed, epoch=epoch):
                if step >= total:
                    break
                G.train()
                x = batch.images
                gen = torch.Generator().manual_seed(cfg.seed * 1_000_003 + step)
                post, z = encode(enc, x, gen)
                x_rec = G(z)
                z_prior = torch.randn(z.shape, generator=gen)
                x_fake = G(z_prior)

                if bb.backbone == "vaegan":
                    loss_d, _, k_next = began_losses(D, x, x_fake.detach(), k_t, cfg.gamma, cfg.lambda_k)
                else:
                    loss_d = 0.5 * (_lsgan(D(x), 1.0) + _lsgan(D(x_fake.detach()), 0.0))
                    k_next = k_t
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()

                rec = l1_recon(x_rec, x)
                kl = kl_standard_normal(post)
                adv = energy(D, x_fake) if bb.backbone == "vaegan" else _lsgan(D(x_fake), 1.0)
                loss_eg = rec + cfg.kl_weight * kl + adv
                opt_eg.zero_grad()
                loss_eg.backward()
                opt_eg.step()

                rec_v, kl_v, adv_v, d_v = rec.item(), kl.item(), adv.item(), loss_d.item()
                if not _finite(rec_v, kl_v, adv_v, d_v):
                    raise TrainingDiverged(f"non-finite loss at step {step}", ckpt_path)
                k_t = k_next
                logger.write({"step": step, "epoch": epoch, "rec": rec_v, "kl": kl_v, "adv": adv_v,
                              "loss_d": d_v, "k_t": k_t})
                step += 1
            if step >= total:
                break
            save()
            log.info("gan epoch %d rec %.4f", epoch, rec_v)
    finally:
        logger.close()
    recalibrate_batchnorm(G, enc, data, cfg.batch_size, cfg.seed)
    save()
    return ckpt_path


def _cfg_dict(cfg) -> dict:
    d = asdict(cfg)
    d.pop("checkpoint_dir", None)
    return d


def evaluate_classifier(C: ClassifierNet, data: ds.Dataset, batch_size: int = 500) -> float:
    correct = 0
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            x = torch.from_numpy(data.images[i:i + batch_size])
            correct += int((classify(C, x).argmax(1).numpy() == data.labels[i:i + batch_size]).sum())
    return correct / len(data)


def split_holdout(data: ds.Dataset, fraction: float, seed: int):
    order = np.random.default_rng(seed).permutation(len(data))
    n_hold = max(1, int(round(fraction * len(data))))
    return data.subset(np.sort(order[n_hold:])), data.subset(np.sort(order[:n_hold]))


def pretrain_classifier(data: ds.Dataset, cfg: PretrainConfig, out_dir=None,
                        heldout: ds.Dataset | None = None) -> Path:
    """Cross-entropy training of the attribute classifier.

    Held-out accuracy is measured on ``heldout`` or, if absent, on a seeded
    10% split of ``data``; it is stored in the checkpoint manifest.
    """
    bb = cfg.backbone
    if data.num_classes != bb.num_attribute_classes:
        raise ValueError(f"dataset has {data.num_classes} classes, backbone expects "
                         f"{bb.num_attribute_classes}")
    if heldout is None:
        data, heldout = split_holdout(data, 0.1, cfg.seed)
    out = Path(out_dir or cfg.checkpoint_dir)
    torch.manual_seed(cfg.seed)
    C = build_classifier(bb, cfg.seed + 3)
    opt = torch.optim.Adam(C.parameters(), lr=cfg.lr)
    logger = JsonlLog(out / "classifier_log.jsonl")
    ckpt_path = out / "classifier"
    step = 0
    per_epoch = ds.num_batches(data, cfg.batch_size)
    total = cfg.epochs * per_epoch if cfg.max_steps is None else min(cfg.max_steps, cfg.epochs * per_epoch)
    try:
        for epoch in range(cfg.epochs):
            for batch in ds.batches(data, cfg.batch_size, cfg.seed, epoch=epoch):
                if step >= total:
                    break
                loss = F.cross_entropy(C(batch.images), batch.labels)
                opt.zero_grad()
                loss.backward()
                opt.step()
                v = loss.item()
                if not math.isfinite(v):
                    raise TrainingDiverged(f"non-finite classifier loss at step {step}")
                logger.write({"step": step, "epoch": epoch, "loss": v})
                step += 1
    finally:
        logger.close()
    acc = evaluate_classifier(C, heldout)
    log.info("classifier held-out accuracy %.4f", acc)
    save_checkpoint(ckpt_path, kind="classifier", backbone=bb.to_dict(), arrays=module_arrays(C, "classifier."),
                    frozen={"classifier."}, seed=cfg.seed,
                    extra={"heldout_accuracy": acc, "feature_dim": bb.feature_dim, "steps": step,
                           "config": _cfg_dict(cfg)})
    return ckpt_path
