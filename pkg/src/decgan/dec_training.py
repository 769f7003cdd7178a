"""Learn content and attribute encoders against a frozen generator and a
frozen attribute classifier.

Each step draws one standard-normal latent per batch row, maps it through
both encoders' final FC layers to get random content/attribute codes,
evaluates the six objectives, then updates the content encoder with its
weighted total and the attribute encoder with its own. Gradients of one
total never update the other encoder.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from decgan import datasets as ds
from decgan.checkpoint import (CheckpointError, backbone_config, check_frozen, hash_arrays, load_checkpoint,
                               load_classifier, load_generator, module_arrays, optimizer_arrays,
                               param_hash, restore_optimizer, save_checkpoint, trainable_parameters)
from decgan.losses import (LossReport, LossWeights, attribute_consistency, content_consistency, guide_loss,
                           kl_standard_normal, l1_recon, total_Ea, total_Ec)
from decgan.networks import BackboneConfig, EncoderNet, build_encoder, encode, generate

log = logging.getLogger(__name__)

INIT_MODES = ("scratch", "from_pretrained_encoder")
UPDATE_ORDERS = ("sequential", "simultaneous")


class NonFiniteLoss(RuntimeError):
    def __init__(self, report: LossReport, step: int | None = None):
        super().__init__(f"non-finite loss at step {step}: {report}")
        self.report = report
        self.step = step


@dataclass
class DecConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    iterations: int = 1000
    batch_size: int = ds.DEFAULT_BATCH_SIZE
    seed: int = 0
    init_mode: str = "scratch"
    g_ckpt: str | None = None
    c_ckpt: str | None = None
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    update_order: str = "sequential"
    recode_sample: bool = True
    checkpoint_every: int = 500
    check_frozen_every: int = 1

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")
        if self.update_order not in UPDATE_ORDERS:
            raise ValueError(f"update_order must be one of {UPDATE_ORDERS}")
        if self.iterations < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("iterations >= 0, batch_size >= 1 and lr > 0 required")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecNets:
    E_c: EncoderNet
    E_a: EncoderNet
    G: torch.nn.Module
    C: torch.nn.Module
    opt_c: torch.optim.Optimizer | None = None
    opt_a: torch.optim.Optimizer | None = None

    def make_optimizers(self, lr: float = 1e-4, betas=(0.5, 0.999)):
        self.opt_c = torch.optim.Adam(trainable_parameters(self.E_c), lr=lr, betas=betas)
        self.opt_a = torch.optim.Adam(trainable_parameters(self.E_a), lr=lr, betas=betas)
        return self


def init_encoders(cfg: DecConfig, backbone: BackboneConfig, pretrained=None):
    """Build ``(E_c, E_a)``. The attribute encoder always starts from scratch;
    in ``from_pretrained_encoder`` mode the content encoder copies the trunk
    and posterior heads of the backbone's encoder. Final FC layers are fresh.
    """
    E_a = build_encoder(backbone, cfg.seed + 101)
    E_c = build_encoder(backbone, cfg.seed + 102)
    if cfg.init_mode == "from_pretrained_encoder":
        if pretrained is None:
            raise ValueError("from_pretrained_encoder needs a backbone checkpoint")
        ckpt = pretrained if hasattr(pretrained, "arrays") else load_checkpoint(pretrained)
        src = ckpt.prefixed("encoder.")
        with torch.no_grad():
            for name, p in E_c.named_parameters():
                if name.startswith("final_fc."):
                    continue
                if name not in src or tuple(src[name].shape) != tuple(p.shape):
                    raise CheckpointError(f"pretrained encoder does not match E_c at {name}")
                p.copy_(torch.from_numpy(src[name]))
    return E_c, E_a


def step_seeds(seed: int, step: int) -> list[int]:
    """Five independent stream seeds for one step: latent draw, E_c/E_a
    reparameterisation, E_c/E_a re-encoding."""
    return [int(s) for s in np.random.SeedSequence([seed, step]).generate_state(5)]


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _apply(params, loss, opt):
    grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g
    opt.step()


def _check(report: LossReport, step=None):
    if not all(math.isfinite(v) for v in asdict(report).values()):
        raise NonFiniteLoss(report, step)


def compute_objectives(x, nets: DecNets, seeds, grad_c: bool, grad_a: bool, recode_sample: bool = True,
                       content_terms: bool = True):
    """Evaluate the six objectives; returns a dict of scalar tensors.

    ``grad_c`` / ``grad_a`` select which encoder's forward pass is recorded
    for autograd; the other is run under ``no_grad``. ``content_terms=False``
    skips the content-consistency term.
    """
    z_seed, c_seed, a_seed, rc_seed, ra_seed = seeds
    E_c, E_a, G, C = nets.E_c, nets.E_a, nets.G, nets.C
    z_tilde = torch.randn((x.shape[0], E_c.cfg.latent_dim), generator=_gen(z_seed), dtype=x.dtype)
    with torch.set_grad_enabled(grad_c):
        post_c, z_c = encode(E_c, x, _gen(c_seed))
        zt_c = E_c.final_fc(z_tilde)
    with torch.set_grad_enabled(grad_a):
        post_a, z_a = encode(E_a, x, _gen(a_seed))
        zt_a = E_a.final_fc(z_tilde)
    out = {
        "rec": l1_recon(generate(G, z_c, z_a), x),
        "kl_c": kl_standard_normal(post_c),
        "kl_a": kl_standard_normal(post_a),
    }
    if content_terms:
        with torch.set_grad_enabled(grad_c):
            out["const_c"] = content_consistency(E_c, G, z_c, zt_a, _gen(rc_seed), sample=recode_sample)
    with torch.set_grad_enabled(grad_a):
        out["guide"] = guide_loss(C, x, generate(G, zt_c, z_a))
        out["const_a"] = attribute_consistency(E_a, G, zt_c, z_a, _gen(ra_seed), sample=recode_sample)
    return out


def _report(values: dict, w: LossWeights) -> LossReport:
    v = {k: float(t.detach()) for k, t in values.items()}
    return LossReport(rec=v["rec"], kl_c=v["kl_c"], kl_a=v["kl_a"], guide=v["guide"],
                      const_c=v["const_c"], const_a=v["const_a"],
                      total_Ec=total_Ec(v, w), total_Ea=total_Ea(v, w))


def train_step(batch, nets: DecNets, w: LossWeights, step_seed, update_order: str = "sequential",
               recode_sample: bool = True, check_frozen_nets: bool = True, step: int | None = None) -> LossReport:
    """One decomposition update; returns the losses of the step's first forward pass.

    ``step_seed`` is an int (expanded with :func:`step_seeds`) or a list of five
    stream seeds. In ``sequential`` order the attribute encoder's update is
    computed from a fresh forward pass against the already-updated content
    encoder, replaying the same random draws.
    """
    if nets.opt_c is None:
        raise ValueError("DecNets has no optimizers; call make_optimizers() first")
    if check_frozen_nets:
        check_frozen(nets.G, "generator")
        check_frozen(nets.C, "classifier")
    x = batch.images if hasattr(batch, "images") else batch
    seeds = step_seeds(step_seed, 0) if isinstance(step_seed, int) else list(step_seed)
    params_c = list(nets.E_c.parameters())
    params_a = list(nets.E_a.parameters())

    if update_order == "simultaneous":
        values = compute_objectives(x, nets, seeds, True, True, recode_sample)
        report = _report(values, w)
        _check(report, step)
        loss_c, loss_a = total_Ec(values, w), total_Ea(values, w)
        grads_c = torch.autograd.grad(loss_c, params_c, retain_graph=True, allow_unused=True)
        grads_a = torch.autograd.grad(loss_a, params_a, allow_unused=True)
        for params, grads, opt in ((params_c, grads_c, nets.opt_c), (params_a, grads_a, nets.opt_a)):
            for p, g in zip(params, grads):
                p.grad = torch.zeros_like(p) if g is None else g
            opt.step()
    elif update_order == "sequential":
        values = compute_objectives(x, nets, seeds, True, False, recode_sample)
        report = _report(values, w)
        _check(report, step)
        _apply(params_c, total_Ec(values, w), nets.opt_c)
        values_a = compute_objectives(x, nets, seeds, False, True, recode_sample, content_terms=False)
        loss_a = total_Ea(values_a, w)
        if not math.isfinite(float(loss_a.detach())):
            raise NonFiniteLoss(_report({**values_a, "const_c": values["const_c"]}, w), step)
        _apply(params_a, loss_a, nets.opt_a)
    else:
        raise ValueError(f"unknown update_order {update_order!r}")

    if check_frozen_nets:
        check_frozen(nets.G, "generator")
        check_frozen(nets.C, "classifier")
    return report


def _dec_arrays(nets: DecNets):
    arrays = {**module_arrays(nets.E_c, "content_encoder."), **module_arrays(nets.E_a, "attribute_encoder.")}
    opt_state = {}
    if nets.opt_c is not None:
        for tag, enc, opt in (("content", nets.E_c, nets.opt_c), ("attribute", nets.E_a, nets.opt_a)):
            extra_arrays, state = optimizer_arrays(opt, dict(enc.named_parameters()), f"optim.{tag}.")
            arrays.update(extra_arrays)
            opt_state[tag] = state
    return arrays, opt_state


def save_dec(path, nets: DecNets, cfg: DecConfig, step: int, frozen_refs: dict) -> Path:
    arrays, opt_state = _dec_arrays(nets)
    return save_checkpoint(path, kind="dec", backbone=nets.E_c.cfg.to_dict(), arrays=arrays, seed=cfg.seed,
                           extra={"steps": step, "optimizer": opt_state, "config": cfg.to_dict(), **frozen_refs})


@dataclass
class DecModel:
    """Trained encoders plus the frozen networks they were trained against."""
    E_c: EncoderNet
    E_a: EncoderNet
    G: torch.nn.Module
    C: torch.nn.Module
    backbone: BackboneConfig
    checkpoint_hash: str
    path: Path | None = None

    def nets(self) -> DecNets:
        return DecNets(self.E_c, self.E_a, self.G, self.C)


def _resolve(ref: str, base: Path) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else (base / p)


def load_dec(path, verify_frozen: bool = True, with_optimizers: bool = False) -> DecModel:
    path = Path(path)
    ckpt = load_checkpoint(path)
    if ckpt.kind != "dec":
        raise CheckpointError(f"{path}: expected a dec checkpoint, found {ckpt.kind!r}")
    bb = backbone_config(ckpt)
    E_c = ckpt.load_module(EncoderNet(bb), "content_encoder.")
    E_a = ckpt.load_module(EncoderNet(bb), "attribute_encoder.")
    extra = ckpt.extra
    G, _ = load_generator(_resolve(extra["g_ckpt"], path))
    C, _ = load_classifier(_resolve(extra["c_ckpt"], path))
    if verify_frozen:
        if param_hash(G) != extra["g_hash"] or param_hash(C) != extra["c_hash"]:
            raise CheckpointError(f"{path}: referenced generator/classifier changed since training")
    arrays = {k: v for k, v in ckpt.arrays.items() if not k.startswith("optim.")}
    model = DecModel(E_c, E_a, G, C, bb, hash_arrays(arrays), path)
    if with_optimizers:
        cfg = extra["config"]
        nets = model.nets().make_optimizers(cfg["lr"], (cfg["beta1"], cfg["beta2"]))
        for tag, enc, opt in (("content", E_c, nets.opt_c), ("attribute", E_a, nets.opt_a)):
            restore_optimizer(opt, dict(enc.named_parameters()), ckpt, f"optim.{tag}.",
                              extra["optimizer"].get(tag, {}))
        model._nets = nets
    return model


def train(cfg: DecConfig, data: ds.Dataset, out_dir, resume: bool = True, max_steps: int | None = None) -> Path:
    """Run the decomposition loop; writes ``dec/`` checkpoints, ``dec_log.jsonl``
    and ``dec_manifest.json`` under ``out_dir`` and returns the checkpoint path.

    With ``resume`` an existing ``dec/`` checkpoint in ``out_dir`` is continued
    from its recorded step. ``max_steps`` stops early (simulating an
    interruption) without changing the configured iteration budget.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.g_ckpt is None or cfg.c_ckpt is None:
        raise ValueError("DecConfig needs g_ckpt and c_ckpt")
    G, g_ckpt = load_generator(cfg.g_ckpt)
    C, c_ckpt = load_classifier(cfg.c_ckpt)
    bb = backbone_config(g_ckpt)
    if (C.cfg.resolution, C.cfg.channels) != (bb.resolution, bb.channels):
        raise CheckpointError("classifier and generator disagree on image geometry")
    frozen_refs = {"g_ckpt": str(Path(cfg.g_ckpt).resolve()), "c_ckpt": str(Path(cfg.c_ckpt).resolve()),
                   "g_hash": param_hash(G), "c_hash": param_hash(C)}
    ckpt_path = out / "dec"
    log_path = out / "dec_log.jsonl"
    start = 0
    if resume and (ckpt_path / "manifest.json").exists():
        model = load_dec(ckpt_path, with_optimizers=True)
        nets = model._nets
        nets.G, nets.C = G, C
        start = load_checkpoint(ckpt_path).extra["steps"]
        records = [line for line in log_path.read_text().splitlines() if line.strip()][:start] \
            if log_path.exists() else []
        log_path.write_text("".join(r + "\n" for r in records))
        log.info("resuming decomposition training at step %d", start)
    else:
        E_c, E_a = init_encoders(cfg, bb, g_ckpt)
        nets = DecNets(E_c, E_a, G, C).make_optimizers(cfg.lr, (cfg.beta1, cfg.beta2))
        log_path.write_text("")

    manifest = {"config": cfg.to_dict(), "lambdas": list(cfg.weights.as_lambdas()), "seed": cfg.seed,
                "backbone": bb.to_dict(), **frozen_refs}
    (out / "dec_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    stop = cfg.iterations if max_steps is None else min(cfg.iterations, start + max_steps)
    stream = ds.batch_stream(data, cfg.batch_size, cfg.seed, start_step=start)
    step = start
    with open(log_path, "a") as fh:
        for step in range(start, stop):
            batch = next(stream)
            check = cfg.check_frozen_every > 0 and step % cfg.check_frozen_every == 0
            report = train_step(batch, nets, cfg.weights, step_seeds(cfg.seed, step), cfg.update_order,
                                cfg.recode_sample, check_frozen_nets=check, step=step)
            fh.write(json.dumps(report.to_record(step)) + "\n")
            if (step + 1) % cfg.checkpoint_every == 0:
                fh.flush()
                save_dec(ckpt_path, nets, cfg, step + 1, frozen_refs)
            if step % 100 == 0:
                log.info("dec step %d guide %.4f rec %.4f", step, report.guide, report.rec)
        step = stop
    check_frozen(G, "generator")
    check_frozen(C, "classifier")
    save_dec(ckpt_path, nets, cfg, step, frozen_refs)
    return ckpt_path
