"""``decgan`` command line: pretraining, decomposition training and every
evaluation, driven by a JSON config file plus per-command flags.

Exit codes: 0 success, 1 runtime failure, 2 invalid config or arguments,
3 missing or unreadable checkpoint.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from decgan import __version__
from decgan import config as cfgmod
from decgan import datasets as ds
from decgan import evaluation as ev
from decgan import plotting
from decgan.checkpoint import CheckpointError, code_version, load_checkpoint
from decgan.losses import LossWeights

log = logging.getLogger("decgan")

EXIT_RUNTIME, EXIT_CONFIG, EXIT_CHECKPOINT = 1, 2, 3
GRID_PAIRS = 8


class MissingCheckpoint(Exception):
    pass


# ---------------------------------------------------------------- plumbing

def _timestamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")


def make_run_dir(base, command: str) -> Path:
    """Create a fresh ``<base>/<command>-<UTC timestamp>`` directory; never reuse one."""
    base = Path(base)
    base.mkdir(parents=True, exist_ok=True)
    stem = f"{command}-{_timestamp()}"
    for i in range(10_000):
        run = base / (stem if i == 0 else f"{stem}-{i}")
        try:
            run.mkdir()
            return run
        except FileExistsError:
            continue
    raise RuntimeError(f"could not allocate a run directory under {base}")


def _require_checkpoint(path) -> Path:
    if path is None:
        raise MissingCheckpoint("a checkpoint path is required")
    p = Path(path)
    if not (p / "manifest.json").is_file() or not (p / "params.bin").is_file():
        raise MissingCheckpoint(f"checkpoint not found: {p}")
    return p


def _checkpoint_hash(path) -> str:
    return load_checkpoint(path).hash()


def write_manifest(run: Path, command: str, cfg: dict, seeds: dict, checkpoints: dict) -> Path:
    doc = {
        "command": command,
        "config": cfg,
        "config_hash": cfgmod.config_hash(cfg),
        "seeds": seeds,
        "checkpoints": {k: {"path": str(Path(v).resolve()), "hash": _checkpoint_hash(v)}
                        for k, v in checkpoints.items()},
        "tool_version": __version__,
        "code_version": code_version(),
        "torch_version": torch.__version__,
        "threads": torch.get_num_threads(),
    }
    path = run / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def write_metrics(run: Path, name: str, docs: list[dict]) -> Path:
    """Metrics as a JSON list of ``{metric, value, config_hash, checkpoint_hash}``
    plus a CSV with the same rows."""
    path = run / f"{name}.json"
    path.write_text(json.dumps(docs, indent=1, sort_keys=True))
    with open(run / f"{name}.csv", "w") as fh:
        fh.write("metric,value,config_hash,checkpoint_hash\n")
        for d in docs:
            fh.write(f"{d['metric']},{d['value']!r},{d['config_hash']},{d['checkpoint_hash']}\n")
    return path


def load_dataset(cfg: dict, split: str = "train") -> ds.Dataset:
    d = cfg["dataset"]
    if d["kind"] == "mnist":
        return ds.load_mnist(d["root"], split, resolution=d["resolution"])
    if d["kind"] == "synthetic":
        # the evaluation split is a disjoint seed of the same generator
        seed = d["data_seed"] if split == "train" else d["data_seed"] + 1
        return ds.make_synthetic(d["n"], d["num_classes"], d["resolution"], seed)
    manifest = ds.AttributeManifest.from_json(d["manifest"])
    return ds.load_manifest_dataset(d["root"], manifest, d["resolution"], channels=d["channels"])


def backbone_from(cfg: dict, data: ds.Dataset):
    from decgan.networks import BackboneConfig
    b = cfg["backbone"]
    return BackboneConfig(backbone=b["backbone"], resolution=cfg["dataset"]["resolution"],
                          channels=data.shape[0], latent_dim=b["latent_dim"], base_width=b["base_width"],
                          num_attribute_classes=data.num_classes)


def _plot_log(log_path: Path, keys, out: Path, title: str) -> None:
    from decgan.pretrain import read_jsonl
    records = read_jsonl(log_path)
    if records:
        plotting.plot_losses(records, keys, out, title)


# ---------------------------------------------------------------- commands

def cmd_pretrain_gan(args, cfg: dict, run: Path) -> Path:
    from decgan.pretrain import PretrainConfig, pretrain_vaegan
    data = load_dataset(cfg, "train")
    p = cfg["pretrain"]
    pc = PretrainConfig(backbone=backbone_from(cfg, data), epochs=p["gan_epochs"], lr=p["gan_lr"],
                        batch_size=p["gan_batch_size"], seed=cfg["training"]["seed"], kl_weight=p["kl_weight"],
                        max_steps=p["max_steps"])
    write_manifest(run, "pretrain-gan", cfg, {"seed": pc.seed}, {})
    path = pretrain_vaegan(data, pc, run)
    _plot_log(run / "gan_log.jsonl", ["rec", "adv", "loss_d"], run / "gan_losses.png", "backbone pretraining")
    return path


def cmd_pretrain_classifier(args, cfg: dict, run: Path) -> Path:
    from decgan.pretrain import PretrainConfig, pretrain_classifier
    data = load_dataset(cfg, "train")
    heldout = load_dataset(cfg, "test") if cfg["dataset"]["kind"] != "manifest" else None
    p = cfg["pretrain"]
    pc = PretrainConfig(backbone=backbone_from(cfg, data), epochs=p["classifier_epochs"], lr=p["classifier_lr"],
                        batch_size=p["gan_batch_size"], seed=cfg["training"]["seed"], max_steps=p["max_steps"])
    write_manifest(run, "pretrain-classifier", cfg, {"seed": pc.seed}, {})
    path = pretrain_classifier(data, pc, run, heldout=heldout)
    acc = load_checkpoint(path).extra["heldout_accuracy"]
    write_metrics(run, "metrics", [ev.metric_doc("classifier_heldout_accuracy", acc, cfg,
                                                 _checkpoint_hash(path))])
    _plot_log(run / "classifier_log.jsonl", ["loss"], run / "classifier_loss.png", "classifier pretraining")
    return path


def cmd_train_dec(args, cfg: dict, run: Path) -> Path:
    from decgan.dec_training import DecConfig, train
    g_ckpt, c_ckpt = _require_checkpoint(args.g_ckpt), _require_checkpoint(args.c_ckpt)
    data = load_dataset(cfg, "train")
    t = cfg["training"]
    dc = DecConfig(weights=LossWeights.from_lambdas(cfgmod.lambdas(cfg)), iterations=t["iterations"],
                   batch_size=t["batch_size"], seed=t["seed"], init_mode=t["init_mode"], g_ckpt=str(g_ckpt),
                   c_ckpt=str(c_ckpt), lr=t["lr"], update_order=t["update_order"],
                   checkpoint_every=t["checkpoint_every"], check_frozen_every=100)
    write_manifest(run, "train-dec", cfg, {"seed": dc.seed}, {"generator": g_ckpt, "classifier": c_ckpt})
    path = train(dc, data, run)
    _plot_log(run / "dec_log.jsonl", ["rec", "guide", "const_c", "const_a"], run / "dec_losses.png",
              "decomposition training")
    return path


def _load_model(args):
    from decgan.dec_training import load_dec
    return load_dec(_require_checkpoint(args.ckpt))


def _eval_data(cfg: dict, model) -> ds.Dataset:
    data = load_dataset(cfg, cfg["dataset"]["eval_split"])
    if data.shape != (model.backbone.channels, model.backbone.resolution, model.backbone.resolution):
        raise CheckpointError(f"dataset geometry {data.shape} does not match the checkpoint")
    return data


def cmd_swap(args, cfg: dict, run: Path) -> Path:
    model = _load_model(args)
    e = cfg["eval"]
    write_manifest(run, "swap", cfg, {"eval_seed": e["eval_seed"]}, {"dec": args.ckpt})
    data = _eval_data(cfg, model)
    rng = np.random.default_rng(e["eval_seed"])
    pairs = ev._pairs(rng, len(data), min(GRID_PAIRS, e["swap_pairs"]))
    for i, (a, b) in enumerate(pairs):
        grid = ev.swap_pair(data.images[a], data.images[b], model.E_c, model.E_a, model.G)
        plotting.save_grid(grid, run / f"swap_{i:02d}.png")
        if i == 0:
            plotting.plot_grid(grid, run / "swap_figure.png")
    x = data.images[pairs[0, 0]]
    plotting.save_grid(ev.random_content_grid(x, model.E_c, model.E_a, model.G, 8, e["eval_seed"]),
                       run / "random_content.png")
    plotting.save_grid(ev.random_attribute_grid(x, model.E_c, model.E_a, model.G, 8, e["eval_seed"]),
                       run / "random_attribute.png")
    res = ev.swap_success(model, data, e["swap_pairs"], e["eval_seed"])
    return write_metrics(run, "metrics", [ev.metric_doc("swap_success", res["swap_success"], cfg,
                                                        model.checkpoint_hash)])


def cmd_interpolate(args, cfg: dict, run: Path) -> Path:
    model = _load_model(args)
    e = cfg["eval"]
    write_manifest(run, "interpolate", cfg, {"eval_seed": e["eval_seed"]}, {"dec": args.ckpt})
    data = _eval_data(cfg, model)
    steps = e["interp_steps"]
    if steps < 2:
        raise cfgmod.ConfigError("interpolation needs --steps >= 2")
    rng = np.random.default_rng(e["eval_seed"])
    pairs = ev._pairs(rng, len(data), GRID_PAIRS)
    interp = ev.interpolate_content if args.mode == "content" else ev.interpolate_attribute
    rows = [interp(data.images[a], data.images[b], model.E_c, model.E_a, model.G, steps) for a, b in pairs]
    grid = ev.GridSpec(np.concatenate([g.cells for g in rows]), [f"pair {i}" for i in range(len(rows))],
                       rows[0].col_captions, f"{args.mode} interpolation")
    plotting.save_grid(grid, run / f"interpolate_{args.mode}.png")
    plotting.plot_grid(grid, run / f"interpolate_{args.mode}_figure.png")
    if args.mode == "content":
        res = ev.content_interpolation_constancy(model, data, e["interp_pairs"], steps, e["eval_seed"])
        doc = ev.metric_doc("content_constancy", res["content_constancy"], cfg, model.checkpoint_hash)
    else:
        res = ev.attribute_interpolation_monotonicity(model, data, e["interp_pairs"], steps, e["eval_seed"])
        doc = ev.metric_doc("attribute_monotone", res["attribute_monotone"], cfg, model.checkpoint_hash)
    return write_metrics(run, "metrics", [doc])


def cmd_fid(args, cfg: dict, run: Path) -> Path:
    from decgan.checkpoint import load_classifier
    model = _load_model(args)
    e = cfg["eval"]
    embedder_path = _require_checkpoint(args.embedder_ckpt) if args.embedder_ckpt else None
    write_manifest(run, "fid", cfg, {"eval_seed": e["eval_seed"]},
                   {"dec": args.ckpt, **({"embedder": embedder_path} if embedder_path else {})})
    embedder = load_classifier(embedder_path)[0] if embedder_path else model.C
    data = _eval_data(cfg, model)
    n = min(e["fid_samples"], len(data) // 2)
    order = np.random.default_rng(e["eval_seed"]).permutation(len(data))
    real = data.images[order[:n]]
    source = data.subset(np.sort(order[n:2 * n]))
    fake = {
        "reconstruction": ev.reconstruct(model, source.images),
        "uniform_noise": ev.uniform_noise_images(n, data.shape, e["eval_seed"]),
        "attribute_interpolation_t0.5": ev.interpolated_attribute_images(model, source, n, 0.5, e["eval_seed"]),
    }
    docs = [ev.metric_doc(f"fid_{k}", ev.fid(real, v, embedder), cfg, model.checkpoint_hash)
            for k, v in fake.items()]
    return write_metrics(run, "metrics", docs)


def cmd_probe(args, cfg: dict, run: Path) -> Path:
    model = _load_model(args)
    e = cfg["eval"]
    write_manifest(run, "probe", cfg, {"probe_split_seed": e["probe_split_seed"]}, {"dec": args.ckpt})
    data = _eval_data(cfg, model)
    data = data.subset(np.arange(min(e["probe_samples"], len(data))))
    codes = ev.CODES if args.code == "all" else (args.code,)
    docs = []
    for which in codes:
        acc = ev.linear_probe(ev.extract_codes(model, data, which), data.labels, e["probe_split_seed"],
                              data.num_classes)
        docs.append(ev.metric_doc(f"probe_accuracy_{which}", acc, cfg, model.checkpoint_hash))
    return write_metrics(run, "metrics", docs)


def cmd_export_features(args, cfg: dict, run: Path) -> Path:
    model = _load_model(args)
    write_manifest(run, "export-features", cfg, {}, {"dec": args.ckpt})
    data = _eval_data(cfg, model)
    data = data.subset(np.arange(min(cfg["eval"]["probe_samples"], len(data))))
    path = ev.export_features(model, data, args.code, run / f"features_{args.code}.csv")
    proj = np.loadtxt(path.with_suffix(".pca2d.csv"), delimiter=",", skiprows=1)
    plotting.plot_scatter_2d(proj[:, 1:], proj[:, 0].astype(int), run / f"features_{args.code}_pca.png",
                             f"{args.code} (PCA)")
    return path


COMMANDS = {
    "pretrain-gan": cmd_pretrain_gan,
    "pretrain-classifier": cmd_pretrain_classifier,
    "train-dec": cmd_train_dec,
    "swap": cmd_swap,
    "interpolate": cmd_interpolate,
    "fid": cmd_fid,
    "probe": cmd_probe,
    "export-features": cmd_export_features,
}

# flag dest -> config key it overrides
_FLAG_KEYS = {
    "seed": "seed", "iterations": "iterations", "init_mode": "init_mode", "update_order": "update_order",
    "gan_epochs": "gan_epochs", "classifier_epochs": "classifier_epochs", "max_steps": "max_steps",
    "pairs": "swap_pairs", "steps": "interp_steps", "n": "fid_samples", "eval_seed": "eval_seed",
    "out": "output_dir", "backbone": "backbone", "base_width": "base_width",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="decgan", description=__doc__.split("\n\n")[0].replace("\n", " "))
    parser.add_argument("--version", action="version", version=f"decgan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", help="output directory (a timestamped run directory is created inside)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    for name, help_ in (("pretrain-gan", "pretrain the encoder/generator/discriminator backbone"),
                        ("pretrain-classifier", "pretrain the attribute classifier")):
        p = add(name, help_)
        p.add_argument("--seed", type=int)
        p.add_argument("--max-steps", type=int)
        p.add_argument("--backbone", choices=("vaegan", "resgan"))
        p.add_argument("--base-width", type=int)
        if name == "pretrain-gan":
            p.add_argument("--gan-epochs", type=int)
        else:
            p.add_argument("--classifier-epochs", type=int)

    p = add("train-dec", "learn content/attribute encoders against a frozen G and C")
    p.add_argument("--g-ckpt", required=True, help="backbone checkpoint holding G")
    p.add_argument("--c-ckpt", required=True, help="classifier checkpoint")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--init-mode", choices=("scratch", "from_pretrained_encoder"))
    p.add_argument("--update-order", choices=("sequential", "simultaneous"))

    p = add("swap", "attribute-swap grids and swap success")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", type=int)
    p.add_argument("--seed", dest="eval_seed", type=int)

    p = add("interpolate", "content or attribute interpolation grids")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("content", "attribute"), default="content")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", dest="eval_seed", type=int)

    p = add("fid", "Fréchet distances of reconstructions, noise and interpolations to real images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--embedder-ckpt", help="classifier checkpoint used as embedder (default: the training C)")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", dest="eval_seed", type=int)

    p = add("probe", "two-layer probe accuracy of a code on the labels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--code", choices=(*ev.CODES, "all"), default="all")

    p = add("export-features", "export codes as CSV with a PCA scatter")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--code", choices=ev.CODES, default="z_a")
    return parser


def resolve_config(args) -> dict:
    cfg = cfgmod.load_config(args.config)
    overrides = {key: getattr(args, dest) for dest, key in _FLAG_KEYS.items() if hasattr(args, dest)}
    return cfgmod.apply_overrides(cfg, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):       # --help / --version
            raise
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except cfgmod.ConfigError as err:
        print(f"decgan: invalid config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    # reference mode: single-threaded, deterministic kernels
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        for attr in ("ckpt", "g_ckpt", "c_ckpt", "embedder_ckpt"):
            if getattr(args, attr, None):
                _require_checkpoint(getattr(args, attr))
        run = make_run_dir(cfg["output_dir"], args.command)
        result = COMMANDS[args.command](args, cfg, run)
    except cfgmod.ConfigError as err:
        print(f"decgan: invalid config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingCheckpoint, CheckpointError) as err:
        print(f"decgan: checkpoint error: {err}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except Exception as err:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"decgan: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
