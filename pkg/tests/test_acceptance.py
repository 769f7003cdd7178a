"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6 and 7 train the desk-scale MNIST model end to end through the
command line (roughly 45 minutes of single-threaded CPU). Point
``DECGAN_MNIST_ROOT`` at the directory holding the four IDX files.
"""

from __future__ import annotations

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from decgan import cli
from decgan import config as cfgmod
from decgan import datasets as ds
from decgan import dec_training as dt
from decgan import evaluation as ev
from decgan import losses as L
from decgan.checkpoint import load_checkpoint, load_classifier, load_generator, param_hash
from decgan.networks import GaussianPosterior, generate
from decgan.pretrain import read_jsonl

from conftest import n_params
from test_losses import assert_gradients_match, gradient_check_cases, kl_monte_carlo

MNIST_ROOT = Path(os.environ.get("DECGAN_MNIST_ROOT", "/root/data/mnist"))
BUDGET_S = 30 * 60

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def verdicts(request):
    """Collects one line per criterion and prints them after the module."""
    lines = {}
    yield lines
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    write = reporter.write_line if reporter else print
    write("")
    for key in sorted(lines):
        write(lines[key])


def record(verdicts, key, ok: bool, detail: str) -> bool:
    key = str(key)
    line = f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}"
    verdicts[key] = line
    print(line)
    return ok


def _require_mnist():
    try:
        ds.load_mnist(MNIST_ROOT, "test")
    except (OSError, ds.DatasetError) as err:
        pytest.fail(f"MNIST IDX files unavailable under {MNIST_ROOT}: {err}")


def _config(tmp: Path, **sections) -> Path:
    doc = cfgmod.validate({})
    doc["dataset"]["root"] = str(MNIST_ROOT)
    doc["output_dir"] = str(tmp / "runs")
    for section, values in sections.items():
        doc[section].update(values)
    path = tmp / "config.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


def _run(argv) -> Path:
    """Run one CLI command in-process; returns the path it reports."""
    import contextlib
    import io
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.main([str(a) for a in argv])
    assert code == 0, f"decgan {argv[0]} exited with {code}"
    return Path(buf.getvalue().strip().splitlines()[-1])


def _pipeline(cfg: Path, evals: bool = True) -> dict:
    """pretrain-classifier -> pretrain-gan -> train-dec (-> evaluations); returns paths and timings."""
    out = {"time": {}}
    t = time.perf_counter()
    out["classifier"] = _run(["pretrain-classifier", "--config", cfg])
    out["gan"] = _run(["pretrain-gan", "--config", cfg])
    out["time"]["pretrain"] = time.perf_counter() - t
    t = time.perf_counter()
    out["dec"] = _run(["train-dec", "--config", cfg, "--g-ckpt", out["gan"], "--c-ckpt", out["classifier"]])
    out["time"]["dec"] = time.perf_counter() - t
    if evals:
        common = ["--config", cfg, "--ckpt", out["dec"]]
        out["metrics"] = {
            "swap": _run(["swap", *common]),
            "interpolate": _run(["interpolate", *common, "--mode", "content"]),
            "probe": _run(["probe", *common, "--code", "all"]),
            "fid": _run(["fid", *common]),
        }
    return out


def _metric_values(path: Path) -> dict:
    return {d["metric"]: d["value"] for d in json.loads(path.read_text())}


# ---------------------------------------------------------------- desk-scale fixtures

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """The full desk-scale MNIST run with the default configuration."""
    _require_mnist()
    tmp = tmp_path_factory.mktemp("desk")
    return _pipeline(_config(tmp))


REDUCED = {
    "pretrain": {"gan_epochs": 1, "classifier_epochs": 1, "max_steps": 40},
    "training": {"iterations": 300, "checkpoint_every": 100},
    "eval": {"fid_samples": 200, "probe_samples": 600, "swap_pairs": 100, "interp_pairs": 50},
}


@pytest.fixture(scope="module")
def reduced_runs(tmp_path_factory):
    """Two reduced-budget runs of the whole pipeline from the same config file."""
    _require_mnist()
    tmp = tmp_path_factory.mktemp("repro")
    cfg = _config(tmp, **REDUCED)
    return [_pipeline(cfg) for _ in range(2)]


# ---------------------------------------------------------------- 1

def test_1_frozen_generator_and_classifier(reduced_runs, verdicts):
    run = reduced_runs[0]
    G, g_ckpt = load_generator(run["gan"])
    C, c_ckpt = load_classifier(run["classifier"])
    before = (param_hash(G), param_hash(C), g_ckpt.hash(), c_ckpt.hash())
    cfg = dt.DecConfig(iterations=500, g_ckpt=str(run["gan"]), c_ckpt=str(run["classifier"]))
    E_c, E_a = dt.init_encoders(cfg, G.cfg, run["gan"])
    nets = dt.DecNets(E_c, E_a, G, C).make_optimizers(cfg.lr, (cfg.beta1, cfg.beta2))
    data = ds.load_mnist(MNIST_ROOT, "train")
    stream = ds.batch_stream(data, cfg.batch_size, cfg.seed)
    for step in range(500):
        dt.train_step(next(stream), nets, cfg.weights, dt.step_seeds(cfg.seed, step), check_frozen_nets=False)
    after = (param_hash(G), param_hash(C), load_checkpoint(run["gan"]).hash(),
             load_checkpoint(run["classifier"]).hash())
    ok = before == after
    record(verdicts, 1, ok, f"G {after[0][:12]} C {after[1][:12]} unchanged after 500 steps: {ok}")
    assert ok


# ---------------------------------------------------------------- 2

def test_2_additivity_bit_exact(reduced_runs, verdicts):
    G, _ = load_generator(reduced_runs[0]["gan"])
    gen = torch.Generator().manual_seed(0)
    d = G.cfg.latent_dim
    mismatches = 0
    with torch.no_grad():
        for _ in range(10):
            z_c = torch.randn((100, d), generator=gen) * 2
            z_a = torch.randn((100, d), generator=gen) * 2
            mismatches += int((~(generate(G, z_c, z_a) == G(z_c + z_a)).flatten(1).all(1)).sum())
    ok = mismatches == 0
    record(verdicts, 2, ok, f"{mismatches} of 1000 code pairs differ")
    assert ok


# ---------------------------------------------------------------- 3

def test_3_kl_closed_form(verdicts):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 9))
        mean, logvar = rng.normal(0, 1, (1, d)), rng.uniform(-2, 2, (1, d))
        closed = float(L.kl_standard_normal(GaussianPosterior(torch.from_numpy(mean), torch.from_numpy(logvar))))
        worst = max(worst, abs(kl_monte_carlo(mean, logvar, 10 ** 6, rng) - closed) / closed)

    def kl(mean, logvar):
        return float(L.kl_standard_normal(GaussianPosterior(torch.tensor(mean, dtype=torch.float64),
                                                            torch.tensor(logvar, dtype=torch.float64))))
    at_zero, at_one = kl([[0.0] * 5], [[0.0] * 5]), kl([[1.0]], [[0.0]])
    ok = worst < 0.01 and at_zero == 0.0 and at_one == 0.5
    record(verdicts, 3, ok, f"worst MC rel err {worst:.2e}; KL(0,0)={at_zero}; KL(1,0)={at_one}")
    assert ok


# ---------------------------------------------------------------- 4

def test_4_gradient_checks(toy_nets, verdicts):
    sizes = [n_params(m) for m in toy_nets]
    errors = {}
    for name, f, params in gradient_check_cases(toy_nets):
        try:
            errors[name] = assert_gradients_match(f, params)
        except AssertionError:
            errors[name] = float("inf")
    covered = {"rec", "kl_c", "kl_a", "guide", "const_c", "const_a"} <= set(errors)
    worst = max(errors.values())
    ok = covered and worst < 1e-4 and max(sizes) <= 200
    record(verdicts, 4, ok, f"worst rel err {worst:.2e} over {len(errors)} checks; toy net params {sizes}")
    assert ok


# ---------------------------------------------------------------- 5

def test_5_frechet_oracles(verdicts):
    rng = np.random.default_rng(0)

    def stats(d):
        a = rng.standard_normal((d, d))
        return ev.GaussianStats(rng.standard_normal(d), a @ a.T + 0.1 * np.eye(d))

    s = stats(6)
    equal = abs(ev.frechet_distance(s, s))
    delta = rng.standard_normal(5)
    shift_err = abs(ev.frechet_distance(ev.GaussianStats(np.zeros(5), np.eye(5)),
                                        ev.GaussianStats(delta, np.eye(5))) - float(delta @ delta))
    sa, sb = 0.7, 2.3
    one_d_err = abs(ev.frechet_distance(ev.GaussianStats(np.zeros(1), np.array([[sa ** 2]])),
                                        ev.GaussianStats(np.zeros(1), np.array([[sb ** 2]]))) - (sa - sb) ** 2)
    asym = 0.0
    for _ in range(100):
        a, b = stats(4), stats(4)
        asym = max(asym, abs(ev.frechet_distance(a, b) - ev.frechet_distance(b, a)))
    ok = equal <= 1e-8 and shift_err <= 1e-8 and one_d_err <= 1e-8 and asym <= 1e-8
    record(verdicts, 5, ok, f"equal {equal:.1e}; mean-shift err {shift_err:.1e}; 1-D err {one_d_err:.1e}; "
                            f"max asymmetry {asym:.1e}")
    assert ok


# ---------------------------------------------------------------- 6

def test_6_desk_scale_mnist(desk_run, verdicts):
    m = desk_run["metrics"]
    swap = _metric_values(m["swap"])["swap_success"]
    constancy = _metric_values(m["interpolate"])["content_constancy"]
    probe = _metric_values(m["probe"])
    gap = probe["probe_accuracy_z_a"] - probe["probe_accuracy_z_c"]
    guide = np.array([r["guide"] for r in read_jsonl(desk_run["dec"].parent / "dec_log.jsonl")])
    guide_ratio = guide[-100:].mean() / guide[:100].mean()
    times = desk_run["time"]
    parts = {
        "a": (swap >= 0.80, f"swap success {swap:.3f} (>= 0.80)"),
        "b": (constancy >= 0.80, f"content constancy {constancy:.3f} (>= 0.80)"),
        "c": (gap >= 0.20, f"probe z_a {probe['probe_accuracy_z_a']:.3f} - z_c "
                           f"{probe['probe_accuracy_z_c']:.3f} = {gap:+.3f} (>= +0.20)"),
        "d": (guide_ratio <= 0.5, f"guide end/start {guide_ratio:.3f} (<= 0.50)"),
        "budget": (times["pretrain"] <= BUDGET_S and times["dec"] <= BUDGET_S,
                   f"pretrain {times['pretrain']:.0f}s, dec {times['dec']:.0f}s (each <= {BUDGET_S}s)"),
    }
    for key, (ok, detail) in parts.items():
        record(verdicts, f"6{key}" if len(key) == 1 else "6 budget", ok, detail)
    failed = [k for k, (ok, _) in parts.items() if not ok]
    assert not failed, f"criterion 6 parts failing: {failed}"


# ---------------------------------------------------------------- 7

def test_7_fid_ordering(desk_run, verdicts):
    fids = _metric_values(desk_run["metrics"]["fid"])
    rec, noise = fids["fid_reconstruction"], fids["fid_uniform_noise"]
    ok = math.isfinite(rec) and noise >= 5 * rec
    record(verdicts, 7, ok, f"FID noise {noise:.1f} / reconstruction {rec:.1f} = {noise / rec:.1f} (>= 5)")
    assert ok


# ---------------------------------------------------------------- 8

def test_8_reproducible_runs(reduced_runs, verdicts):
    a, b = reduced_runs
    logs = [("classifier", "classifier_log.jsonl"), ("gan", "gan_log.jsonl"), ("dec", "dec_log.jsonl")]
    same_logs = all((a[k].parent / f).read_bytes() == (b[k].parent / f).read_bytes() for k, f in logs)
    same_metrics = all(a["metrics"][k].read_bytes() == b["metrics"][k].read_bytes() for k in a["metrics"])
    distinct_dirs = a["dec"] != b["dec"]
    ok = same_logs and same_metrics and distinct_dirs
    record(verdicts, 8, ok, f"loss logs identical: {same_logs}; metric JSON identical: {same_metrics}")
    assert ok


# ---------------------------------------------------------------- trained-model grid oracles

@pytest.fixture(scope="module")
def grid_stats(desk_run):
    """Statistics of random-content / random-attribute grids for 100 test digits."""
    from decgan.networks import classify
    model = dt.load_dec(desk_run["dec"])
    data = ds.load_mnist(MNIST_ROOT, "test")
    kept, var_content, var_attribute = [], [], []
    for i in range(100):
        x = data.images[i]
        content = ev.random_content_grid(x, model.E_c, model.E_a, model.G, 8, seed=i).cells[0]
        attribute = ev.random_attribute_grid(x, model.E_c, model.E_a, model.G, 8, seed=i).cells[0]
        with torch.no_grad():
            label = int(classify(model.C, torch.from_numpy(x[None])).argmax(1))
            kept.append((classify(model.C, torch.from_numpy(content)).argmax(1) == label).float().mean().item())
        var_content.append(content.var(0).mean())
        var_attribute.append(attribute.var(0).mean())
    return {"preserved": float(np.mean(kept)), "var_content": float(np.mean(var_content)),
            "var_attribute": float(np.mean(var_attribute)),
            "monotone": ev.attribute_interpolation_monotonicity(model, data, 200, 8, 0)["attribute_monotone"]}


def test_random_content_grid_keeps_label(grid_stats):
    print(f"random-content label preservation {grid_stats['preserved']:.3f}")
    assert grid_stats["preserved"] >= 0.80


def test_random_attribute_grid_varies_more_than_content_grid(grid_stats):
    print(f"cell variance: attribute grid {grid_stats['var_attribute']:.4f}, "
          f"content grid {grid_stats['var_content']:.4f}")
    assert grid_stats["var_attribute"] > grid_stats["var_content"]


def test_attribute_interpolation_mostly_monotone(grid_stats):
    print(f"attribute interpolation monotone for {grid_stats['monotone']:.3f} of pairs")
    assert grid_stats["monotone"] > 0.5
