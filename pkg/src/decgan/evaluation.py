"""Swap grids, interpolations, Fréchet distance, probes and feature export
for a trained decomposition.

Unless stated otherwise, images are encoded with the posterior mean (no
reparameterisation noise), so every grid is a pure function of the
checkpoint, the inputs and the seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from decgan.config import config_hash
from decgan.datasets import Dataset
from decgan.networks import LatentTriple, classify, encode, generate, sample_code

CODES = ("z", "z_c", "z_a")
EIG_CLAMP = 1e-8


# ---------------------------------------------------------------- grids

@dataclass
class GridSpec:
    cells: np.ndarray                   # rows x cols x C x H x W, values in [-1, 1]
    row_captions: list[str]
    col_captions: list[str] = field(default_factory=list)
    title: str = ""

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.float32)
        if self.cells.ndim != 5:
            raise ValueError(f"grid cells must be rows x cols x C x H x W, got {self.cells.shape}")
        if len(self.row_captions) != self.cells.shape[0]:
            raise ValueError("one caption per row required")

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape[:2]

    def tile(self, sep: int = 2) -> np.ndarray:
        """Tile cells into an H x W x C uint8 image with ``sep``-pixel white separators."""
        rows, cols, c, h, w = self.cells.shape
        out = np.full((rows * h + (rows - 1) * sep, cols * w + (cols - 1) * sep, c), 255, np.uint8)
        pix = np.clip(np.rint((self.cells + 1.0) * 127.5), 0, 255).astype(np.uint8)
        for r in range(rows):
            for k in range(cols):
                y, x = r * (h + sep), k * (w + sep)
                out[y:y + h, x:x + w] = pix[r, k].transpose(1, 2, 0)
        return out

    def captions(self) -> dict:
        return {"title": self.title, "rows": self.row_captions, "cols": self.col_captions,
                "shape": list(self.shape)}


def _codes(E_c, E_a, x) -> LatentTriple:
    _, z_c = encode(E_c, x, sample=False)
    _, z_a = encode(E_a, x, sample=False)
    return LatentTriple(z_c, z_a)


def _batch(x) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(x, dtype=np.float32))
    return x[None] if x.ndim == 3 else x


def _np(t) -> np.ndarray:
    return t.detach().numpy()


@torch.no_grad()
def swap_pair(x1, x2, E_c, E_a, G) -> GridSpec:
    """Three-row grid for one pair: inputs, reconstructions, attribute swaps."""
    x = torch.cat([_batch(x1), _batch(x2)])
    if x.shape[0] != 2:
        raise ValueError("swap_pair takes exactly one image per side")
    t = _codes(E_c, E_a, x)
    rec = generate(G, t.z_c, t.z_a)
    swapped = generate(G, t.z_c, t.z_a.flip(0))    # content of x_i, attribute of the other
    cells = np.stack([_np(x), _np(rec), _np(swapped)])
    return GridSpec(cells, ["input", "reconstruction", "swapped attribute"],
                    ["G(z_c(x1), z_a(x2))", "G(z_c(x2), z_a(x1))"], "attribute swap")


@torch.no_grad()
def random_content_grid(x, E_c, E_a, G, n: int, seed: int = 0) -> GridSpec:
    """n outputs that keep the attribute code of ``x`` with sampled content codes."""
    t = _codes(E_c, E_a, _batch(x))
    zt_c = sample_code(E_c, n, seed)
    out = generate(G, zt_c, t.z_a.expand(n, -1))
    return GridSpec(_np(out)[None], ["fixed z_a, sampled z_c"], [f"sample {i}" for i in range(n)],
                    "random content")


@torch.no_grad()
def random_attribute_grid(x, E_c, E_a, G, n: int, seed: int = 0) -> GridSpec:
    t = _codes(E_c, E_a, _batch(x))
    zt_a = sample_code(E_a, n, seed)
    out = generate(G, t.z_c.expand(n, -1), zt_a)
    return GridSpec(_np(out)[None], ["fixed z_c, sampled z_a"], [f"sample {i}" for i in range(n)],
                    "random attribute")


def _ts(steps: int) -> torch.Tensor:
    if steps < 2:
        raise ValueError("interpolation needs steps >= 2")
    return torch.linspace(0.0, 1.0, steps)


@torch.no_grad()
def _interp_rows(x1, x2, E_c, E_a, G, steps: int, mode: str) -> torch.Tensor:
    """Interpolated outputs for a batch of pairs: pairs x steps x C x H x W."""
    a, b = _batch(x1), _batch(x2)
    t1, t2 = _codes(E_c, E_a, a), _codes(E_c, E_a, b)
    rows = []
    for t in _ts(steps):
        t = float(t)
        if mode == "content":
            z_c = t1.z_c if t == 0.0 else t2.z_c if t == 1.0 else (1 - t) * t1.z_c + t * t2.z_c
            rows.append(generate(G, z_c, t1.z_a))
        else:
            z_a = t1.z_a if t == 0.0 else t2.z_a if t == 1.0 else (1 - t) * t1.z_a + t * t2.z_a
            rows.append(generate(G, t1.z_c, z_a))
    return torch.stack(rows, dim=1)


def interpolate_content(x1, x2, E_c, E_a, G, steps: int = 8) -> GridSpec:
    """G((1-t) z_c(x1) + t z_c(x2), z_a(x1)) for t on a uniform grid over [0, 1]."""
    out = _interp_rows(x1, x2, E_c, E_a, G, steps, "content")
    return GridSpec(_np(out), [f"pair {i}" for i in range(out.shape[0])],
                    [f"t={float(t):.2f}" for t in _ts(steps)], "content interpolation")


def interpolate_attribute(x1, x2, E_c, E_a, G, steps: int = 8) -> GridSpec:
    """G(z_c(x1), (1-t) z_a(x1) + t z_a(x2))."""
    out = _interp_rows(x1, x2, E_c, E_a, G, steps, "attribute")
    return GridSpec(_np(out), [f"pair {i}" for i in range(out.shape[0])],
                    [f"t={float(t):.2f}" for t in _ts(steps)], "attribute interpolation")


# ---------------------------------------------------------------- scored studies

def _pairs(rng, n_items: int, n_pairs: int) -> np.ndarray:
    a = rng.integers(0, n_items, n_pairs)
    b = (a + rng.integers(1, n_items, n_pairs)) % n_items    # never pair an image with itself
    return np.stack([a, b], 1)


@torch.no_grad()
def swap_success(model, data: Dataset, n_pairs: int = 500, seed: int = 0, batch: int = 250) -> dict:
    """Fraction of swaps whose classifier label equals the attribute donor's label.

    Each pair yields two swaps, G(z_c(x1), z_a(x2)) with donor x2 and the
    mirror image with donor x1.
    """
    pairs = _pairs(np.random.default_rng(seed), len(data), n_pairs)
    hits = total = 0
    for s in range(0, n_pairs, batch):
        p = pairs[s:s + batch]
        x1 = torch.from_numpy(data.images[p[:, 0]])
        x2 = torch.from_numpy(data.images[p[:, 1]])
        t1, t2 = _codes(model.E_c, model.E_a, x1), _codes(model.E_c, model.E_a, x2)
        pred_12 = classify(model.C, generate(model.G, t1.z_c, t2.z_a)).argmax(1).numpy()
        pred_21 = classify(model.C, generate(model.G, t2.z_c, t1.z_a)).argmax(1).numpy()
        hits += int((pred_12 == data.labels[p[:, 1]]).sum() + (pred_21 == data.labels[p[:, 0]]).sum())
        total += 2 * len(p)
    return {"swap_success": hits / total, "n_pairs": n_pairs, "n_swaps": total}


def _same_label_pairs(rng, labels: np.ndarray, n_pairs: int) -> np.ndarray:
    out = []
    by_class = {c: np.flatnonzero(labels == c) for c in np.unique(labels)}
    classes = [c for c, idx in by_class.items() if len(idx) >= 2]
    for _ in range(n_pairs):
        idx = by_class[classes[rng.integers(len(classes))]]
        a, b = rng.choice(idx, 2, replace=False)
        out.append((a, b))
    return np.array(out)


@torch.no_grad()
def content_interpolation_constancy(model, data: Dataset, n_pairs: int = 500, steps: int = 8,
                                    seed: int = 0, batch: int = 100) -> dict:
    """Share of same-label pairs whose classifier label is constant along the row."""
    pairs = _same_label_pairs(np.random.default_rng(seed), data.labels, n_pairs)
    constant = 0
    for s in range(0, n_pairs, batch):
        p = pairs[s:s + batch]
        rows = _interp_rows(data.images[p[:, 0]], data.images[p[:, 1]], model.E_c, model.E_a, model.G,
                            steps, "content")
        pred = classify(model.C, rows.flatten(0, 1)).argmax(1).view(len(p), steps).numpy()
        constant += int((pred == pred[:, :1]).all(1).sum())
    return {"content_constancy": constant / n_pairs, "n_pairs": n_pairs, "steps": steps}


@torch.no_grad()
def attribute_interpolation_monotonicity(model, data: Dataset, n_pairs: int = 200, steps: int = 8,
                                         seed: int = 0, tol: float = 1e-6) -> dict:
    """Share of different-label pairs where C's probability for x2's class is
    nondecreasing along the attribute interpolation."""
    rng = np.random.default_rng(seed)
    pairs = _pairs(rng, len(data), 4 * n_pairs)
    pairs = pairs[data.labels[pairs[:, 0]] != data.labels[pairs[:, 1]]][:n_pairs]
    rows = _interp_rows(data.images[pairs[:, 0]], data.images[pairs[:, 1]], model.E_c, model.E_a, model.G,
                        steps, "attribute")
    probs = classify(model.C, rows.flatten(0, 1)).view(len(pairs), steps, -1).numpy()
    target = probs[np.arange(len(pairs)), :, data.labels[pairs[:, 1]]]
    mono = (np.diff(target, axis=1) >= -tol).all(1)
    return {"attribute_monotone": float(mono.mean()), "n_pairs": int(len(pairs)), "steps": steps}


# ---------------------------------------------------------------- Fréchet distance

@dataclass
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if not (np.isfinite(self.mean).all() and np.isfinite(self.covariance).all()):
            raise ValueError("non-finite Gaussian statistics")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-6, rtol=0):
            raise ValueError("covariance is not symmetric")


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased sample covariance of an N x d array."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) < 2:
        raise ValueError("need an N x d array with N >= 2")
    mu = f.mean(0)
    centered = f - mu
    cov = centered.T @ centered / (len(f) - 1)
    return GaussianStats(mu, 0.5 * (cov + cov.T))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the square root is taken from the eigenvalues of the
    symmetric matrix S_a^(1/2) S_b S_a^(1/2); eigenvalues down to -1e-8
    (relative to the largest) are treated as zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    root_a = _psd_sqrt(a.covariance)
    inner = root_a @ b.covariance @ root_a
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -EIG_CLAMP * scale:
        raise ValueError(f"covariance product has eigenvalue {vals.min():.3g}; statistics are invalid")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_sqrt)
    return max(value, 0.0)


@torch.no_grad()
def embed(embedder, images, batch: int = 500) -> np.ndarray:
    """Penultimate-layer features of ``embedder`` for an N x C x H x W array."""
    images = np.asarray(images, dtype=np.float32)
    feats = [embedder.features(torch.from_numpy(images[i:i + batch])).double().numpy()
             for i in range(0, len(images), batch)]
    return np.concatenate(feats)


def fid(set_a, set_b, embedder) -> float:
    a = set_a.images if isinstance(set_a, Dataset) else set_a
    b = set_b.images if isinstance(set_b, Dataset) else set_b
    if len(a) == 0 or len(b) == 0:
        raise ValueError("fid needs two nonempty image sets")
    return frechet_distance(gaussian_stats(embed(embedder, a)), gaussian_stats(embed(embedder, b)))


@torch.no_grad()
def reconstruct(model, images, batch: int = 500) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch):
        t = _codes(model.E_c, model.E_a, torch.from_numpy(np.asarray(images[i:i + batch])))
        out.append(_np(generate(model.G, t.z_c, t.z_a)))
    return np.concatenate(out)


def uniform_noise_images(n: int, shape, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-1.0, 1.0, (n, *shape)).astype(np.float32)


@torch.no_grad()
def interpolated_attribute_images(model, data: Dataset, n_pairs: int = 500, t: float = 0.5,
                                  seed: int = 0) -> np.ndarray:
    """Outputs G(z_c(x1), (1-t) z_a(x1) + t z_a(x2)) for random pairs."""
    p = _pairs(np.random.default_rng(seed), len(data), n_pairs)
    t1 = _codes(model.E_c, model.E_a, torch.from_numpy(data.images[p[:, 0]]))
    t2 = _codes(model.E_c, model.E_a, torch.from_numpy(data.images[p[:, 1]]))
    return _np(generate(model.G, t1.z_c, (1 - t) * t1.z_a + t * t2.z_a))


# ---------------------------------------------------------------- probes and export

class ProbeNet(nn.Module):
    def __init__(self, d: int, hidden: int, k: int):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, k)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


def linear_probe(features, labels, split_seed: int = 0, num_classes: int | None = None,
                 hidden: int = 64, epochs: int = 60, lr: float = 1e-3, batch: int = 128) -> float:
    """Held-out accuracy of a two-layer ReLU probe (softmax output) trained on
    a seeded 80/20 split of standardised features."""
    x = np.asarray(features, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    k = int(num_classes or y.max() + 1)
    if len(np.unique(y)) < 2:
        raise ValueError("probe needs at least two distinct labels")
    if len(x) < 10 * k:
        raise ValueError(f"probe needs N >= 10 * num_classes ({10 * k}), got {len(x)}")
    order = np.random.default_rng(split_seed).permutation(len(x))
    n_train = int(0.8 * len(x))
    tr, te = order[:n_train], order[n_train:]
    mu, sd = x[tr].mean(0), x[tr].std(0) + 1e-6
    xt = torch.from_numpy((x - mu) / sd)
    yt = torch.from_numpy(y)
    gen = torch.Generator().manual_seed(split_seed)
    net = ProbeNet(x.shape[1], hidden, k)
    with torch.no_grad():
        for p in net.parameters():
            p.uniform_(-1, 1, generator=gen).mul_(1.0 / np.sqrt(p.shape[-1]))
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    tr_t = torch.from_numpy(tr)
    for _ in range(epochs):
        perm = tr_t[torch.randperm(len(tr), generator=gen)]
        for i in range(0, len(perm), batch):
            idx = perm[i:i + batch]
            loss = F.cross_entropy(net(xt[idx]), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        pred = F.softmax(net(xt[te]), 1).argmax(1).numpy()
    return float((pred == y[te]).mean())


@torch.no_grad()
def extract_codes(model, data: Dataset, which: str, batch: int = 500) -> np.ndarray:
    if which not in CODES:
        raise ValueError(f"which must be one of {CODES}")
    out = []
    for i in range(0, len(data), batch):
        t = _codes(model.E_c, model.E_a, torch.from_numpy(data.images[i:i + batch]))
        out.append(_np(getattr(t, which)))
    return np.concatenate(out).astype(np.float64)


def pca_2d(features) -> np.ndarray:
    """Projection onto the top two principal axes, signs fixed so the largest
    loading of each axis is positive."""
    f = np.asarray(features, dtype=np.float64)
    centered = f - f.mean(0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:2]
    signs = np.sign(axes[np.arange(len(axes)), np.abs(axes).argmax(1)])
    return centered @ (axes * signs[:, None]).T


def export_features(model, data: Dataset, which: str, path, pca: bool = True) -> Path:
    """Write ``label,f0..f{d-1}`` rows as CSV with a JSON sidecar; optionally a
    ``.pca2d.csv`` companion with a 2-D projection."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    feats = extract_codes(model, data, which)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(feats.shape[1])])
        for lab, row in zip(data.labels, feats):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])
    sidecar = {"which": which, "d": int(feats.shape[1]), "n": int(len(feats)),
               "checkpoint_hash": getattr(model, "checkpoint_hash", None), "dataset": data.name}
    if pca:
        proj = pca_2d(feats)
        pca_path = path.with_suffix(".pca2d.csv")
        with open(pca_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "pc0", "pc1"])
            for lab, row in zip(data.labels, proj):
                w.writerow([int(lab), repr(float(row[0])), repr(float(row[1]))])
        sidecar["pca2d"] = pca_path.name
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return path


def metric_doc(metric: str, value, config: dict | str, checkpoint_hash: str | None) -> dict:
    chash = config if isinstance(config, str) else config_hash(config)
    return {"metric": metric, "value": value, "config_hash": chash, "checkpoint_hash": checkpoint_hash}
