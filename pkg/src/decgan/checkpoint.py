"""On-disk network checkpoints and the frozen-parameter contract.

A checkpoint is a directory holding ``manifest.json`` and ``params.bin``.
``params.bin`` is every array concatenated in manifest order as
little-endian float32; the manifest records names, shapes, byte offsets and
per-array frozen flags.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

FORMAT = "decgan-checkpoint/1"
DTYPE = "f32"
_LE_F32 = np.dtype("<f4")


class CheckpointError(RuntimeError):
    pass


class FrozenParameterError(RuntimeError):
    pass


def code_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from decgan import __version__
    return __version__


def module_tensors(module: nn.Module) -> dict[str, torch.Tensor]:
    """Parameters followed by buffers (batch-norm running statistics)."""
    return {**dict(module.named_parameters()), **dict(module.named_buffers())}


def module_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + name: t.detach().cpu().numpy().astype(_LE_F32)
            for name, t in module_tensors(module).items()}


def hash_arrays(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name, arr in arrays.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())
    return h.hexdigest()


def param_hash(module: nn.Module) -> str:
    """SHA-256 over the float32 little-endian blob of parameters and buffers."""
    return hash_arrays(module_arrays(module))


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    module._frozen_hash = param_hash(module)
    return module


def is_frozen(module: nn.Module) -> bool:
    return getattr(module, "_frozen_hash", None) is not None


def check_frozen(module: nn.Module, name: str = "network") -> None:
    expected = getattr(module, "_frozen_hash", None)
    if expected is None:
        raise FrozenParameterError(f"{name} is not frozen")
    if param_hash(module) != expected:
        raise FrozenParameterError(f"{name}: frozen parameters changed")


def trainable_parameters(module: nn.Module) -> list[nn.Parameter]:
    if is_frozen(module):
        raise FrozenParameterError("refusing to optimise a frozen network")
    return list(module.parameters())


@dataclass
class Checkpoint:
    path: Path
    manifest: dict
    arrays: dict[str, np.ndarray] = field(repr=False)

    @property
    def kind(self) -> str:
        return self.manifest["kind"]

    @property
    def backbone(self) -> dict:
        return self.manifest["backbone"]

    @property
    def extra(self) -> dict:
        return self.manifest.get("extra", {})

    def frozen_names(self) -> list[str]:
        return [a["name"] for a in self.manifest["arrays"] if a["frozen"]]

    def prefixed(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}

    def hash(self, prefix: str = "") -> str:
        return hash_arrays(self.prefixed(prefix))

    def load_module(self, module: nn.Module, prefix: str) -> nn.Module:
        arrays = self.prefixed(prefix)
        own = module_tensors(module)
        if set(arrays) != set(own):
            missing, unexpected = set(own) - set(arrays), set(arrays) - set(own)
            raise CheckpointError(f"{self.path}: parameter mismatch for '{prefix}' "
                                  f"(missing {sorted(missing)[:3]}, unexpected {sorted(unexpected)[:3]})")
        with torch.no_grad():
            for name, p in own.items():
                if tuple(p.shape) != arrays[name].shape:
                    raise CheckpointError(f"{self.path}: shape mismatch for {prefix}{name}")
                p.copy_(torch.from_numpy(arrays[name].astype(np.float32)).to(p.dtype))
        return module


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(path, *, kind: str, backbone: dict, arrays: dict[str, np.ndarray],
                    frozen: set[str] | None = None, seed: int | None = None,
                    extra: dict | None = None) -> Path:
    """Write a checkpoint atomically (temp directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frozen = frozen or set()
    entries, offset = [], 0
    blobs = []
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "frozen": any(name.startswith(f) for f in frozen)})
        offset += len(blob)
        blobs.append(blob)
    manifest = {
        "format": FORMAT,
        "kind": kind,
        "backbone": backbone,
        "dtype": DTYPE,
        "byteorder": "little",
        "seed": seed,
        "code_version": code_version(),
        "total_bytes": offset,
        "arrays": entries,
        "extra": extra or {},
    }
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    with open(tmp / "params.bin", "wb") as fh:
        for blob in blobs:
            fh.write(blob)
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if path.exists():
        old = path.with_name(f".{path.name}.old")
        shutil.rmtree(old, ignore_errors=True)
        os.replace(path, old)
        os.replace(tmp, path)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    mpath, bpath = path / "manifest.json", path / "params.bin"
    if not mpath.exists() or not bpath.exists():
        raise FileNotFoundError(f"not a checkpoint directory: {path}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT or manifest.get("dtype") != DTYPE:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    raw = bpath.read_bytes()
    if len(raw) != manifest["total_bytes"]:
        raise CheckpointError(f"{path}: params.bin holds {len(raw)} bytes, "
                              f"manifest declares {manifest['total_bytes']}")
    arrays = {}
    for entry in manifest["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype=_LE_F32, count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(path, manifest, arrays)


def optimizer_arrays(opt: torch.optim.Optimizer, params: dict[str, nn.Parameter],
                     prefix: str) -> tuple[dict[str, np.ndarray], dict]:
    """Flatten Adam moment buffers into named arrays plus a small JSON state."""
    arrays, steps = {}, {}
    for name, p in params.items():
        st = opt.state.get(p)
        if not st:
            continue
        arrays[f"{prefix}{name}.exp_avg"] = st["exp_avg"].detach().numpy()
        arrays[f"{prefix}{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy()
        steps[name] = float(st["step"])
    return arrays, {"steps": steps}


def restore_optimizer(opt: torch.optim.Optimizer, params: dict[str, nn.Parameter], ckpt: Checkpoint,
                      prefix: str, state: dict) -> None:
    for name, p in params.items():
        if name not in state.get("steps", {}):
            continue
        opt.state[p] = {
            "step": torch.tensor(state["steps"][name]),
            "exp_avg": torch.from_numpy(ckpt.arrays[f"{prefix}{name}.exp_avg"].astype(np.float32)),
            "exp_avg_sq": torch.from_numpy(ckpt.arrays[f"{prefix}{name}.exp_avg_sq"].astype(np.float32)),
        }


def backbone_config(ckpt: Checkpoint):
    from decgan.networks import BackboneConfig
    return BackboneConfig(**ckpt.backbone)


def load_gan(path):
    """Return ``(encoder, generator, discriminator, checkpoint)``; the generator comes back frozen."""
    from decgan.networks import EncoderNet, GeneratorNet, build_discriminator
    ckpt = load_checkpoint(path)
    if ckpt.kind != "gan":
        raise CheckpointError(f"{path}: expected a gan checkpoint, found {ckpt.kind!r}")
    cfg = backbone_config(ckpt)
    enc = ckpt.load_module(EncoderNet(cfg), "encoder.")
    G = freeze(ckpt.load_module(GeneratorNet(cfg), "generator."))
    D = ckpt.load_module(build_discriminator(cfg), "discriminator.")
    return enc, G, D, ckpt


def load_generator(path):
    from decgan.networks import GeneratorNet
    ckpt = load_checkpoint(path)
    if ckpt.kind != "gan":
        raise CheckpointError(f"{path}: expected a gan checkpoint, found {ckpt.kind!r}")
    return freeze(ckpt.load_module(GeneratorNet(backbone_config(ckpt)), "generator.")), ckpt


def load_classifier(path):
    from decgan.networks import ClassifierNet
    ckpt = load_checkpoint(path)
    if ckpt.kind != "classifier":
        raise CheckpointError(f"{path}: expected a classifier checkpoint, found {ckpt.kind!r}")
    return freeze(ckpt.load_module(ClassifierNet(backbone_config(ckpt)), "classifier.")), ckpt
