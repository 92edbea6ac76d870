"""Checkpoint directory: ``manifest.json`` plus one raw float32 file per tensor.

Tensor files hold little-endian 32-bit floats in C order with no header; the
manifest records each tensor's file name and shape, the run config, the
training step, the seed and the prompt vocabulary.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .style import Vocab

FORMAT = "stylediff-checkpoint"


def _write(path: Path, tensor: torch.Tensor) -> list[int]:
    arr = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4")
    path.write_bytes(np.ascontiguousarray(arr).tobytes())
    return list(arr.shape)


def _read(path: Path, shape: list[int]) -> torch.Tensor:
    raw = path.read_bytes()
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(raw) != expected:
        raise ValueError(f"{path.name}: {len(raw)} bytes, expected {expected}")
    return torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32))


def save_checkpoint(state, path) -> Path:
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = {}

    def put(name: str, tensor: torch.Tensor):
        fname = f"{name}.f32"
        tensors[name] = {"file": fname, "shape": _write(root / "tensors" / fname, tensor)}

    for mod_name, module in state.modules().items():
        for key, value in module.state_dict().items():
            put(f"{mod_name}.{key}", value)
    optimizers = {}
    for opt_name, opt in state.optimizers().items():
        sd = opt.state_dict()
        keys = {}
        for idx, entry in sd["state"].items():
            keys[str(idx)] = sorted(entry)
            for k, v in entry.items():
                put(f"{opt_name}.state.{idx}.{k}", torch.as_tensor(v))
        optimizers[opt_name] = {"param_groups": sd["param_groups"], "state_keys": keys}
    manifest = {"format": FORMAT, "version": 1, "step": state.step,
                "rng": {"seed": state.seed, "step": state.step},
                "config": state.config.to_dict(), "vocab": state.vocab.itos[3:],
                "tensors": tensors, "optimizers": optimizers}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return root


def load_checkpoint(path):
    """Rebuild a :class:`~stylediff.engine.TrainState` from a checkpoint directory."""
    from .engine import create_state

    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"no checkpoint manifest in {root}") from None
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{root} is not a {FORMAT} directory")
    config = RunConfig.from_dict(manifest["config"])
    state = create_state(config, Vocab(manifest["vocab"]))
    tensors = manifest["tensors"]

    def get(name):
        entry = tensors[name]
        return _read(root / "tensors" / entry["file"], entry["shape"])

    for mod_name, module in state.modules().items():
        prefix = f"{mod_name}."
        sd = {k[len(prefix):]: get(k) for k in tensors if k.startswith(prefix)}
        module.load_state_dict(sd)
    for opt_name, opt in state.optimizers().items():
        info = manifest["optimizers"][opt_name]
        opt_state = {int(idx): {k: get(f"{opt_name}.state.{idx}.{k}") for k in keys}
                     for idx, keys in info["state_keys"].items()}
        groups = info["param_groups"]
        for g in groups:
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
        opt.load_state_dict({"state": opt_state, "param_groups": groups})
    state.step = int(manifest["step"])
    return state


def latest_checkpoint(run_dir) -> Path:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("step_*"))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints under {run_dir}")
    return ckpts[-1]
