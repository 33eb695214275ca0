"""Forward-hook capture of intermediate activations.

Tap names address modules by their `named_modules()` path; the captured
value is that module's output, i.e. post-activation when the tap points at
an activation or block output. Samples are processed in dataset order
(shuffling is never applied), so the manifest order is reproducible.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .writer import ExportError, write_feature_file, write_manifest

_KIND_BY_NDIM = {3: "conv", 1: "dense"}


@dataclass(frozen=True)
class TapSpec:
    model: str | Path
    taps: tuple
    data: str | Path
    out_dir: str | Path
    split: str = "clean-train"
    batch_size: int = 32
    device: str = "cpu"

    def __post_init__(self):
        taps = tuple(str(t) for t in self.taps)
        if not taps:
            raise ExportError("at least one tap layer name is required")
        if len(set(taps)) != len(taps):
            raise ExportError(f"duplicate tap names in {taps}")
        if self.batch_size < 1:
            raise ExportError(f"batch_size must be >= 1, got {self.batch_size}")
        object.__setattr__(self, "taps", taps)


@dataclass
class ExportResult:
    manifest_path: Path
    n_samples: int
    layers: list = field(default_factory=list)  # (layer_id, kind, dims)


_SCRIPT_HINT = ("forward hooks cannot attach to a loaded ScriptModule; "
                "save the eager module instead: torch.save(model, path)")


def load_model(path, device: str = "cpu") -> torch.nn.Module:
    """A pickled full nn.Module (torch.save(model, path)). TorchScript
    archives are rejected with a hint, since they cannot be hooked."""
    path = Path(path)
    if not path.exists():
        raise ExportError(f"model file not found: {path}")
    try:
        obj = torch.load(str(path), map_location=device, weights_only=False)
    except AttributeError as pickle_exc:
        raise ExportError(
            f"could not unpickle {path}: {pickle_exc}; the model's class must be "
            f"importable here (define it in an installed/importable module, "
            f"not a script's __main__)"
        ) from pickle_exc
    except Exception as pickle_exc:
        try:
            torch.jit.load(str(path), map_location=device)
        except Exception:
            raise ExportError(f"could not load a model from {path}: {pickle_exc}") from pickle_exc
        raise ExportError(f"{path} is a TorchScript archive; {_SCRIPT_HINT}") from None
    if isinstance(obj, torch.jit.ScriptModule):
        raise ExportError(f"{path} contains a ScriptModule; {_SCRIPT_HINT}")
    if not isinstance(obj, torch.nn.Module):
        raise ExportError(
            f"{path} did not contain an nn.Module (got {type(obj).__name__}); "
            f"save the full model with torch.save(model, path)"
        )
    obj.eval()
    return obj


def load_inputs(path) -> torch.Tensor:
    """Input batch from a .pt (saved tensor), .npy, or .npz file."""
    path = Path(path)
    if not path.exists():
        raise ExportError(f"data file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".pt":
        obj = torch.load(str(path), map_location="cpu", weights_only=True)
        if not isinstance(obj, torch.Tensor):
            raise ExportError(f"{path} must contain a single tensor, got {type(obj).__name__}")
        return obj
    if suffix == ".npy":
        return torch.from_numpy(np.load(path))
    if suffix == ".npz":
        archive = np.load(path)
        return torch.from_numpy(archive[archive.files[0]])
    raise ExportError(f"unsupported data file {path}; use .pt, .npy or .npz")


def resolve_taps(model: torch.nn.Module, taps) -> dict:
    available = dict(model.named_modules())
    available.pop("", None)
    missing = [t for t in taps if t not in available]
    if missing:
        names = ", ".join(sorted(available)) or "<none>"
        raise ExportError(
            f"tap name(s) {missing} not found in the model; available modules: {names}"
        )
    return {t: available[t] for t in taps}


def _file_stem(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_-]", "_", name)


def export_model(model: torch.nn.Module, taps, inputs: torch.Tensor, out_dir,
                 split: str = "clean-train", batch_size: int = 32,
                 device: str = "cpu") -> ExportResult:
    """Run `inputs` through `model`, capturing each tap module's output as
    one TFT1 file per (sample, layer), plus the manifest."""
    modules = resolve_taps(model, taps)
    out_dir = Path(out_dir)
    tensor_dir = out_dir / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)
    model = model.to(device).eval()
    n = inputs.shape[0]

    captured: dict = {}
    handles = [
        module.register_forward_hook(
            lambda _m, _inp, out, _name=name: captured.__setitem__(_name, out)
        )
        for name, module in modules.items()
    ]
    layer_dims: dict = {}
    samples = []
    try:
        with torch.no_grad():
            for lo in range(0, n, batch_size):
                batch = inputs[lo:lo + batch_size].to(device)
                captured.clear()
                model(batch)
                batch_arrays = {}
                for name in modules:
                    if name not in captured:
                        raise ExportError(f"tap '{name}' produced no output on the forward pass")
                    out = captured[name]
                    if not isinstance(out, torch.Tensor):
                        raise ExportError(f"tap '{name}' output is not a tensor")
                    arr = out.detach().cpu().to(torch.float32).numpy()
                    if arr.shape[0] != batch.shape[0]:
                        raise ExportError(
                            f"tap '{name}' output batch size {arr.shape[0]} does not match "
                            f"input batch {batch.shape[0]}"
                        )
                    per_sample = arr.shape[1:]
                    if len(per_sample) not in _KIND_BY_NDIM:
                        raise ExportError(
                            f"tap '{name}' yields {len(per_sample)}-D per-sample outputs "
                            f"{per_sample}; only 3-D (conv) and 1-D (dense) are exportable"
                        )
                    if name in layer_dims and layer_dims[name] != per_sample:
                        raise ExportError(f"tap '{name}' changed shape across batches")
                    layer_dims[name] = per_sample
                    batch_arrays[name] = arr
                for b in range(batch.shape[0]):
                    idx = lo + b
                    sid = f"{split}-{idx:05d}"
                    files = {}
                    for name in modules:
                        rel = f"tensors/{sid}_{_file_stem(name)}.tft"
                        write_feature_file(out_dir / rel, name, batch_arrays[name][b])
                        files[name] = rel
                    samples.append((sid, files))
    finally:
        for handle in handles:
            handle.remove()

    layers = [(name, _KIND_BY_NDIM[len(layer_dims[name])], layer_dims[name])
              for name in modules]
    manifest_name = split.replace("-", "_") + ".json"
    manifest = write_manifest(out_dir / manifest_name, split, layers, samples)
    return ExportResult(manifest, len(samples), layers)


def export(tap: TapSpec) -> ExportResult:
    """File-based entry point matching the CLI surface."""
    model = load_model(tap.model, tap.device)
    inputs = load_inputs(tap.data)
    return export_model(model, tap.taps, inputs, tap.out_dir,
                        split=tap.split, batch_size=tap.batch_size, device=tap.device)
