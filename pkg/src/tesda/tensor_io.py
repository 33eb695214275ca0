"""On-disk feature-tensor format ("TFT1") and dataset manifests.

All layer activations enter the pipeline through these files. Storage is
f32 little-endian regardless of platform; computation downstream is f64.
The byte layout is documented in docs/formats.md and is the compatibility
contract for external exporters.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"TFT1"
KIND_CONV = 1
KIND_DENSE = 2

SPLITS = ("clean-train", "clean-test", "attacked")


def _check_finite(values: np.ndarray, layer_id: str) -> None:
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"non-finite values in tensor for layer '{layer_id}'")


@dataclass(frozen=True)
class FeatureTensor:
    """One convolutional layer's activations for one sample: M channel
    images of size L x K, stored row-major, channel-major."""

    layer_id: str
    data: np.ndarray  # shape (M, L, K), float32

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValidationError(
                f"feature tensor must be 3-D (M, L, K), got shape {arr.shape}"
            )
        if min(arr.shape) < 1:
            raise ValidationError(f"all dims must be >= 1, got shape {arr.shape}")
        _check_finite(arr, self.layer_id)
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class DenseFeatureVector:
    """One dense layer's output vector for one sample."""

    layer_id: str
    values: np.ndarray  # shape (M,), float32

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float32)
        if arr.ndim != 1 or arr.shape[0] < 1:
            raise ValidationError(
                f"dense feature vector must be 1-D and non-empty, got shape {arr.shape}"
            )
        _check_finite(arr, self.layer_id)
        object.__setattr__(self, "values", arr)

    @property
    def dims(self) -> tuple[int]:
        return self.values.shape


def write_tensor(t: FeatureTensor | DenseFeatureVector, path) -> None:
    """Write a tensor file: magic "TFT1", u8 kind, u32 name length + UTF-8
    layer_id, u32 ndim, u32 dims[], f32 payload; all integers little-endian."""
    if isinstance(t, FeatureTensor):
        kind, arr = KIND_CONV, t.data
    elif isinstance(t, DenseFeatureVector):
        kind, arr = KIND_DENSE, t.values
    else:
        raise ValidationError(f"cannot write object of type {type(t).__name__}")
    name = t.layer_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BI", kind, len(name)))
        fh.write(name)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def _read_exact(fh, count: int, what: str, path) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(f"truncated tensor file {path}: short read in {what}")
    return buf


def _read_header(fh, path):
    if _read_exact(fh, 4, "magic", path) != MAGIC:
        raise FormatError(f"bad magic in {path}: not a TFT1 tensor file")
    kind, name_len = struct.unpack("<BI", _read_exact(fh, 5, "header", path))
    if kind not in (KIND_CONV, KIND_DENSE):
        raise FormatError(f"unknown kind tag {kind} in {path}")
    layer_id = _read_exact(fh, name_len, "layer name", path).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "ndim", path))
    expected_ndim = 3 if kind == KIND_CONV else 1
    if ndim != expected_ndim:
        raise FormatError(
            f"{path}: kind tag {kind} requires ndim {expected_ndim}, file says {ndim}"
        )
    dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims", path))
    if min(dims) < 1:
        raise FormatError(f"{path}: zero-sized dim in {dims}")
    return kind, layer_id, dims


def read_tensor(path) -> FeatureTensor | DenseFeatureVector:
    """Read and validate a TFT1 file written by :func:`write_tensor`."""
    with open(path, "rb") as fh:
        kind, layer_id, dims = _read_header(fh, path)
        count = int(np.prod(dims))
        payload = fh.read(4 * count + 1)
    if len(payload) < 4 * count:
        raise FormatError(f"truncated tensor file {path}: payload shorter than dims imply")
    if len(payload) > 4 * count:
        raise FormatError(f"{path}: payload longer than dims imply")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if kind == KIND_CONV:
        return FeatureTensor(layer_id, arr)
    return DenseFeatureVector(layer_id, arr)


def peek_tensor_header(path):
    """Return (kind, layer_id, dims) without reading the payload; still
    verifies the file size matches the declared dims."""
    size = Path(path).stat().st_size
    with open(path, "rb") as fh:
        kind, layer_id, dims = _read_header(fh, path)
        offset = fh.tell()
    expected = offset + 4 * int(np.prod(dims))
    if size < expected:
        raise FormatError(f"truncated tensor file {path}: payload shorter than dims imply")
    if size > expected:
        raise FormatError(f"{path}: payload longer than dims imply")
    return kind, layer_id, dims


@dataclass(frozen=True)
class ManifestLayer:
    layer_id: str
    kind: str  # "conv" | "dense"
    dims: tuple[int, ...]  # (M, L, K) for conv, (M,) for dense


@dataclass(frozen=True)
class DatasetManifest:
    """Validated dataset listing: the fixed layer order plus one tensor
    file per (sample, layer)."""

    path: Path
    split: str
    layers: tuple[ManifestLayer, ...]
    sample_ids: tuple[str, ...]
    sample_files: tuple[dict, ...]  # per sample: layer_id -> absolute Path

    @property
    def n(self) -> int:
        return len(self.sample_ids)

    def layer(self, layer_id: str) -> ManifestLayer:
        for lay in self.layers:
            if lay.layer_id == layer_id:
                return lay
        raise ValidationError(f"layer '{layer_id}' not in manifest {self.path}")

    def load_sample(self, i: int, layer_ids=None) -> dict:
        """Read the layer tensors of sample i, keyed by layer_id; a subset
        of layers may be requested to skip unneeded files."""
        wanted = set(layer_ids) if layer_ids is not None else None
        out = {}
        for lay in self.layers:
            if wanted is not None and lay.layer_id not in wanted:
                continue
            t = read_tensor(self.sample_files[i][lay.layer_id])
            if t.layer_id != lay.layer_id or t.dims != lay.dims:
                raise ValidationError(
                    f"sample {self.sample_ids[i]}: tensor file disagrees with "
                    f"manifest for layer '{lay.layer_id}'"
                )
            out[lay.layer_id] = t
        return out

    def hash_hex(self) -> str:
        """Stable digest of the manifest structure (not the tensor payloads)."""
        doc = {
            "split": self.split,
            "layers": [[l.layer_id, l.kind, list(l.dims)] for l in self.layers],
            "samples": list(self.sample_ids),
        }
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


_KIND_TAGS = {"conv": KIND_CONV, "dense": KIND_DENSE}


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest JSON document.

    Every referenced tensor file must exist and its header must match the
    declared kind and dims (payload presence is checked via file size).
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc

    split = doc.get("split")
    if split not in SPLITS:
        raise ValidationError(f"manifest {path}: split must be one of {SPLITS}, got {split!r}")

    layers = []
    seen = set()
    for entry in doc.get("layers", []):
        lid, kind = entry["layer_id"], entry["kind"]
        if lid in seen:
            raise ValidationError(f"manifest {path}: duplicate layer_id '{lid}'")
        seen.add(lid)
        if kind not in _KIND_TAGS:
            raise ValidationError(f"manifest {path}: layer '{lid}' has unknown kind '{kind}'")
        dims = tuple(int(d) for d in entry["dims"])
        want = 3 if kind == "conv" else 1
        if len(dims) != want or min(dims) < 1:
            raise ValidationError(f"manifest {path}: layer '{lid}' dims {dims} invalid for kind '{kind}'")
        layers.append(ManifestLayer(lid, kind, dims))
    if not layers:
        raise ValidationError(f"manifest {path}: no layers declared")

    root = path.parent
    sample_ids, sample_files = [], []
    for sample in doc.get("samples", []):
        sid = str(sample["id"])
        files = {}
        for lay in layers:
            rel = sample["files"].get(lay.layer_id)
            if rel is None:
                raise ValidationError(
                    f"manifest {path}: sample '{sid}' missing file for layer '{lay.layer_id}'"
                )
            fpath = (root / rel).resolve()
            if not fpath.exists():
                raise ValidationError(f"manifest {path}: referenced file does not exist: {fpath}")
            kind, lid, dims = peek_tensor_header(fpath)
            if kind != _KIND_TAGS[lay.kind] or dims != lay.dims:
                raise ValidationError(
                    f"manifest {path}: {fpath} header (kind={kind}, dims={dims}) "
                    f"does not match declared layer '{lay.layer_id}' "
                    f"(kind={lay.kind}, dims={lay.dims})"
                )
            files[lay.layer_id] = fpath
        sample_ids.append(sid)
        sample_files.append(files)

    return DatasetManifest(
        path=path,
        split=split,
        layers=tuple(layers),
        sample_ids=tuple(sample_ids),
        sample_files=tuple(sample_files),
    )


def save_manifest(path, split: str, layers, samples) -> Path:
    """Write a manifest JSON file.

    `layers` is a sequence of ManifestLayer; `samples` a sequence of
    (sample_id, {layer_id: path relative to the manifest}) pairs.
    """
    if split not in SPLITS:
        raise ValidationError(f"split must be one of {SPLITS}, got {split!r}")
    doc = {
        "split": split,
        "layers": [
            {"layer_id": l.layer_id, "kind": l.kind, "dims": list(l.dims)} for l in layers
        ],
        "samples": [{"id": sid, "files": dict(files)} for sid, files in samples],
    }
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    return path
