"""Writers for the TFT1 feature-tensor format and the dataset manifest.

This is an independent implementation of the wire format documented in
the detector repository's docs/formats.md; compatibility is enforced
byte-for-byte by the test suite against the detector's reader.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TFT1"
KIND_CONV = 1   # 3-D per-sample output (C, H, W)
KIND_DENSE = 2  # 1-D per-sample output (F,)

SPLITS = ("clean-train", "clean-test", "attacked")


class ExportError(ValueError):
    pass


def write_feature_file(path, layer_id: str, array: np.ndarray) -> None:
    """One sample's activation for one layer: f32 little-endian payload
    behind the TFT1 header."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim == 3:
        kind = KIND_CONV
    elif arr.ndim == 1:
        kind = KIND_DENSE
    else:
        raise ExportError(
            f"layer '{layer_id}' produced a {arr.ndim}-D per-sample output "
            f"{arr.shape}; only 3-D (conv) and 1-D (dense) are exportable"
        )
    if not np.isfinite(arr).all():
        raise ExportError(f"non-finite activation values for layer '{layer_id}'")
    name = layer_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BI", kind, len(name)))
        fh.write(name)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def write_manifest(path, split: str, layers, samples) -> Path:
    """Manifest JSON: `layers` as (layer_id, kind, dims) triples, `samples`
    as (sample_id, {layer_id: relative path}) pairs, in iteration order."""
    if split not in SPLITS:
        raise ExportError(f"split must be one of {SPLITS}, got {split!r}")
    doc = {
        "split": split,
        "layers": [
            {"layer_id": lid, "kind": kind, "dims": list(dims)} for lid, kind, dims in layers
        ],
        "samples": [{"id": sid, "files": dict(files)} for sid, files in samples],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    return path
