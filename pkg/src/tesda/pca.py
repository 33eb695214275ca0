"""Per-layer PCA over rows of the DCT coefficient matrix, energy-ordered,
with selection of the detector input theta from the lowest-energy
coefficient of each layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

#: select the lowest-energy coefficient (the default detector input)
LAST = "last"


@dataclass(frozen=True)
class PcaModel:
    """Fitted PCA for one DCT row of one layer. Basis columns are principal
    directions, highest energy first; energies are the eigenvalues of the
    sample covariance (divisor n-1), clamped at zero."""

    layer_id: str
    row_index: int
    mean: np.ndarray      # (M,)
    basis: np.ndarray     # (M, M), orthonormal columns
    energies: np.ndarray  # (M,), non-increasing, >= 0

    @property
    def m(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class PcaProjection:
    layer_id: str
    values: np.ndarray  # (J, M)


@dataclass(frozen=True)
class ThetaVector:
    """Per-sample detector input: one selected PCA coefficient per
    (layer, DCT row), concatenated layer-major."""

    values: np.ndarray  # (k,)

    @property
    def k(self) -> int:
        return self.values.shape[0]


def _as_rows(rows) -> np.ndarray:
    try:
        arr = np.asarray(rows, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"rows must form a rectangular numeric array: {exc}") from exc
    if arr.ndim != 2:
        raise ValidationError(f"rows must all have the same length, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("non-finite values in PCA input")
    return arr


def fit_pca(rows, layer_id: str = "", row_index: int = 0) -> PcaModel:
    """Fit mean, orthonormal basis and energies to n >= 2 rows of length M.

    Eigendecomposition of the sample covariance; deterministic sign
    convention (largest-magnitude entry of each basis column is positive)
    and stable ordering so refits reproduce bit-identical models.
    """
    arr = _as_rows(rows)
    n, m = arr.shape
    if n < 2:
        raise ValidationError(f"PCA needs at least 2 rows, got {n}")
    mean = arr.mean(axis=0)
    cov = np.cov(arr, rowvar=False, ddof=1).reshape(m, m)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    vals = np.maximum(vals, 0.0)
    # eigenvector sign is arbitrary; fix it for reproducibility
    flip = vecs[np.abs(vecs).argmax(axis=0), np.arange(m)] < 0
    vecs[:, flip] *= -1.0
    # canonical C layout: serialized and freshly fitted models must follow
    # identical BLAS paths so verdicts are bit-reproducible
    return PcaModel(layer_id, row_index, np.ascontiguousarray(mean),
                    np.ascontiguousarray(vecs), np.ascontiguousarray(vals))


def project(model: PcaModel, row) -> np.ndarray:
    """Coefficients basis^T (row - mean); index 0 is the highest-energy
    coefficient, index M-1 the lowest."""
    arr = np.asarray(row, dtype=np.float64)
    if arr.shape != (model.m,):
        raise ValidationError(f"row shape {arr.shape} does not match model dim {model.m}")
    return model.basis.T @ (arr - model.mean)


def project_rows(model: PcaModel, rows) -> np.ndarray:
    """Vectorized :func:`project` over an (n, M) array."""
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != model.m:
        raise ValidationError(f"rows shape {arr.shape} does not match model dim {model.m}")
    return (arr - model.mean) @ model.basis


def resolve_coefficient(coefficient, m: int) -> int:
    """Map a coefficient request onto a 0-based column: "last" picks the
    lowest-energy coefficient; an integer c is 1-based with c=1 the
    highest-energy coefficient."""
    if coefficient == LAST:
        return m - 1
    c = int(coefficient)
    if not 1 <= c <= m:
        raise ValidationError(f"coefficient index {c} out of range 1..{m}")
    return c - 1


def select_theta_components(proj_per_layer, coefficient=LAST) -> ThetaVector:
    """Assemble theta from one PcaProjection per configured layer: for each
    layer and each DCT row, the selected PCA coefficient (default: last)."""
    if not proj_per_layer:
        raise ValidationError("no projections supplied")
    parts = []
    for proj in proj_per_layer:
        vals = np.asarray(proj.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValidationError(
                f"projection for layer '{proj.layer_id}' must be 2-D, got shape {vals.shape}"
            )
        col = resolve_coefficient(coefficient, vals.shape[1])
        parts.append(vals[:, col])
    return ThetaVector(np.concatenate(parts))
