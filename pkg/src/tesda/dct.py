"""2-D discrete cosine transform of kernel output images and selection of
frequency coefficients, one J x M matrix per layer.

The transform is the orthonormal DCT-II, applied separably (rows then
columns). Orthonormality makes Parseval exact, so coefficient magnitudes
are comparable across layers and map sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ValidationError
from .tensor_io import FeatureTensor


@lru_cache(maxsize=64)
def _dct_matrix(n: int) -> np.ndarray:
    # Row j: s(j) * cos(pi*(2i+1)*j / (2n)), s(0)=sqrt(1/n), s(j>0)=sqrt(2/n).
    i = np.arange(n)
    j = i.reshape(-1, 1)
    mat = np.cos(np.pi * (2 * i + 1) * j / (2 * n)) * np.sqrt(2.0 / n)
    mat[0, :] /= np.sqrt(2.0)
    return mat


def _as_image(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2 or min(arr.shape) < 1:
        raise ValidationError(f"expected a 2-D image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("non-finite values in image")
    return arr


def dct2(image) -> np.ndarray:
    """Orthonormal 2-D DCT-II of an L x K image.

    Energy preserving: sum of squared coefficients equals sum of squared
    pixels. Coefficient (0, 0) of a constant image c is c*sqrt(L*K).
    """
    arr = _as_image(image)
    cl, ck = _dct_matrix(arr.shape[0]), _dct_matrix(arr.shape[1])
    return cl @ arr @ ck.T


def idct2(coeffs) -> np.ndarray:
    """Inverse of :func:`dct2` (orthonormal DCT-III)."""
    arr = _as_image(coeffs)
    cl, ck = _dct_matrix(arr.shape[0]), _dct_matrix(arr.shape[1])
    return cl.T @ arr @ ck


def dct2_stack(images: np.ndarray) -> np.ndarray:
    """dct2 applied to a stack shaped (..., L, K) in one shot."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim < 2:
        raise ValidationError(f"expected stacked images, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("non-finite values in image stack")
    cl, ck = _dct_matrix(arr.shape[-2]), _dct_matrix(arr.shape[-1])
    return cl @ arr @ ck.T


@dataclass(frozen=True)
class DctSelection:
    """Ordered list of J distinct (x, y) coefficient indices, shared by all
    channels of a layer."""

    coefficients: tuple  # ((x, y), ...), J >= 1

    def __post_init__(self):
        coeffs = tuple((int(x), int(y)) for x, y in self.coefficients)
        if len(coeffs) < 1:
            raise ValidationError("selection must contain at least one coefficient")
        if len(set(coeffs)) != len(coeffs):
            raise ValidationError(f"duplicate coefficient pairs in selection {coeffs}")
        if any(x < 0 or y < 0 for x, y in coeffs):
            raise ValidationError(f"negative coefficient index in selection {coeffs}")
        object.__setattr__(self, "coefficients", coeffs)

    @property
    def j(self) -> int:
        return len(self.coefficients)

    def validate_bounds(self, l: int, k: int) -> None:
        for x, y in self.coefficients:
            if x >= l or y >= k:
                raise ValidationError(
                    f"selection index ({x}, {y}) out of bounds for {l}x{k} maps"
                )


@dataclass(frozen=True)
class DctCoefficientMatrix:
    layer_id: str
    values: np.ndarray  # shape (J, M)


def extract_dct_matrix(t: FeatureTensor, sel: DctSelection) -> DctCoefficientMatrix:
    """Selected DCT coefficients of every channel: entry (j, m) is
    dct2(channel m) at sel.coefficients[j]."""
    m, l, k = t.dims
    sel.validate_bounds(l, k)
    coeffs = dct2_stack(t.data)  # (M, L, K)
    xs = [x for x, _ in sel.coefficients]
    ys = [y for _, y in sel.coefficients]
    return DctCoefficientMatrix(t.layer_id, coeffs[:, xs, ys].T.copy())


def zigzag_index(ordinal: int, l: int, k: int) -> tuple[int, int]:
    """(x, y) at position `ordinal` of the standard JPEG zig-zag scan of an
    l x k coefficient grid, so "coefficient #0" is DC, #1 is (0,1), etc."""
    if l < 1 or k < 1:
        raise ValidationError(f"grid dims must be >= 1, got {l}x{k}")
    if not 0 <= ordinal < l * k:
        raise ValidationError(f"ordinal {ordinal} out of range for {l}x{k} grid")
    pos = 0
    for s in range(l + k - 1):
        xs = range(max(0, s - k + 1), min(l - 1, s) + 1)
        diag = [(x, s - x) for x in xs]
        if s % 2 == 0:  # even anti-diagonals run bottom-left to top-right
            diag.reverse()
        if pos + len(diag) > ordinal:
            return diag[ordinal - pos]
        pos += len(diag)
    raise AssertionError("unreachable")
