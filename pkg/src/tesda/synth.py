"""Synthetic activation datasets and brute-force statistical oracles.

Clean samples are Gaussian random fields with mild AR(1) spatial
correlation (so DCT spectra decay realistically) mixed across channels by
a fixed full-rank matrix (so PCA spectra have distinct energies). Attacks
perturb those fields the way real attacks perturb layer statistics: mean
shifts along chosen directions, variance scaling, or energy injected into
a single DCT bin.

Nothing here claims to match real DNN activation statistics; the point is
that every pipeline and bound contract becomes testable without a trained
model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import pca
from ._special import chi2_quantile as _chi2_quantile
from .dct import dct2_stack, idct2, zigzag_index
from .errors import ValidationError
from .tensor_io import (
    DatasetManifest,
    FeatureTensor,
    ManifestLayer,
    load_manifest,
    save_manifest,
    write_tensor,
)

_AR1_RHO = 0.5  # spatial correlation of the clean random fields


@dataclass(frozen=True)
class MeanShift:
    """Shift the selected DCT coefficient vector along a direction, in
    units of the clean standard deviation along that direction. layer=None
    applies the shift to every layer."""

    magnitude: float
    layer: int | None = None
    direction: str = "pca-lowest"  # "pca-lowest" | "random" | "explicit"
    vector: tuple | None = None    # required for direction="explicit"
    coefficient: tuple = (0, 0)    # (x, y) DCT bin carrying the shift

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValidationError(f"magnitude must be >= 0, got {self.magnitude}")
        if self.direction not in ("pca-lowest", "random", "explicit"):
            raise ValidationError(f"unknown direction {self.direction!r}")
        if self.direction == "explicit" and self.vector is None:
            raise ValidationError("explicit direction requires a vector")


@dataclass(frozen=True)
class VarianceScale:
    """Scale the fluctuation of a layer's activations around their mean."""

    factor: float
    layer: int | None = None

    def __post_init__(self):
        if self.factor < 0:
            raise ValidationError(f"factor must be >= 0, got {self.factor}")


@dataclass(frozen=True)
class FrequencyInject:
    """Add energy into exactly one zig-zag-indexed DCT bin, along the
    layer's lowest-energy channel direction."""

    ordinal: int
    amplitude: float
    layer: int | None = None

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValidationError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.ordinal < 0:
            raise ValidationError(f"ordinal must be >= 0, got {self.ordinal}")


@dataclass(frozen=True)
class SyntheticSpec:
    layers: tuple = ((8, 4, 4), (8, 4, 4))  # (M, L, K) per conv layer
    n_train: int = 2000
    n_clean: int = 2000
    n_attacked: int = 2000
    attack: MeanShift | VarianceScale | FrequencyInject | None = None
    seed: int = 0

    def __post_init__(self):
        layers = tuple(tuple(int(d) for d in dims) for dims in self.layers)
        if not layers or any(len(d) != 3 or min(d) < 1 for d in layers):
            raise ValidationError(f"layers must be non-empty (M, L, K) triples, got {layers}")
        for name in ("n_train", "n_clean", "n_attacked"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.attack is not None and getattr(self.attack, "layer", None) is not None:
            if not 0 <= self.attack.layer < len(layers):
                raise ValidationError(f"attack layer {self.attack.layer} out of range")
        object.__setattr__(self, "layers", layers)


@lru_cache(maxsize=32)
def _ar1_factor(n: int) -> np.ndarray:
    idx = np.arange(n)
    cov = _AR1_RHO ** np.abs(idx[:, None] - idx[None, :])
    return np.linalg.cholesky(cov)


class _LayerField:
    """Sampler for one layer's clean activation distribution."""

    def __init__(self, dims, rng):
        self.m, self.l, self.k = dims
        # fixed channel mixing with decaying column scales: distinct PCA energies
        scales = 1.25 ** -np.arange(self.m)
        self.mix = rng.standard_normal((self.m, self.m)) * scales
        tl, tk = _ar1_factor(self.l), _ar1_factor(self.k)
        base = tl @ rng.standard_normal((self.m, self.l, self.k)) @ tk.T
        self.mean_field = base  # fixed per-layer mean pattern

    def sample(self, rng, n: int, var_factor: float = 1.0) -> np.ndarray:
        tl, tk = _ar1_factor(self.l), _ar1_factor(self.k)
        latent = tl @ rng.standard_normal((n, self.m, self.l, self.k)) @ tk.T
        mixed = np.einsum("mr,nrlk->nmlk", self.mix, var_factor * latent)
        return mixed + self.mean_field

    def coefficient_vectors(self, data: np.ndarray, xy) -> np.ndarray:
        # (n, M) matrix of the DCT coefficient at xy for every channel
        x, y = xy
        return dct2_stack(data)[:, :, x, y]

    def bin_image(self, xy) -> np.ndarray:
        onehot = np.zeros((self.l, self.k))
        onehot[xy] = 1.0
        return idct2(onehot)


def _shift_vector(attack, layer_field, train_coeffs, rng) -> np.ndarray:
    """Channel-space shift realizing the attack magnitude in sigma units."""
    model = pca.fit_pca(train_coeffs)
    if isinstance(attack, FrequencyInject) or attack.direction == "pca-lowest":
        v = model.basis[:, -1]
        sigma = math.sqrt(max(model.energies[-1], 0.0))
        magnitude = attack.amplitude if isinstance(attack, FrequencyInject) else attack.magnitude
        return magnitude * sigma * v
    if attack.direction == "random":
        v = rng.standard_normal(layer_field.m)
    else:
        v = np.asarray(attack.vector, dtype=np.float64)
        if v.shape != (layer_field.m,):
            raise ValidationError(
                f"explicit vector length {v.shape} does not match channel count {layer_field.m}"
            )
    v = v / np.linalg.norm(v)
    cov = model.basis @ np.diag(model.energies) @ model.basis.T
    sigma = math.sqrt(max(float(v @ cov @ v), 0.0))
    return attack.magnitude * sigma * v


def generate(spec: SyntheticSpec, out_dir) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Write clean-train / clean-test / attacked manifests plus tensors
    under out_dir; fully deterministic per spec.seed."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    fields = [_LayerField(dims, rng) for dims in spec.layers]
    layer_ids = [f"conv{i}" for i in range(len(spec.layers))]
    layers = [ManifestLayer(lid, "conv", dims) for lid, dims in zip(layer_ids, spec.layers)]

    train = [f.sample(rng, spec.n_train) for f in fields]
    test = [f.sample(rng, spec.n_clean) for f in fields]

    attack = spec.attack
    if isinstance(attack, VarianceScale):
        attacked = [
            f.sample(rng, spec.n_attacked,
                     var_factor=attack.factor if attack.layer in (None, i) else 1.0)
            for i, f in enumerate(fields)
        ]
    else:
        attacked = [f.sample(rng, spec.n_attacked) for f in fields]
        if attack is not None:
            for i, f in enumerate(fields):
                if attack.layer not in (None, i):
                    continue
                if isinstance(attack, FrequencyInject):
                    if attack.ordinal >= f.l * f.k:
                        raise ValidationError(
                            f"ordinal {attack.ordinal} exceeds {f.l}x{f.k} map of layer {i}"
                        )
                    xy = zigzag_index(attack.ordinal, f.l, f.k)
                else:
                    xy = attack.coefficient
                coeffs = f.coefficient_vectors(train[i], xy)
                shift = _shift_vector(attack, f, coeffs, rng)
                attacked[i] += shift[:, None, None] * f.bin_image(xy)

    manifests = []
    for split, name, stacks, count in (
        ("clean-train", "clean_train", train, spec.n_train),
        ("clean-test", "clean_test", test, spec.n_clean),
        ("attacked", "attacked", attacked, spec.n_attacked),
    ):
        tensor_dir = out_dir / "tensors" / name
        tensor_dir.mkdir(parents=True, exist_ok=True)
        samples = []
        for s in range(count):
            sid = f"{name}-{s:05d}"
            files = {}
            for lid, stack in zip(layer_ids, stacks):
                rel = f"tensors/{name}/{sid}_{lid}.tft"
                write_tensor(FeatureTensor(lid, stack[s]), out_dir / rel)
                files[lid] = rel
            samples.append((sid, files))
        path = save_manifest(out_dir / f"{name}.json", split, layers, samples)
        manifests.append(load_manifest(path))
    return tuple(manifests)


@dataclass(frozen=True)
class TailEstimate:
    p_hat: float
    std_error: float
    draws: int


def chi2_tail_mc(k: int, delta_sq: float, draws: int, seed: int = 0) -> TailEstimate:
    """Monte Carlo estimate of P[chi2_k >= delta_sq] with its standard
    error. Requires draws >= 1e5 so the error is meaningfully small."""
    if k < 1:
        raise ValidationError(f"degrees of freedom must be >= 1, got {k}")
    if draws < 100_000:
        raise ValidationError(f"need at least 1e5 draws, got {draws}")
    if delta_sq < 0:
        raise ValidationError(f"delta_sq must be >= 0, got {delta_sq}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    hits = int(np.count_nonzero(rng.chisquare(k, size=draws) >= delta_sq))
    p = hits / draws
    return TailEstimate(p, math.sqrt(p * (1.0 - p) / draws), draws)


def chi2_quantile(k: int, p: float) -> float:
    """Exact chi2_k inverse CDF (bracketed root-find on the regularized
    incomplete gamma); |CDF(result) - p| <= 1e-10."""
    return _chi2_quantile(k, p)


def ks_statistic(sample, cdf) -> float:
    """Kolmogorov-Smirnov distance between an empirical sample and a CDF."""
    xs = np.sort(np.asarray(sample, dtype=np.float64))
    n = xs.shape[0]
    if n < 1:
        raise ValidationError("empty sample")
    cdf_vals = np.asarray([cdf(x) for x in xs])
    upper = np.max(np.arange(1, n + 1) / n - cdf_vals)
    lower = np.max(cdf_vals - np.arange(0, n) / n)
    return float(max(upper, lower))
