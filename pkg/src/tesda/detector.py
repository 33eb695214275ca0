"""End-to-end detector: assemble theta per sample from the configured
layers (DCT coefficients -> per-row PCA -> selected coefficient), fit a
robust elliptic envelope on clean training data, and classify samples.

Two combination modes exist when several DCT coefficients are monitored:
"joint" feeds one concatenated theta into a single envelope; "or" fits one
envelope per DCT coefficient and raises detection if any of them flags its
own theta slice.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import robust, thresholds
from .dct import DctSelection, dct2_stack, zigzag_index
from .errors import FormatError, ValidationError, VersionError
from .pca import LAST, PcaModel, fit_pca, project_rows, resolve_coefficient
from .robust import EnvelopeModel, calibrate_delta_empirical, fit_mcd, mahalanobis_sq_many
from .tensor_io import DatasetManifest, DenseFeatureVector, FeatureTensor, ManifestLayer

MODEL_MAGIC = b"TSD1"
MODEL_VERSION = 1

_DEGENERATE_VAR = 1e-12


@dataclass(frozen=True)
class DetectorConfig:
    """Fit-time knobs. `layers=None` monitors every manifest layer; DCT
    coefficients may be given as (x, y) pairs or as zig-zag ordinals
    (resolved per layer, since map sizes differ)."""

    layers: tuple | None = None
    dct_coefficients: tuple | None = ((0, 0),)
    dct_ordinals: tuple | None = None
    pca_coefficient: int | str = LAST
    epsilon: float = 0.01
    bound: str = "empirical"
    mode: str = "joint"
    seed: int = 0
    mcd_n_starts: int = 500
    threads: int = 1

    def __post_init__(self):
        if self.mode not in ("joint", "or"):
            raise ValidationError(f"mode must be 'joint' or 'or', got {self.mode!r}")
        if self.bound not in ("empirical",) + thresholds.BOUND_KINDS:
            raise ValidationError(f"unknown bound {self.bound!r}")
        if self.bound == "empirical":
            if not 0.0 < self.epsilon <= 0.5:
                raise ValidationError(
                    f"epsilon must be in (0, 0.5] for empirical calibration, got {self.epsilon}"
                )
        elif not 0.0 < self.epsilon < 1.0:
            raise ValidationError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.dct_ordinals is not None:
            ords = tuple(int(o) for o in self.dct_ordinals)
            if len(ords) < 1 or len(set(ords)) != len(ords) or min(ords) < 0:
                raise ValidationError(f"ordinals must be distinct and >= 0, got {ords}")
            object.__setattr__(self, "dct_ordinals", ords)
            object.__setattr__(self, "dct_coefficients", None)
        elif self.dct_coefficients is not None:
            sel = DctSelection(self.dct_coefficients)  # validates shape/duplicates
            object.__setattr__(self, "dct_coefficients", sel.coefficients)
        else:
            raise ValidationError("either dct_coefficients or dct_ordinals must be set")
        if self.layers is not None:
            lay = tuple(str(l) for l in self.layers)
            if len(lay) < 1 or len(set(lay)) != len(lay):
                raise ValidationError(f"layers must be a non-empty unique list, got {lay}")
            object.__setattr__(self, "layers", lay)
        if self.pca_coefficient != LAST:
            object.__setattr__(self, "pca_coefficient", int(self.pca_coefficient))

    @property
    def j(self) -> int:
        sel = self.dct_ordinals if self.dct_ordinals is not None else self.dct_coefficients
        return len(sel)


@dataclass(frozen=True)
class DetectionVerdict:
    sample_id: str
    is_attack: bool
    d_sq: float | tuple          # per-coefficient tuple in OR mode
    theta: np.ndarray | tuple    # theta values backing the decision


@dataclass(frozen=True)
class DetectionReport:
    epsilon: float
    coverage: float
    fpr: float
    f1: float
    precision: float
    recall: float
    tp: int
    fn: int
    fp: int
    tn: int
    n_clean: int
    n_attacked: int

    @classmethod
    def from_counts(cls, tp: int, fn: int, fp: int, tn: int, epsilon: float) -> "DetectionReport":
        n_att, n_clean = tp + fn, fp + tn
        if n_att == 0:
            raise ValidationError("no attacked samples: coverage undefined")
        if n_clean == 0:
            raise ValidationError("no clean samples: FPR undefined")
        coverage = tp / n_att
        fpr = fp / n_clean
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = coverage
        f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(epsilon, coverage, fpr, f1, precision, recall,
                   tp, fn, fp, tn, n_clean, n_att)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class _LayerPipe:
    """Fitted per-layer stage: coefficient selection plus one PCA per row."""

    layer: ManifestLayer
    selection: tuple | None          # ((x, y), ...) for conv, None for dense
    pca_models: tuple                # J PcaModels for conv, 1 for dense
    coefficient: int | str = LAST    # which PCA coefficient feeds theta

    @property
    def rows(self) -> int:
        return len(self.pca_models)


@dataclass(frozen=True)
class FittedDetector:
    config: DetectorConfig
    pipes: tuple                      # _LayerPipe per monitored layer, in theta order
    envelopes: tuple                  # 1 (joint) or J (or-mode) EnvelopeModel
    thetas_train: tuple               # training theta matrix per envelope
    dropped_layers: tuple             # degenerate layers removed during fit
    manifest_hash: str
    fit_time: float | None = None     # informational; never serialized

    @property
    def layer_ids(self) -> tuple:
        return tuple(p.layer.layer_id for p in self.pipes)

    @property
    def k(self) -> int:
        return sum(p.rows for p in self.pipes) if self.config.mode == "joint" else len(self.pipes)


def _resolve_layers(config: DetectorConfig, manifest: DatasetManifest) -> list[ManifestLayer]:
    if config.layers is None:
        return list(manifest.layers)
    return [manifest.layer(lid) for lid in config.layers]


def _layer_selection(config: DetectorConfig, layer: ManifestLayer):
    if layer.kind == "dense":
        return None
    _, l, k = layer.dims
    if config.dct_ordinals is not None:
        pairs = tuple(zigzag_index(o, l, k) for o in config.dct_ordinals)
        if len(set(pairs)) != len(pairs):
            raise ValidationError(
                f"ordinals {config.dct_ordinals} collide on layer '{layer.layer_id}'"
            )
        sel = DctSelection(pairs)
    else:
        sel = DctSelection(config.dct_coefficients)
    sel.validate_bounds(l, k)
    return sel.coefficients


def _tensor_coeff_rows(t, selection) -> np.ndarray:
    """(rows, M) coefficient matrix for one sample's layer tensor."""
    if selection is None:
        if not isinstance(t, DenseFeatureVector):
            raise ValidationError(f"layer '{t.layer_id}' expected dense output")
        return np.asarray(t.values, dtype=np.float64)[None, :]
    if not isinstance(t, FeatureTensor):
        raise ValidationError(f"layer '{t.layer_id}' expected conv output")
    coeffs = dct2_stack(t.data)  # (M, L, K)
    xs = [x for x, _ in selection]
    ys = [y for _, y in selection]
    return coeffs[:, xs, ys].T


def _extract_all(manifest: DatasetManifest, layers, selections) -> list[np.ndarray]:
    """Per layer, an (n, rows, M) array of selected coefficients."""
    ids = [lay.layer_id for lay in layers]
    out = [[] for _ in layers]
    for i in range(manifest.n):
        sample = manifest.load_sample(i, ids)
        for li, lay in enumerate(layers):
            out[li].append(_tensor_coeff_rows(sample[lay.layer_id], selections[li]))
    return [np.stack(rows) for rows in out]


def _components_from_coeffs(pipe: _LayerPipe, coeff_rows: np.ndarray) -> np.ndarray:
    """(n, rows) selected-PCA-coefficient matrix for one layer."""
    cols = []
    for j, model in enumerate(pipe.pca_models):
        proj = project_rows(model, coeff_rows[:, j, :])
        cols.append(proj[:, resolve_coefficient(pipe.coefficient, model.m)])
    return np.column_stack(cols)


def _theta_matrices(config: DetectorConfig, pipes, per_layer_components) -> list[np.ndarray]:
    """Training/eval theta matrix per envelope: one (n, k) matrix in joint
    mode, J matrices of shape (n, N) in OR mode (dense layers contribute
    their single component to every coefficient slice)."""
    if config.mode == "joint":
        return [np.column_stack([c for c in per_layer_components])]
    j_total = config.j
    out = []
    for j in range(j_total):
        cols = []
        for pipe, comps in zip(pipes, per_layer_components):
            cols.append(comps[:, min(j, pipe.rows - 1)])
        out.append(np.column_stack(cols))
    return out


def _delta_for(config: DetectorConfig, envelope: EnvelopeModel, thetas: np.ndarray) -> float:
    if config.bound == "empirical":
        return calibrate_delta_empirical(envelope, thetas, config.epsilon)
    if config.bound == "chebyshev":
        return thresholds.delta_chebyshev(envelope.k, envelope.n, config.epsilon).delta_sq
    if config.bound == "subexponential":
        return thresholds.delta_subexponential(envelope.k, config.epsilon).delta_sq
    return thresholds.delta_chernoff(envelope.k, config.epsilon).delta_sq


def fit(config: DetectorConfig, clean_train: DatasetManifest) -> FittedDetector:
    """Fit the full pipeline on a clean training manifest. Deterministic
    given (config, manifest, seed)."""
    if clean_train.split != "clean-train":
        raise ValidationError(
            f"detector must be fitted on a clean-train manifest, got split '{clean_train.split}'"
        )
    layers = _resolve_layers(config, clean_train)
    selections = [_layer_selection(config, lay) for lay in layers]
    n = clean_train.n
    coeff_stacks = _extract_all(clean_train, layers, selections)

    pipes, components, dropped = [], [], []
    for lay, sel, stack in zip(layers, selections, coeff_stacks):
        models = tuple(
            fit_pca(stack[:, j, :], layer_id=lay.layer_id, row_index=j)
            for j in range(stack.shape[1])
        )
        pipe = _LayerPipe(lay, sel, models, config.pca_coefficient)
        comps = _components_from_coeffs(pipe, stack)
        if comps.var(axis=0, ddof=1).min() < _DEGENERATE_VAR:
            warnings.warn(
                f"dropping layer '{lay.layer_id}': selected theta component is degenerate "
                f"(variance < {_DEGENERATE_VAR:g})"
            )
            dropped.append(lay.layer_id)
            continue
        pipes.append(pipe)
        components.append(comps)
    if not pipes:
        raise ValidationError("all configured layers are degenerate; nothing to fit")

    theta_mats = _theta_matrices(config, pipes, components)
    seed_children = np.random.SeedSequence(config.seed).spawn(len(theta_mats))
    envelopes = []
    for mat, child in zip(theta_mats, seed_children):
        if n <= mat.shape[1] + 1:
            raise ValidationError(
                f"training size n={n} too small for MCD in dimension {mat.shape[1]}"
            )
        env = fit_mcd(mat, seed=child, n_starts=config.mcd_n_starts, threads=config.threads)
        envelopes.append(env.with_delta_sq(_delta_for(config, env, mat)))

    return FittedDetector(
        config=config,
        pipes=tuple(pipes),
        envelopes=tuple(envelopes),
        thetas_train=tuple(theta_mats),
        dropped_layers=tuple(dropped),
        manifest_hash=clean_train.hash_hex(),
        fit_time=time.time(),
    )


def _sample_components(det: FittedDetector, sample: dict) -> list[np.ndarray]:
    comps = []
    for pipe in det.pipes:
        lid = pipe.layer.layer_id
        if lid not in sample:
            raise ValidationError(f"sample is missing layer '{lid}'")
        t = sample[lid]
        if t.dims != pipe.layer.dims:
            raise ValidationError(
                f"layer '{lid}' dims {t.dims} do not match fitted dims {pipe.layer.dims}"
            )
        rows = _tensor_coeff_rows(t, pipe.selection)[None, :, :]
        comps.append(_components_from_coeffs(pipe, rows))
    return comps


def score(det: FittedDetector, sample: dict, sample_id: str = "") -> DetectionVerdict:
    """Classify one sample, given its per-layer tensors keyed by layer_id."""
    comps = _sample_components(det, sample)
    thetas = _theta_matrices(det.config, det.pipes, comps)
    d_sqs, flags = [], []
    for env, mat in zip(det.envelopes, thetas):
        d = float(mahalanobis_sq_many(env, mat)[0])
        d_sqs.append(d)
        flags.append(d > env.delta_sq)
    if det.config.mode == "joint":
        return DetectionVerdict(sample_id, flags[0], d_sqs[0], thetas[0][0])
    return DetectionVerdict(sample_id, any(flags), tuple(d_sqs),
                            tuple(mat[0] for mat in thetas))


def _manifest_flags(det: FittedDetector, manifest: DatasetManifest) -> np.ndarray:
    layers = [p.layer for p in det.pipes]
    for lay in layers:
        declared = manifest.layer(lay.layer_id)
        if declared.dims != lay.dims or declared.kind != lay.kind:
            raise ValidationError(
                f"manifest layer '{lay.layer_id}' ({declared.kind} {declared.dims}) does not "
                f"match fitted layer ({lay.kind} {lay.dims})"
            )
    stacks = _extract_all(manifest, layers, [p.selection for p in det.pipes])
    comps = [_components_from_coeffs(p, s) for p, s in zip(det.pipes, stacks)]
    thetas = _theta_matrices(det.config, det.pipes, comps)
    flagged = np.zeros(manifest.n, dtype=bool)
    for env, mat in zip(det.envelopes, thetas):
        flagged |= mahalanobis_sq_many(env, mat) > env.delta_sq
    return flagged


def evaluate(det: FittedDetector, clean_test: DatasetManifest,
             attacked: DatasetManifest) -> DetectionReport:
    """Coverage / FPR / F1 against a clean and an attacked manifest."""
    if attacked.n == 0:
        raise ValidationError("attacked manifest has zero samples: coverage undefined")
    if clean_test.n == 0:
        raise ValidationError("clean manifest has zero samples: FPR undefined")
    att_flags = _manifest_flags(det, attacked)
    clean_flags = _manifest_flags(det, clean_test)
    tp = int(att_flags.sum())
    fp = int(clean_flags.sum())
    return DetectionReport.from_counts(tp, attacked.n - tp, fp, clean_test.n - fp,
                                       det.config.epsilon)


def recalibrate(det: FittedDetector, epsilon: float) -> FittedDetector:
    """New thresholds at a different epsilon; PCA and MCD fits are reused."""
    config = replace(det.config, epsilon=epsilon)
    envelopes = tuple(
        env.with_delta_sq(_delta_for(config, env, mat))
        for env, mat in zip(det.envelopes, det.thetas_train)
    )
    return replace(det, config=config, envelopes=envelopes)


def ablate_layers(config: DetectorConfig, clean_train: DatasetManifest,
                  clean_test: DatasetManifest, attacked: DatasetManifest) -> list:
    """Fit and evaluate one single-layer detector per configured layer."""
    layers = _resolve_layers(config, clean_train)
    out = []
    for lay in layers:
        single = replace(config, layers=(lay.layer_id,))
        det = fit(single, clean_train)
        out.append((lay.layer_id, evaluate(det, clean_test, attacked)))
    return out


def ablate_thresholds(config: DetectorConfig, clean_train: DatasetManifest,
                      clean_test: DatasetManifest, attacked: DatasetManifest,
                      epsilons) -> list:
    """Evaluate one fit across an epsilon sweep (threshold recalibration
    only); coverage and FPR are non-decreasing in epsilon."""
    if not epsilons:
        raise ValidationError("empty epsilon sweep")
    det = fit(config, clean_train)
    out = []
    for eps in epsilons:
        out.append((float(eps), evaluate(recalibrate(det, float(eps)), clean_test, attacked)))
    return out


def ablate_dct(config: DetectorConfig, clean_train: DatasetManifest,
               clean_test: DatasetManifest, attacked: DatasetManifest,
               ordinals) -> list:
    """Refit the full pipeline per zig-zag ordinal and evaluate each."""
    if not ordinals:
        raise ValidationError("empty ordinal sweep")
    for lay in _resolve_layers(config, clean_train):
        if lay.kind == "conv":
            _, l, k = lay.dims
            for o in ordinals:
                if o >= l * k:
                    raise ValidationError(
                        f"ordinal {o} exceeds {l}x{k} map of layer '{lay.layer_id}'"
                    )
    out = []
    for o in ordinals:
        cfg = replace(config, dct_ordinals=(int(o),), dct_coefficients=None)
        det = fit(cfg, clean_train)
        out.append((int(o), evaluate(det, clean_test, attacked)))
    return out


# ---------------------------------------------------------------------------
# model file ("TSD1"): versioned, checksummed, deterministic for a given fit

def _config_doc(config: DetectorConfig) -> dict:
    doc = asdict(config)
    return doc


def _config_from_doc(doc: dict) -> DetectorConfig:
    kwargs = dict(doc)
    for key in ("layers", "dct_ordinals"):
        if kwargs.get(key) is not None:
            kwargs[key] = tuple(kwargs[key])
    if kwargs.get("dct_coefficients") is not None:
        kwargs["dct_coefficients"] = tuple(tuple(p) for p in kwargs["dct_coefficients"])
    return DetectorConfig(**kwargs)


def save(det: FittedDetector, path) -> None:
    """Write the versioned, checksummed model file."""
    arrays: list[tuple[str, np.ndarray]] = []
    header: dict = {
        "config": _config_doc(det.config),
        "manifest_hash": det.manifest_hash,
        "dropped_layers": list(det.dropped_layers),
        "layers": [],
        "envelopes": [],
    }
    for pipe in det.pipes:
        lay = pipe.layer
        header["layers"].append({
            "layer_id": lay.layer_id,
            "kind": lay.kind,
            "dims": list(lay.dims),
            "selection": None if pipe.selection is None else [list(p) for p in pipe.selection],
            "rows": pipe.rows,
        })
        for j, model in enumerate(pipe.pca_models):
            base = f"pca/{lay.layer_id}/{j}"
            arrays.append((f"{base}/mean", model.mean))
            arrays.append((f"{base}/basis", model.basis))
            arrays.append((f"{base}/energies", model.energies))
    for e, (env, mat) in enumerate(zip(det.envelopes, det.thetas_train)):
        header["envelopes"].append({"h": env.h, "n": env.n, "delta_sq": env.delta_sq})
        arrays.append((f"env/{e}/mu", env.mu_hat))
        arrays.append((f"env/{e}/sigma", env.sigma_hat))
        arrays.append((f"env/{e}/thetas_train", mat))
    header["arrays"] = [{"name": name, "shape": list(arr.shape)} for name, arr in arrays]

    head_blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = struct.pack("<I", len(head_blob)) + head_blob
    for _, arr in arrays:
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    payload = MODEL_MAGIC + struct.pack("<IQ", MODEL_VERSION, len(body)) + body
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(digest)


def load(path) -> FittedDetector:
    """Read a model file; verdicts reproduce the saved detector's exactly."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:3] != b"TSD":
        raise FormatError(f"{path}: not a TSD model file (bad magic)")
    if blob[:4] != MODEL_MAGIC:
        raise VersionError(
            f"{path}: unsupported model magic {blob[:4]!r}; this build reads "
            f"{MODEL_MAGIC.decode()} files only - refit the detector to migrate"
        )
    version, body_len = struct.unpack("<IQ", blob[4:16])
    if version != MODEL_VERSION:
        raise VersionError(
            f"{path}: model file version {version} unsupported (expected {MODEL_VERSION}); "
            f"refit the detector to migrate"
        )
    payload_end = 16 + body_len
    if len(blob) < payload_end + 32:
        raise FormatError(f"{path}: truncated model file (checksum missing)")
    if hashlib.sha256(blob[:payload_end]).digest() != blob[payload_end:payload_end + 32]:
        raise FormatError(f"{path}: checksum mismatch; file is corrupt")

    body = blob[16:payload_end]
    (head_len,) = struct.unpack("<I", body[:4])
    header = json.loads(body[4:4 + head_len].decode("utf-8"))
    offset = 4 + head_len
    values: dict[str, np.ndarray] = {}
    for meta in header["arrays"]:
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset)
        values[meta["name"]] = arr.reshape(meta["shape"]).astype(np.float64)
        offset += 8 * count

    config = _config_from_doc(header["config"])
    pipes = []
    for lay_doc in header["layers"]:
        lay = ManifestLayer(lay_doc["layer_id"], lay_doc["kind"], tuple(lay_doc["dims"]))
        selection = (None if lay_doc["selection"] is None
                     else tuple(tuple(p) for p in lay_doc["selection"]))
        models = tuple(
            PcaModel(lay.layer_id, j,
                     values[f"pca/{lay.layer_id}/{j}/mean"],
                     values[f"pca/{lay.layer_id}/{j}/basis"],
                     values[f"pca/{lay.layer_id}/{j}/energies"])
            for j in range(lay_doc["rows"])
        )
        pipes.append(_LayerPipe(lay, selection, models, config.pca_coefficient))
    envelopes, thetas = [], []
    for e, env_doc in enumerate(header["envelopes"]):
        env = robust.envelope_from_params(
            values[f"env/{e}/mu"], values[f"env/{e}/sigma"],
            h=env_doc["h"], n=env_doc["n"], delta_sq=env_doc["delta_sq"],
        )
        envelopes.append(env)
        thetas.append(values[f"env/{e}/thetas_train"])
    return FittedDetector(
        config=config,
        pipes=tuple(pipes),
        envelopes=tuple(envelopes),
        thetas_train=tuple(thetas),
        dropped_layers=tuple(header["dropped_layers"]),
        manifest_hash=header["manifest_hash"],
        fit_time=None,
    )
