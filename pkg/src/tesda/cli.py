"""Command-line orchestration: synth / fit / score / eval / ablations /
bounds.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical failure. Reports go to stdout as TSV and, with --out PREFIX,
to PREFIX.tsv and PREFIX.json carrying identical numeric values plus a
seed/config echo. Progress logs are key=value lines on stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

from . import detector, synth, thresholds
from .errors import NumericalError, TesdaError, ValidationError
from .tensor_io import load_manifest
from .thresholds import ThresholdResult

_USAGE_EXIT = 1
_DATA_EXIT = 2
_NUMERIC_EXIT = 3


class _UsageError(TesdaError):
    """Missing or contradictory options: exit code 1, like argparse errors."""


def _log(**kv) -> None:
    print(" ".join(f"{k}={v}" for k, v in kv.items()), file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(_USAGE_EXIT)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def _emit(rows: list[dict], meta: dict, out_prefix) -> None:
    """Print a TSV table and optionally write PREFIX.tsv / PREFIX.json."""
    if not rows:
        raise ValidationError("nothing to report")
    cols = list(rows[0].keys())
    lines = [f"# {k}={v}" for k, v in meta.items()]
    lines.append("\t".join(cols))
    lines += ["\t".join(_fmt(row[c]) for c in cols) for row in rows]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out_prefix:
        prefix = Path(out_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        prefix.with_suffix(prefix.suffix + ".tsv").write_text(text, encoding="utf-8")
        doc = {"meta": meta, "rows": rows}
        prefix.with_suffix(prefix.suffix + ".json").write_text(
            json.dumps(doc, indent=1) + "\n", encoding="utf-8")
        _log(wrote_tsv=str(prefix) + ".tsv", wrote_json=str(prefix) + ".json")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    if path.suffix.lower() == ".json":
        return json.loads(path.read_text(encoding="utf-8"))
    if path.suffix.lower() == ".toml":
        try:
            import tomllib as toml  # py311+
        except ImportError:
            try:
                import tomli as toml
            except ImportError as exc:
                raise ValidationError(
                    "TOML config requires Python 3.11+ or the tomli package; use JSON"
                ) from exc
        return toml.loads(path.read_text(encoding="utf-8"))
    raise ValidationError(f"config file must be .json or .toml, got {path.suffix!r}")


def _pick(args, config: dict, key: str, default=None):
    """Flag value if given, else config-file value, else default."""
    val = getattr(args, key.replace("-", "_"), None)
    if val is not None:
        return val
    if key in config:
        return config[key]
    return default


def _parse_xy_list(text: str) -> tuple:
    # "0,0;0,1" -> ((0, 0), (0, 1))
    pairs = []
    for part in text.split(";"):
        bits = part.split(",")
        if len(bits) != 2:
            raise ValidationError(f"bad --dct-xy entry {part!r}; expected x,y pairs joined by ';'")
        pairs.append((int(bits[0]), int(bits[1])))
    return tuple(pairs)


def _parse_int_list(text: str) -> tuple:
    return tuple(int(p) for p in str(text).split(","))


def _parse_float_list(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(p) for p in str(text).split(","))


def _detector_config(args, config: dict) -> detector.DetectorConfig:
    layers = _pick(args, config, "layers")
    if isinstance(layers, str):
        layers = tuple(layers.split(","))
    elif isinstance(layers, list):
        layers = tuple(layers)
    dct_xy = _pick(args, config, "dct-xy")
    dct_ordinal = _pick(args, config, "dct-ordinal")
    j = _pick(args, config, "J")
    kwargs = dict(
        layers=layers,
        pca_coefficient=_pick(args, config, "pca-coefficient", "last"),
        epsilon=float(_pick(args, config, "eps", 0.01)),
        bound=_pick(args, config, "bound", "empirical"),
        mode=_pick(args, config, "mode", "joint"),
        seed=int(_pick(args, config, "seed", 0)),
        mcd_n_starts=int(_pick(args, config, "mcd-starts", 500)),
        threads=int(_pick(args, config, "threads", os.environ.get("TESDA_THREADS", 1))),
    )
    if dct_xy is not None and dct_ordinal is not None:
        raise _UsageError("give either --dct-xy or --dct-ordinal, not both")
    if dct_xy is not None:
        kwargs["dct_coefficients"] = _parse_xy_list(dct_xy) if isinstance(dct_xy, str) else tuple(
            tuple(p) for p in dct_xy)
    elif dct_ordinal is not None:
        kwargs["dct_ordinals"] = _parse_int_list(dct_ordinal)
        kwargs["dct_coefficients"] = None
    elif j is not None:
        kwargs["dct_ordinals"] = tuple(range(int(j)))
        kwargs["dct_coefficients"] = None
    return detector.DetectorConfig(**kwargs)


def _config_echo(cfg: detector.DetectorConfig) -> str:
    return json.dumps(detector._config_doc(cfg), sort_keys=True, separators=(",", ":"))


def _report_row(label_key, label, report: detector.DetectionReport) -> dict:
    row = {label_key: label} if label_key else {}
    row.update(report.as_dict())
    return row


def _add_detector_flags(p: _Parser) -> None:
    p.add_argument("--config", help="TOML/JSON config file; flags override it")
    p.add_argument("--layers", help="comma-separated layer ids (default: all)")
    p.add_argument("--dct-xy", help="DCT coefficients as x,y pairs joined by ';'")
    p.add_argument("--dct-ordinal", help="DCT coefficients as comma-separated zig-zag ordinals")
    p.add_argument("--J", help="monitor the first J zig-zag DCT coefficients")
    p.add_argument("--pca-coefficient", help="'last' (default) or 1-based energy rank")
    p.add_argument("--eps", help="contamination parameter epsilon")
    p.add_argument("--bound", choices=("empirical",) + thresholds.BOUND_KINDS)
    p.add_argument("--mode", choices=("joint", "or"))
    p.add_argument("--seed", help="PRNG seed")
    p.add_argument("--mcd-starts", help="FAST-MCD random starts (default 500)")
    p.add_argument("--threads", help="worker threads (default $TESDA_THREADS or 1)")


def _build_parser() -> _Parser:
    parser = _Parser(prog="tesda", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bounds", help="print all threshold bounds for one (k, n, eps)")
    p.add_argument("--config")
    p.add_argument("--k", help="theta dimension")
    p.add_argument("--n", help="training size (chebyshev)")
    p.add_argument("--eps", help="contamination parameter")
    p.add_argument("--fnr", help="target false-negative rate (sets eps = 1 - fnr)")
    p.add_argument("--fpr", help="target false-positive rate (sets eps = fpr)")
    p.add_argument("--draws", help="Monte Carlo draws for the tail check (default 100000)")
    p.add_argument("--seed")
    p.add_argument("--out")

    p = sub.add_parser("synth", help="generate synthetic clean/attacked datasets")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--layer-dims", help="MxLxK triples, comma-separated (default 8x4x4,8x4x4)")
    p.add_argument("--n-train", help="training samples (default 2000)")
    p.add_argument("--n-clean", help="clean test samples (default 2000)")
    p.add_argument("--n-attacked", help="attacked samples (default 2000)")
    p.add_argument("--attack", choices=("none", "mean-shift", "variance-scale", "frequency-inject"))
    p.add_argument("--attack-layer", help="0-based layer index or 'all'")
    p.add_argument("--magnitude", help="mean-shift magnitude in sigma units")
    p.add_argument("--direction", choices=("pca-lowest", "random"))
    p.add_argument("--factor", help="variance scale factor")
    p.add_argument("--ordinal", help="zig-zag ordinal for frequency injection")
    p.add_argument("--amplitude", help="frequency injection amplitude in sigma units")
    p.add_argument("--seed")

    p = sub.add_parser("fit", help="fit a detector on a clean-train manifest")
    p.add_argument("--train", help="clean-train manifest path")
    p.add_argument("--det", help="output model file path")
    _add_detector_flags(p)

    p = sub.add_parser("score", help="score every sample of a manifest against a model")
    p.add_argument("--det", help="model file path")
    p.add_argument("--data", help="manifest to score")
    p.add_argument("--out")

    p = sub.add_parser("eval", help="coverage/FPR/F1 of a model on clean + attacked manifests")
    p.add_argument("--det", help="model file path")
    p.add_argument("--clean", help="clean test manifest")
    p.add_argument("--attacked", help="attacked manifest")
    p.add_argument("--out")

    for name, extra in (("ablate-layers", ()), ("ablate-eps", ("--eps-sweep",)),
                        ("ablate-dct", ("--ordinals",))):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} ablation")
        p.add_argument("--train", help="clean-train manifest")
        p.add_argument("--clean", help="clean test manifest")
        p.add_argument("--attacked", help="attacked manifest")
        p.add_argument("--out")
        for flag in extra:
            p.add_argument(flag)
        _add_detector_flags(p)
    return parser


def _require(args, config, key: str):
    val = _pick(args, config, key)
    if val is None:
        raise _UsageError(f"missing required option --{key}")
    return val


def _manifest(args, config, key: str):
    return load_manifest(_require(args, config, key))


def cmd_bounds(args, config) -> int:
    eps = _pick(args, config, "eps")
    fnr, fpr = _pick(args, config, "fnr"), _pick(args, config, "fpr")
    if sum(v is not None for v in (eps, fnr, fpr)) != 1:
        raise _UsageError("give exactly one of --eps, --fnr, --fpr (joint targets are refused)")
    if fnr is not None:
        eps = thresholds.epsilon_for_target("fnr", float(fnr))
    elif fpr is not None:
        eps = thresholds.epsilon_for_target("fpr", float(fpr))
    eps = float(eps)
    k = int(_require(args, config, "k"))
    n = int(_require(args, config, "n"))
    draws = int(_pick(args, config, "draws", 100_000))
    seed = int(_pick(args, config, "seed", 0))
    table = thresholds.compare_bounds(k, n, eps)
    rows = []
    for kind, entry in table.items():
        if isinstance(entry, ThresholdResult):
            mc = synth.chi2_tail_mc(k, entry.delta_sq, draws, seed=seed)
            rows.append({"kind": kind, "delta": entry.delta, "delta_sq": entry.delta_sq,
                         "branch_note": entry.branch_note, "mc_tail_estimate": mc.p_hat})
        else:
            rows.append({"kind": kind, "delta": math.nan, "delta_sq": math.nan,
                         "branch_note": f"error: {entry}", "mc_tail_estimate": math.nan})
    _emit(rows, {"k": k, "n": n, "eps": eps, "draws": draws, "seed": seed},
          _pick(args, config, "out"))
    return 0


def cmd_synth(args, config) -> int:
    dims_text = _pick(args, config, "layer-dims", "8x4x4,8x4x4")
    layers = tuple(tuple(int(d) for d in part.split("x")) for part in str(dims_text).split(","))
    attack_kind = _pick(args, config, "attack", "none")
    layer_raw = _pick(args, config, "attack-layer", "all")
    layer = None if str(layer_raw) == "all" else int(layer_raw)
    if attack_kind in (None, "none"):
        attack = None
    elif attack_kind == "mean-shift":
        attack = synth.MeanShift(
            magnitude=float(_require(args, config, "magnitude")),
            layer=layer,
            direction=_pick(args, config, "direction", "pca-lowest"),
        )
    elif attack_kind == "variance-scale":
        attack = synth.VarianceScale(factor=float(_require(args, config, "factor")), layer=layer)
    else:
        attack = synth.FrequencyInject(
            ordinal=int(_require(args, config, "ordinal")),
            amplitude=float(_require(args, config, "amplitude")),
            layer=layer,
        )
    spec = synth.SyntheticSpec(
        layers=layers,
        n_train=int(_pick(args, config, "n-train", 2000)),
        n_clean=int(_pick(args, config, "n-clean", 2000)),
        n_attacked=int(_pick(args, config, "n-attacked", 2000)),
        attack=attack,
        seed=int(_pick(args, config, "seed", 0)),
    )
    out_dir = Path(_require(args, config, "out"))
    train, test, attacked = synth.generate(spec, out_dir)
    _log(seed=spec.seed, n_train=train.n, n_clean=test.n, n_attacked=attacked.n,
         train_manifest=train.path, clean_manifest=test.path, attacked_manifest=attacked.path)
    return 0


def cmd_fit(args, config) -> int:
    cfg = _detector_config(args, config)
    manifest = _manifest(args, config, "train")
    det = detector.fit(cfg, manifest)
    out = _require(args, config, "det")
    detector.save(det, out)
    _log(seed=cfg.seed, config=_config_echo(cfg), n=manifest.n, k=det.k,
         dropped=",".join(det.dropped_layers) or "-",
         delta_sq=";".join(repr(e.delta_sq) for e in det.envelopes), model=out)
    return 0


def cmd_score(args, config) -> int:
    det = detector.load(_require(args, config, "det"))
    manifest = _manifest(args, config, "data")
    rows = []
    for i in range(manifest.n):
        sample = manifest.load_sample(i, det.layer_ids)
        verdict = detector.score(det, sample, sample_id=manifest.sample_ids[i])
        d_sq = (verdict.d_sq if isinstance(verdict.d_sq, float)
                else ";".join(repr(d) for d in verdict.d_sq))
        rows.append({"sample_id": verdict.sample_id, "is_attack": int(verdict.is_attack),
                     "d_sq": d_sq})
    meta = {"seed": det.config.seed, "config": _config_echo(det.config),
            "manifest": str(manifest.path)}
    _emit(rows, meta, _pick(args, config, "out"))
    return 0


def cmd_eval(args, config) -> int:
    det = detector.load(_require(args, config, "det"))
    clean = _manifest(args, config, "clean")
    attacked = _manifest(args, config, "attacked")
    report = detector.evaluate(det, clean, attacked)
    meta = {"seed": det.config.seed, "config": _config_echo(det.config)}
    _emit([_report_row(None, None, report)], meta, _pick(args, config, "out"))
    return 0


def cmd_ablate_layers(args, config) -> int:
    cfg = _detector_config(args, config)
    train = _manifest(args, config, "train")
    clean = _manifest(args, config, "clean")
    attacked = _manifest(args, config, "attacked")
    rows = [_report_row("layer", lid, rep)
            for lid, rep in detector.ablate_layers(cfg, train, clean, attacked)]
    _emit(rows, {"seed": cfg.seed, "config": _config_echo(cfg)}, _pick(args, config, "out"))
    return 0


def cmd_ablate_eps(args, config) -> int:
    cfg = _detector_config(args, config)
    sweep = _parse_float_list(_require(args, config, "eps-sweep"))
    train = _manifest(args, config, "train")
    clean = _manifest(args, config, "clean")
    attacked = _manifest(args, config, "attacked")
    rows = [_report_row("eps", eps, rep)
            for eps, rep in detector.ablate_thresholds(cfg, train, clean, attacked, sweep)]
    _emit(rows, {"seed": cfg.seed, "config": _config_echo(cfg)}, _pick(args, config, "out"))
    return 0


def cmd_ablate_dct(args, config) -> int:
    cfg = _detector_config(args, config)
    train = _manifest(args, config, "train")
    clean = _manifest(args, config, "clean")
    attacked = _manifest(args, config, "attacked")
    ords_raw = _pick(args, config, "ordinals", "all")
    if str(ords_raw) == "all":
        sizes = [l * k for lay in train.layers if lay.kind == "conv"
                 for _, l, k in [lay.dims]]
        if not sizes:
            raise ValidationError("no conv layers to sweep")
        ordinals = tuple(range(min(sizes)))
    else:
        ordinals = _parse_int_list(ords_raw)
    rows = [_report_row("ordinal", o, rep)
            for o, rep in detector.ablate_dct(cfg, train, clean, attacked, ordinals)]
    _emit(rows, {"seed": cfg.seed, "config": _config_echo(cfg)}, _pick(args, config, "out"))
    return 0


_COMMANDS = {
    "bounds": cmd_bounds,
    "synth": cmd_synth,
    "fit": cmd_fit,
    "score": cmd_score,
    "eval": cmd_eval,
    "ablate-layers": cmd_ablate_layers,
    "ablate-eps": cmd_ablate_eps,
    "ablate-dct": cmd_ablate_dct,
}


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else _USAGE_EXIT
    try:
        config = _load_config_file(getattr(args, "config", None))
        return _COMMANDS[args.command](args, config)
    except _UsageError as exc:
        _log(error=f"usage: {exc}")
        return _USAGE_EXIT
    except NumericalError as exc:
        _log(error=f"numerical: {exc}")
        return _NUMERIC_EXIT
    except (TesdaError, ValueError, OSError) as exc:
        _log(error=str(exc))
        return _DATA_EXIT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
