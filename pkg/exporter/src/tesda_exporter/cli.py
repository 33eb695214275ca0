"""tesda-export: dump intermediate-layer activations of a trained model as
TFT1 tensor files plus a dataset manifest consumable by the detector."""

from __future__ import annotations

import argparse
import sys

from .hooks import TapSpec, export
from .writer import SPLITS, ExportError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tesda-export", description=__doc__)
    parser.add_argument("--model", required=True,
                        help="pickled full nn.Module, i.e. torch.save(model, path)")
    parser.add_argument("--taps", required=True,
                        help="comma-separated module names (see model.named_modules())")
    parser.add_argument("--data", required=True, help="input batch: .pt tensor, .npy or .npz")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--split", default="clean-train", choices=SPLITS)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--device", default="cpu")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = export(TapSpec(
            model=args.model,
            taps=tuple(args.taps.split(",")),
            data=args.data,
            out_dir=args.out,
            split=args.split,
            batch_size=args.batch_size,
            device=args.device,
        ))
    except ExportError as exc:
        print(f"tesda-export: error: {exc}", file=sys.stderr)
        return 2
    layer_desc = ";".join(f"{lid}:{kind}{list(dims)}" for lid, kind, dims in result.layers)
    print(f"manifest={result.manifest_path} n={result.n_samples} layers={layer_desc}",
          file=sys.stderr)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
