"""Activation exporter: forward-hook capture of intermediate layers into
TFT1 tensor files + manifest for the detector."""

from .hooks import ExportResult, TapSpec, export, export_model, load_inputs, load_model, resolve_taps
from .writer import ExportError, write_feature_file, write_manifest

__version__ = "0.1.0"
