"""TESDA: statistical detection of attacks on deep networks from
intermediate-layer features (DCT -> PCA -> robust elliptic envelope)."""

from .dct import DctCoefficientMatrix, DctSelection, dct2, extract_dct_matrix, idct2, zigzag_index
from .detector import (
    DetectionReport,
    DetectionVerdict,
    DetectorConfig,
    FittedDetector,
    ablate_dct,
    ablate_layers,
    ablate_thresholds,
    evaluate,
    fit,
    load,
    recalibrate,
    save,
    score,
)
from .errors import FormatError, NumericalError, TesdaError, ValidationError, VersionError
from .pca import PcaModel, PcaProjection, ThetaVector, fit_pca, project, select_theta_components
from .robust import (
    EnvelopeModel,
    MahalanobisScore,
    calibrate_delta_empirical,
    envelope_from_params,
    fit_mcd,
    is_outlier,
    mahalanobis_sq,
)
from .synth import (
    FrequencyInject,
    MeanShift,
    SyntheticSpec,
    VarianceScale,
    chi2_quantile,
    chi2_tail_mc,
    generate,
    ks_statistic,
)
from .tensor_io import (
    DatasetManifest,
    DenseFeatureVector,
    FeatureTensor,
    load_manifest,
    read_tensor,
    save_manifest,
    write_tensor,
)
from .thresholds import (
    BoundSpec,
    ThresholdResult,
    compare_bounds,
    delta_chebyshev,
    delta_chernoff,
    delta_subexponential,
    epsilon_for_target,
    lambert_w_minus1,
)

__version__ = "0.1.0"
