"""Atlas-based segmentation and displacement biomarkers for 2-D
displacement-encoded image bundles."""

from .errors import (
    AtlasSegError,
    BundleFormatError,
    ChecksumError,
    ConfigurationError,
    EmptyRegionError,
    InputError,
    MalformedHeaderError,
    ResolutionError,
    SegmentationFailureError,
    ShapeError,
    TruncatedPayloadError,
    VersionError,
)
from .imaging import (
    GateStack,
    ImageGrid,
    LabelMask,
    ScalarImage,
    SubjectBundle,
    histogram_equalize,
    interpolate,
    normalize_bundle,
    restrict,
    temporal_reduce,
    warp_mask,
)
from .transforms import AffineTransform, DisplacementField, affine_to_displacement, prolong
from .bundleio import AtlasBank, read_bank, read_bundle, write_bank, write_bundle
from .registration import (
    RegistrationConfig,
    RegistrationResult,
    affine_preregister,
    derivative_check,
    elastic_regularizer,
    gauss_newton_solve,
    hyperelastic_regularizer,
    multilevel_register,
    objective,
    register_images,
    ssd_distance,
)
from .fusion import FusionConfig, SegmentationResult, SoftMask, fuse, rank_templates, segment
from .evaluation import biomarker, compare_report, dice, evaluate_subject, grid_search, relative_error
from .phantom import PhantomSpec, generate_bank, generate_base, write_phantom_dataset

__version__ = "0.1.0"
