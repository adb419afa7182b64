from .homography import HomographyError, RansacConfig, dlt, estimate_homography
from .metrics import auc, ccm, corner_error, mma, mma_from_errors, reprojection_error
from .synth import SyntheticPair, synth_pair, warp_image

__all__ = [
    "HomographyError",
    "RansacConfig",
    "SyntheticPair",
    "auc",
    "ccm",
    "corner_error",
    "dlt",
    "estimate_homography",
    "mma",
    "mma_from_errors",
    "reprojection_error",
    "synth_pair",
    "warp_image",
]
