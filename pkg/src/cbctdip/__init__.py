"""Sparse-view cone-beam CT reconstruction toolkit.

Classical FDK/SIRT baselines plus an untrained 3D transformer prior
optimised against the FDK reference with an adaptively re-weighted
multi-level perceptual loss.
"""

__version__ = "0.1.0"

from .backend import active_backend, set_backend  # noqa: F401
from .geometry import (  # noqa: F401
    GeometryError, ProjectionSet, ScanGeometry, Volume, VolumeGrid,
    cube_grid, make_circular_geometry, normalize_volume, subsample_views,
)
from .phantoms import PHANTOM_KINDS, make_phantom  # noqa: F401
from .io import (  # noqa: F401
    FormatError, load_params, load_projections, load_volume,
    save_params, save_projections, save_volume,
)
from .projector import back_project, forward_project  # noqa: F401
from .classical import FDK_FILTERS, fdk_reconstruct, sirt_reconstruct  # noqa: F401
from .metrics import psnr, ssim, wilcoxon_one_sided  # noqa: F401
from .generator import (  # noqa: F401
    GeneratorState, UNet3DConfig, UNETRConfig, generate, generate_tensor,
    generate_unet3d, init_generator, init_unet3d, sample_noise,
)
from .loss import (  # noqa: F401
    DSConvParams, FeatureExtractor, LossWeights, dsconv_apply,
    extract_features, init_dsconv, init_feature_extractor, total_loss,
)
from .optimizer import (  # noqa: F401
    AdamState, LossConfig, OptimizerConfig, RunLog, adam_update, count_dips,
    dip_reconstruct, gd_update, reweight_step,
)
