"""Benchmarking toolkit for diffusion MRI denoising and direction subsampling."""

__version__ = "0.1.0"

from .design import (
    Model,
    SubsetSelection,
    condition_number,
    dti_design_matrix,
    laplace_beltrami_penalty,
    random_subset_baseline,
    select_subset,
    sh_coefficient_count,
    sh_design_matrix,
    subset_scheme,
)
from .dti import TensorMap, fit_dti, mae_metric, mae_scalar, tensor_scalars, v1_angular_error
from .errors import *  # noqa: F401,F403
from .mppca import (
    DenoiseReport,
    Moments,
    PatchConfig,
    denoise_mppca,
    mp_threshold,
    pool_moments,
    residual_moments,
)
from .phantom import (
    PhantomSpec,
    Region,
    add_gaussian,
    add_rician,
    kspace_downsample,
    make_phantom,
    multishell_scheme,
    random_kspace_augment,
    simulate_signal,
    spec_from_json,
    two_region_spec,
)
from .reliability import (
    RegionStats,
    ScnMatrix,
    aggregate_cov,
    cov_within_subject,
    region_means,
    scn_build,
    scn_mae,
    scn_repeatability,
)
from .shm import ShCoeffMap, fit_sh, fit_shell, jsd, jsd_map, project_sh
from .sphere import icosphere, make_hemisphere_362
from .volume import (
    GradientScheme,
    Shell,
    Volume4D,
    mean_b0,
    read_gradients,
    read_nifti,
    shell_partition,
    write_gradients,
    write_nifti,
)
