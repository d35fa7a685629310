"""Diffusion posterior sampling for pseudo-invertible measurement operators."""

from .image import (
    BlockGrid,
    Domain,
    DomainMismatchError,
    ImageTensor,
    convert_domain,
    read_png,
    rgb_to_ycbcr,
    tile_blocks,
    untile_blocks,
    write_png,
    ycbcr_to_rgb,
)
from .jpeg import (
    JpegCoefficients,
    JpegParams,
    QuantTable,
    Subsampling,
    TableOrder,
    dct8x8,
    idct8x8,
    jpeg_decode,
    jpeg_encode,
    quant_table_for_qf,
    subsample_420,
    tables_for_qf,
    upsample_420,
)
from .jfif import parse_jfif
from .operators import (
    BitDepthQuantizer,
    GeneralizedOperator,
    IdentityOperator,
    JpegOperator,
    LinearOperatorAdapter,
    Measurement,
    load_measurement,
    operator_from_descriptor,
    verify_property1,
    verify_property2,
)
from .denoisers import (
    Denoiser,
    GmmDenoiser,
    GmmPrior,
    LoopbackDenoiser,
    gmm_mmse_denoise,
)
from .sampler import (
    DiffusionSchedule,
    RestorationResult,
    SamplerConfig,
    ddrm_step,
    init_from_measurement,
    make_schedule,
    predicted_noise,
    restore,
    timestep_ladder,
)
from .metrics import MetricReport, bpp, psnr, report_for_pairs, ssim
from .bridge_client import (
    BridgeClient,
    BridgeDenoiser,
    BridgeError,
    BridgePeerError,
    BridgeProtocolError,
    BridgeRemoteError,
    BridgeTimeoutError,
)
from .synthetic import (
    SyntheticResult,
    canonical_gmm16_prior,
    run_gmm16_experiment,
    vector_psnr,
)

__version__ = "0.1.0"
