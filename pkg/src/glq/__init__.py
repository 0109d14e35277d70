"""Loss-guided layer-wise quantization of small MLPs.

Layer Hessians weighted by end-loss gradients, a non-uniform codebook
quantizer driven by alternating closed-form solves and coordinate
descent, weighted k-means baselines, and brute-force oracles that keep
all of it honest. See README.md for the tour.
"""

from .calib_model import (
    Dataset,
    LayerCalibration,
    MlpModel,
    calibrate,
    end_loss,
    gen_dataset,
    random_model,
    train,
)
from .errors import GlqError
from .guidedquant import QuantJob, QuantReport, eval_objectives, run_job, sweep
from .hessian import (
    ChannelPartition,
    HessianCache,
    HessianSet,
    fisher_diag,
    guided_hessians,
    plain_hessian,
)
from .linalg import CholeskyFactor, cholesky, least_squares, quad_form
from .lnq import LnqConfig, lnq_quantize
from .runconfig import RunConfig
from .scalar_quant import (
    Assignment,
    ChannelQuantState,
    Codebook,
    QuantizedLayer,
    WeightedPoints,
    kmeans_1d_exact,
    kmeans_pp_init,
    lloyd,
    rtn_quantize,
    squeezellm_quantize,
)

__version__ = "0.1.0"
