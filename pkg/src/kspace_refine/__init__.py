"""Self-supervised compressed-sensing MRI reconstruction with iterative training-data refinement."""

from .data import PhantomSpec, TrainSample, build_dataset, gen_phantom, simulate_acquisition
from .fourier import data_consistency, encode, encode_adjoint, fft2c, ifft2c
from .masks import LambdaSpec, MaskSpec, gen_lambda, gen_mask_bank, gen_omega, mask_stats
from .metrics import psnr, ssim
from .recon import (
    ClassicalISTA,
    ReconConfig,
    UnrolledISTA,
    UnrolledParams,
    ZeroFilled,
    ista_classical,
    soft_threshold,
    unrolled_backward,
    unrolled_forward,
    zero_filled,
)
from .refine import RefineConfig, refine_dataset, run_refinement
from .train import TrainConfig, adam_step, selfsup_loss, train_stage

__version__ = "0.1.0"
