"""Locally monotone deep-equilibrium reconstruction for multicoil MRI."""
from .kernels import BACKEND
from .metrics import psnr, ssim
from .mri import MeasurementModel, KSpaceData, apply_A, apply_AH, apply_AHA, sense_init, synthetic_dataset
from .operators import CombinedOperator, ScoreNetwork, spectral_normalize
from .fixed_point import SolverConfig, steepest_descent_fp, forward_backward_fp, deq_backward
from .lipschitz import BallSpec, estimate_local_lipschitz
from .trainer import TrainConfig, train, choose_delta

__version__ = "0.1.0"
