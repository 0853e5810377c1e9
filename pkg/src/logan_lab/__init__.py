"""Latent-optimised GAN laboratory: autodiff core, models, latent steps,
game dynamics, training, metrics and a command-line driver."""

from .autodiff import Expr, Program, evaluate, finite_difference, gradient, gradient_expr
from .games import logan_approx_sga_check, simulate_dynamics, unrolled_gradient
from .latent import LARGE_PROFILE, SMALL_PROFILE, LatentOptConfig, ngd_step, ngd_step_oracle, refine_latent
from .metrics import gaussian_frechet, mode_coverage, moving_normalise
from .models import GanModel, LossKind, MlpSpec, critic_value, generate, init_model, losses
from .trainer import AblationFlags, DataDistribution, TrainConfig, train, train_step

__version__ = "0.1.0"
