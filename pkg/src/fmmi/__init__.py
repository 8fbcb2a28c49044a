"""Flow-matching estimators of mutual information and entropy differences."""

from .benchdist import DatasetSpec, ground_truth_mi, sample, solve_params
from .diffkernel import (GradBuffer, MlpParams, divergence_exact, divergence_hutchinson,
                         fm_loss_and_grads, init_mlp, mlp_forward)
from .estimators import (EstimateResult, cfmmi, fmdoe_estimate, jfmmi, ode_push,
                         permute_product, shuffle_conditional, wasserstein_surrogate)
from .flowmatch import (CouplingBatch, OptimizerState, TrainConfig, VelocityModel, adamw_step,
                        sample_path, target_velocity, train)
from .oracle import ksg_estimate, quad_entropy_1d

__version__ = "0.1.0"
