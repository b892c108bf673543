"""Region-constrained GRPO for deterministic flow models: a numerical laboratory."""
from .acd import (AcdReport, AttentionRecord, acd_density, acd_layer_residual, aggregate_acd,
                  attention_mass)
from .env import EditTask, Geometry, make_suite, make_task, reward_edit, reward_pres
from .estimator import RegionGRPO
from .flow import AttnFlow, Condition, LinearFlow, Trajectory
from .grpo import (GrpoConfig, clipped_objective, combine_rewards, group_advantages,
                   normalize_rewards, sample_anchors, train_step)
from .latent import EditMask, Latent, decompose, region_norms
from .noise import (NoiseGroup, PerturbationScheme, alpha_map, build_global_group,
                    build_rdp_group, conditional_covariance_diag)
from .surrogate import (Bandwidths, CandidateDistribution, calibrate_bandwidths,
                        candidate_policy, kernel_covariance_inverse_diag, masked_distance,
                        policy_ratio, responsibilities)

__version__ = "0.1.0"
