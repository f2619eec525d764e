"""Bayesian orthogonal-Tucker longitudinal mixed models for tensor time series."""

from .bases import (GaussianBasisSet, GraphLaplacianKernel, SplineBasis,
                    build_gaussian_bases, build_laplacian, constraint_expander,
                    eval_bsplines, prior_correlation)
from .config import (AdaptConfig, CscPingConfig, SamplerConfig, SimulationSpec,
                     config_to_json, load_sampler_config, load_simulation_spec)
from .model import (LongitudinalDataset, ModelState, Subject, covariance_tensor,
                    eval_alpha, eval_beta, eval_beta_at_times, load_checkpoint,
                    marginal_moments, save_checkpoint,
                    stacked_core_equivalence_check)
from .priors import (ShrinkageChain, condition_gaussian, ping_column_draw,
                     sample_constrained_mvn, shrinkage_gibbs_update,
                     shrinkage_prior_draw, variance_gibbs)
from .sampler import (GibbsSampler, PosteriorDraws, draw_subject_cores,
                      init_state, run_chain, state_from_prior)
from .simulate import (GroundTruth, generate_dataset, simulate_from_state,
                       true_beta, true_beta_volume)
from .tensor import (ModeMatrix, TuckerFactor, cp_to_tucker, fold, frobenius,
                     kronecker, mode_product, read_ltf, reconstruct, sup_norm,
                     tucker_to_hosvd, unfold, write_ltf)

__version__ = "0.1.0"
