"""Adaptive importance sampling for rare events in diffusion processes.

The package solves the stochastic-optimal-control reformulation of
free-energy estimation with two numerical backends (least-squares Monte Carlo
regression and a neural-network shooting method) and exposes the resulting
family of low-variance estimators, together with analytic reference models
and a configuration-driven experiment runner.
"""

__version__ = "0.1.0"

from .sde import (SdeModel, StopRule, TrajectoryBatch, brownian_motion,
                  euler_step, exit_statistics, ornstein_uhlenbeck,
                  overdamped_langevin, simulate_batch, with_time)
from .functionals import (CostSpec, control_inner_product,
                          control_inner_products, girsanov_log_likelihood,
                          girsanov_log_likelihoods, indicator_log_cost,
                          work_functional, work_functionals)
from .approximators import (BasisSet, LinearValueApprox, MlpBlock,
                            eval_control, eval_value, mlp_eval,
                            place_gaussian_basis)
from .lsmc import (LsmcConfig, LsmcSolution, backward_sweep, control_policy,
                   implicit_z, iterate_lsmc, regression_targets,
                   solve_least_squares)
from .shooting import (ShootingConfig, ShootingState, forward_y, gradient,
                       loss, train)
from .estimators import (EstimateReport, control_variate_identity,
                         direct_free_energy, general_estimators,
                         is_mgf_estimate, naive_mc, summary_table)
from .reference import (CommittorSpec, DoubleWellSpec, OuSpec,
                        committor_drift, committor_value,
                        finite_dim_girsanov_check, h_transform_hitting_test,
                        ou_optimal_control, ou_value, pde_reference)
