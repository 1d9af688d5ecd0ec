"""Conjugate and splitting integrators for augmented (position-momentum) diffusions."""

from .conjugate import (BTChoice, CoefficientTable, StabilityReport, build_table,
                        conjugate_ab_step, conjugate_euler_step, run_conjugate,
                        stability_report)
from .harness import (RunConfig, RunReport, Schedule, convergence_order,
                      default_benchmark_mixture, exact_affine_flow, make_schedule,
                      reference_solution, run, sample_error_metrics)
from .score import (MixtureComponent, MixtureSpec, ScoreEval, ScoreParameterization,
                    ScoreProvider, default_param, eps_from_score, marginal_score,
                    preconditioned_param, score_from_eps, single_gaussian,
                    stationary_gaussian)
from .sde import (PerturbationKernel, ProcessSpec, drift_matrix, diffusion_matrix,
                  kernel_at, lyapunov_rk4, make_state, prob_flow_field,
                  reverse_sde_drift, sample_prior, stationary_cov)
from .splitting import (ChurnConfig, NPU, NoiseStream, last_step_denoise, ou_substep,
                        sample_chain, split_substep_a, split_substep_b, step)

__all__ = [n for n in dir() if not n.startswith("_")]
