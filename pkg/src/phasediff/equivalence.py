"""Independently implemented reference updates the conjugate integrator must match.

These deliberately avoid the coefficient-table machinery: the DDIM update works
from the closed-form signal/noise scales of the VP kernel, and the
exponential-integrator forms build the propagator psi(t, s) = exp(F (t - s))
and quadrature their own integrands. Agreement with the conjugate steps is a
theorem, not a shared code path.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ConfigError, QuadratureFailure
from .linalg2 import apply_to_state, mat_exp
from .score import ScoreParameterization
from .sde import VP, ProcessSpec, diffusion_matrix, drift_matrix


def ddim_step(spec: ProcessSpec, z: np.ndarray, t: float, t_next: float, eps: np.ndarray) -> np.ndarray:
    """Deterministic DDIM update for the VP process.

    With alpha_t = exp(-1/2 int beta) and sigma_t = sqrt(1 - alpha_t^2):
    x0_hat = (x - sigma_t eps) / alpha_t, then x_next = alpha_next x0_hat +
    sigma_next eps. Momentum rows pass through untouched.
    """
    if spec.kind != VP:
        raise ConfigError("the DDIM form is defined for the VP process")
    alpha_t = np.exp(-0.5 * spec.int_beta(t))
    alpha_n = np.exp(-0.5 * spec.int_beta(t_next))
    sigma_t = np.sqrt(1.0 - alpha_t * alpha_t)
    sigma_n = np.sqrt(1.0 - alpha_n * alpha_n)
    out = np.array(z, dtype=float, copy=True)
    x0_hat = (z[..., 0, :] - sigma_t * eps[..., 0, :]) / alpha_t
    out[..., 0, :] = alpha_n * x0_hat + sigma_n * eps[..., 0, :]
    return out


def _psi(spec: ProcessSpec, t: float, s: float) -> np.ndarray:
    """psi(t, s) = A_t^{-1} A_s = exp(F (t - s)) for time-constant drift."""
    if not spec.time_constant:
        raise ConfigError("closed-form propagator needs time-constant drift")
    return mat_exp(drift_matrix(spec), t - s)


def exp_integrator_step(spec: ProcessSpec, param: ScoreParameterization, z: np.ndarray,
                        t: float, t_next: float, eps: np.ndarray,
                        quad_tol: float = 1e-12) -> np.ndarray:
    """Original-space exponential-integrator update.

    z_next = psi(t_next, t) z + [ int_t^{t_next} (1/2) psi(t_next, s) G G^T
    L_s^{-T} ds ] eps, with L_s^{-T} = -C_out(s).
    """
    weight = _exp_int_weights(spec, param, t, t_next, None, quad_tol)[0]
    return apply_to_state(_psi(spec, t_next, t), z) + apply_to_state(weight, eps)


def ab_exp_integrator_step(spec: ProcessSpec, param: ScoreParameterization, z: np.ndarray,
                           t: float, t_next: float, node_times: np.ndarray,
                           eps_list: list[np.ndarray], quad_tol: float = 1e-12) -> np.ndarray:
    """Exponential integrator with polynomial extrapolation over the given nodes.

    z_next = psi(t_next, t) z + sum_k [ int_t^{t_next} (1/2) psi(t_next, s)
    G G^T L_s^{-T} C_k(s) ds ] eps_k with Lagrange bases C_k on node_times.
    """
    weights = _exp_int_weights(spec, param, t, t_next, np.asarray(node_times, dtype=float), quad_tol)
    out = apply_to_state(_psi(spec, t_next, t), z)
    for w_k, eps_k in zip(weights, eps_list):
        out = out + apply_to_state(w_k, eps_k)
    return out


def _exp_int_weights(spec: ProcessSpec, param: ScoreParameterization, t: float, t_next: float,
                     node_times: np.ndarray | None, quad_tol: float) -> list[np.ndarray]:
    nodes = np.array([t]) if node_times is None else node_times

    def basis(k: int, s: float) -> float:
        out = 1.0
        for l, t_l in enumerate(nodes):
            if l != k:
                out *= (s - t_l) / (nodes[k] - t_l)
        return out

    def rhs(s: float, _y: np.ndarray) -> np.ndarray:
        g = diffusion_matrix(spec, s)
        core = 0.5 * (_psi(spec, t_next, s) @ (g @ g.T) @ (-param.c_out(s)))
        return np.concatenate([(basis(k, s) * core).ravel() for k in range(len(nodes))])

    sol = solve_ivp(rhs, (t, t_next), np.zeros(4 * len(nodes)), rtol=quad_tol, atol=quad_tol,
                    method="RK45")
    if not sol.success:
        raise QuadratureFailure(f"exponential-integrator quadrature failed: {sol.message}")
    y = sol.y[:, -1]
    return [y[4 * k:4 * k + 4].reshape(2, 2) for k in range(len(nodes))]
