"""Forward processes (PSLD and VP), their moments, and reverse-time vector fields.

States are ndarrays of shape ``(..., 2, d)``: row 0 holds the position x, row 1
the momentum m. The VP process lives in the same machinery with the momentum
row structurally zeroed, so every integrator serves both processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConfigError, QuadratureFailure
from .linalg2 import apply_to_state, blockmat, cholesky2, is_spd, mat_exp

PSLD = "psld"
VP = "vp"


@dataclass(frozen=True)
class ProcessSpec:
    """Drift/diffusion definition of a linear diffusion plus hyperparameters.

    Defaults are the CIFAR-10 PSLD setting: beta=8, Gamma=0.01, nu=4.01,
    M^-1=4, gamma0=0.04.
    """

    kind: str = PSLD
    beta: float = 8.0
    gamma_fric: float = 0.01  # Gamma
    nu: float = 4.01
    mass_inv: float = 4.0  # M^-1
    gamma0: float = 0.04  # initial momentum variance scale gamma
    T: float = 1.0
    beta_schedule: str = "constant"  # VP only: "constant" or "linear"
    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if self.kind not in (PSLD, VP):
            raise ConfigError(f"unknown process kind {self.kind!r}")
        if self.T <= 0.0:
            raise ConfigError("T must be > 0")
        if self.kind == PSLD:
            if self.beta <= 0.0:
                raise ConfigError("beta must be > 0")
            if self.gamma_fric < 0.0 or self.nu < 0.0:
                raise ConfigError("Gamma and nu must be >= 0")
            if self.mass_inv <= 0.0 or self.gamma0 <= 0.0:
                raise ConfigError("M^-1 and gamma must be > 0")
        else:
            if self.beta_schedule not in ("constant", "linear"):
                raise ConfigError(f"unknown beta schedule {self.beta_schedule!r}")
            if self.beta_schedule == "constant" and self.beta <= 0.0:
                raise ConfigError("beta must be > 0")
            if self.beta_schedule == "linear" and (self.beta_min <= 0.0 or self.beta_max <= self.beta_min):
                raise ConfigError("linear schedule needs 0 < beta_min < beta_max")

    @property
    def mass(self) -> float:
        return 1.0 / self.mass_inv

    def beta_at(self, t: float) -> float:
        if self.kind == PSLD or self.beta_schedule == "constant":
            return self.beta
        return self.beta_min + (self.beta_max - self.beta_min) * t / self.T

    def int_beta(self, t: float) -> float:
        """Integral of beta_s over [0, t], closed form."""
        if self.kind == PSLD or self.beta_schedule == "constant":
            return self.beta * t
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.T

    @property
    def time_constant(self) -> bool:
        return self.kind == PSLD or self.beta_schedule == "constant"


def drift_matrix(spec: ProcessSpec, t: float = 0.0) -> np.ndarray:
    """F_t: (beta/2) [[-Gamma, M^-1], [-1, -nu]] for PSLD, diag(-beta_t/2, 0) for VP."""
    if spec.kind == PSLD:
        h = 0.5 * spec.beta
        return blockmat(-h * spec.gamma_fric, h * spec.mass_inv, -h, -h * spec.nu)
    return blockmat(-0.5 * spec.beta_at(t), 0.0, 0.0, 0.0)


def diffusion_matrix(spec: ProcessSpec, t: float = 0.0) -> np.ndarray:
    """G_t: diag(sqrt(Gamma beta), sqrt(M nu beta)) for PSLD, diag(sqrt(beta_t), 0) for VP."""
    if spec.kind == PSLD:
        return blockmat(
            np.sqrt(spec.gamma_fric * spec.beta), 0.0,
            0.0, np.sqrt(spec.mass * spec.nu * spec.beta),
        )
    return blockmat(np.sqrt(spec.beta_at(t)), 0.0, 0.0, 0.0)


def diffusion_squared(spec: ProcessSpec, t: float = 0.0) -> np.ndarray:
    g = diffusion_matrix(spec, t)
    return g @ g.T


def stationary_cov(spec: ProcessSpec) -> np.ndarray:
    """Covariance of the generative prior: diag(1, M) for PSLD, diag(1, 0) for VP."""
    if spec.kind == PSLD:
        return blockmat(1.0, 0.0, 0.0, spec.mass)
    return blockmat(1.0, 0.0, 0.0, 0.0)


def make_state(x, m=None) -> np.ndarray:
    """Stack position/momentum vectors into the (2, d) state layout."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if m is None:
        m = np.zeros_like(x)
    return np.stack([x, np.atleast_1d(np.asarray(m, dtype=float))])


def sample_prior(spec: ProcessSpec, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n states (n, 2, d) from the stationary prior."""
    z = rng.standard_normal((n, 2, d))
    if spec.kind == PSLD:
        z[:, 1, :] *= np.sqrt(spec.mass)
    else:
        z[:, 1, :] = 0.0
    return z


@dataclass(frozen=True)
class PerturbationKernel:
    """Gaussian transition moments of the forward process at time t."""

    mean_map: np.ndarray  # E_t = exp(integral of F)
    cov: np.ndarray  # Sigma_t, 2x2 block
    chol: np.ndarray = field(repr=False, default=None)  # lower Cholesky of Sigma_t


def kernel_at(spec: ProcessSpec, t: float, initial_cov: np.ndarray | None = None) -> PerturbationKernel:
    """Perturbation-kernel moments at time t from a given initial covariance.

    Closed form: matrix-fraction decomposition exp([[F, GG^T], [0, -F^T]] t)
    for the time-constant case, scalar formulas for scheduled VP. The fixed-step
    Lyapunov integration in :func:`lyapunov_rk4` is the independent cross-check.
    """
    if t < 0.0 or t > spec.T * 10.0 + 1e-9:
        raise QuadratureFailure(f"kernel time {t} outside [0, 10T]")
    sigma0 = np.zeros((2, 2)) if initial_cov is None else np.asarray(initial_cov, dtype=float)
    if spec.kind == VP:
        e = np.exp(-spec.int_beta(t))
        cov = blockmat(
            1.0 + e * (sigma0[0, 0] - 1.0), np.sqrt(e) * sigma0[0, 1],
            np.sqrt(e) * sigma0[0, 1], sigma0[1, 1],
        )
        mean_map = blockmat(np.sqrt(e), 0.0, 0.0, 1.0)
    else:
        f = drift_matrix(spec)
        q = diffusion_squared(spec)
        big = np.zeros((4, 4))
        big[:2, :2] = f
        big[:2, 2:] = q
        big[2:, 2:] = -f.T
        psi = scipy.linalg.expm(big * t)
        mean_map = psi[:2, :2]
        cov = mean_map @ sigma0 @ mean_map.T + psi[:2, 2:] @ mean_map.T
        cov = 0.5 * (cov + cov.T)
    _check_cov(spec, cov, t)
    return PerturbationKernel(mean_map=mean_map, cov=cov, chol=cholesky2(cov))


def lyapunov_rk4(spec: ProcessSpec, t: float, initial_cov: np.ndarray | None = None,
                 max_step: float = 1e-3) -> np.ndarray:
    """Sigma_t by fixed-step RK4 on dSigma/dt = F Sigma + Sigma F^T + G G^T.

    Integrates the three independent entries (xx, xm, mm); reference route for
    cross-checking :func:`kernel_at`.
    """
    sigma0 = np.zeros((2, 2)) if initial_cov is None else np.asarray(initial_cov, dtype=float)
    y = np.array([sigma0[0, 0], 0.5 * (sigma0[0, 1] + sigma0[1, 0]), sigma0[1, 1]])
    if t == 0.0:
        return blockmat(y[0], y[1], y[1], y[2])

    def rhs(s: float, v: np.ndarray) -> np.ndarray:
        f = drift_matrix(spec, s)
        q = diffusion_squared(spec, s)
        sig = np.array([[v[0], v[1]], [v[1], v[2]]])
        d = f @ sig + sig @ f.T + q
        return np.array([d[0, 0], d[0, 1], d[1, 1]])

    n = max(1, int(np.ceil(t / max_step)))
    h = t / n
    s = 0.0
    for _ in range(n):
        k1 = rhs(s, y)
        k2 = rhs(s + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(s + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(s + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        s += h
        cov = blockmat(y[0], y[1], y[1], y[2])
        _check_cov(spec, cov, s)
    return blockmat(y[0], y[1], y[1], y[2])


def _check_cov(spec: ProcessSpec, cov: np.ndarray, t: float) -> None:
    if t <= 0.0:
        return
    if spec.kind == PSLD:
        if not is_spd(cov):
            raise QuadratureFailure(f"kernel covariance not SPD at t={t}: {cov.tolist()}")
    elif cov[0, 0] < 0.0:
        raise QuadratureFailure(f"VP kernel variance negative at t={t}")


def prob_flow_field(spec: ProcessSpec, score: np.ndarray, z: np.ndarray, t: float) -> np.ndarray:
    """Forward-time probability-flow velocity F_t z - (1/2) G_t G_t^T score."""
    return apply_to_state(drift_matrix(spec, t), z) - 0.5 * apply_to_state(diffusion_squared(spec, t), score)


def reverse_sde_drift(spec: ProcessSpec, score: np.ndarray, z: np.ndarray, t: float) -> np.ndarray:
    """Forward-time drift of the reverse SDE: F_t z - G_t G_t^T score."""
    return apply_to_state(drift_matrix(spec, t), z) - apply_to_state(diffusion_squared(spec, t), score)
