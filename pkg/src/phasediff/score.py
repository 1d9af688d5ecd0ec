"""Analytic score oracle for Gaussian-mixture data plus the network parameterization layer.

The oracle stands in for a trained network: samplers consume it through
:class:`ScoreProvider`, which exposes the score s(z, t), its network form
eps(z, t) under a chosen parameterization

    s(z, t) = C_skip(t) z + C_out(t) eps(C_in(t) z, C_noise(t)),

and a function-evaluation counter so NFE accounting is enforced by measurement
rather than convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DegenerateCovariance, SingularCOut
from .linalg2 import apply_to_state, blockmat, cholesky2, det2, inverse2, is_spd
from .sde import PSLD, VP, ProcessSpec, kernel_at, stationary_cov

Mat2Fn = Callable[[float], np.ndarray]


@dataclass(frozen=True)
class MixtureComponent:
    weight: float
    mean: np.ndarray  # (2, d) position/momentum means
    cov: np.ndarray  # 2x2 block covariance (same for every coordinate)


@dataclass(frozen=True)
class MixtureSpec:
    components: tuple[MixtureComponent, ...]
    d: int

    def __post_init__(self):
        if not self.components:
            raise ConfigError("mixture needs at least one component")
        w = np.array([c.weight for c in self.components])
        if np.any(w <= 0.0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError("component weights must be positive and sum to 1")
        for c in self.components:
            if c.mean.shape != (2, self.d):
                raise ConfigError(f"component mean shape {c.mean.shape}, expected (2, {self.d})")
            if not is_spd(c.cov):
                raise ConfigError(f"component covariance not SPD: {c.cov.tolist()}")


def single_gaussian(mean_x, cov: np.ndarray, d: int, mean_m=None) -> MixtureSpec:
    mean = np.zeros((2, d))
    mean[0] = mean_x
    if mean_m is not None:
        mean[1] = mean_m
    return MixtureSpec((MixtureComponent(1.0, mean, np.asarray(cov, dtype=float)),), d)


def stationary_gaussian(spec: ProcessSpec, d: int) -> MixtureSpec:
    """Zero-mean Gaussian with the process' stationary covariance.

    Its marginal is time-invariant, so the score is -Sigma_inf^{-1} z at every t
    (used as the exactly-solvable problem throughout the tests). For VP the
    momentum block is padded to keep the component covariance SPD; the momentum
    coordinate itself is inert.
    """
    cov = stationary_cov(spec)
    if spec.kind == VP:
        cov = cov + blockmat(0.0, 0.0, 0.0, 1.0)
    return single_gaussian(np.zeros(d), cov, d)


def _component_moments(mix: MixtureSpec, spec: ProcessSpec, t: float):
    kern = kernel_at(spec, t)
    e = kern.mean_map
    out = []
    for c in mix.components:
        m_t = apply_to_state(e, c.mean)
        if spec.kind == VP:
            p_xx = e[0, 0] ** 2 * c.cov[0, 0] + kern.cov[0, 0]
            if p_xx <= 0.0:
                raise DegenerateCovariance(f"component variance {p_xx} at t={t}")
            out.append((np.log(c.weight), m_t, p_xx))
        else:
            p = e @ c.cov @ e.T + kern.cov
            p = 0.5 * (p + p.T)
            if not is_spd(p):
                raise DegenerateCovariance(f"component covariance not SPD at t={t}: {p.tolist()}")
            out.append((np.log(c.weight), m_t, p))
    return out


def marginal_score(mix: MixtureSpec, spec: ProcessSpec, z: np.ndarray, t: float,
                   moments=None) -> np.ndarray:
    """Exact score of the time-t marginal of the mixture under the forward process.

    Per component k: m_k(t) = E_t mu_k and P_k(t) = E_t S0_k E_t^T + Sigma_t; the
    score is the responsibility-weighted sum of -P_k^{-1} (z - m_k), with
    responsibilities computed by log-sum-exp so log-weights down to -700 stay
    finite. Supports batched states (..., 2, d).
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 2
    zb = z[None] if single else z
    if moments is None:
        moments = _component_moments(mix, spec, t)

    log_resp = np.empty((len(moments),) + zb.shape[:-2])
    scores = []
    d = mix.d
    for k, (logw, m_t, p) in enumerate(moments):
        y = zb - m_t
        if spec.kind == VP:
            yx = y[..., 0, :]
            quad = -0.5 * np.sum(yx * yx, axis=-1) / p
            log_resp[k] = logw + quad - 0.5 * d * np.log(2.0 * np.pi * p)
            sk = np.zeros_like(zb)
            sk[..., 0, :] = -yx / p
        else:
            p_inv = inverse2(p)
            quad = -0.5 * np.einsum("...ad,ab,...bd->...", y, p_inv, y)
            log_resp[k] = logw + quad - 0.5 * d * np.log(det2(p)) - d * np.log(2.0 * np.pi)
            sk = -apply_to_state(p_inv, y)
        scores.append(sk)
    log_norm = _logsumexp(log_resp, axis=0)
    resp = np.exp(log_resp - log_norm)
    s = np.zeros_like(zb)
    for k, sk in enumerate(scores):
        s += resp[k][..., None, None] * sk
    return s[0] if single else s


def marginal_logpdf(mix: MixtureSpec, spec: ProcessSpec, z: np.ndarray, t: float) -> np.ndarray:
    """Log-density of the time-t marginal (finite-difference oracle for the score)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 2
    zb = z[None] if single else z
    moments = _component_moments(mix, spec, t)
    logs = np.empty((len(moments),) + zb.shape[:-2])
    d = mix.d
    for k, (logw, m_t, p) in enumerate(moments):
        y = zb - m_t
        if spec.kind == VP:
            yx = y[..., 0, :]
            logs[k] = logw - 0.5 * np.sum(yx * yx, axis=-1) / p - 0.5 * d * np.log(2.0 * np.pi * p)
        else:
            p_inv = inverse2(p)
            quad = -0.5 * np.einsum("...ad,ab,...bd->...", y, p_inv, y)
            logs[k] = logw + quad - 0.5 * d * np.log(det2(p)) - d * np.log(2.0 * np.pi)
    out = _logsumexp(logs, axis=0)
    return out[0] if single else out


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    hi = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(hi, axis) + np.log(np.sum(np.exp(a - hi), axis=axis))


@dataclass(frozen=True)
class ScoreParameterization:
    """Time-dependent (C_skip, C_out, C_in, C_noise) in 2x2 block form."""

    c_skip: Mat2Fn
    c_out: Mat2Fn
    c_in: Mat2Fn
    c_noise: Callable[[float], float]


@dataclass(frozen=True)
class ScoreEval:
    """One score-function evaluation: the score s and its network form eps."""

    s: np.ndarray
    eps: np.ndarray


def eps_from_score(param: ScoreParameterization, z: np.ndarray, t: float, s: np.ndarray) -> np.ndarray:
    c_out = param.c_out(t)
    if abs(det2(c_out)) < 1e-300:
        raise SingularCOut(f"C_out singular at t={t}; respect the sampling cutoff")
    return apply_to_state(inverse2(c_out), s - apply_to_state(param.c_skip(t), z))


def score_from_eps(param: ScoreParameterization, z: np.ndarray, t: float, eps: np.ndarray) -> np.ndarray:
    return apply_to_state(param.c_skip(t), z) + apply_to_state(param.c_out(t), eps)


def _kernel_cache(spec: ProcessSpec, initial_cov=None):
    cache: dict[float, object] = {}

    def get(t: float):
        k = cache.get(t)
        if k is None:
            k = kernel_at(spec, t, initial_cov)
            cache[t] = k
        return k

    return get


_ZERO2 = np.zeros((2, 2))
_EYE2 = np.eye(2)


def default_param(spec: ProcessSpec) -> ScoreParameterization:
    """The process' native parameterization: C_skip=0, C_in=I, C_noise=t.

    PSLD: C_out = -L_t^{-T} with L_t the (stabilized) Cholesky factor of the
    zero-initial perturbation covariance. VP: C_out = -diag(1/sigma_t, 1) using
    the closed-form sigma_t^2 = 1 - exp(-int beta); the momentum entry only
    keeps the block invertible and never feeds into the update.
    """
    if spec.kind == VP:

        def c_out(t: float) -> np.ndarray:
            var = 1.0 - np.exp(-spec.int_beta(t))
            if var <= 0.0:
                raise SingularCOut(f"VP sigma_t vanishes at t={t}")
            return blockmat(-1.0 / np.sqrt(var), 0.0, 0.0, -1.0)

        return ScoreParameterization(lambda t: _ZERO2, c_out, lambda t: _EYE2, lambda t: t)

    kern = _kernel_cache(spec)

    def c_out_psld(t: float) -> np.ndarray:
        return -inverse2(kern(t).chol).T

    return ScoreParameterization(lambda t: _ZERO2, c_out_psld, lambda t: _EYE2, lambda t: t)


def preconditioned_param(spec: ProcessSpec, sigma0: float = 0.5) -> ScoreParameterization:
    """Preconditioned parameterization: C_skip(t) = diag(Sbar_t), C_out(t) = -L_t^{-T}.

    Sbar_t is the perturbation covariance started from diag(sigma0^2, M gamma);
    only its diagonal blocks enter C_skip (the literal reading of diag(.)).
    C_out comes from the zero-initial kernel, C_in = I, C_noise = t. Default
    sigma0^2 = 0.25.
    """
    if sigma0 <= 0.0:
        raise ConfigError("sigma0 must be > 0")
    if spec.kind != PSLD:
        raise ConfigError("preconditioning is defined for the PSLD process")
    bar0 = blockmat(sigma0 * sigma0, 0.0, 0.0, spec.mass * spec.gamma0)
    kern_bar = _kernel_cache(spec, bar0)
    kern = _kernel_cache(spec)

    def c_skip(t: float) -> np.ndarray:
        cov = kern_bar(t).cov
        return blockmat(cov[0, 0], 0.0, 0.0, cov[1, 1])

    def c_out(t: float) -> np.ndarray:
        return -inverse2(kern(t).chol).T

    return ScoreParameterization(c_skip, c_out, lambda t: _EYE2, lambda t: t)


class ScoreProvider:
    """Analytic score provider with NFE metering.

    ``evaluate`` is the only entry point samplers may use; each call increments
    the counter once (a batched call is one network pass). Reference solvers and
    oracles use :meth:`oracle_score`, which is free.
    """

    def __init__(self, mix: MixtureSpec, spec: ProcessSpec, param: ScoreParameterization | None = None):
        self.mix = mix
        self.spec = spec
        self.param = param if param is not None else default_param(spec)
        self.nfe = 0
        self._moments: dict[float, list] = {}

    def _moments_at(self, t: float):
        m = self._moments.get(t)
        if m is None:
            m = _component_moments(self.mix, self.spec, t)
            self._moments[t] = m
        return m

    def oracle_score(self, z: np.ndarray, t: float) -> np.ndarray:
        return marginal_score(self.mix, self.spec, z, t, moments=self._moments_at(t))

    def evaluate(self, z: np.ndarray, t: float) -> ScoreEval:
        self.nfe += 1
        s = self.oracle_score(z, t)
        return ScoreEval(s=s, eps=eps_from_score(self.param, z, t, s))

    def reset_nfe(self) -> None:
        self.nfe = 0

    def score_jacobian(self, t: float) -> np.ndarray:
        """d score / d z as a 2x2 block; exact (and z-free) for one component."""
        if len(self.mix.components) != 1:
            raise ConfigError("analytic score Jacobian requires a single-component mixture")
        logw, m_t, p = self._moments_at(t)[0]
        if self.spec.kind == VP:
            return blockmat(-1.0 / p, 0.0, 0.0, 0.0)
        return -inverse2(p)

    def eps_jacobian(self, t: float) -> np.ndarray:
        """d eps / d z = C_out^{-1} (d s / d z - C_skip) as a 2x2 block."""
        return inverse2(self.param.c_out(t)) @ (self.score_jacobian(t) - self.param.c_skip(t))
