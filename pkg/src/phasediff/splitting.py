"""Splitting samplers: naive/reduced deterministic and stochastic schemes, plus
conjugate-splitting variants whose position update runs through a masked
coefficient table.

All steps advance the forward time downward, t -> t_next < t, with h = t -
t_next the positive reversed-time step of the update displays. Reduced schemes
reuse one score evaluation across consecutive substeps; the reduced Verlet
variants evaluate their final momentum substep at the shifted time t_next while
the naive Verlet scheme keeps the unshifted t (the asymmetry is intentional and
load-bearing for the error cancellation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conjugate import CoefficientTable, conjugate_update
from .errors import ConfigError, MissingTable
from .linalg2 import apply_to_state
from .score import ScoreProvider
from .sde import PSLD, ProcessSpec, diffusion_matrix, prob_flow_field, reverse_sde_drift

EULER = "euler"
EM = "em"
CONJ_EULER = "conj_euler"
CONJ_AB = "conj_ab"
NSE = "nse"
NVV = "nvv"
RSE = "rse"
RVV = "rvv"
NAIVE_OBA = "naive_oba"
ROBA = "roba"
RBAO = "rbao"
ROBAB = "robab"
CSE = "cse"
CVV = "cvv"
COBA = "coba"

# NFE per numerical update, enforced by the provider counter in tests.
NPU = {
    EULER: 1, EM: 1, CONJ_EULER: 1, CONJ_AB: 1,
    NSE: 2, NVV: 3, RSE: 1, RVV: 2,
    NAIVE_OBA: 2, ROBA: 1, RBAO: 1, ROBAB: 2,
    CSE: 1, CVV: 2, COBA: 1,
}
KINDS = tuple(NPU)
STOCHASTIC = frozenset({EM, NAIVE_OBA, ROBA, RBAO, ROBAB, COBA})
DETERMINISTIC = frozenset(KINDS) - STOCHASTIC
_SPLITTING = frozenset(KINDS) - {EULER, EM, CONJ_EULER, CONJ_AB}
_NEEDS_TABLE = {CONJ_EULER: None, CONJ_AB: None, CSE: "det", CVV: "det", COBA: "stoch"}


@dataclass(frozen=True)
class ChurnConfig:
    """Noise-churn control for the position-space OU substep only."""

    lambda_s: float = 0.0
    enabled: bool = False

    def __post_init__(self):
        if self.lambda_s < 0.0:
            raise ConfigError("lambda_s must be >= 0")


class NoiseStream:
    """Counter-based Gaussian noise keyed by (step, substep).

    Chains are rows of the returned block, so schemes sharing a substep prefix
    (e.g. the OU draws of ROBA and COBA) consume bitwise-identical noise, and a
    chain's draws do not depend on how many chains run alongside it.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def normal(self, step: int, substep: int, shape) -> np.ndarray:
        ss = np.random.SeedSequence(self.seed, spawn_key=(step, substep))
        return np.random.default_rng(ss).standard_normal(shape)


def ou_substep(spec: ProcessSpec, z: np.ndarray, t: float, h: float,
               churn: ChurnConfig | None, eps_x: np.ndarray, eps_m: np.ndarray) -> np.ndarray:
    """Analytic Ornstein-Uhlenbeck update of both coordinates.

    x <- exp(-h beta Gamma / 2) x + std_x eps_x with std_x = sqrt(1 - exp(-h
    beta Gamma)), or sqrt(1 - exp(-tbar lambda_s beta Gamma)) under churn with
    tbar the midpoint t - h/2 of the step's forward times. Momentum contracts by
    exp(-h beta nu / 2) with noise sqrt(M) sqrt(1 - exp(-h beta nu)).
    """
    bg = spec.beta * spec.gamma_fric
    bn = spec.beta * spec.nu
    if churn is not None and churn.enabled:
        tbar = t - 0.5 * h
        var_x = 1.0 - np.exp(-tbar * churn.lambda_s * bg)
    else:
        var_x = 1.0 - np.exp(-h * bg)
    out = np.empty_like(z)
    out[..., 0, :] = np.exp(-0.5 * h * bg) * z[..., 0, :] + np.sqrt(max(var_x, 0.0)) * eps_x
    out[..., 1, :] = (np.exp(-0.5 * h * bn) * z[..., 1, :]
                      + np.sqrt(spec.mass) * np.sqrt(1.0 - np.exp(-h * bn)) * eps_m)
    return out


def split_substep_a(spec: ProcessSpec, z: np.ndarray, h: float, s: np.ndarray,
                    stochastic: bool = False) -> np.ndarray:
    """Position split: x += (h beta/2)[Gamma x - M^-1 m + Gamma s_x], momentum untouched.

    The stochastic split doubles the Gamma terms (drift and score) but not the
    momentum coupling.
    """
    c = 2.0 if stochastic else 1.0
    hb = 0.5 * h * spec.beta
    out = np.array(z, copy=True)
    out[..., 0, :] += hb * (c * spec.gamma_fric * z[..., 0, :] - spec.mass_inv * z[..., 1, :]
                            + c * spec.gamma_fric * s[..., 0, :])
    return out


def split_substep_b(spec: ProcessSpec, z: np.ndarray, h: float, s: np.ndarray,
                    stochastic: bool = False) -> np.ndarray:
    """Momentum split: m += (h beta/2)[x + nu m + M nu s_m]; doubled nu terms when stochastic."""
    c = 2.0 if stochastic else 1.0
    hb = 0.5 * h * spec.beta
    out = np.array(z, copy=True)
    out[..., 1, :] += hb * (z[..., 0, :] + c * spec.nu * z[..., 1, :]
                            + c * spec.mass * spec.nu * s[..., 1, :])
    return out


def _conj_position(table: CoefficientTable, i: int, z_tilde: np.ndarray, eps: np.ndarray,
                   z_keep_m: np.ndarray) -> np.ndarray:
    """Masked conjugate update of the position row; momentum row from z_keep_m."""
    projected = conjugate_update(table, i, z_tilde, eps)
    out = np.array(z_keep_m, copy=True)
    out[..., 0, :] = projected[..., 0, :]
    return out


def step(kind: str, spec: ProcessSpec, z: np.ndarray, t: float, t_next: float,
         provider: ScoreProvider, *, table: CoefficientTable | None = None,
         churn: ChurnConfig | None = None, noise: NoiseStream | None = None,
         step_index: int = 0, ab_history: list | None = None, ab_order: int = 1) -> np.ndarray:
    """One update of the named scheme from forward time t to t_next (< t).

    The provider counter advances by exactly NPU[kind]. Conjugate kinds index
    their table with step_index; stochastic kinds draw their OU noise from the
    stream at substeps 0 (position) and 1 (momentum).
    """
    if kind not in NPU:
        raise ConfigError(f"unknown sampler kind {kind!r}")
    if kind in _SPLITTING and spec.kind != PSLD:
        raise ConfigError(f"{kind} is a PSLD splitting scheme")
    if kind in _NEEDS_TABLE:
        want = _NEEDS_TABLE[kind]
        if table is None:
            raise MissingTable(f"{kind} requires a coefficient table")
        if table.masked != want:
            raise MissingTable(f"{kind} requires mask={want!r}, table has {table.masked!r}")
        if abs(table.times[step_index] - t) > 1e-12:
            raise ConfigError("step_index does not match the table schedule")
    if kind in STOCHASTIC and noise is None:
        raise ConfigError(f"{kind} requires a noise stream")
    h = t - t_next
    if h <= 0.0:
        raise ConfigError("steps must decrease the time")

    if kind == EULER:
        ev = provider.evaluate(z, t)
        return z + (t_next - t) * prob_flow_field(spec, ev.s, z, t)

    if kind == EM:
        ev = provider.evaluate(z, t)
        xi = np.stack([noise.normal(step_index, 0, z[..., 0, :].shape),
                       noise.normal(step_index, 1, z[..., 1, :].shape)], axis=-2)
        g = diffusion_matrix(spec, t)
        return (z + (t_next - t) * reverse_sde_drift(spec, ev.s, z, t)
                + np.sqrt(h) * apply_to_state(g, xi))

    if kind == CONJ_EULER:
        ev = provider.evaluate(z, t)
        return conjugate_update(table, step_index, z, ev.eps)

    if kind == CONJ_AB:
        from .conjugate import conjugate_ab_step

        hist = ab_history if ab_history is not None else []
        z_next, eps = conjugate_ab_step(table, step_index, z, provider, hist,
                                        r=min(ab_order, len(hist)))
        if ab_history is not None:
            ab_history.append((step_index, eps))
        return z_next

    if kind == NSE:
        ev1 = provider.evaluate(z, t)
        z1 = split_substep_b(spec, z, h, ev1.s)
        ev2 = provider.evaluate(z1, t)
        return split_substep_a(spec, z1, h, ev2.s)

    if kind == RSE:
        ev1 = provider.evaluate(z, t)
        z1 = split_substep_b(spec, z, h, ev1.s)
        return split_substep_a(spec, z1, h, ev1.s)

    if kind == NVV:
        ev1 = provider.evaluate(z, t)
        z1 = split_substep_b(spec, z, 0.5 * h, ev1.s)
        ev2 = provider.evaluate(z1, t)
        z2 = split_substep_a(spec, z1, h, ev2.s)
        ev3 = provider.evaluate(z2, t)  # naive scheme scores the last substep at unshifted time
        return split_substep_b(spec, z2, 0.5 * h, ev3.s)

    if kind == RVV:
        ev1 = provider.evaluate(z, t)
        z1 = split_substep_b(spec, z, 0.5 * h, ev1.s)
        z2 = split_substep_a(spec, z1, h, ev1.s)
        ev2 = provider.evaluate(z2, t_next)  # shifted evaluation time
        return split_substep_b(spec, z2, 0.5 * h, ev2.s)

    if kind == NAIVE_OBA:
        z0 = ou_substep(spec, z, t, h, None, noise.normal(step_index, 0, z[..., 0, :].shape),
                        noise.normal(step_index, 1, z[..., 1, :].shape))
        ev1 = provider.evaluate(z0, t)
        z1 = split_substep_b(spec, z0, h, ev1.s, stochastic=True)
        ev2 = provider.evaluate(z1, t)
        return split_substep_a(spec, z1, h, ev2.s, stochastic=True)

    if kind == ROBA:
        z0 = ou_substep(spec, z, t, h, churn, noise.normal(step_index, 0, z[..., 0, :].shape),
                        noise.normal(step_index, 1, z[..., 1, :].shape))
        ev1 = provider.evaluate(z0, t)
        z1 = split_substep_b(spec, z0, h, ev1.s, stochastic=True)
        return split_substep_a(spec, z1, h, ev1.s, stochastic=True)

    if kind == RBAO:
        ev1 = provider.evaluate(z, t)
        z1 = split_substep_b(spec, z, h, ev1.s, stochastic=True)
        z2 = split_substep_a(spec, z1, h, ev1.s, stochastic=True)
        return ou_substep(spec, z2, t, h, churn, noise.normal(step_index, 0, z[..., 0, :].shape),
                          noise.normal(step_index, 1, z[..., 1, :].shape))

    if kind == ROBAB:
        z0 = ou_substep(spec, z, t, h, churn, noise.normal(step_index, 0, z[..., 0, :].shape),
                        noise.normal(step_index, 1, z[..., 1, :].shape))
        ev1 = provider.evaluate(z0, t)
        z1 = split_substep_b(spec, z0, 0.5 * h, ev1.s, stochastic=True)
        z2 = split_substep_a(spec, z1, h, ev1.s, stochastic=True)
        ev2 = provider.evaluate(z2, t_next)
        return split_substep_b(spec, z2, 0.5 * h, ev2.s, stochastic=True)

    if kind == CSE:
        ev1 = provider.evaluate(z, t)
        z1 = split_substep_b(spec, z, h, ev1.s)
        return _conj_position(table, step_index, z1, ev1.eps, z1)

    if kind == CVV:
        ev1 = provider.evaluate(z, t)
        z1 = split_substep_b(spec, z, 0.5 * h, ev1.s)
        z2 = _conj_position(table, step_index, z1, ev1.eps, z1)
        ev2 = provider.evaluate(z2, t_next)
        return split_substep_b(spec, z2, 0.5 * h, ev2.s)

    if kind == COBA:
        z0 = ou_substep(spec, z, t, h, churn, noise.normal(step_index, 0, z[..., 0, :].shape),
                        noise.normal(step_index, 1, z[..., 1, :].shape))
        ev1 = provider.evaluate(z0, t)
        z1 = split_substep_b(spec, z0, h, ev1.s, stochastic=True)
        return _conj_position(table, step_index, z1, ev1.eps, z1)

    raise ConfigError(f"unhandled sampler kind {kind!r}")


def last_step_denoise(spec: ProcessSpec, z: np.ndarray, eps_cutoff: float,
                      provider: ScoreProvider) -> np.ndarray:
    """One Euler step of the reverse-SDE drift from the cutoff to t = 0 (+1 NFE).

    Expands to (x0, m0) = (x, m) + (beta eps/2)(Gamma x - M^-1 m + 2 Gamma s_x;
    x + nu m + 2 M nu s_m) for PSLD. Used by stochastic samplers only.
    """
    ev = provider.evaluate(z, eps_cutoff)
    return z - eps_cutoff * reverse_sde_drift(spec, ev.s, z, eps_cutoff)


def sample_chain(kind: str, spec: ProcessSpec, times: np.ndarray, provider: ScoreProvider,
                 z0: np.ndarray, *, table: CoefficientTable | None = None,
                 churn: ChurnConfig | None = None, noise: NoiseStream | None = None,
                 ab_order: int = 1, denoise: bool = False,
                 keep_trajectory: bool = False):
    """Run a sampler over a decreasing schedule; returns the terminal state.

    Last-step denoising (when requested) applies to stochastic kinds only and
    adds one evaluation.
    """
    z = np.asarray(z0, dtype=float)
    hist: list = [] if kind == CONJ_AB else None
    traj = [z] if keep_trajectory else None
    for i in range(len(times) - 1):
        z = step(kind, spec, z, float(times[i]), float(times[i + 1]), provider, table=table,
                 churn=churn, noise=noise, step_index=i, ab_history=hist, ab_order=ab_order)
        if keep_trajectory:
            traj.append(z)
    if denoise and kind in STOCHASTIC:
        z = last_step_denoise(spec, z, float(times[-1]), provider)
        if keep_trajectory:
            traj.append(z)
    return (z, traj) if keep_trajectory else z
