"""Conjugate integrators: coefficient tables, transformed-space steps, stability.

The reverse dynamics are integrated in a projected space z_hat = A_t z with

    A_t = exp( int_0^t B_s - F_s + (1/2) G_s G_s^T C_skip(s) ds ),
    Phi_t = - int_0^t (1/2) A_s G_s G_s^T C_out(s) ds,    Phi_0 = 0,

where the choice of B_t is a free conditioning parameter: B = 0 recovers
DDIM/exponential integrators, B = lambda*I and lambda*ones the two tunable
families. Masked variants drive the position-space update of the
conjugate-splitting samplers; the stochastic mask drops the 1/2 because the
reverse SDE carries the full G G^T.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .errors import BadRange, ConfigError, InsufficientHistory, QuadratureFailure, SingularA
from .linalg2 import apply_to_state, blockmat, inverse2, mat_exp
from .score import ScoreProvider
from .sde import PSLD, ProcessSpec, diffusion_matrix, drift_matrix

MASK = np.array([[1.0, 1.0], [0.0, 0.0]])

BT_ZERO = "zero"
BT_LAMBDA_I = "lambda_i"
BT_LAMBDA_ONES = "lambda_ones"
BT_CUSTOM = "custom"


@dataclass(frozen=True)
class BTChoice:
    kind: str = BT_ZERO
    lam: float = 0.0
    custom: np.ndarray | None = None

    def matrix(self) -> np.ndarray:
        if not np.isfinite(self.lam):
            raise ConfigError("lambda must be finite")
        if self.kind == BT_ZERO:
            return np.zeros((2, 2))
        if self.kind == BT_LAMBDA_I:
            return self.lam * np.eye(2)
        if self.kind == BT_LAMBDA_ONES:
            return self.lam * np.ones((2, 2))
        if self.kind == BT_CUSTOM:
            if self.custom is None:
                raise ConfigError("custom B_t requires a matrix")
            return np.asarray(self.custom, dtype=float)
        raise ConfigError(f"unknown B_t kind {self.kind!r}")

    @property
    def is_zero(self) -> bool:
        return self.kind == BT_ZERO or (self.kind in (BT_LAMBDA_I, BT_LAMBDA_ONES) and self.lam == 0.0)


@dataclass
class CoefficientTable:
    """Precomputed {A_i, Phi_i} on a decreasing schedule, optionally masked."""

    times: np.ndarray
    A: np.ndarray  # (N+1, 2, 2)
    A_inv: np.ndarray
    Phi: np.ndarray
    bt: BTChoice
    masked: str | None = None  # None, "det" or "stoch"
    _ctx: dict = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.times)


def _mask_mode_matrices(spec: ProcessSpec, mask: str | None):
    """(F_eff, Q_eff, half) for the requested lane; Q_eff = effective G G^T."""
    if mask is None:
        return drift_matrix, lambda s: _gg(spec, s), 0.5
    if spec.kind != PSLD:
        raise ConfigError("masked tables are defined for the PSLD process")
    if mask == "det":
        f_m = MASK * drift_matrix(spec)
        g_m = MASK * diffusion_matrix(spec)
        q_m = g_m @ (MASK * diffusion_matrix(spec).T)
        return (lambda spec_, s: f_m), (lambda s: q_m), 0.5
    if mask == "stoch":
        h = 0.5 * spec.beta
        f_t = blockmat(-2.0 * h * spec.gamma_fric, h * spec.mass_inv, 0.0, 0.0)
        q_t = blockmat(spec.gamma_fric * spec.beta, 0.0, 0.0, 0.0)
        return (lambda spec_, s: f_t), (lambda s: q_t), 1.0
    raise ConfigError(f"unknown mask mode {mask!r}")


def _gg(spec: ProcessSpec, s: float) -> np.ndarray:
    g = diffusion_matrix(spec, s)
    return g @ g.T


def build_table(spec: ProcessSpec, param, bt: BTChoice, times, mask: str | None = None,
                quad_tol: float = 1e-5) -> CoefficientTable:
    """Compute {A_{t_i}, Phi_{t_i}} on a strictly decreasing schedule.

    A_t is closed-form mat_exp((B - F) t) whenever the integrand is
    time-constant (C_skip = 0 and constant drift); otherwise dA/dt = A (B - F +
    (1/2) G G^T C_skip) is solved jointly with Phi. Phi integrates from Phi_0=0
    with adaptive RK45 at atol=rtol=quad_tol, in the variable u = sqrt(t): the
    C_out integrand has an integrable 1/sqrt(t) singularity at t -> 0 and the
    substitution makes it smooth.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 2 or np.any(np.diff(times) >= 0.0) or times[-1] < 0.0:
        raise BadRange("schedule must be strictly decreasing and nonnegative")
    b_mat = bt.matrix()
    f_eff, q_eff, half = _mask_mode_matrices(spec, mask)
    if mask is None:
        c_skip = param.c_skip
        c_out = param.c_out
    else:
        c_skip = lambda s: MASK * param.c_skip(s)
        c_out = lambda s: MASK * param.c_out(s)

    probe = [0.0, 0.5 * float(times[0]), float(times[0])]
    skip_is_zero = all(np.all(c_skip(s) == 0.0) for s in probe)
    const_d = spec.time_constant and skip_is_zero

    def d_mat(s: float) -> np.ndarray:
        d = b_mat - f_eff(spec, s)
        if not skip_is_zero:
            d = d + half * (q_eff(s) @ c_skip(s))
        return d

    if const_d:
        d0 = d_mat(0.0)
        a_of = lambda s: mat_exp(d0, s)
    else:
        a_of = None  # dense interpolant installed below

    def phi_rate(s: float, a_s: np.ndarray) -> np.ndarray:
        return -half * (a_s @ q_eff(s) @ c_out(s))

    # ascending integration grid in u = sqrt(t); exact-zero nodes short-circuit
    order = np.argsort(times)
    asc = times[order]
    pos = asc > 1e-18
    u_nodes = np.sqrt(asc[pos])
    u0 = min(1e-8, float(u_nodes[0]) * 0.5) if len(u_nodes) else 1e-8

    n_a = 0 if const_d else 4

    def rhs(u: float, y: np.ndarray) -> np.ndarray:
        s = u * u
        if const_d:
            a_s = a_of(s)
            dy_a = []
        else:
            a_s = y[:4].reshape(2, 2)
            dy_a = (2.0 * u * (a_s @ d_mat(s))).ravel()
        dy_phi = (2.0 * u * phi_rate(s, a_s)).ravel()
        return np.concatenate([dy_a, dy_phi]) if n_a else dy_phi

    y0 = np.concatenate([np.eye(2).ravel(), np.zeros(4)]) if n_a else np.zeros(4)
    sol = solve_ivp(rhs, (u0, float(u_nodes[-1])), y0, t_eval=u_nodes, rtol=quad_tol,
                    atol=quad_tol, method="RK45", dense_output=not const_d)
    if not sol.success:
        raise QuadratureFailure(f"coefficient quadrature failed: {sol.message}")

    n = len(times)
    a_arr = np.empty((n, 2, 2))
    phi_arr = np.zeros((n, 2, 2))
    yk = 0
    for idx, t_i in zip(order, asc):
        if t_i <= 1e-18:
            a_arr[idx] = np.eye(2)
            continue
        col = sol.y[:, yk]
        a_arr[idx] = a_of(t_i) if const_d else col[:4].reshape(2, 2)
        phi_arr[idx] = col[n_a:].reshape(2, 2)
        yk += 1

    a_inv = np.empty_like(a_arr)
    for i in range(n):
        a_inv[i] = inverse2(a_arr[i])
        if np.max(np.abs(a_arr[i] @ a_inv[i] - np.eye(2))) > 1e-10:
            raise SingularA(f"A at t={times[i]} failed the inverse check")

    if not const_d:
        dense = sol.sol
        a_of = lambda s: dense(np.sqrt(max(s, u0 * u0)))[:4].reshape(2, 2)

    ctx = {"a_of": a_of, "phi_rate": phi_rate, "quad_tol": quad_tol}
    return CoefficientTable(times=times, A=a_arr, A_inv=a_inv, Phi=phi_arr, bt=bt,
                            masked=mask, _ctx=ctx)


def conjugate_update(table: CoefficientTable, i: int, z: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """One transformed-space Euler update from node i to i+1, given eps at node i.

    z_hat <- z_hat + (t_{i+1} - t_i) A B A^{-1} z_hat + (Phi_{i+1} - Phi_i) eps,
    returned in the original space.
    """
    t, t_next = table.times[i], table.times[i + 1]
    zh = apply_to_state(table.A[i], z)
    zh_next = zh + apply_to_state(table.Phi[i + 1] - table.Phi[i], eps)
    if not table.bt.is_zero:
        bt_op = table.A[i] @ table.bt.matrix() @ table.A_inv[i]
        zh_next = zh_next + (t_next - t) * apply_to_state(bt_op, zh)
    return apply_to_state(table.A_inv[i + 1], zh_next)


def conjugate_euler_step(table: CoefficientTable, i: int, z: np.ndarray,
                         provider: ScoreProvider) -> np.ndarray:
    """Single-evaluation conjugate Euler step t_i -> t_{i+1} (exactly 1 NFE)."""
    ev = provider.evaluate(z, float(table.times[i]))
    return conjugate_update(table, i, z, ev.eps)


def lagrange_basis(nodes: np.ndarray, k: int) -> Callable[[float], float]:
    """C_k(s) = prod_{l != k} (s - t_l) / (t_k - t_l) over the given nodes."""

    def c_k(s: float) -> float:
        out = 1.0
        for l, t_l in enumerate(nodes):
            if l != k:
                out *= (s - t_l) / (nodes[k] - t_l)
        return out

    return c_k


def ab_phi_weights(table: CoefficientTable, i: int, node_times: np.ndarray) -> list[np.ndarray]:
    """Integrals W_k = int_{t_i}^{t_{i+1}} dPhi_s C_k(s) for the multistep update."""
    ctx = table._ctx
    if ctx is None:
        raise ConfigError("table was loaded without quadrature context")
    t_from, t_to = float(table.times[i]), float(table.times[i + 1])
    basis = [lagrange_basis(node_times, k) for k in range(len(node_times))]
    a_of, phi_rate = ctx["a_of"], ctx["phi_rate"]

    def rhs(s: float, _y: np.ndarray) -> np.ndarray:
        rate = phi_rate(s, a_of(s))
        return np.concatenate([(c(s) * rate).ravel() for c in basis])

    sol = solve_ivp(rhs, (t_from, t_to), np.zeros(4 * len(basis)), rtol=ctx["quad_tol"],
                    atol=ctx["quad_tol"], method="RK45")
    if not sol.success:
        raise QuadratureFailure(f"multistep weight quadrature failed: {sol.message}")
    y = sol.y[:, -1]
    return [y[4 * k:4 * k + 4].reshape(2, 2) for k in range(len(basis))]


def conjugate_ab_step(table: CoefficientTable, i: int, z: np.ndarray, provider: ScoreProvider,
                      history: list[tuple[int, np.ndarray]], r: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Adams-Bashforth conjugate step of order r (<= 2) using r prior evaluations.

    The eps term of the Euler update is replaced by sum_k W_k eps_{t_{i-k}}
    with Lagrange-basis integrals W_k computed by the same quadrature as Phi.
    Returns (z_next, eps_i) so the caller can extend the history (1 new NFE).
    """
    if r not in (0, 1, 2):
        raise ConfigError("extrapolation order r must be 0, 1 or 2")
    if len(history) < r:
        raise InsufficientHistory(f"order {r} needs {r} prior evaluations, have {len(history)}")
    ev = provider.evaluate(z, float(table.times[i]))
    if r == 0:
        return conjugate_update(table, i, z, ev.eps), ev.eps

    entries = [(i, ev.eps)] + [history[-k] for k in range(1, r + 1)]
    node_times = np.array([table.times[j] for j, _ in entries])
    weights = ab_phi_weights(table, i, node_times)

    t, t_next = table.times[i], table.times[i + 1]
    zh = apply_to_state(table.A[i], z)
    zh_next = zh
    if not table.bt.is_zero:
        bt_op = table.A[i] @ table.bt.matrix() @ table.A_inv[i]
        zh_next = zh_next + (t_next - t) * apply_to_state(bt_op, zh)
    for w_k, (_, eps_k) in zip(weights, entries):
        zh_next = zh_next + apply_to_state(w_k, eps_k)
    return apply_to_state(table.A_inv[i + 1], zh_next), ev.eps


def run_conjugate(table: CoefficientTable, z0: np.ndarray, provider: ScoreProvider,
                  r: int = 0, keep_trajectory: bool = False):
    """Drive a full conjugate run over the table's schedule (1 NFE per step).

    Warm-up steps use the largest order the history supports, growing to r.
    """
    z = np.asarray(z0, dtype=float)
    history: list[tuple[int, np.ndarray]] = []
    traj = [z] if keep_trajectory else None
    for i in range(len(table.times) - 1):
        z, eps = conjugate_ab_step(table, i, z, provider, history, r=min(r, len(history)))
        history.append((i, eps))
        if keep_trajectory:
            traj.append(z)
    return (z, traj) if keep_trajectory else z


@dataclass(frozen=True)
class StabilityReport:
    lambda_bar: np.ndarray  # eigenvalues of (1/2) G G^T C_out d eps/d z
    lambda_tilde: np.ndarray  # eigenvalues after B conditioning
    margins: np.ndarray  # 1 - |1 + h lambda_tilde| per eigenvalue
    stable: bool
    diagonalizable: bool


def stability_report(provider: ScoreProvider, t: float, bt: BTChoice, h: float,
                     z: np.ndarray | None = None) -> StabilityReport:
    """Per-eigenvalue stability of the conjugate Euler update at (t, h).

    Forms Lambda = (1/2) G G^T C_out(t) d eps/d z (a 2x2 block for the analytic
    oracle), shifts its spectrum by B_t, and applies |1 + h lambda| <= 1. The
    shifted spectrum is computed directly from Lambda - B, which is similar to
    the Lambda - U^{-1} B U form whenever Lambda is diagonalizable and remains
    valid when it is not.
    """
    spec = provider.spec
    q = _gg(spec, t)
    lam_mat = 0.5 * q @ provider.param.c_out(t) @ provider.eps_jacobian(t)
    if spec.kind != PSLD:
        # VP: the momentum row is structurally empty, so only the scalar
        # position block is dynamically reachable
        lam_bar = np.array([lam_mat[0, 0]], dtype=complex)
        lam_tilde = lam_bar - bt.matrix()[0, 0]
        diag = True
    else:
        lam_bar, vecs = np.linalg.eig(lam_mat)
        diag = np.linalg.cond(vecs) < 1e8
        lam_tilde = np.linalg.eigvals(lam_mat - bt.matrix())
    growth = np.abs(1.0 + h * lam_tilde)
    margins = 1.0 - growth
    return StabilityReport(lambda_bar=lam_bar, lambda_tilde=lam_tilde, margins=margins,
                           stable=bool(np.all(growth <= 1.0 + 1e-12)), diagonalizable=bool(diag))


def frozen_gap_growth(table: CoefficientTable, i: int, provider: ScoreProvider,
                      z0: np.ndarray, n_iter: int = 10, delta: float = 1e-7) -> float:
    """Empirical stability probe: gap growth of the frozen transformed-space map.

    Iterates the node-i update z_hat <- z_hat + (t_next - t) A B A^{-1} z_hat +
    dPhi eps(A^{-1} z_hat, t) (the map the stability predicate analyzes) on two
    nearby transformed states and returns the total gap amplification.
    """
    t = float(table.times[i])
    h_signed = float(table.times[i + 1] - table.times[i])
    d_phi = table.Phi[i + 1] - table.Phi[i]
    bt_op = table.A[i] @ table.bt.matrix() @ table.A_inv[i]
    rows = slice(0, 2) if provider.spec.kind == PSLD else slice(0, 1)  # VP momentum is unreachable
    za = apply_to_state(table.A[i], z0)
    zb = za.copy()
    zb[..., rows, :] += delta
    g0 = float(np.max(np.abs((za - zb)[..., rows, :])))
    for _ in range(n_iter):
        nxt = []
        for zh in (za, zb):
            eps = provider.evaluate(apply_to_state(table.A_inv[i], zh), t).eps
            nxt.append(zh + h_signed * apply_to_state(bt_op, zh) + apply_to_state(d_phi, eps))
        za, zb = nxt
    return float(np.max(np.abs((za - zb)[..., rows, :]))) / g0


def dump_table(table: CoefficientTable, path: str) -> None:
    """Write the table as CSV (t, A entries, Phi entries) for cross-implementation diffing."""
    with open(path, "w") as fh:
        fh.write("t,a00,a01,a10,a11,phi00,phi01,phi10,phi11\n")
        for t_i, a, p in zip(table.times, table.A, table.Phi):
            cells = [t_i, a[0, 0], a[0, 1], a[1, 0], a[1, 1], p[0, 0], p[0, 1], p[1, 0], p[1, 1]]
            fh.write(",".join(repr(float(c)) for c in cells) + "\n")


def load_table(path: str, bt: BTChoice | None = None) -> CoefficientTable:
    """Read a dumped table. Loaded tables support Euler steps but not AB quadrature."""
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "t,a00,a01,a10,a11,phi00,phi01,phi10,phi11":
            raise ConfigError(f"unrecognized table header: {header!r}")
        for line in fh:
            rows.append([float(c) for c in line.strip().split(",")])
    arr = np.asarray(rows)
    times = arr[:, 0]
    a = arr[:, 1:5].reshape(-1, 2, 2)
    phi = arr[:, 5:9].reshape(-1, 2, 2)
    a_inv = np.array([inverse2(m) for m in a])
    return CoefficientTable(times=times, A=a, A_inv=a_inv, Phi=phi,
                            bt=bt if bt is not None else BTChoice(), masked=None, _ctx=None)
