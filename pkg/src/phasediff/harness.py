"""Experiment harness: timestep schedules, reference solutions, error metrics,
convergence-order estimation and the end-to-end run/report pipeline.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from . import splitting
from .conjugate import BTChoice, BT_LAMBDA_ONES, BT_ZERO, build_table
from .errors import BadRange, ConfigError, SolverFailure
from .linalg2 import blockmat
from .score import (MixtureComponent, MixtureSpec, ScoreProvider, default_param,
                    marginal_score, preconditioned_param)
from .sde import (ProcessSpec, diffusion_squared, drift_matrix, prob_flow_field,
                  sample_prior)

QUADRATIC = "quadratic"
UNIFORM = "uniform"

DEFAULT_EPS = 1e-3

# fixed seeds for the metric projections and the analytic reference draw;
# runs are comparable across configs because these never change
_PROJECTION_SEED = 0x5EED01
_REFERENCE_SEED = 0x5EED02
_N_PROJECTIONS = 64


@dataclass(frozen=True)
class Schedule:
    kind: str
    n: int
    T: float
    eps: float
    times: np.ndarray = field(repr=False, default=None)


def make_schedule(kind: str, n: int, T: float, eps: float = DEFAULT_EPS) -> Schedule:
    """Strictly decreasing schedule t_0 = T > ... > t_N = eps.

    Quadratic striding t_i = eps + (T - eps) ((N - i)/N)^2 concentrates nodes
    near the cutoff; uniform is affine.
    """
    if n < 1:
        raise BadRange("need at least one step")
    if not 0.0 < eps < T:
        raise BadRange(f"need 0 < eps < T, got eps={eps}, T={T}")
    i = np.arange(n + 1, dtype=float)
    if kind == QUADRATIC:
        times = eps + (T - eps) * ((n - i) / n) ** 2
    elif kind == UNIFORM:
        times = T + (eps - T) * i / n
    else:
        raise BadRange(f"unknown schedule kind {kind!r}")
    times[0], times[-1] = T, eps
    return Schedule(kind=kind, n=n, T=T, eps=eps, times=times)


def reference_solution(spec: ProcessSpec, mix: MixtureSpec, z_t: np.ndarray, t_from: float,
                       t_to: float, t_eval=None, rtol: float = 1e-10, atol: float = 1e-12):
    """High-order adaptive solve of the probability-flow ODE with the analytic score.

    Returns the states at t_eval (or just the endpoint). Deterministic track
    only; the affine flow map of :func:`exact_affine_flow` is the independent
    oracle for single-Gaussian data.
    """
    shape = z_t.shape

    def rhs(s, y):
        z = y.reshape(shape)
        return prob_flow_field(spec, marginal_score(mix, spec, z, s), z, s).ravel()

    t_pts = None if t_eval is None else np.asarray(t_eval, dtype=float)
    sol = solve_ivp(rhs, (t_from, t_to), z_t.ravel(), method="DOP853", rtol=rtol, atol=atol,
                    t_eval=t_pts, dense_output=False)
    if not sol.success:
        raise SolverFailure(f"reference solve failed: {sol.message}")
    states = sol.y.T.reshape((-1,) + shape)
    return states if t_eval is not None else states[-1]


def _phi1(x: np.ndarray) -> np.ndarray:
    """phi1(X) = (e^X - I) X^{-1} by series; X is a small-norm 2x2 matrix."""
    out = np.eye(2)
    term = np.eye(2)
    for k in range(2, 12):
        term = term @ x / k
        out = out + term
    return out


def exact_affine_flow(spec: ProcessSpec, mix: MixtureSpec, z: np.ndarray, t_from: float,
                      t_to: float, max_step: float = 1e-4) -> np.ndarray:
    """Exact flow of the probability-flow ODE for single-Gaussian data.

    The field is affine, dz/dt = J_t z + b_t with J_t = F - (1/2) G G^T
    (d score/d z); the flow is a time-ordered product of midpoint exponential
    steps, second-order in the substep and effectively exact at the default
    resolution.
    """
    if len(mix.components) != 1:
        raise ConfigError("exact affine flow requires a single-component mixture")
    provider = ScoreProvider(mix, spec)
    n = max(1, int(np.ceil(abs(t_to - t_from) / max_step)))
    h = (t_to - t_from) / n
    out = np.array(z, dtype=float, copy=True)
    zero = np.zeros_like(out)
    s = t_from
    for _ in range(n):
        t_mid = s + 0.5 * h
        j = drift_matrix(spec, t_mid) - 0.5 * diffusion_squared(spec, t_mid) @ provider.score_jacobian(t_mid)
        b = prob_flow_field(spec, provider.oracle_score(zero, t_mid), zero, t_mid)
        jh = j * h
        out = np.einsum("ij,...jd->...id", _expm_small(jh), out) + h * np.einsum(
            "ij,...jd->...id", _phi1(jh), b)
        s += h
    return out


def _expm_small(x: np.ndarray) -> np.ndarray:
    from .linalg2 import mat_exp

    return mat_exp(x, 1.0)


def data_moments(mix: MixtureSpec):
    """Mean vector and covariance matrix of the data x-marginal at t = 0."""
    w = np.array([c.weight for c in mix.components])
    mu = np.stack([c.mean[0] for c in mix.components])  # (K, d)
    var = np.array([c.cov[0, 0] for c in mix.components])
    mean = w @ mu
    d = mix.d
    cov = np.zeros((d, d))
    for k in range(len(w)):
        cov += w[k] * (var[k] * np.eye(d) + np.outer(mu[k], mu[k]))
    cov -= np.outer(mean, mean)
    return mean, cov


def sample_data_marginal(mix: MixtureSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n exact samples (n, d) from the data x-marginal."""
    w = np.array([c.weight for c in mix.components])
    ks = rng.choice(len(w), size=n, p=w)
    out = np.empty((n, mix.d))
    for k, c in enumerate(mix.components):
        sel = ks == k
        m = int(sel.sum())
        if m:
            out[sel] = c.mean[0] + np.sqrt(c.cov[0, 0]) * rng.standard_normal((m, mix.d))
    return out


def sliced_w1(a: np.ndarray, b: np.ndarray, projections: np.ndarray) -> float:
    """Average 1-D Wasserstein-1 distance over fixed projections (equal-size sets)."""
    if len(a) != len(b):
        raise ConfigError("sliced W1 needs equal-size sample sets")
    pa = a @ projections.T
    pb = b @ projections.T
    return float(np.mean(np.abs(np.sort(pa, axis=0) - np.sort(pb, axis=0))))


def metric_projections(d: int) -> np.ndarray:
    rng = np.random.default_rng(_PROJECTION_SEED)
    p = rng.standard_normal((_N_PROJECTIONS, d))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def sample_error_metrics(samples_x: np.ndarray, mix: MixtureSpec) -> dict:
    """Mean/covariance Frobenius gaps and sliced W1 against the analytic data marginal."""
    if len(samples_x) < 1000:
        raise ConfigError("metrics need at least 1000 samples")
    mean, cov = data_moments(mix)
    emp_mean = samples_x.mean(axis=0)
    emp_cov = np.cov(samples_x.T).reshape(mix.d, mix.d)
    ref = sample_data_marginal(mix, len(samples_x), np.random.default_rng(_REFERENCE_SEED))
    return {
        "mean_err": float(np.linalg.norm(emp_mean - mean)),
        "cov_err": float(np.linalg.norm(emp_cov - cov)),
        "sliced_w1": sliced_w1(samples_x, ref, metric_projections(mix.d)),
    }


def one_step_errors(kind: str, spec: ProcessSpec, mix: MixtureSpec, h_grid, t0: float,
                    z0: np.ndarray, param=None) -> dict:
    """One-step position/momentum errors of a deterministic scheme vs the exact flow."""
    errs_x, errs_m = [], []
    for h in h_grid:
        provider = ScoreProvider(mix, spec, param)
        z1 = splitting.step(kind, spec, z0, t0, t0 - h, provider)
        ref = exact_affine_flow(spec, mix, z0, t0, t0 - h, max_step=min(1e-4, h / 32.0))
        err = np.abs(z1 - ref)
        errs_x.append(float(err[0].max()))
        errs_m.append(float(err[1].max()))
    return {"h": np.asarray(h_grid, dtype=float), "err_x": np.array(errs_x), "err_m": np.array(errs_m)}


def convergence_order(kind: str, spec: ProcessSpec, mix: MixtureSpec, h_grid, t0: float = 0.5,
                      z0: np.ndarray | None = None) -> dict:
    """Least-squares log-log slopes of one-step errors, separately per coordinate.

    Also reports the h^2 coefficient of the momentum error (err_m / h^2
    averaged over the grid), which Theorem-style scaling checks compare
    across nu values.
    """
    if z0 is None:
        rng = np.random.default_rng(7)
        z0 = sample_prior(spec, 1, mix.d, rng)[0]
    res = one_step_errors(kind, spec, mix, h_grid, t0, z0)
    lx = np.polyfit(np.log(res["h"]), np.log(np.maximum(res["err_x"], 1e-300)), 1)[0]
    lm = np.polyfit(np.log(res["h"]), np.log(np.maximum(res["err_m"], 1e-300)), 1)[0]
    coef_m = float(np.mean(res["err_m"] / res["h"] ** 2))
    return {"slope_x": float(lx), "slope_m": float(lm), "coef_m": coef_m, **res}


def default_benchmark_mixture(d: int = 2) -> MixtureSpec:
    """Fixed 2-D benchmark: four well-separated tight modes (stiff scores)."""
    means = np.array([[2.0, 2.0], [-2.0, 2.0], [2.0, -2.0], [-2.0, -1.0]])[:, :d]
    comps = []
    for mu in means:
        mean = np.zeros((2, d))
        mean[0] = mu[:d] if len(mu) >= d else np.resize(mu, d)
        comps.append(MixtureComponent(0.25, mean, blockmat(0.05, 0.0, 0.0, 0.25)))
    return MixtureSpec(tuple(comps), d)


@dataclass(frozen=True)
class RunConfig:
    spec: ProcessSpec
    mix: MixtureSpec
    sampler: str = splitting.CONJ_EULER
    schedule_kind: str = QUADRATIC
    steps: int = 50
    eps: float = DEFAULT_EPS
    param_kind: str = "default"  # or "preconditioned"
    sigma0: float = 0.5
    lam: float = 0.0
    lambda_s: float = 0.0
    churn_enabled: bool = False
    chains: int = 2000
    seed: int = 0
    denoise: bool = False
    ab_order: int = 1
    workers: int = 1
    quad_tol: float = 1e-5
    out: str | None = None

    def __post_init__(self):
        if self.sampler not in splitting.NPU:
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if self.param_kind not in ("default", "preconditioned"):
            raise ConfigError(f"unknown parameterization {self.param_kind!r}")
        if self.chains < 1 or self.steps < 1 or self.workers < 1:
            raise ConfigError("chains, steps and workers must be >= 1")


@dataclass
class RunReport:
    config: dict
    sampler: str
    n_steps: int
    nfe: int  # per-sample evaluations, N x NPU (+1 when denoised)
    metrics: dict
    wall_ms: float
    csv_row: dict

    def to_json(self) -> str:
        return json.dumps({
            "config": self.config,
            "sampler": self.sampler,
            "n_steps": self.n_steps,
            "nfe": self.nfe,
            "metrics": self.metrics,
            "wall_ms": self.wall_ms,
        }, indent=2, sort_keys=True)


CSV_HEADER = "sampler,n_steps,nfe,lambda,lambda_s,seed,mean_err,cov_err,sliced_w1,wall_ms"


def write_csv(path: str, rows: list[dict]) -> None:
    """Deterministic CSV report: one row per (sampler, budget) cell.

    The wall_ms column is pinned to 0 so identical config + seed produce
    byte-identical files; measured wall time lives in the JSON report.
    """
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in rows:
            fh.write(",".join([
                r["sampler"], str(r["n_steps"]), str(r["nfe"]), repr(float(r["lambda"])),
                repr(float(r["lambda_s"])), str(r["seed"]), repr(float(r["mean_err"])),
                repr(float(r["cov_err"])), repr(float(r["sliced_w1"])), "0",
            ]) + "\n")


def build_param(cfg: RunConfig):
    if cfg.param_kind == "preconditioned":
        return preconditioned_param(cfg.spec, cfg.sigma0)
    return default_param(cfg.spec)


def _table_for(cfg: RunConfig, times: np.ndarray, param):
    mask = {"cse": "det", "cvv": "det", "coba": "stoch"}.get(cfg.sampler)
    if cfg.sampler in ("conj_euler", "conj_ab"):
        bt = BTChoice(BT_LAMBDA_ONES, cfg.lam) if cfg.lam != 0.0 else BTChoice(BT_ZERO)
        return build_table(cfg.spec, param, bt, times, quad_tol=cfg.quad_tol)
    if mask is not None:
        return build_table(cfg.spec, param, BTChoice(BT_LAMBDA_ONES, cfg.lam), times,
                           mask=mask, quad_tol=cfg.quad_tol)
    return None


class _RowSliceNoise:
    """View of a noise stream restricted to a contiguous block of chains."""

    def __init__(self, base: splitting.NoiseStream, lo: int, hi: int, total: int):
        self.base, self.lo, self.hi, self.total = base, lo, hi, total

    def normal(self, step: int, substep: int, shape) -> np.ndarray:
        full = self.base.normal(step, substep, (self.total,) + tuple(shape[1:]))
        return full[self.lo:self.hi]


def run(cfg: RunConfig) -> RunReport:
    """Execute a sampling run and aggregate metrics into a report.

    Chains run vectorized, split across a small thread pool when workers > 1;
    per-batch providers keep NFE counters race-free and are summed at the end.
    """
    t_start = time.perf_counter()
    param = build_param(cfg)
    sched = make_schedule(cfg.schedule_kind, cfg.steps, cfg.spec.T, cfg.eps)
    table = _table_for(cfg, sched.times, param)
    churn = splitting.ChurnConfig(cfg.lambda_s, cfg.churn_enabled)
    noise = splitting.NoiseStream(cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0xA11CE,)))
    z0 = sample_prior(cfg.spec, cfg.chains, cfg.mix.d, rng)

    bounds = np.linspace(0, cfg.chains, cfg.workers + 1).astype(int)
    batches = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]

    def run_batch(lo: int, hi: int):
        provider = ScoreProvider(cfg.mix, cfg.spec, param)
        sliced = _RowSliceNoise(noise, lo, hi, cfg.chains)
        z = splitting.sample_chain(cfg.sampler, cfg.spec, sched.times, provider, z0[lo:hi],
                                   table=table, churn=churn, noise=sliced,
                                   ab_order=cfg.ab_order, denoise=cfg.denoise)
        return z, provider.nfe

    if len(batches) > 1:
        with ThreadPoolExecutor(max_workers=len(batches)) as pool:
            results = list(pool.map(lambda b: run_batch(*b), batches))
    else:
        results = [run_batch(*batches[0])]

    z_final = np.concatenate([r[0] for r in results])
    nfe_batch = results[0][1]
    expected = cfg.steps * splitting.NPU[cfg.sampler]
    if cfg.denoise and cfg.sampler in splitting.STOCHASTIC:
        expected += 1
    if nfe_batch != expected:
        raise ConfigError(f"NFE accounting broke: measured {nfe_batch}, declared {expected}")

    metrics = sample_error_metrics(z_final[:, 0, :], cfg.mix)
    wall_ms = (time.perf_counter() - t_start) * 1e3
    row = {"sampler": cfg.sampler, "n_steps": cfg.steps, "nfe": expected, "lambda": cfg.lam,
           "lambda_s": cfg.lambda_s, "seed": cfg.seed, **metrics}
    cfg_echo = config_echo(cfg)
    return RunReport(config=cfg_echo, sampler=cfg.sampler, n_steps=cfg.steps, nfe=expected,
                     metrics=metrics, wall_ms=wall_ms, csv_row=row)


def config_echo(cfg: RunConfig) -> dict:
    echo = {
        "process": {
            "kind": cfg.spec.kind, "beta": cfg.spec.beta, "gamma": cfg.spec.gamma_fric,
            "nu": cfg.spec.nu, "mass_inv": cfg.spec.mass_inv, "gamma0": cfg.spec.gamma0,
            "T": cfg.spec.T, "beta_schedule": cfg.spec.beta_schedule,
            "beta_min": cfg.spec.beta_min, "beta_max": cfg.spec.beta_max,
        },
        "mixture": {
            "d": cfg.mix.d,
            "components": [
                {"weight": c.weight, "mean_x": c.mean[0].tolist(), "mean_m": c.mean[1].tolist(),
                 "cov": [c.cov[0, 0], c.cov[0, 1], c.cov[1, 1]]}
                for c in cfg.mix.components
            ],
        },
        "sampler": {
            "kind": cfg.sampler, "schedule": cfg.schedule_kind, "steps": cfg.steps,
            "eps": cfg.eps, "lambda": cfg.lam, "lambda_s": cfg.lambda_s,
            "churn": cfg.churn_enabled, "denoise": cfg.denoise, "ab_order": cfg.ab_order,
        },
        "run": {
            "param": cfg.param_kind, "sigma0": cfg.sigma0, "chains": cfg.chains,
            "seed": cfg.seed, "workers": cfg.workers, "quad_tol": cfg.quad_tol,
            "out": cfg.out,
        },
        "schedule_formula": "t_i = eps + (T - eps) * ((N - i) / N)^2" if
            cfg.schedule_kind == QUADRATIC else "affine",
    }
    return echo


def lambda_sweep(cfg: RunConfig, lambdas) -> list[dict]:
    """Error-vs-lambda rows at fixed budget (reproduces the U-shape qualitatively)."""
    rows = []
    for lam in lambdas:
        r = run(RunConfig(**{**cfg.__dict__, "lam": float(lam)}))
        rows.append(r.csv_row)
    return rows
