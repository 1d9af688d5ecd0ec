"""Run configuration: strict TOML-grammar files with hard errors on unknown keys.

Floats round-trip at full precision through serialize/parse, and every field is
echoed into the run reports, so sweep scripts cannot silently typo a key.
"""

from __future__ import annotations

import sys

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from .errors import ConfigError
from .harness import RunConfig, default_benchmark_mixture
from .linalg2 import blockmat
from .score import MixtureComponent, MixtureSpec
from .sde import ProcessSpec

_PROCESS_KEYS = {"kind", "beta", "gamma", "nu", "mass_inv", "gamma0", "T",
                 "beta_schedule", "beta_min", "beta_max"}
_MIXTURE_KEYS = {"d", "components"}
_COMPONENT_KEYS = {"weight", "mean_x", "mean_m", "cov"}
_SAMPLER_KEYS = {"kind", "schedule", "steps", "eps", "lambda", "lambda_s", "churn",
                 "denoise", "ab_order"}
_RUN_KEYS = {"param", "sigma0", "chains", "seed", "workers", "quad_tol", "out"}
_SECTIONS = {"process", "mixture", "sampler", "run"}


def _check_keys(table: dict, allowed: set, where: str) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {sorted(unknown)}")


def parse_config(text: str) -> RunConfig:
    try:
        data = _toml.loads(text)
    except _toml.TOMLDecodeError as e:
        raise ConfigError(f"config is not valid TOML: {e}") from e
    _check_keys(data, _SECTIONS, "top level")

    proc = data.get("process", {})
    _check_keys(proc, _PROCESS_KEYS, "process")
    spec = ProcessSpec(
        kind=proc.get("kind", "psld"),
        beta=float(proc.get("beta", 8.0)),
        gamma_fric=float(proc.get("gamma", 0.01)),
        nu=float(proc.get("nu", 4.01)),
        mass_inv=float(proc.get("mass_inv", 4.0)),
        gamma0=float(proc.get("gamma0", 0.04)),
        T=float(proc.get("T", 1.0)),
        beta_schedule=proc.get("beta_schedule", "constant"),
        beta_min=float(proc.get("beta_min", 0.1)),
        beta_max=float(proc.get("beta_max", 20.0)),
    )

    mix_tab = data.get("mixture")
    if mix_tab is None:
        mix = default_benchmark_mixture()
    else:
        _check_keys(mix_tab, _MIXTURE_KEYS, "mixture")
        d = int(mix_tab.get("d", 2))
        comps = []
        for j, c in enumerate(mix_tab.get("components", [])):
            _check_keys(c, _COMPONENT_KEYS, f"mixture.components[{j}]")
            mean = np.zeros((2, d))
            mean[0] = np.asarray(c["mean_x"], dtype=float)
            if "mean_m" in c:
                mean[1] = np.asarray(c["mean_m"], dtype=float)
            cov = c["cov"]
            if len(cov) != 3:
                raise ConfigError("component cov must be [xx, xm, mm]")
            comps.append(MixtureComponent(float(c["weight"]), mean,
                                          blockmat(cov[0], cov[1], cov[1], cov[2])))
        if not comps:
            raise ConfigError("[mixture] given but no components")
        mix = MixtureSpec(tuple(comps), d)

    samp = data.get("sampler", {})
    _check_keys(samp, _SAMPLER_KEYS, "sampler")
    runt = data.get("run", {})
    _check_keys(runt, _RUN_KEYS, "run")

    return RunConfig(
        spec=spec,
        mix=mix,
        sampler=samp.get("kind", "conj_euler"),
        schedule_kind=samp.get("schedule", "quadratic"),
        steps=int(samp.get("steps", 50)),
        eps=float(samp.get("eps", 1e-3)),
        param_kind=runt.get("param", "default"),
        sigma0=float(runt.get("sigma0", 0.5)),
        lam=float(samp.get("lambda", 0.0)),
        lambda_s=float(samp.get("lambda_s", 0.0)),
        churn_enabled=bool(samp.get("churn", False)),
        chains=int(runt.get("chains", 2000)),
        seed=int(runt.get("seed", 0)),
        denoise=bool(samp.get("denoise", False)),
        ab_order=int(samp.get("ab_order", 1)),
        workers=int(runt.get("workers", 1)),
        quad_tol=float(runt.get("quad_tol", 1e-5)),
        out=runt.get("out"),
    )


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(float(x)) for x in v) + "]"
    raise ConfigError(f"cannot serialize {type(v)}")


def serialize_config(cfg: RunConfig) -> str:
    """Full-precision TOML echo of a config; parse(serialize(cfg)) == cfg."""
    s = cfg.spec
    lines = [
        "[process]",
        f'kind = "{s.kind}"',
        f"beta = {_fmt(s.beta)}",
        f"gamma = {_fmt(s.gamma_fric)}",
        f"nu = {_fmt(s.nu)}",
        f"mass_inv = {_fmt(s.mass_inv)}",
        f"gamma0 = {_fmt(s.gamma0)}",
        f"T = {_fmt(s.T)}",
        f'beta_schedule = "{s.beta_schedule}"',
        f"beta_min = {_fmt(s.beta_min)}",
        f"beta_max = {_fmt(s.beta_max)}",
        "",
        "[mixture]",
        f"d = {cfg.mix.d}",
    ]
    for c in cfg.mix.components:
        lines += [
            "",
            "[[mixture.components]]",
            f"weight = {_fmt(c.weight)}",
            f"mean_x = {_fmt(c.mean[0])}",
            f"mean_m = {_fmt(c.mean[1])}",
            f"cov = {_fmt([c.cov[0, 0], c.cov[0, 1], c.cov[1, 1]])}",
        ]
    lines += [
        "",
        "[sampler]",
        f'kind = "{cfg.sampler}"',
        f'schedule = "{cfg.schedule_kind}"',
        f"steps = {cfg.steps}",
        f"eps = {_fmt(cfg.eps)}",
        f"lambda = {_fmt(cfg.lam)}",
        f"lambda_s = {_fmt(cfg.lambda_s)}",
        f"churn = {_fmt(cfg.churn_enabled)}",
        f"denoise = {_fmt(cfg.denoise)}",
        f"ab_order = {cfg.ab_order}",
        "",
        "[run]",
        f'param = "{cfg.param_kind}"',
        f"sigma0 = {_fmt(cfg.sigma0)}",
        f"chains = {cfg.chains}",
        f"seed = {cfg.seed}",
        f"workers = {cfg.workers}",
        f"quad_tol = {_fmt(cfg.quad_tol)}",
    ]
    if cfg.out is not None:
        lines.append(f'out = "{cfg.out}"')
    return "\n".join(lines) + "\n"


def configs_equal(a: RunConfig, b: RunConfig) -> bool:
    if (a.spec, a.sampler, a.schedule_kind, a.steps, a.eps, a.param_kind, a.sigma0, a.lam,
        a.lambda_s, a.churn_enabled, a.chains, a.seed, a.denoise, a.ab_order, a.workers,
        a.quad_tol, a.out) != (b.spec, b.sampler, b.schedule_kind, b.steps, b.eps,
        b.param_kind, b.sigma0, b.lam, b.lambda_s, b.churn_enabled, b.chains, b.seed,
        b.denoise, b.ab_order, b.workers, b.quad_tol, b.out):
        return False
    if a.mix.d != b.mix.d or len(a.mix.components) != len(b.mix.components):
        return False
    return all(
        ca.weight == cb.weight and np.array_equal(ca.mean, cb.mean) and np.array_equal(ca.cov, cb.cov)
        for ca, cb in zip(a.mix.components, b.mix.components)
    )
