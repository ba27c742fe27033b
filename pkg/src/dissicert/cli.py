"""Batch front end: config files in, verdicts, gain bounds and reports out.

All four commands (simulate, verify, gain, compare) read one INI-style
configuration with sections [system], [template], [constraints], [noise],
[supply] and [options]; the files under configs/ are complete examples.
Results are printed as text and, with --out, written as a JSON report whose
content is reproducible from the config and seed alone (wall-clock fields
excepted).  Exit codes: 0 for a certified verdict or bound, 1 when no
certificate was found, 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import json
import math
import sys
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .polyalg import ParseError, Polynomial, VarContext, parse_polynomial
from .sysdata import (
    CumulativelyBounded,
    DataConsistencyError,
    DataSet,
    DivergenceError,
    ModelTemplate,
    NotRepresentable,
    SeparatelyBounded,
    SystemModel,
    sb_noise,
    simulate,
)
from .verify import (
    FRAMEWORKS,
    DegreeBudgetError,
    GainResult,
    NoBoundInRange,
    SupplyRate,
    VerdictCertificate,
    VerifyOptions,
    data_driven_gain,
    model_based_gain,
    verify_cb,
    verify_model,
    verify_sb_general,
    verify_sb_quadratic,
)

SCHEMA = "dissicert-report/1"
EXIT_OK = 0
EXIT_INDETERMINATE = 1
EXIT_CONFIG = 2

_CLI_FRAMEWORKS = ("model",) + FRAMEWORKS


class ConfigError(ValueError):
    """A configuration file or flag combination that cannot be run."""


# ----- input signals --------------------------------------------------------------

_SIGNAL_FUNCS = {
    "sin": math.sin,
    "cos": math.cos,
    "tan": math.tan,
    "exp": math.exp,
    "sqrt": math.sqrt,
    "abs": abs,
}
_SIGNAL_CONSTS = {"pi": math.pi, "e": math.e}


def compile_signal(text: str):
    """Turn an arithmetic expression in t into a callable, without eval'ing freely.

    Supports numeric literals, t, pi, e, the operators + - * / ** (and ^ as a
    synonym for **), parentheses and the functions sin, cos, tan, exp, sqrt,
    abs.  Anything else is rejected with a :class:`ConfigError`.
    """
    src = text.replace("^", "**")
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse input signal {text!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if isinstance(node, (ast.Expression, ast.Load, ast.BinOp, ast.UnaryOp)):
            continue
        if isinstance(node, (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd)):
            continue
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            continue
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
                and node.func.id in _SIGNAL_FUNCS and not node.keywords \
                and len(node.args) == 1:
            continue
        if isinstance(node, ast.Name) and (
            node.id == "t" or node.id in _SIGNAL_FUNCS or node.id in _SIGNAL_CONSTS
        ):
            continue
        raise ConfigError(
            f"input signal {text!r} uses unsupported syntax ({type(node).__name__})"
        )
    code = compile(tree, "<signal>", "eval")
    env = dict(_SIGNAL_FUNCS, **_SIGNAL_CONSTS)

    def fn(t: float) -> float:
        scope = dict(env)
        scope["t"] = float(t)
        return float(eval(code, {"__builtins__": {}}, scope))

    return fn


# ----- configuration --------------------------------------------------------------


@dataclass
class JobConfig:
    """One fully resolved run description; built by :func:`load_config`."""

    seed: int
    framework: str | None
    mode: str
    state_names: tuple[str, ...]
    input_names: tuple[str, ...]
    dynamics: list[Polynomial] | None
    dataset: str | None
    x0: np.ndarray | None
    signal_text: str | None
    steps: int | None
    z: list[Polynomial] | None
    constraints: list[Polynomial]
    noise_kind: str
    noise_magnitude: float | None
    noise_mode: str
    supply: SupplyRate | None
    gamma_range: tuple[float, float] | None
    gamma_tol: float
    opts: VerifyOptions
    echo: dict

    @property
    def system(self) -> SystemModel:
        if self.dynamics is None:
            raise ConfigError("this command needs the system dynamics (keys f1.. under [system])")
        return SystemModel(self.state_names, self.input_names, self.dynamics)

    @property
    def template(self) -> ModelTemplate:
        if self.z is None:
            raise ConfigError("data-driven commands need a dictionary ([template] z = ...)")
        return ModelTemplate(self.state_names, self.input_names, self.z)


def _split_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _parse_matrix(text: str, what: str) -> np.ndarray:
    try:
        rows = [[float(v) for v in _split_list(row)] for row in text.split(";")]
        return np.array(rows, dtype=float)
    except ValueError:
        raise ConfigError(f"cannot parse {what} as a matrix (rows ';'-separated): {text!r}") from None


def _getfloat(section, key: str, default: float | None = None) -> float | None:
    raw = section.get(key)
    if raw is None:
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{section.name}] {key} must be a number, got {raw!r}") from None


def _getint(section, key: str, default: int | None = None) -> int | None:
    raw = section.get(key)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"[{section.name}] {key} must be an integer, got {raw!r}") from None


def _getbool(section, key: str, default: bool) -> bool:
    raw = section.get(key)
    if raw is None:
        return default
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"[{section.name}] {key} must be a boolean, got {raw!r}")


def _parse_supply(section, ctx: VarContext) -> SupplyRate | None:
    forms = [k for k in ("gain", "poly", "q") if k in section]
    if not forms:
        return None
    if len(forms) > 1:
        raise ConfigError("[supply] must declare exactly one of gain, poly, or q/s/r")
    if "gain" in section:
        g = _getfloat(section, "gain")
        if g is None or g < 0:
            raise ConfigError(f"[supply] gain must be nonnegative, got {section.get('gain')!r}")
        return SupplyRate.gain(g)
    if "poly" in section:
        try:
            return SupplyRate.from_poly(parse_polynomial(section["poly"], ctx))
        except ParseError as exc:
            raise ConfigError(f"[supply] poly: {exc}") from None
    q = _parse_matrix(section["q"], "[supply] q")
    if "s" not in section or "r" not in section:
        raise ConfigError("[supply] quadratic form needs all three of q, s, r")
    s = _parse_matrix(section["s"], "[supply] s")
    r = _parse_matrix(section["r"], "[supply] r")
    try:
        return SupplyRate.qsr(q, s, r)
    except ValueError as exc:
        raise ConfigError(f"[supply] {exc}") from None


def load_config(path: str, overrides: dict | None = None) -> JobConfig:
    """Read and validate a job configuration, applying command-line overrides.

    ``overrides`` maps option names (seed, framework, gamma_min, gamma_max,
    gamma_tol, solver_tol, verbose) to values that replace whatever the file
    says.  Raises :class:`ConfigError` on anything that cannot be run.
    """
    overrides = overrides or {}
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path!r}: {exc}") from None

    if "system" not in cp:
        raise ConfigError("config needs a [system] section")
    sys_sec = cp["system"]
    state_names = tuple(_split_list(sys_sec.get("state", "")))
    input_names = tuple(_split_list(sys_sec.get("input", "")))
    if not state_names or not input_names:
        raise ConfigError("[system] must list state and input variable names")
    try:
        ctx = VarContext(list(state_names) + list(input_names))
    except ValueError as exc:
        raise ConfigError(f"[system] variable names: {exc}") from None

    fkeys = [f"f{i + 1}" for i in range(len(state_names))]
    has_dynamics = any(k in sys_sec for k in fkeys)
    dataset = sys_sec.get("dataset")
    sim_keys = [k for k in ("x0", "input_signal", "steps") if k in sys_sec]
    if dataset is not None and (has_dynamics or sim_keys):
        raise ConfigError(
            "[system] must declare exactly one data source: either dataset = <csv> "
            "or the dynamics f1.. with x0, input_signal and steps"
        )

    dynamics = None
    if has_dynamics:
        missing = [k for k in fkeys if k not in sys_sec]
        if missing:
            raise ConfigError(f"[system] dynamics incomplete, missing {', '.join(missing)}")
        try:
            dynamics = [parse_polynomial(sys_sec[k], ctx) for k in fkeys]
        except ParseError as exc:
            raise ConfigError(f"[system] dynamics: {exc}") from None

    x0 = None
    if "x0" in sys_sec:
        x0 = np.array([float(v) for v in _split_list(sys_sec["x0"])])
        if x0.size != len(state_names):
            raise ConfigError(f"[system] x0 needs {len(state_names)} entries, got {x0.size}")
    signal_text = sys_sec.get("input_signal")
    steps = _getint(sys_sec, "steps")
    if steps is not None and steps < 1:
        raise ConfigError(f"[system] steps must be at least 1, got {steps}")

    z = None
    if "template" in cp and "z" in cp["template"]:
        try:
            z = [parse_polynomial(s, ctx) for s in _split_list(cp["template"]["z"])]
        except ParseError as exc:
            raise ConfigError(f"[template] z: {exc}") from None
        if not z:
            raise ConfigError("[template] z must list at least one dictionary entry")

    constraints = []
    if "constraints" in cp:
        for key, value in cp["constraints"].items():
            try:
                constraints.append(parse_polynomial(value, ctx))
            except ParseError as exc:
                raise ConfigError(f"[constraints] {key}: {exc}") from None

    noise_sec = cp["noise"] if "noise" in cp else {}
    noise_kind = (noise_sec.get("kind") or "separate").strip().lower()
    if noise_kind not in ("separate", "cumulative"):
        raise ConfigError(f"[noise] kind must be separate or cumulative, got {noise_kind!r}")
    noise_magnitude = _getfloat(noise_sec, "magnitude") if noise_sec else None
    if noise_magnitude is not None and noise_magnitude < 0:
        raise ConfigError(f"[noise] magnitude must be nonnegative, got {noise_magnitude}")
    noise_mode = (noise_sec.get("mode") or "absolute").strip().lower() if noise_sec else "absolute"
    if noise_mode not in ("absolute", "relative"):
        raise ConfigError(f"[noise] mode must be absolute or relative, got {noise_mode!r}")

    supply = _parse_supply(cp["supply"], ctx) if "supply" in cp else None

    opt_sec = cp["options"] if "options" in cp else {}
    framework = overrides.get("framework") or (opt_sec.get("framework") if opt_sec else None)
    if framework is not None:
        framework = framework.strip().lower()
        if framework not in _CLI_FRAMEWORKS:
            raise ConfigError(
                f"unknown framework {framework!r}, expected one of {', '.join(_CLI_FRAMEWORKS)}"
            )
    mode = (opt_sec.get("mode") or "bisect").strip().lower() if opt_sec else "bisect"
    if mode not in ("bisect", "direct"):
        raise ConfigError(f"[options] mode must be bisect or direct, got {mode!r}")
    seed = overrides.get("seed")
    if seed is None:
        seed = _getint(opt_sec, "seed", 0) if opt_sec else 0

    gmin = overrides.get("gamma_min", _getfloat(opt_sec, "gamma_min") if opt_sec else None)
    gmax = overrides.get("gamma_max", _getfloat(opt_sec, "gamma_max") if opt_sec else None)
    gamma_tol = overrides.get("gamma_tol", _getfloat(opt_sec, "gamma_tol", 1e-2) if opt_sec else 1e-2)
    gamma_range = None
    if gmin is not None or gmax is not None:
        if gmin is None or gmax is None or not (0.0 <= gmin < gmax):
            raise ConfigError(f"gamma range needs 0 <= gamma_min < gamma_max, got ({gmin}, {gmax})")
        gamma_range = (float(gmin), float(gmax))
    if gamma_tol is None or gamma_tol <= 0:
        raise ConfigError(f"gamma_tol must be positive, got {gamma_tol}")

    # the model-based engine defaults to the classical quadratic storage, the
    # data-driven ones to the richer degree-4 search
    storage_default = 2 if framework == "model" else 4
    try:
        opts = VerifyOptions(
            storage_degree=_getint(opt_sec, "storage_degree", storage_default) if opt_sec else storage_default,
            multiplier_degree=_getint(opt_sec, "multiplier_degree", 2) if opt_sec else 2,
            constraint_multiplier_degree=_getint(opt_sec, "constraint_multiplier_degree") if opt_sec else None,
            tau_monomial_degree=_getint(opt_sec, "tau_monomial_degree") if opt_sec else None,
            parametrized_storage=_getbool(opt_sec, "parametrized_storage", False) if opt_sec else False,
            solver_tol=overrides.get("solver_tol", _getfloat(opt_sec, "solver_tol", 1e-8) if opt_sec else 1e-8),
            feasibility_margin=_getfloat(opt_sec, "feasibility_margin", 1e-8) if opt_sec else 1e-8,
            max_gram_size=_getint(opt_sec, "max_gram_size", 1200) if opt_sec else 1200,
            max_basis_candidates=_getint(opt_sec, "max_basis_candidates", 2500) if opt_sec else 2500,
            solver_max_iter=_getint(opt_sec, "solver_max_iter", 200) if opt_sec else 200,
            verbose=bool(overrides.get("verbose", _getbool(opt_sec, "verbose", False) if opt_sec else False)),
        )
    except ValueError as exc:
        raise ConfigError(f"[options] {exc}") from None

    echo = {
        "system": {
            "state": list(state_names),
            "input": list(input_names),
            "dynamics": [str(p) for p in dynamics] if dynamics else None,
            "dataset": dataset,
            "x0": list(map(float, x0)) if x0 is not None else None,
            "input_signal": signal_text,
            "steps": steps,
        },
        "template": {"z": [str(p) for p in z] if z else None},
        "constraints": [str(p) for p in constraints],
        "noise": {"kind": noise_kind, "magnitude": noise_magnitude, "mode": noise_mode},
        "supply": {
            "kind": supply.kind if supply else None,
            "gain": supply.gamma if supply and supply.kind == "gain" else None,
            "poly": str(supply.poly) if supply and supply.kind == "poly" else None,
        },
        "options": {
            "framework": framework,
            "mode": mode,
            "seed": seed,
            "gamma_min": gamma_range[0] if gamma_range else None,
            "gamma_max": gamma_range[1] if gamma_range else None,
            "gamma_tol": gamma_tol,
            "storage_degree": opts.storage_degree,
            "multiplier_degree": opts.multiplier_degree,
            "constraint_multiplier_degree": opts.constraint_multiplier_degree,
            "tau_monomial_degree": opts.tau_monomial_degree,
            "parametrized_storage": opts.parametrized_storage,
            "solver_tol": opts.solver_tol,
            "feasibility_margin": opts.feasibility_margin,
            "max_gram_size": opts.max_gram_size,
            "max_basis_candidates": opts.max_basis_candidates,
            "solver_max_iter": opts.solver_max_iter,
            "verbose": opts.verbose,
        },
    }
    return JobConfig(
        seed=seed,
        framework=framework,
        mode=mode,
        state_names=state_names,
        input_names=input_names,
        dynamics=dynamics,
        dataset=dataset,
        x0=x0,
        signal_text=signal_text,
        steps=steps,
        z=z,
        constraints=constraints,
        noise_kind=noise_kind,
        noise_magnitude=noise_magnitude,
        noise_mode=noise_mode,
        supply=supply,
        gamma_range=gamma_range,
        gamma_tol=gamma_tol,
        opts=opts,
        echo=echo,
    )


# ----- data acquisition ------------------------------------------------------------


def _simulate_from_config(cfg: JobConfig) -> DataSet:
    if cfg.x0 is None or cfg.signal_text is None or cfg.steps is None:
        raise ConfigError("simulation needs x0, input_signal and steps under [system]")
    if cfg.noise_magnitude is None:
        raise ConfigError("simulation needs [noise] magnitude")
    fns = [compile_signal(part) for part in cfg.signal_text.split(";")]
    if len(fns) != len(cfg.input_names):
        raise ConfigError(
            f"input_signal provides {len(fns)} expressions for {len(cfg.input_names)} inputs "
            "(separate multiple inputs with ';')"
        )

    def u(t: int) -> np.ndarray:
        return np.array([fn(t) for fn in fns])

    gen = sb_noise(cfg.noise_magnitude, cfg.noise_mode) if cfg.noise_magnitude > 0 else None
    try:
        return simulate(cfg.system, cfg.x0, u, cfg.steps, noise=gen,
                        rng=np.random.default_rng(cfg.seed))
    except DivergenceError as exc:
        raise ConfigError(f"simulation diverged: {exc}") from None


def _acquire_data(cfg: JobConfig):
    """The record and its noise description, from a CSV or a fresh simulation."""
    if cfg.dataset is not None:
        try:
            data = DataSet.from_csv(cfg.dataset)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load dataset {cfg.dataset!r}: {exc}") from None
    else:
        data = _simulate_from_config(cfg)
    if cfg.noise_magnitude is None:
        raise ConfigError("data-driven commands need [noise] magnitude")
    sb = SeparatelyBounded.from_dataset(data, cfg.noise_magnitude, cfg.noise_mode)
    if cfg.noise_kind == "cumulative":
        return data, CumulativelyBounded.from_separate(sb, data.n)
    return data, sb


def _check_noise_compat(cfg: JobConfig) -> None:
    if cfg.framework in ("sb-general", "sb-quadratic") and cfg.noise_kind != "separate":
        raise ConfigError(
            f"framework {cfg.framework!r} works from per-sample bounds; declare [noise] kind = separate"
        )
    if cfg.framework == "cb" and cfg.noise_kind != "cumulative":
        raise ConfigError(
            "framework 'cb' works from one aggregate bound; declare [noise] kind = cumulative"
        )


# ----- reports ----------------------------------------------------------------------


def _sig6(value):
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not math.isfinite(v):
            return None
        return float(f"{v:.6g}")
    if isinstance(value, (int, np.integer, bool)):
        return int(value) if not isinstance(value, bool) else value
    return value


def _round_floats(obj):
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_round_floats(v) for v in obj.tolist()]
    return _sig6(obj)


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    return str(value)


def _cert_summary(cert: VerdictCertificate) -> dict:
    out = {
        "engine": cert.engine,
        "verdict": cert.verdict,
        "message": cert.message,
        "supply_gamma": cert.supply.gamma if cert.supply.kind == "gain" else None,
        "storage_min_eig": cert.storage_min_eig,
        "block_sizes": list(cert.block_sizes),
    }
    if cert.storage_matrix is not None:
        out["storage_eigenvalues"] = np.linalg.eigvalsh(cert.storage_matrix).tolist()
    if cert.storage_poly is not None:
        out["storage_degree"] = cert.storage_poly.degree
    out["witnesses"] = [
        {
            "label": c.label,
            "kind": c.kind,
            "size": int(c.matrix.shape[0]),
            "residual": c.residual,
            "min_eig": c.min_eig,
        }
        for c in cert.certificates
    ]
    return out


def _solver_summary(cert: VerdictCertificate) -> dict:
    sol = cert.solution
    if sol is None:
        return {}
    return {
        "status": sol.status,
        "iterations": sol.iterations,
        "objective": sol.objective,
        "eq_residual": sol.eq_residual,
        "min_block_eig": sol.min_block_eig,
    }


def _report(cfg: JobConfig, command: str, result: dict, cert: VerdictCertificate | None,
            timing: dict) -> dict:
    report = {
        "schema": SCHEMA,
        "command": command,
        "seed": cfg.seed,
        "config": cfg.echo,
        "result": result,
        "timing": timing,
    }
    if cert is not None:
        report["certificate"] = _cert_summary(cert)
        report["solver"] = _solver_summary(cert)
    return report


def _emit(report: dict, lines: list[str], out: str | None) -> None:
    for line in lines:
        print(line)
    if out:
        try:
            with open(out, "w") as fh:
                json.dump(_round_floats(report), fh, indent=2, sort_keys=True)
                fh.write("\n")
        except OSError as exc:
            raise ConfigError(f"cannot write report {out!r}: {exc}") from None
        print(f"report written to {out}")


# ----- commands ---------------------------------------------------------------------


def cmd_simulate(cfg: JobConfig, out: str | None) -> int:
    """Roll the configured system forward and write the record as CSV."""
    if out is None:
        raise ConfigError("simulate needs --out <csv path>")
    if cfg.dataset is not None:
        raise ConfigError("simulate generates data; the config already points at a dataset")
    data = _simulate_from_config(cfg)
    system = cfg.system
    resid = np.array([
        data.xp[t] - system.step(data.x[t], data.u[t]) for t in range(data.n_samples)
    ])
    norms = np.linalg.norm(resid, axis=1)
    try:
        data.to_csv(out)
    except OSError as exc:
        raise ConfigError(f"cannot write {out!r}: {exc}") from None
    print(f"wrote {data.n_samples} samples to {out}")
    print(f"max step noise norm: {_fmt(float(norms.max(initial=0.0)))}")
    print(f"cumulative noise energy: {_fmt(float(np.sum(norms ** 2)))}")
    return EXIT_OK


def _run_fixed(cfg: JobConfig) -> VerdictCertificate:
    if cfg.framework == "model":
        return verify_model(cfg.system, cfg.constraints, cfg.supply, cfg.opts)
    _check_noise_compat(cfg)
    data, noise = _acquire_data(cfg)
    engine = {
        "sb-general": verify_sb_general,
        "sb-quadratic": verify_sb_quadratic,
        "cb": verify_cb,
    }[cfg.framework]
    return engine(cfg.template, data, noise, cfg.constraints, cfg.supply, cfg.opts)


def cmd_verify(cfg: JobConfig, out: str | None) -> int:
    """Check the configured supply rate once and report the verdict."""
    if cfg.framework is None:
        raise ConfigError("verify needs a framework ([options] framework or --framework)")
    if cfg.supply is None:
        raise ConfigError("verify needs a fixed supply rate ([supply] section)")
    t0 = time.perf_counter()
    cert = _run_fixed(cfg)
    total = time.perf_counter() - t0
    result = {"verdict": cert.verdict}
    timing = {
        "build_seconds": cert.build_seconds,
        "solve_seconds": cert.solve_seconds,
        "total_seconds": total,
    }
    lines = [
        f"verdict: {cert.verdict}",
        f"engine: {cert.engine}",
        f"storage min eigenvalue: {_fmt(cert.storage_min_eig)}",
        f"largest block: {_fmt(max(cert.block_sizes, default=0))}",
        f"wall time: {_fmt(total)} s",
    ]
    if cert.message:
        lines.append(f"note: {cert.message}")
    _emit(_report(cfg, "verify", result, cert, timing), lines, out)
    return EXIT_OK if cert.dissipative else EXIT_INDETERMINATE


def _run_gain(cfg: JobConfig) -> GainResult:
    if cfg.gamma_range is None:
        raise ConfigError("gain search needs gamma_min and gamma_max")
    if cfg.supply is not None and cfg.supply.kind != "gain":
        raise ConfigError("the gain search optimizes the gain-form supply; drop the [supply] section")
    if cfg.framework == "model":
        return model_based_gain(cfg.system, cfg.constraints, cfg.gamma_range, cfg.opts,
                                rel_tol=cfg.gamma_tol, mode=cfg.mode)
    if cfg.framework == "sb-general" and cfg.mode == "direct":
        raise ConfigError("framework 'sb-general' only supports mode = bisect")
    _check_noise_compat(cfg)
    data, noise = _acquire_data(cfg)
    return data_driven_gain(cfg.framework, cfg.template, data, noise, cfg.constraints,
                            cfg.gamma_range, cfg.opts, rel_tol=cfg.gamma_tol, mode=cfg.mode)


def cmd_gain(cfg: JobConfig, out: str | None) -> int:
    """Search the configured gamma range for the smallest certified gain bound."""
    if cfg.framework is None:
        raise ConfigError("gain needs a framework ([options] framework or --framework)")
    t0 = time.perf_counter()
    try:
        res = _run_gain(cfg)
    except NoBoundInRange as exc:
        total = time.perf_counter() - t0
        result = {"verdict": "NoBoundInRange", "gamma": None, "detail": str(exc)}
        lines = [f"no certified bound in range: {exc}"]
        _emit(_report(cfg, "gain", result, None, {"total_seconds": total}), lines, out)
        return EXIT_INDETERMINATE
    total = time.perf_counter() - t0
    result = {
        "gamma": res.gamma,
        "mode": res.mode,
        "probes": len(res.history),
        "history": [[g, v] for g, v in res.history],
    }
    timing = {"total_seconds": total, "search_seconds": res.seconds}
    lines = [
        f"gamma bound: {_fmt(res.gamma)}",
        f"engine: {res.certificate.engine}",
        f"mode: {res.mode}",
        f"probes: {len(res.history)}",
        f"wall time: {_fmt(total)} s",
    ]
    _emit(_report(cfg, "gain", result, res.certificate, timing), lines, out)
    return EXIT_OK


def cmd_compare(cfg: JobConfig, counts: list[int], out: str | None) -> int:
    """Gain bounds from both data-driven frameworks on nested data prefixes."""
    if not counts:
        raise ConfigError("compare needs --counts, e.g. --counts 3,6,20")
    if cfg.dataset is None and cfg.dynamics is None:
        raise ConfigError("compare needs a simulated system or a dataset under [system]")
    if cfg.noise_kind != "separate":
        raise ConfigError(
            "compare evaluates both frameworks from per-sample bounds; declare [noise] kind = separate"
        )
    if cfg.gamma_range is None:
        raise ConfigError("compare needs gamma_min and gamma_max")
    if cfg.noise_magnitude is None:
        raise ConfigError("compare needs [noise] magnitude")
    data, _ = _acquire_data(cfg)
    if max(counts) > data.n_samples:
        raise ConfigError(
            f"compare asks for {max(counts)} samples but the record has {data.n_samples}"
        )
    template = cfg.template
    rows = []
    row_seconds = []
    header = f"{'D':>6}  {'gamma_SB':>12}  {'gamma_CB':>12}  {'status':<28}  {'seconds':>8}"
    lines = [header, "-" * len(header)]
    for d in counts:
        sub = data.prefix(d)
        sb = SeparatelyBounded.from_dataset(sub, cfg.noise_magnitude, cfg.noise_mode)
        cell = {"d": d, "gamma_sb": None, "gamma_cb": None, "status": []}
        t0 = time.perf_counter()
        for key, fw, noise in (
            ("gamma_sb", "sb-quadratic", sb),
            ("gamma_cb", "cb", CumulativelyBounded.from_separate(sb, sub.n)),
        ):
            try:
                res = data_driven_gain(fw, template, sub, noise, cfg.constraints,
                                       cfg.gamma_range, cfg.opts, rel_tol=cfg.gamma_tol,
                                       mode=cfg.mode)
                cell[key] = res.gamma
            except NoBoundInRange:
                cell["status"].append(f"{fw}: no bound in range")
            except (DegreeBudgetError, DataConsistencyError, NotRepresentable) as exc:
                cell["status"].append(f"{fw}: {type(exc).__name__}")
        seconds = time.perf_counter() - t0
        cell["status"] = "; ".join(cell["status"]) or "ok"
        rows.append(cell)
        row_seconds.append(seconds)
        lines.append(
            f"{d:>6}  {_fmt(cell['gamma_sb']):>12}  {_fmt(cell['gamma_cb']):>12}  "
            f"{cell['status']:<28}  {seconds:>8.1f}"
        )
    result = {"counts": list(counts), "rows": rows}
    timing = {"row_seconds": row_seconds, "total_seconds": float(sum(row_seconds))}
    _emit(_report(cfg, "compare", result, None, timing), lines, out)
    return EXIT_OK


# ----- entry point ------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to the INI job configuration")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="write a JSON report (or CSV for simulate)")
    common.add_argument("--framework", default=None,
                        help="override the framework (model, sb-general, sb-quadratic, cb)")
    common.add_argument("--gamma-min", type=float, default=None, dest="gamma_min")
    common.add_argument("--gamma-max", type=float, default=None, dest="gamma_max")
    common.add_argument("--gamma-tol", type=float, default=None, dest="gamma_tol")
    common.add_argument("--solver-tol", type=float, default=None, dest="solver_tol")
    common.add_argument("--verbose", action="store_true", default=None)

    parser = argparse.ArgumentParser(
        prog="dissicert",
        description="Dissipativity certification of polynomial systems from data or models.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)
    sub.add_parser("simulate", parents=[common], help="generate a noisy input-state record")
    sub.add_parser("verify", parents=[common], help="check one fixed supply rate")
    sub.add_parser("gain", parents=[common], help="search for the smallest certified l2-gain")
    cmp_p = sub.add_parser("compare", parents=[common],
                           help="gain bounds from both frameworks over nested data prefixes")
    cmp_p.add_argument("--counts", required=True,
                       help="comma-separated sample counts, e.g. 3,6,20")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    for key in ("seed", "framework", "gamma_min", "gamma_max", "gamma_tol", "solver_tol", "verbose"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.cmd == "simulate":
            return cmd_simulate(cfg, args.out)
        if args.cmd == "verify":
            return cmd_verify(cfg, args.out)
        if args.cmd == "gain":
            return cmd_gain(cfg, args.out)
        counts = [int(v) for v in _split_list(args.counts)]
        return cmd_compare(cfg, counts, args.out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, NotRepresentable, DataConsistencyError, DegreeBudgetError,
            DivergenceError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
