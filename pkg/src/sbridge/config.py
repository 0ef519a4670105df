"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment. Lists are comma separated and
matrices use ``;`` between rows, so ``noise = 1,0;0,2`` is diag(1, 2). Every
key has a default; unknown keys are an error. See ``docs/formats.md``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .grid import Grid
from .integrators import SCHEMES, StepScheme
from .io import read_scalar_field
from .problem import (BridgeProblem, ConstantCost, ConstantMatrix, GaussianDensity, LinearDrift,
                      QuadraticCost, TabulatedDensity, ZeroDrift)

CONFIG_FORMAT = "sbridge-config/1"

DEFAULTS: dict[str, str] = {
    "name": "bridge",
    "dim": "1",
    "lower": "-8",
    "upper": "8",
    "cells": "256",
    "t0": "0",
    "t1": "1",
    "steps": "200",
    "lambda": "1",
    "drift": "zero",
    "input": "1",
    "noise": "1",
    "cost": "zero",
    "rho0": "gaussian",
    "rho0.mean": "-1",
    "rho0.cov": "0.25",
    "rho1": "gaussian",
    "rho1.mean": "1",
    "rho1.cov": "0.25",
    "solver.scheme": "imex-cn",
    "solver.cfl_safety": "0.5",
    "solver.tol": "1e-8",
    "solver.max_iter": "auto",
    "solver.damping": "1",
    "solver.guess": "ones",
    "montecarlo.particles": "100000",
    "montecarlo.substeps": "1",
    "seed": "0",
    "threads": "1",
}


class ConfigError(ValueError):
    pass


def parse_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {number}: empty key")
        out[key] = value
    return out


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def effective_config(path=None, overrides=None) -> dict[str, str]:
    """Defaults, then the file, then ``--set`` overrides; unknown keys raise."""
    cfg = dict(DEFAULTS)
    layers = []
    if path is not None:
        try:
            layers.append(parse_text(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    layers.append(dict(overrides or {}))
    for layer in layers:
        unknown = sorted(set(layer) - set(DEFAULTS))
        if unknown:
            raise ConfigError("unknown config keys: " + ", ".join(unknown))
        cfg.update(layer)
    return cfg


def render(cfg: dict[str, str]) -> str:
    lines = [f"# {CONFIG_FORMAT}"]
    lines += [f"{key} = {cfg[key]}" for key in DEFAULTS]
    return "\n".join(lines) + "\n"


def write_config(path, cfg: dict[str, str]) -> None:
    Path(path).write_text(render(cfg))


# ---------------------------------------------------------------------------
# typed access


def _number(cfg, key, cast=float):
    try:
        return cast(cfg[key])
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {cfg[key]!r}") from exc


def _vector(text: str, key: str) -> np.ndarray:
    try:
        return np.array([float(s) for s in text.split(",")])
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc


def _matrix(text: str, key: str) -> np.ndarray:
    rows = [_vector(r, key) for r in text.split(";")]
    if len({r.size for r in rows}) != 1:
        raise ConfigError(f"{key}: ragged matrix {text!r}")
    return np.array(rows)


def _per_axis(cfg, key, dim, cast=float) -> tuple:
    vals = [cast(float(v)) for v in _vector(cfg[key], key)]
    if len(vals) == 1:
        vals = vals * dim
    if len(vals) != dim:
        raise ConfigError(f"{key}: expected {dim} values")
    return tuple(vals)


def build_grid(cfg: dict[str, str]) -> Grid:
    dim = _number(cfg, "dim", int)
    try:
        return Grid(lower=_per_axis(cfg, "lower", dim), upper=_per_axis(cfg, "upper", dim),
                    cells=_per_axis(cfg, "cells", dim, int), t0=_number(cfg, "t0"),
                    t1=_number(cfg, "t1"), num_steps=_number(cfg, "steps", int))
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from exc


def _channel(cfg, key, dim) -> ConstantMatrix:
    M = _matrix(cfg[key], key)
    if M.shape == (1, 1) and dim > 1:
        M = M[0, 0] * np.eye(dim)
    if M.shape[0] != dim:
        raise ConfigError(f"{key}: needs {dim} rows, got {M.shape[0]}")
    return ConstantMatrix(M)


def _drift(cfg, dim):
    kind, _, arg = cfg["drift"].partition(":")
    if kind == "zero":
        return ZeroDrift(dim)
    if kind == "linear":
        A = _matrix(arg, "drift")
        return LinearDrift(A[0, 0] if A.size == 1 else A)
    raise ConfigError(f"drift: unknown family {kind!r} (zero | linear:A)")


def _cost(cfg):
    kind, _, arg = cfg["cost"].partition(":")
    if kind == "zero":
        return ConstantCost(0.0)
    if kind == "constant":
        return ConstantCost(float(_vector(arg, "cost")[0]))
    if kind == "quadratic":
        return QuadraticCost(float(_vector(arg, "cost")[0]))
    raise ConfigError(f"cost: unknown family {kind!r} (zero | constant:c | quadratic:w)")


def _density(cfg, which, grid, base: Path | None):
    key = f"rho{which}"
    kind, _, arg = cfg[key].partition(":")
    if kind == "gaussian":
        mean = _vector(cfg[f"{key}.mean"], f"{key}.mean")
        if mean.size == 1 and grid.dim > 1:
            mean = np.full(grid.dim, mean[0])
        cov = _matrix(cfg[f"{key}.cov"], f"{key}.cov")
        if cov.shape == (1, 1) and grid.dim > 1:
            cov = cov[0, 0] * np.eye(grid.dim)
        try:
            return GaussianDensity(tuple(mean), tuple(map(tuple, cov)))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    if kind == "table":
        path = Path(arg)
        if base is not None and not path.is_absolute():
            path = base / path
        try:
            field = read_scalar_field(path, grid)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc
        return TabulatedDensity(grid, field.values)
    raise ConfigError(f"{key}: unknown family {kind!r} (gaussian | table:path)")


def build_problem(cfg: dict[str, str], base=None) -> BridgeProblem:
    grid = build_grid(cfg)
    lam = None if cfg["lambda"] == "auto" else _number(cfg, "lambda")
    base = None if base is None else Path(base)
    try:
        return BridgeProblem(grid=grid, f=_drift(cfg, grid.dim), g=_channel(cfg, "input", grid.dim),
                             sigma=_channel(cfg, "noise", grid.dim), q=_cost(cfg),
                             rho0=_density(cfg, 0, grid, base), rho1=_density(cfg, 1, grid, base),
                             lam=lam, name=cfg["name"])
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_scheme(cfg: dict[str, str]) -> StepScheme:
    if cfg["solver.scheme"] not in SCHEMES:
        raise ConfigError(f"solver.scheme must be one of {', '.join(SCHEMES)}")
    try:
        return StepScheme(kind=cfg["solver.scheme"], cfl_safety=_number(cfg, "solver.cfl_safety"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def solver_options(cfg: dict[str, str]) -> dict:
    max_iter = None if cfg["solver.max_iter"] == "auto" else _number(cfg, "solver.max_iter", int)
    guess = cfg["solver.guess"]
    if guess not in ("ones", "sqrt"):
        raise ConfigError("solver.guess must be ones or sqrt")
    damping = _number(cfg, "solver.damping")
    if not 0 < damping <= 1:
        raise ConfigError("solver.damping must lie in (0, 1]")
    return {"tol": _number(cfg, "solver.tol"), "max_iter": max_iter, "guess": guess, "damping": damping}
