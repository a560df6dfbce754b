"""Load and validate run configurations and turn expression strings into oracles.

Regimes are 1-based in configs (and in the expression variable ``k``) and
0-based everywhere in the Python API.
"""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import exprlang
from .errors import ConfigError, ExprSyntaxError
from .model import Ball, Box, ProblemSpec, RegionSpec, make_problem

DEFAULT_NUMERICS = {
    "h": 0.05,
    "radii": [4, 8, 16],
    "tol": 1e-10,
    "seed": 0,
    "sample_density": 21,
    "reg_tol": 1e-3,
    "hit_tol": 1e-2,
    "resid_tol": 1e-8,
}
DEFAULT_SIM = {"dt": 1e-3, "t_max": 50.0, "n_paths": 10_000, "cap_radius": 1e3,
               "block_size": 8192, "dump_paths": 0}


def load_schema() -> dict:
    text = resources.files("coopeig").joinpath("schema/config.schema.json").read_text()
    return json.loads(text)


def load_config(path) -> dict:
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    check_config(cfg)
    return cfg


def check_config(cfg: dict) -> None:
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        loc = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {loc}: {e.message}")


def numerics(cfg: dict) -> dict:
    return {**DEFAULT_NUMERICS, **cfg.get("numerics", {})}


def sim_params(block: dict | None) -> dict:
    return {**DEFAULT_SIM, **(block or {})}


# ------------------------------------------------------------- expressions

def compile_expr(text, dim: int, where: str):
    """Parse ``text`` (a string or a number) and return ``f(x, k0)`` with 0-based ``k0``."""
    if isinstance(text, (int, float)):
        val = float(text)

        def const(x, k):
            return np.full(len(np.atleast_2d(x)), val)
        return const
    try:
        e = exprlang.parse(text)
    except ExprSyntaxError as exc:
        raise ExprSyntaxError(f"{where}: {exc.reason}", exc.offset, exc.expected) from None
    bad = exprlang.check_variables(e, dim)
    if bad:
        raise ConfigError(f"{where}: unknown variable(s) {', '.join(bad)} in {text!r}")

    def f(x, k, e=e):
        return exprlang.evaluate(e, np.atleast_2d(x), k + 1)
    return f


def _per_regime(value, n: int, where: str) -> list:
    if isinstance(value, dict):
        items = value["per_regime"]
        if len(items) != n:
            raise ConfigError(f"{where}: per_regime has {len(items)} entries, problem has {n} regimes")
        return list(items)
    return [value] * n


def _dispatch(fns):
    def f(x, k):
        return fns[k](x, k)
    return f


def build_problem(block: dict) -> ProblemSpec:
    dim, N = block["dim"], block["regimes"]
    lo, hi = block["window"]["lo"], block["window"]["hi"]
    if len(lo) != dim or len(hi) != dim:
        raise ConfigError("problem/window: lo and hi must have dim entries")
    window = Box(tuple(lo), tuple(hi))

    diffs = []
    for k, v in enumerate(_per_regime(block.get("diffusion", 1.0), N, "problem/diffusion")):
        where = f"problem/diffusion[regime {k + 1}]"
        if isinstance(v, list):
            if len(v) != dim or any(len(row) != dim for row in v):
                raise ConfigError(f"{where}: matrix must be {dim}x{dim}")
            entries = [[compile_expr(e, dim, where) for e in row] for row in v]

            def a(x, kk, entries=entries):
                x = np.atleast_2d(x)
                return np.stack([np.stack([e(x, kk) for e in row], axis=-1) for row in entries], axis=-2)
        else:
            s = compile_expr(v, dim, where)

            def a(x, kk, s=s):
                return s(x, kk)[:, None, None] * np.eye(dim)
        diffs.append(a)

    drifts = []
    for k, v in enumerate(_per_regime(block.get("drift", 0.0), N, "problem/drift")):
        where = f"problem/drift[regime {k + 1}]"
        if isinstance(v, list):
            comps = v
        elif isinstance(v, str):
            comps = [v]
        else:
            comps = [v] * dim
        if len(comps) != dim:
            raise ConfigError(f"{where}: drift needs {dim} components")
        fs = [compile_expr(e, dim, where) for e in comps]

        def b(x, kk, fs=fs):
            x = np.atleast_2d(x)
            return np.stack([f(x, kk) for f in fs], axis=-1)
        drifts.append(b)

    pots = [compile_expr(v, dim, f"problem/potential[regime {k + 1}]")
            for k, v in enumerate(_per_regime(block.get("potential", 0.0), N, "problem/potential"))]

    table = {}
    for r in block.get("rates", []):
        i, j = r["from"] - 1, r["to"] - 1
        if i >= N or j >= N or i == j:
            raise ConfigError(f"problem/rates: bad edge {r['from']} -> {r['to']}")
        if (i, j) in table:
            raise ConfigError(f"problem/rates: duplicate edge {r['from']} -> {r['to']}")
        table[(i, j)] = compile_expr(r["rate"], dim, f"problem/rates[{r['from']}->{r['to']}]")

    def m(x, i, j):
        f = table.get((i, j))
        if f is None:
            return np.zeros(len(np.atleast_2d(x)))
        return f(x, i)

    return make_problem(dim, N, window, diffusion=_dispatch(diffs), drift=_dispatch(drifts),
                        potential=_dispatch(pots), rates=m, name=block.get("name", "config"))


def build_shape(block: dict, dim: int):
    if "ball" in block:
        b = block["ball"]
        center = tuple(b.get("center", [0.0] * dim))
        if len(center) != dim:
            raise ConfigError("ball center has the wrong dimension")
        return Ball(center, float(b["radius"]))
    lo, hi = block["box"]["lo"], block["box"]["hi"]
    if len(lo) != dim or len(hi) != dim:
        raise ConfigError("box bounds have the wrong dimension")
    return Box(tuple(lo), tuple(hi))


def build_region(block: dict, dim: int, regimes: int) -> RegionSpec:
    rs = block.get("regimes")
    if rs is not None and max(rs) > regimes:
        raise ConfigError(f"region {block.get('name', '')!r} names regime {max(rs)} of {regimes}")
    return RegionSpec(build_shape(block["shape"], dim), None if rs is None else {r - 1 for r in rs})


def region_label(block: dict, regimes: int) -> str:
    if "name" in block:
        return block["name"]
    rs = block.get("regimes") or list(range(1, regimes + 1))
    return "D x {" + ",".join(str(r) for r in sorted(rs)) + "}"
