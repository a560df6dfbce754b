"""``coopeig run <config.json>``: batch front door.

Exit codes: 0 success, 2 invalid input (nothing written), 3 numerical
failure (report.json written with whatever was computed before the failure).
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from .discretize import assemble, build_grid
from .eigen import default_tol, dense_principal, principal_eigenpair, uniqueness_probe
from .errors import CoopEigError, GapNonpositive, NumericalFailure, ValidationFailure
from .model import Ball, ProblemSpec, RegionSpec, ball, irreducibility_check, validate
from .sde import (EXPLODED, HIT, Hit, SimConfig, Terminal, feynman_kac_check, hitting_representation_check,
                  risk_sensitive_cost, simulate, write_paths_csv)
from .spectrum import PerturbationSpec, eigenfunction_at, lambda_star, perturbation_sweep
from .stability import exp_stability_test, lyapunov_construct, recurrence_test, regularity_test
from .twist import product_identity_residual, twist

log = logging.getLogger("coopeig")

REPORT_VERSION = 1


def val(x, tol=None, se=None, **extra) -> dict:
    """A reported number with its tolerance or standard-error sibling."""
    out = {"value": float(x)}
    if se is not None:
        out["se"] = float(se)
    else:
        out["tol"] = float(0.0 if tol is None else tol)
    out.update({k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in extra.items()})
    return out


def _verdict(v) -> dict:
    return {
        "classification": v.classification,
        "evidence": [{"radius": float(r), "diagnostic": val(e, tol=_vtol(v))} for r, e in v.evidence.items()],
        "thresholds": {k: float(t) for k, t in v.thresholds.items()},
    }


def _vtol(v) -> float:
    return float(v.thresholds.get("reg_tol", v.thresholds.get("hit_tol", 0.0)))


def _profile_rows(grid, psi):
    psi = grid.as_grid_function(psi)
    rows = []
    for r in range(grid.n_rows):
        k, node = int(grid.row_regime[r]), int(grid.row_node[r])
        rows.append([*map(float, grid.coords[node]), k + 1, float(psi[k, node])])
    return ["x%d" % (i + 1) for i in range(grid.dim)] + ["regime", "value"], rows


class Run:
    def __init__(self, cfg: dict, threads: int | None, seed: int | None):
        self.cfg = cfg
        self.threads = threads
        self.num = C.numerics(cfg)
        self.tol_source = {k: ("config" if k in cfg.get("numerics", {}) else "default") for k in self.num}
        if seed is not None:
            self.num["seed"] = int(seed)
            self.tol_source["seed"] = "command-line"
        pb = cfg["problem"]
        self.spec: ProblemSpec = C.build_problem(pb)
        self.dim, self.N = pb["dim"], pb["regimes"]
        self.results: dict = {}
        self.tables: dict = {}
        self.mtx = None

    # ------------------------------------------------------------ helpers
    @property
    def h(self):
        return self.num["h"]

    @property
    def radii(self):
        return self.num["radii"]

    def region(self, block) -> RegionSpec:
        return C.build_region(block, self.dim, self.N)

    def sim(self, block) -> SimConfig:
        p = C.sim_params(block)
        return SimConfig(dt=p["dt"], t_max=p["t_max"], n_paths=p["n_paths"], seed=self.num["seed"],
                         cap_radius=p["cap_radius"], block_size=p["block_size"], threads=self.threads,
                         dump_paths=p["dump_paths"])

    def start(self, block):
        x = np.asarray(block["x"], float)
        if len(x) != self.dim:
            raise C.ConfigError("start point has the wrong dimension")
        k = block.get("regime", 1)
        if k > self.N:
            raise C.ConfigError(f"start regime {k} exceeds {self.N}")
        return x, k - 1

    def preflight(self) -> None:
        report = validate(self.spec, self.num["sample_density"], strict=False)
        report.raise_if_failed()
        irr = irreducibility_check(self.spec, self.num["sample_density"])
        self.results["irreducibility"] = str(irr)
        task = self.cfg["task"]
        for key in ("region", "target"):
            if key in task:
                self.region(task[key])
        for t in task.get("targets", []):
            self.region(t)
        for key in ("g", "phi"):
            if key in task:
                C.compile_expr(task[key], self.dim, f"task/{key}")
        if "bump" in task or "exp_stability" in task:
            C.compile_expr((task.get("bump") or task["exp_stability"])["expr"], self.dim, "task/bump")
        if "start" in task:
            self.start(task["start"])

    def principal(self, radii=None):
        pl = lambda_star(self.spec, radii or self.radii, self.h, self.num["tol"])
        self.results["principal"] = {
            "lambda_star": val(pl.lambda_star, pl.uncertainty),
            "extrapolated": pl.extrapolated,
            "converged": pl.converged,
            "lambdas": [val(l, b[1] - b[0], radius=float(r), bracket_lo=b[0], bracket_hi=b[1])
                        for r, l, b in zip(pl.radii, pl.lambdas, pl.brackets)],
        }
        return pl

    def bump(self, block) -> PerturbationSpec:
        f = C.compile_expr(block["expr"], self.dim, "task/bump")
        scales = tuple(block.get("scales", (-1.0, -0.5, 0.0, 0.5, 1.0)))
        return PerturbationSpec(f, float(block["support_radius"]), scales)

    # -------------------------------------------------------------- tasks
    def task_eig(self, t):
        region = self.region(t["region"])
        grid = build_grid(self.spec, region, self.h)
        op = assemble(self.spec, grid)
        self.mtx = op
        pair = principal_eigenpair(op, rtol=self.num["tol"])
        r = self.results
        r["n_unknowns"] = int(op.n)
        r["metzler"] = bool(op.metzler_ok)
        r["iterations"] = int(pair.iterations)
        r["lambda"] = val(pair.lam, pair.width, bracket_lo=pair.bracket[0], bracket_hi=pair.bracket[1])
        self.tables["profile"] = _profile_rows(grid, pair.psi)
        if t.get("dense_check"):
            lam_d, err = dense_principal(op)
            lo, hi = pair.bracket
            r["dense_oracle"] = val(lam_d, err, inside_bracket=bool(lo - err <= lam_d <= hi + err),
                                    distance=abs(lam_d - pair.lam))
        if t.get("shifts"):
            rows = []
            for kappa in t["shifts"]:
                pk = principal_eigenpair(op.shifted(kappa), rtol=self.num["tol"])
                err = abs(pk.lam - (pair.lam - kappa))
                rows.append({"kappa": float(kappa), "lambda": val(pk.lam, pk.width),
                             "identity_error": val(err, 2 * max(pk.tol, pair.tol))})
            r["shifts"] = rows
        if t.get("compare_decoupled"):
            s = self.spec
            single = ProblemSpec(s.dim, 1, lambda x, k: s.a(x, 0), lambda x, k: s.b(x, 0),
                                 lambda x, k: s.c(x, 0), lambda x, i, j: np.zeros(len(np.atleast_2d(x))),
                                 s.window, name="decoupled")
            sg = build_grid(single, RegionSpec(region.shape_for(0)), self.h)
            p1 = principal_eigenpair(assemble(single, sg), rtol=self.num["tol"])
            psi = pair.psi
            comp = float(np.max(np.abs(psi - psi[0:1]))) if self.N > 1 else 0.0
            r["decoupled"] = {"lambda": val(p1.lam, p1.width),
                              "difference": val(abs(p1.lam - pair.lam), p1.width + pair.width),
                              "component_difference": val(comp, 1e-8)}
        trials = t.get("uniqueness_trials", 0)
        if trials:
            u = uniqueness_probe(op, pair, trials=trials, seed=self.num["seed"])
            r["uniqueness"] = {"max_deviation": val(u.max_deviation, 1e-6), "passed": u.passed}

    def task_lambda_star(self, t):
        radii = self.radii
        wr = t.get("window_radius")
        pl = lambda_star(self.spec, radii, self.h, self.num["tol"], window_radius=wr)
        r = self.results
        r["lambdas"] = [val(l, b[1] - b[0], radius=float(R), bracket_lo=b[0], bracket_hi=b[1])
                        for R, l, b in zip(pl.radii, pl.lambdas, pl.brackets)]
        r["strictly_decreasing"] = bool(all(b < a for a, b in zip(pl.lambdas, pl.lambdas[1:])))
        r["lambda_star"] = val(pl.lambda_star, pl.uncertainty)
        r["extrapolated"] = pl.extrapolated
        r["converged"] = pl.converged
        r["window_radius"] = val(pl.window_radius)
        r["flatness"] = val(pl.flatness(), 0.05)
        self.tables["lambdas"] = (["radius", "lambda", "bracket_lo", "bracket_hi"],
                                  [[float(R), float(l), float(b[0]), float(b[1])]
                                   for R, l, b in zip(pl.radii, pl.lambdas, pl.brackets)])
        self.tables["profile"] = _profile_rows(pl.grid, pl.psi_star)

    def _pair_for(self, t, h):
        """Eigenpair on the largest radius, or a resolvent solution at a requested lambda."""
        if "lambda" in t or "lambda_offset" in t:
            if "lambda" in t:
                lam = float(t["lambda"])
            else:
                lam = self.principal().lambda_star + float(t["lambda_offset"])
            return eigenfunction_at(self.spec, lam, [max(self.radii)], h), lam
        grid = build_grid(self.spec, RegionSpec(ball(max(self.radii), self.dim)), h)
        pair = principal_eigenpair(assemble(self.spec, grid), rtol=self.num["tol"])
        return pair, pair.lam

    def task_twist(self, t):
        phi_f = C.compile_expr(t.get("phi", "exp(-x1^2)"), self.dim, "task/phi")
        win = Ball(tuple([0.0] * self.dim), float(t.get("residual_window", 2.0)))
        out = []
        for h in (self.h, self.h / 2):
            pair, lam = self._pair_for(t, h)
            tp = twist(self.spec, pair)
            phi = np.stack([phi_f(pair.grid.coords, k) for k in range(self.N)])
            res = product_identity_residual(self.spec, pair, phi, window=win)
            out.append((h, lam, tp, res))
        (h0, lam, tp, r0), (_, _, _, r1) = out
        ratio = r0.max / r1.max if r1.max > 0 else float("inf")
        r = self.results
        r["lambda"] = val(lam, default_tol(lam, self.num["tol"]))
        r["data_radius"] = val(tp.data_radius, max(tp.grid.h))
        r["residual"] = [val(r0.max, 0.0, h=h0, mean=r0.mean), val(r1.max, 0.0, h=h0 / 2, mean=r1.mean)]
        r["halving_ratio"] = val(ratio, 1.7)
        g = tp.grid
        rows = []
        for k in range(self.N):
            for node in np.flatnonzero(tp.core & g.interior[k]):
                rows.append([*map(float, g.coords[node]), k + 1, *map(float, tp.drift_correction[k, node])])
        self.tables["drift_correction"] = (["x%d" % (i + 1) for i in range(self.dim)] + ["regime"]
                                           + ["corr%d" % (i + 1) for i in range(self.dim)], rows)

    def task_diagnose(self, t):
        gen = self.spec.generator()
        r = self.results
        reg = t.get("regularity")
        if reg is not None:
            v = regularity_test(gen, reg.get("C", 1.0), reg.get("radii", self.radii), self.h, self.num["reg_tol"])
            r["regularity"] = _verdict(v)
        rec_radii = t.get("recurrence_radii", self.radii)
        if t.get("targets"):
            r["recurrence"] = {}
            for block in t["targets"]:
                v = recurrence_test(gen, self.region(block), rec_radii, self.h, self.num["hit_tol"])
                entry = _verdict(v)
                if v.details["extrapolated_deficit"] is not None:
                    entry["extrapolated_deficit"] = val(v.details["extrapolated_deficit"], self.num["hit_tol"])
                entry["outer_data_gap"] = [val(g, self.num["hit_tol"], radius=float(R))
                                           for R, g in v.details["outer_data_gap"].items()]
                r["recurrence"][C.region_label(block, self.N)] = entry
        if "exp_stability" in t:
            pl = self.principal()
            try:
                v, cert = exp_stability_test(self.spec, pl, self.bump(t["exp_stability"]),
                                             resid_tol=self.num["resid_tol"])
                entry = {"classification": v.classification,
                         "thresholds": {k: float(x) for k, x in v.thresholds.items()}}
                entry["evidence"] = {"gap": val(v.evidence["gap"], v.thresholds["gap_tol"]),
                                     "residual": val(v.evidence["residual"], v.thresholds["resid_tol"])}
                entry["certificate"] = {"valid": cert.valid, "kappa0": val(cert.kappa0, 0.0),
                                        "delta": val(cert.kappa1, 0.0), "B_radius": val(v.thresholds["B_radius"])}
                entry["twisted_regularity"] = _verdict(v.details["regularity"])
            except GapNonpositive as exc:
                entry = {"classification": "inconclusive", "reason": str(exc)}
            r["exp_stability"] = entry
        if "twisted_below" in t:
            pl = self.principal()
            lam = pl.lambda_star - float(t["twisted_below"])
            ef = eigenfunction_at(self.spec, lam, [2 * max(self.radii)], self.h)
            tp = twist(self.spec, ef)
            target = self.region(t["targets"][0]) if t.get("targets") else RegionSpec(ball(1.0, self.dim))
            radii = [R for R in rec_radii if R < tp.data_radius]
            v = recurrence_test(tp.spec, target, radii, self.h, self.num["hit_tol"])
            r["twisted_below"] = {"lambda": val(lam, pl.uncertainty), **_verdict(v)}
        if "lyapunov" in t:
            L = t["lyapunov"]
            cert = lyapunov_construct(self.spec, self.region(L["D"]), self.region(L["D1"]), self.region(L["K"]),
                                      self.h, self.num["resid_tol"])
            d = cert.details
            r["lyapunov"] = {
                "valid": cert.valid,
                "residual": val(cert.residual, self.num["resid_tol"] * cert.scale),
                "delta1": val(cert.kappa1, d["brackets"][0][1] - d["brackets"][0][0]
                              + d["brackets"][1][1] - d["brackets"][1][0]),
                "delta2": val(cert.kappa0, 0.0),
                "lambda_D": val(d["lambda_D"], d["brackets"][0][1] - d["brackets"][0][0]),
                "lambda_1": val(d["lambda_1"], d["brackets"][1][1] - d["brackets"][1][0]),
            }

    def task_perturb(self, t):
        pert = self.bump(t["bump"])
        rep = perturbation_sweep(self.spec, pert, self.radii, self.h, self.num["tol"])
        r = self.results
        r["sweep"] = [{"scale": float(s), "lambda_star": val(l, u)}
                      for s, l, u in zip(rep.scales, rep.lambda_star, rep.uncertainty)]
        r["gaps"] = [{"scale": float(s), "gap": val(g, rep.gap_tol[s])} for s, g in rep.gaps.items()]
        r["right_monotone"] = rep.right_monotone
        r["strictly_monotone"] = rep.strictly_monotone
        ctol = 4 * max(default_tol(l, self.num["tol"]) for l in rep.lambda_star)
        r["concavity_defect"] = val(rep.concavity_defect, ctol)
        r["concavity_defect_extrapolated"] = val(rep.concavity_defect_extrapolated, max(rep.uncertainty))
        base = rep.limits[rep.scales.index(0.0)]
        tp = twist(self.spec, base.pair)
        radii = [R for R in self.radii if R < tp.data_radius]
        target = RegionSpec(ball(max(1.0, pert.support_radius), self.dim))
        v = recurrence_test(tp.spec, target, radii, self.h, self.num["hit_tol"])
        r["twisted_recurrence"] = _verdict(v)
        r["monotone_recurrence_agree"] = bool(rep.right_monotone == (v.classification == "recurrent"))

    def task_simulate(self, t):
        cfg = self.sim(t.get("sim"))
        x0, k0 = self.start(t["start"])
        if "target" in t:
            fun = Hit(self.region(t["target"]))
        else:
            fun = Terminal(float(t.get("T", 1.0)))
        tb = simulate(self.spec, cfg, fun, x0, k0)
        n = tb.n_paths
        r = self.results
        r["counts"] = {"hit": tb.n_hit, "exploded": tb.n_exploded, "censored": tb.n_censored, "total": n}
        ok = tb.status != EXPLODED
        xs = tb.x[ok]
        r["mean_x"] = [val(xs[:, i].mean(), se=xs[:, i].std(ddof=1) / np.sqrt(len(xs))) for i in range(self.dim)]
        occ = tb.occupation / tb.t_end[:, None].clip(min=1e-300)
        r["occupation_fraction"] = [val(occ[:, k].mean(), se=occ[:, k].std(ddof=1) / np.sqrt(n))
                                    for k in range(self.N)]
        rates = tb.jump_rates()
        r["jump_rates"] = [{"from": i + 1, "to": j + 1, "rate": val(rates[i, j], se=np.sqrt(max(tb.jump_counts[i, j], 1))
                                                                       / max(tb.occupation[:, i].sum(), 1e-300))}
                           for i in range(self.N) for j in range(self.N) if i != j]
        if isinstance(fun, Hit) and tb.n_hit > 1:
            th = tb.t_end[tb.status == HIT]
            r["hitting_time"] = val(th.mean(), se=th.std(ddof=1) / np.sqrt(len(th)))
        if cfg.dump_paths:
            self.paths = tb
        if t.get("risk_sensitive_T"):
            pl = self.principal()
            est = risk_sensitive_cost(self.spec, cfg, x0, k0, t["risk_sensitive_T"], lambda_star=pl.lambda_star)
            r["risk_sensitive"] = {
                "estimates": [val(e, se=s, T=float(T)) for T, e, s in zip(est.T, est.estimate, est.se)],
                "growth_rate": val(est.slope, se=est.slope_se),
                "closer_to": est.matches,
            }

    def task_check_fk(self, t):
        pl = self.principal()
        pair = pl.pair
        tp = twist(self.spec, pair)
        g = C.compile_expr(t["g"], self.dim, "task/g")
        cfg = self.sim(t.get("sim"))
        if "cap_radius" not in (t.get("sim") or {}):
            cfg = replace(cfg, cap_radius=float(max(self.radii)))
        x0, k0 = self.start(t["start"])
        rep = feynman_kac_check(self.spec, pair, tp, g, float(t["T"]), cfg, x0, k0)
        self.results["fk"] = {
            "lambda": val(pair.lam, pair.width),
            "lhs": val(rep.lhs, se=rep.lhs_se), "rhs": val(rep.rhs, se=rep.rhs_se),
            "z": val(rep.z, 3.0),
            "lhs_halved_shift": val(rep.lhs_shift, rep.lhs_se),
            "rhs_halved_shift": val(rep.rhs_shift, rep.rhs_se),
            "exploded": {"base": rep.exploded[0], "twisted": rep.exploded[1]},
            "passed": rep.passed,
        }

    def task_check_hitting(self, t):
        pl = self.principal()
        cfg = self.sim(t.get("sim"))
        x0, k0 = self.start(t["start"])
        rel = float(t.get("rel_tol", 0.05))
        cens = float(t.get("max_censored", 0.01))
        try:
            rep = hitting_representation_check(self.spec, pl, self.region(t["target"]), cfg, x0, k0, rel, cens)
        except NumericalFailure as exc:
            if exc.partial is not None:
                self._hitting(exc.partial, rel, cens)
            raise
        self._hitting(rep, rel, cens)

    def _hitting(self, rep, rel, cens):
        self.results["hitting"] = {
            "estimate": val(rep.estimate, se=rep.se),
            "psi_star": val(rep.psi_star, self.results["principal"]["lambda_star"]["tol"]),
            "relative_deviation": val(rep.deviation, max(rel, 3 * rep.se / abs(rep.psi_star))),
            "censored_fraction": val(rep.censored_fraction, cens),
            "exploded_fraction": val(rep.exploded_fraction, 0.0),
            "passed": rep.passed,
        }

    # ------------------------------------------------------------ running
    def execute(self):
        kind = self.cfg["task"]["type"]
        getattr(self, "task_" + kind.replace("-", "_"))(self.cfg["task"])

    def report(self, status: str, error: dict | None = None) -> dict:
        rep = {
            "report_version": REPORT_VERSION,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "task": self.cfg["task"]["type"],
            "status": status,
            "config": self.cfg,
            "tolerances": {k: {"value": v, "source": self.tol_source.get(k, "default")} for k, v in self.num.items()},
            "results": _plain(self.results),
        }
        if error is not None:
            rep["error"] = error
        return rep


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if np.isfinite(f) else repr(f)
    return obj


def _write_outputs(run: Run, out: Path, rep: dict) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    formats = run.cfg.get("output", {}).get("formats", ["json", "csv"])
    written = []
    p = out / "report.json"
    p.write_text(json.dumps(rep, sort_keys=True, indent=2) + "\n")
    written.append(p)
    if "csv" in formats:
        for name, (header, rows) in run.tables.items():
            p = out / f"{name}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                w.writerows([[repr(v) if isinstance(v, float) else v for v in row] for row in rows])
            written.append(p)
        if getattr(run, "paths", None) is not None:
            p = out / "paths.csv"
            write_paths_csv(run.paths, p)
            written.append(p)
    if "mtx" in formats and run.mtx is not None:
        p = out / "operator.mtx"
        run.mtx.write_matrix_market(p)
        written.append(p)
    return written


def run(config_path, out=None, threads: int | None = None, seed: int | None = None) -> int:
    """Execute one config. Returns the process exit code."""
    try:
        cfg = C.load_config(config_path)
        runner = Run(cfg, threads, seed)
        runner.preflight()
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(out or cfg.get("output", {}).get("directory") or Path("coopeig-out") / Path(config_path).stem)
    try:
        runner.execute()
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        err = {"type": type(exc).__name__, "where": exc.where, "message": str(exc)}
        _write_outputs(runner, out_dir, runner.report("numerical-failure", err))
        return 3
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        log.exception("unexpected failure")
        err = {"type": type(exc).__name__, "where": f"cli.run[{cfg['task']['type']}]", "message": str(exc)}
        _write_outputs(runner, out_dir, runner.report("numerical-failure", err))
        return 3
    rep = runner.report("ok")
    for p in _write_outputs(runner, out_dir, rep):
        log.info("wrote %s", p)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="coopeig", description="Principal eigenvalues of cooperative elliptic systems.")
    sub = parser.add_subparsers(dest="command", required=True)
    pr = sub.add_parser("run", help="run a JSON config")
    pr.add_argument("config")
    pr.add_argument("--out", help="output directory")
    pr.add_argument("--threads", type=int, help="worker threads (default: $COOPEIG_THREADS or 1)")
    pr.add_argument("--seed", type=int, help="override numerics.seed")
    pr.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = args.threads
    if threads is None and os.environ.get("COOPEIG_THREADS"):
        threads = int(os.environ["COOPEIG_THREADS"])
    return run(args.config, args.out, threads, args.seed)


if __name__ == "__main__":
    sys.exit(main())
