"""Command-line driver.

    pdecont <action> --config run.cfg [--session DIR] [--from POINTFILE]
            [--ds VAL] [--nsteps N]

Actions: init, cont, pmcont, swibra, findbif, tint, plot, meshcheck, jaccheck.
Exit codes: 0 success, 2 configuration error, 3 numerical failure (partial
artifacts are kept in the session directory).
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from . import library
from .engine import (BifurcationNotFound, ConvergenceError, cont, findbif,
                     pmcont, swibra, tint)
from .linalg import EigenConvergenceError, SingularSystemError
from .problem import jac_check
from .session import (ConfigError, RunConfig, SessionWriter, load_point,
                      mesh_from_config, meshcheck, parse_config)

ACTIONS = ("init", "cont", "pmcont", "swibra", "findbif", "tint", "plot",
           "meshcheck", "jaccheck")

NUMERICAL_ERRORS = (ConvergenceError, SingularSystemError,
                    EigenConvergenceError, BifurcationNotFound)


def build_parser():
    ap = argparse.ArgumentParser(prog="pdecont", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("action", choices=ACTIONS)
    ap.add_argument("--config", help="run configuration file (INI)")
    ap.add_argument("--session", help="session directory (overrides config)")
    ap.add_argument("--from", dest="from_point",
                    help="point or bifurcation-point file to start from")
    ap.add_argument("--ds", type=float, help="override the initial stepsize")
    ap.add_argument("--nsteps", type=int, help="override the step count")
    ap.add_argument("--quiet", action="store_true", help="suppress stdout echo")
    return ap


def _build_state(cfg):
    """State + problem from a point file or from the preset described by cfg."""
    overrides = {k: v for k, v in cfg.continuation.items()
                 if k not in ("lam", "u0", "ds", "xi")}
    if cfg.from_point:
        state, bif = load_point(cfg.from_point)
        if not state.problem_name and not cfg.problem:
            raise ConfigError("point file lacks a problem name and none is "
                              "configured")
        name = cfg.problem or state.problem_name
        params = dict(state.problem_params)
        params.update(cfg.params)
        problem, params = library.make_problem(name, params)
        state.problem_name, state.problem_params = name, params
        for key, val in overrides.items():
            setattr(state.settings, key, val)
        if "ds" in cfg.continuation:
            state.ds = cfg.continuation["ds"]
        if "xi" in cfg.continuation:
            state.xi = cfg.continuation["xi"]
        try:
            state.settings.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return state, problem, bif
    if not cfg.problem:
        raise ConfigError("no problem name given ([run] problem = ...)")
    mesh = mesh_from_config(cfg)
    settings = dict(overrides)
    if "xi" in cfg.continuation:
        settings["xi"] = cfg.continuation["xi"]
    try:
        state, problem = library.make_state(cfg.problem, params=cfg.params,
                                            mesh=mesh, settings=settings)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if "lam" in cfg.continuation:
        state.lam = cfg.continuation["lam"]
    if "u0" in cfg.continuation:
        raw = str(cfg.continuation["u0"])
        try:
            state.u = float(raw) * np.ones(state.n)
        except ValueError:
            raise ConfigError(f"[continuation] u0: expected a constant, "
                              f"got {raw!r}") from None
    if "ds" in cfg.continuation:
        state.ds = cfg.continuation["ds"]
    return state, problem, None


def _finish_plots(writer, state, cfg):
    from .plots import plot_branch, plot_solution_state
    branch_path = writer.dir / "branch.csv"
    if branch_path.exists():
        component = int(cfg.plot.get("component", 2))
        try:
            plot_branch([branch_path], writer.dir / "branch.svg",
                        component=component)
        except KeyError:
            pass
    plot_solution_state(state, writer.dir / "solution.svg")


def run(cfg, quiet=False):
    """Dispatch one action; raises ConfigError or a numerical error."""
    action = cfg.action
    if action not in ACTIONS:
        raise ConfigError(f"unknown action {action!r}")

    if action == "plot":
        from .plots import plot_branch, plot_solution
        what = cfg.plot.get("what", "branch")
        component = int(cfg.plot.get("component", 2))
        if not cfg.session:
            raise ConfigError("plot requires a session directory")
        from pathlib import Path
        sdir = Path(cfg.session)
        if what == "branch":
            return plot_branch([sdir / "branch.csv"], sdir / "branch.svg",
                               component=component)
        if what == "solution":
            if not cfg.from_point:
                raise ConfigError("plot what=solution requires --from POINTFILE")
            state, _ = load_point(cfg.from_point)
            return plot_solution(state.mesh, state.u,
                                 sdir / "solution.svg", component=component)
        raise ConfigError(f"unknown plot target {what!r}")

    if action == "jaccheck":
        state, problem, _ = _build_state(cfg)
        report = jac_check(problem, state.mesh, state.u, state.lam)
        print(report)
        return report

    if not cfg.session:
        raise ConfigError("no session directory given ([run] session = ...)")
    state, problem, bif = _build_state(cfg)
    writer = SessionWriter(cfg.session, echo=not quiet)
    try:
        if action == "init":
            from .engine import init_step
            init_step(state, problem, writer)
        elif action == "cont":
            cont(state, problem, writer)
        elif action == "pmcont":
            pmcont(state, problem, writer)
        elif action == "swibra":
            if bif is None:
                raise ConfigError("swibra requires --from BP-POINTFILE")
            ds = cfg.swibra.get("ds", state.ds)
            xi = cfg.swibra.get("xi")
            state = swibra(bif, state, ds=ds, xi=xi)
            state.problem_name = cfg.problem or state.problem_name
            cont(state, problem, writer)
        elif action == "findbif":
            result = findbif(state, problem, nchange=int(
                cfg.findbif.get("nchange", 1)), reporter=writer)
            import dataclasses

            from .session import save_point
            for tag, pd in (("lo", result.lo), ("hi", result.hi)):
                snap = dataclasses.replace(state)
                snap.u, snap.lam, snap.tau = pd.u, pd.lam, pd.tau
                snap.restart = False
                save_point(writer.dir / f"fb_{tag}.pt", snap)
            writer.log(f"bracket saved: fb_lo.pt (lam={result.lo.lam:.6g}, "
                       f"{result.lo_count} unstable) / fb_hi.pt "
                       f"(lam={result.hi.lam:.6g}, {result.hi_count} unstable)")
            if result.bifpoint is not None:
                state.bifpoints.append(result.bifpoint)
                writer.bifurcation(state, result.bifpoint, len(state.bifpoints))
        elif action == "tint":
            h = cfg.tint.get("h", 0.1)
            nsteps = int(cfg.tint.get("nsteps", 10))
            tint(state, problem, h, nsteps, writer)
            writer.log(f"tint: {nsteps} steps of h={h} done")
        elif action == "meshcheck":
            report, state, ud = meshcheck(state, problem)
            writer.log(str(report))
            component = int(cfg.meshcheck.get("component", 1))
            if component > 0:
                from .plots import plot_solution
                plot_solution(state.mesh, ud, writer.dir / "udiff.svg",
                              component=component,
                              title="u_new - u_old (interpolated)")
    except NUMERICAL_ERRORS:
        writer.log("numerical failure; partial artifacts kept")
        writer.abort(state)
        raise
    except BaseException:
        writer.finalize()
        raise
    else:
        _finish_plots(writer, state, cfg)
        writer.finalize(state)
    return state


def main(argv=None):
    ap = build_parser()
    ns = ap.parse_args(argv)
    try:
        cfg = parse_config(ns.config) if ns.config else RunConfig()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    cfg.action = ns.action
    if ns.session:
        cfg.session = ns.session
    if ns.from_point:
        cfg.from_point = ns.from_point
    if ns.ds is not None:
        cfg.continuation["ds"] = ns.ds
    if ns.nsteps is not None:
        cfg.continuation["nsteps"] = ns.nsteps
    try:
        run(cfg, quiet=ns.quiet)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
