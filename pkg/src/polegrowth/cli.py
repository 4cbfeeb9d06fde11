"""Command line entry point.

Every subcommand reads the layered INI configuration, writes its CSV
outputs into the output directory and appends one JSON line to
``manifest.jsonl`` there. ``--figures`` adds PNG figures next to the CSVs.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 truncation
or a failed check, 64 unknown subcommand, 66 unreadable configuration.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from polegrowth import estimator as est
from polegrowth import pde, tagged, transition
from polegrowth.config import ConfigReadError, RunConfig
from polegrowth.model import ParameterError
from polegrowth.simulator import (
    STREAM_MISC,
    TruncationError,
    simulate_population,
    simulate_tree,
    snapshots_to_csv,
    stream,
)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_FAILED = 3
EXIT_UNKNOWN_COMMAND = 64
EXIT_NO_CONFIG = 66

COMMANDS = (
    "simulate", "snapshot", "tag", "verify-m2o", "verify-lemma1", "transition",
    "invariant", "pde", "compare", "estimate", "risk",
)


class CheckFailed(Exception):
    """A verification subcommand ran to completion but its check did not hold."""


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _threads_default() -> int:
    try:
        return max(1, int(os.environ.get("POLEGROWTH_THREADS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file read on top of the packaged defaults")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out", type=Path, help="override output.dir")
    common.add_argument("--threads", type=int, default=_threads_default(),
                        help="worker threads (default: $POLEGROWTH_THREADS or 1)")
    common.add_argument("--figures", action="store_true", help="also write PNG figures")
    parser = _Parser(prog="polegrowth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND", parser_class=_Parser)
    helps = {
        "simulate": "grow one genealogical tree and export every cell",
        "snapshot": "living cells of one tree at run.times",
        "tag": "simulate one tagged lineage",
        "verify-m2o": "Monte Carlo check of the many-to-one identity",
        "verify-lemma1": "short-time division counts along the tagged lineage",
        "transition": "sample the birth-size transition kernel and compare with its density",
        "invariant": "occupation measure of the birth-size chain, pushforward check, reconstruction",
        "pde": "solve the growth-fragmentation equation on the grid",
        "compare": "solver against the Monte Carlo mean measure, plus weak-form residuals",
        "estimate": "kernel estimate of the division rate",
        "risk": "risk of the estimator across sample sizes",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "estimate":
            p.add_argument("--input", type=Path, help="observation CSV (xi_parent, xi_child, tau_parent)")
    return parser


class Run:
    def __init__(self, cfg: RunConfig, args):
        self.cfg = cfg
        self.args = args
        self.out = cfg.out_dir
        self.outputs: list[str] = []
        self.summary: dict = {}

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(name)
        return p

    def figure(self, name: str):
        return self.path(name) if self.args.figures else None


def _plotting():
    from polegrowth import plotting

    return plotting


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _tree(run: Run):
    cfg = run.cfg
    root = cfg.root()
    x0 = root.sample(1, stream(cfg.seed, STREAM_MISC, 0))[0][0]
    return simulate_tree(cfg.params(), (float(x0), root.v0, root.p0), cfg.get_float("run", "t_max"),
                         cfg.get_int("run", "n_cap"), cfg.seed)


def cmd_simulate(run: Run):
    g = _tree(run)
    g.to_csv(run.path("genealogy.csv"))
    run.summary.update(cells=len(g.cells), truncated=g.truncated, valid_until=g.valid_until)
    if g.truncated:
        raise TruncationError(f"tree reached n_cap; valid up to t={g.valid_until:.6g}")


def cmd_snapshot(run: Run):
    g = _tree(run)
    snaps = [g.snapshot(t) for t in run.cfg.get_floats("run", "times")]
    snapshots_to_csv(snaps, run.path("snapshots.csv"))
    run.summary.update(alive=[len(s.sizes) for s in snaps])
    if (f := run.figure("snapshots.png")) is not None:
        _plotting().size_histogram(snaps, f)


def cmd_tag(run: Run):
    cfg = run.cfg
    root = cfg.root()
    x0 = root.sample(1, stream(cfg.seed, STREAM_MISC, 0))[0][0]
    path = tagged.sample_tagged_path(cfg.params(), float(x0), root.v0, root.p0,
                                     cfg.get_float("run", "t_max"), cfg.seed)
    path.to_csv(run.path("tagged_path.csv"))
    run.summary.update(divisions=len(path.event_times))
    if (f := run.figure("tagged_path.png")) is not None:
        _plotting().tagged_path(path, f)


def cmd_verify_m2o(run: Run):
    cfg = run.cfg
    root = cfg.root()
    rows = tagged.many_to_one_check(
        cfg.params(), root.x0, cfg.get_float("run", "t_max"), tagged.phi_battery(),
        cfg.get_int("run", "n_rep"), cfg.seed, v0=root.v0, p0=root.p0,
        n_cap=cfg.get_int("run", "n_cap"), threads=run.args.threads,
    )
    tagged.many_to_one_csv(rows, run.path("many_to_one.csv"))
    zmax = max(abs(r.z_score) for r in rows)
    run.summary.update(max_abs_z=zmax, passed=zmax <= 3)
    if (f := run.figure("many_to_one.png")) is not None:
        _plotting().z_scores(rows, f)
    if zmax > 3:
        raise CheckFailed(f"max |z| = {zmax:.3g} exceeds 3")


def cmd_verify_lemma1(run: Run):
    cfg = run.cfg
    root = cfg.root()
    rows = tagged.division_counting_check(
        cfg.params(), root.x0, cfg.get_float("run", "lemma1.t"), cfg.get_floats("run", "lemma1.h_grid"),
        cfg.get_int("run", "lemma1.n_rep"), cfg.seed, v0=root.v0, p0=root.p0, threads=run.args.threads,
    )
    tagged.counting_csv(rows, run.path("lemma1.csv"))
    verdict = tagged.counting_verdict(rows, kappa=cfg.get_float("run", "lemma1.kappa"))
    run.summary.update(within_envelope=verdict.within_envelope, p2_slope=verdict.slope, passed=verdict.passed)
    if (f := run.figure("lemma1.png")) is not None:
        _plotting().counting(rows, f)
    if not verdict.passed:
        raise CheckFailed(f"envelope {verdict.within_envelope}, P2 slope {verdict.slope:.3g}")


def cmd_transition(run: Run):
    cfg = run.cfg
    params = cfg.params()
    root = cfg.root()
    x, v, i = root.x0, root.v0, root.p0
    n = cfg.get_int("run", "transition.n_draws")
    bins = cfg.get_int("run", "transition.bins")
    rng = stream(cfg.seed, STREAM_MISC, 1)
    xs, vs, qs = transition.sample_transitions(params, np.full(n, x), np.full(n, i), np.full(n, v), rng)
    n_export = min(n, 10_000)
    transition.ChainSample(np.full(n_export, x), np.full(n_export, v), np.full(n_export, i, dtype=int),
                           xs[:n_export], vs[:n_export], qs[:n_export]).to_csv(run.path("transitions.csv"))
    l1 = transition.histogram_l1(params, x, v, xs, qs, bins=bins)
    mass = transition.transition_mass(params, x, i, v)
    lines = ["type,bin_lo,bin_hi,mass"]
    curves_x, curves_f, draws = [], [], []
    for q in (0, 1):
        sel = xs[qs == q]
        if len(sel) == 0:
            continue
        lo = x * params.theta[q]
        edges = np.linspace(lo, np.quantile(sel, 0.999), bins + 1)
        counts, _ = np.histogram(sel, edges)
        lines += [f"{q},{a!r},{b!r},{c / n!r}" for a, b, c in zip(edges[:-1].tolist(), edges[1:].tolist(), counts)]
        grid = np.linspace(lo, edges[-1], 400)
        curves_x.append(grid)
        curves_f.append(transition.transition_density(params, x, i, v, grid, q) / max(len(sel) / n, 1e-300))
        draws.append(sel)
    run.path("transition_hist.csv").write_text("\n".join(lines) + "\n")
    run.summary.update(normalization_error=abs(mass - 1.0), histogram_l1=l1)
    if (f := run.figure("transition.png")) is not None:
        _plotting().density_vs_histogram(curves_x, curves_f, draws, f)


def cmd_invariant(run: Run):
    cfg = run.cfg
    params = cfg.params()
    bins = cfg.get_int("run", "chain.bins")
    measure = transition.invariant_measure_estimate(
        params, cfg.get_int("run", "chain.n_steps"), cfg.get_int("run", "chain.burn_in"), cfg.seed,
        n_chains=cfg.get_int("run", "chain.n_chains"), bins=bins,
    )
    measure.to_csv(run.path("invariant.csv"))
    push = transition.pushforward_l1(params, measure, cfg.seed)
    run.summary.update(pushforward_l1=push, retained=len(measure.sample))
    recon = None
    if params.symmetric:
        y = np.linspace(cfg.get_float("run", "chain.y_lo"), cfg.get_float("run", "chain.y_hi"), 41)
        recon = transition.reconstruct_B_from_invariant(params, measure.sample, y, bins=bins)
        ok = ~recon.flagged
        lines = ["y,b,flagged"] + [f"{a!r},{b!r},{int(c)}" for a, b, c in zip(y.tolist(), recon.b.tolist(), recon.flagged)]
        run.path("reconstruction.csv").write_text("\n".join(lines) + "\n")
        truth = params.B(y[ok])
        run.summary["reconstruction_rel_l2"] = est.relative_l2(y[ok], recon.b[ok], truth) if ok.sum() > 1 else math.nan
    if (f := run.figure("invariant.png")) is not None:
        _plotting().invariant(measure, f, recon, params.B if recon is not None else None)


def _solve(cfg: RunConfig, params, record_times):
    grid = cfg.grid(params)
    init = pde.initial_measure(grid, cfg.root())
    return pde.solve_gf_equation(params, init, cfg.get_float("grid", "t_max"), cfg.dt(), record_times=record_times)


def cmd_pde(run: Run):
    cfg = run.cfg
    params = cfg.params()
    t_max = cfg.get_float("grid", "t_max")
    record = [t for t in cfg.get_floats("run", "times") if t <= t_max] + [t_max]
    tl = _solve(cfg, params, sorted(set(record)))
    tl.to_csv(run.path("timeline.csv"))
    run.summary.update(dt=tl.dt, total_mass=tl.measures[-1].total, outflow=tl.outflow, underflow=tl.underflow)
    if (f := run.figure("timeline.png")) is not None:
        _plotting().pde_marginals(tl.measures, f)


def cmd_compare(run: Run):
    cfg = run.cfg
    params = cfg.params()
    t_max = cfg.get_float("grid", "t_max")
    tl = _solve(cfg, params, [t_max])
    solved = tl.at(t_max)
    n_rep = cfg.get_int("compare", "n_rep")
    emp, _ = pde.empirical_mean_measure(params, cfg.root(), [t_max], n_rep, solved.grid, cfg.seed,
                                        n_cap=cfg.get_int("run", "n_cap"), threads=run.args.threads)
    l1 = solved.l1_distance(emp[0]) / solved.total
    tol = cfg.get_float("compare", "tolerance")
    t_grid = cfg.get_floats("compare", "t_grid")
    order = cfg.get_int("compare", "order")
    ens = simulate_population(params, cfg.root(), pde.quadrature_times(t_grid, order), n_rep,
                                  cfg.seed + 1, n_cap=cfg.get_int("run", "n_cap"), threads=run.args.threads)
    res = pde.empirical_weak_residual(ens, params, pde.pde_battery(cfg.root().x0), t_grid, order)
    lines = ["phi_id,t_lo,t_hi,lhs,rhs,se,z_score"]
    z = res.z
    for a, name in enumerate(res.names):
        for k in range(len(t_grid) - 1):
            lines.append(f"{name},{t_grid[k]!r},{t_grid[k + 1]!r},{res.lhs[a, k]!r},{res.rhs[a, k]!r},"
                         f"{res.se[a, k]!r},{float(z[a, k])!r}")
    run.path("weak_residual.csv").write_text("\n".join(lines) + "\n")
    mass = solved.by_type_size()
    ref = emp[0].by_type_size()
    rows = ["type,log_x_bin,solver,monte_carlo,monte_carlo_se"]
    se = emp[0].se.sum(axis=1)
    for q in (0, 1):
        for k in range(mass.shape[1]):
            if mass[q, k] > 0 or ref[q, k] > 0:
                rows.append(f"{q},{k},{mass[q, k]!r},{ref[q, k]!r},{se[q, k]!r}")
    run.path("compare.csv").write_text("\n".join(rows) + "\n")
    zmax = float(np.abs(z).max())
    passed = l1 <= tol and zmax <= 3
    run.summary.update(l1=l1, tolerance=tol, weak_max_abs_z=zmax, passed=passed)
    print(f"compare: L1 = {l1:.4f} of total mass (tolerance {tol:g}), weak-form max |z| = {zmax:.2f}: "
          f"{'PASS' if passed else 'FAIL'}")
    if (f := run.figure("compare.png")) is not None:
        _plotting().pde_marginals([solved], f, reference=emp[0])
    if not passed:
        raise CheckFailed(f"L1 {l1:.4f} vs tolerance {tol:g}, weak-form max |z| {zmax:.2f}")


def cmd_estimate(run: Run):
    cfg = run.cfg
    params = cfg.params()
    conf = cfg.estimation()
    kernel = cfg.kernel()
    truth = None
    if run.args.input is not None:
        try:
            obs = est.Observations.from_csv(run.args.input)
        except OSError as exc:
            raise ParameterError(f"cannot read observations: {exc}") from None
    else:
        est.require_symmetric(params)
        obs = est.stationary_observations(params, cfg.get_int("estimator", "n_obs"), cfg.seed)
        obs.to_csv(run.path("observations.csv"))
        truth = params.B
    res = est.estimate_division_rate(obs, conf, kernel)
    res.to_csv(run.path("estimate.csv"))
    run.summary.update(n=len(obs), h=res.h, varpi=res.varpi, thresholded=int(res.thresholded.sum()),
                       clipped=int(res.clipped.sum()))
    if truth is not None:
        run.summary["relative_l2"] = res.relative_l2(truth)
    if (f := run.figure("estimate.png")) is not None:
        _plotting().rate_estimate(res, f, truth)


def cmd_risk(run: Run):
    cfg = run.cfg
    params = cfg.params()
    n_list = [int(n) for n in cfg.get_floats("estimator", "n_list")]
    study = est.risk_study(params, params.B, n_list, cfg.get_int("estimator", "n_mc"), cfg.estimation(),
                           cfg.seed, kernel=cfg.kernel(), threads=run.args.threads)
    study.to_csv(run.path("risk.csv"))
    run.summary.update(slope=study.slope)
    if (f := run.figure("risk.png")) is not None:
        _plotting().risk(study, f)


HANDLERS = {
    "simulate": cmd_simulate,
    "snapshot": cmd_snapshot,
    "tag": cmd_tag,
    "verify-m2o": cmd_verify_m2o,
    "verify-lemma1": cmd_verify_lemma1,
    "transition": cmd_transition,
    "invariant": cmd_invariant,
    "pde": cmd_pde,
    "compare": cmd_compare,
    "estimate": cmd_estimate,
    "risk": cmd_risk,
}


def _versions() -> dict[str, str]:
    out = {"python": platform.python_version()}
    for dist in ("numpy", "scipy", "matplotlib"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            pass
    from polegrowth import __version__

    out["polegrowth"] = __version__
    return out


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


def _write_manifest(run: Run, code: int, wall: float, error: str | None) -> None:
    entry = {
        "command": run.args.command,
        "exit_code": code,
        "seed": run.cfg.seed,
        "threads": run.args.threads,
        "config_sha256": run.cfg.sha256(),
        "versions": _versions(),
        "wall_time_s": round(wall, 3),
        "outputs": run.outputs,
        "summary": _json_safe(run.summary),
        "error": error,
        "input": str(getattr(run.args, "input", None) or "") or None,
        "config": run.cfg.text(),
    }
    with open(run.out / "manifest.jsonl", "a") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        first = next((a for a in argv if not a.startswith("-")), None)
        if first is not None and first not in COMMANDS and "invalid choice" in str(exc):
            print(f"polegrowth: unknown subcommand {first!r}; choose from {', '.join(COMMANDS)}", file=sys.stderr)
            return EXIT_UNKNOWN_COMMAND
        print(f"polegrowth: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg = RunConfig.load(args.config)
    except ConfigReadError as exc:
        print(f"polegrowth: {exc}", file=sys.stderr)
        return EXIT_NO_CONFIG
    if args.seed is not None:
        cfg.set_seed(args.seed)
    if args.out is not None:
        cfg.set_out_dir(args.out)
    if args.threads < 1:
        print("polegrowth: --threads must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg.validate()
    except (ParameterError, ValueError) as exc:
        print(f"polegrowth: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    run = Run(cfg, args)
    run.out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    error = None
    try:
        HANDLERS[args.command](run)
        code = EXIT_OK
    except (TruncationError, pde.GridOverflowError, CheckFailed) as exc:
        code, error = EXIT_FAILED, str(exc)
    except (ParameterError, ValueError) as exc:
        code, error = EXIT_INVALID, str(exc)
    if error:
        print(f"polegrowth {args.command}: {error}", file=sys.stderr)
    _write_manifest(run, code, time.perf_counter() - start, error)
    return code


if __name__ == "__main__":
    sys.exit(main())
