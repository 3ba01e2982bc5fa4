"""Command-line interface.

Exit codes: 0 success, 2 input error, 3 numerical failure.  Every command
writes ``<command>_manifest.json`` next to its outputs; passing that file back
through ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import io as gio
from . import wls
from .convergence import analyze
from .engine import GbpSolver, SolverConfig
from .errors import GbpseError, InputError, NotConverged, NumericalError, SingularBelief
from .factor_graph import GraphMode, build_graph, graph_stats
from .messages import FORMS
from .power_model import (
    PmuConfig,
    add_random_pmus,
    generate_measurements,
    place_pmus_greedy,
    synth_state,
    synthetic_grid,
    three_bus_case,
    to_rectangular,
)
from .stream import Condition, StreamConfig, make_schedule, run_stream

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class UsageError(InputError):
    pass


def _pair(text):
    parts = [float(v) for v in str(text).replace(",", " ").split()]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected two numbers 'VAR_M,VAR_THETA'")
    return parts


def _int_list(text):
    return [int(v) for v in str(text).replace(",", " ").split()]


def _range(text):
    parts = [float(v) for v in str(text).replace(",", " ").split()]
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected 'LO,HI'")
    return parts


# ---- shared helpers -------------------------------------------------------------


def _load_model(args):
    if getattr(args, "builtin", None) == "three-bus":
        return three_bus_case()
    if getattr(args, "synthetic", None):
        return synthetic_grid(args.synthetic, args.degree, np.random.default_rng(args.seed))
    if not getattr(args, "network", None):
        raise UsageError("a network is required (--network, --synthetic or --builtin)")
    return gio.load_network(args.network)


def _rect(model, polar, diagonal=False):
    meas = to_rectangular(polar)
    # unknown endpoints surface here rather than deep inside graph assembly
    wls.assemble(model, meas, diagonal)
    return meas


def _solver_config(args):
    return SolverConfig(
        form=args.form,
        max_iterations=args.max_iter,
        tol_mean=args.tol,
        svd_rcond=args.rcond,
        damping=args.damping,
    )


def _polar_rows(x):
    mag = np.hypot(x[:, 0], x[:, 1])
    ang = np.arctan2(x[:, 1], x[:, 0])
    return [
        {"bus": i, "re": float(x[i, 0]), "im": float(x[i, 1]), "magnitude": float(mag[i]),
         "angle": float(ang[i])}
        for i in range(len(x))
    ]


def _warn(msg):
    print(f"warning: {msg}", file=sys.stderr)


# ---- commands -------------------------------------------------------------------


def cmd_generate(args, out):
    model = _load_model(args)
    rng = np.random.default_rng(args.seed)
    files = {}
    if not args.network:
        files["network"] = out / "network.json"
        gio.save_network(model, files["network"])
    if args.pmu:
        pmu = gio.load_pmu(args.pmu)
    elif args.pmu_buses is not None:
        pmu = PmuConfig({b: None for b in args.pmu_buses})
    elif args.placement == "all":
        pmu = PmuConfig({b: None for b in range(model.n_buses)})
    else:
        pmu = place_pmus_greedy(model)
    if args.redundancy > 0:
        pmu = add_random_pmus(model, pmu, args.redundancy, rng)
    if args.state:
        state = gio.load_state(args.state)
        if len(state) != model.n_buses:
            raise UsageError(f"state has {len(state)} buses, network has {model.n_buses}")
    else:
        state = synth_state(model, rng)
        files["state"] = out / "state.json"
        gio.save_state(state, files["state"])
    # noiseless sets keep their nominal variances so they stay solvable
    polar = generate_measurements(model, state, pmu, tuple(args.var_voltage),
                                  tuple(args.var_current), rng, add_noise=not args.noiseless)
    files["measurements"] = out / "measurements.json"
    gio.save_measurements(polar, files["measurements"])
    files["pmu"] = out / "pmu.json"
    gio.save_pmu(pmu, files["pmu"])
    print(f"{len(polar)} measurements from {len(pmu.buses)} PMUs")
    return EXIT_OK, files


def cmd_solve(args, out):
    model = _load_model(args)
    meas = _rect(model, gio.load_measurements(args.measurements))
    obs = wls.observability(wls.assemble(model, meas))
    if not obs["observable"]:
        _warn(f"measurement set is not observable (rank {obs['rank']} of {2 * model.n_buses})")
    graph = build_graph(model, meas, args.mode, diagonal_covariance=args.diagonal_covariance)
    files = {}
    if args.dump_graph:
        files["graph"] = out / "graph.json"
        files["graph"].write_text(graph.to_json())
    solver = GbpSolver(graph, _solver_config(args))
    code = EXIT_OK
    try:
        result = solver.run(raise_not_converged=True)
    except (NotConverged, SingularBelief) as exc:
        _warn(str(exc))
        result = exc.result
        code = EXIT_NUMERIC
    files["results"] = out / "results.json"
    gio.save_json(
        {
            "mode": graph.mode.value,
            "form": args.form,
            "iterations": result.iterations,
            "converged": result.converged,
            "graph_stats": graph_stats(graph),
            "observability": obs,
            "buses": _polar_rows(result.bus_estimate()),
        },
        files["results"],
    )
    files["trace"] = out / "trace.csv"
    result.trace.to_csv(files["trace"], graph.mode)
    if args.dump_messages:
        files["messages"] = out / "messages.json"
        s = result.store
        gio.save_json(
            {"form": s.form, "edges": [list(e) for e in graph.edges],
             "v2f_vec": s.v2f_vec.tolist(), "v2f_prec": s.v2f_prec.tolist(),
             "f2v_vec": s.f2v_vec.tolist(), "f2v_prec": s.f2v_prec.tolist()},
            files["messages"],
        )
    print(f"{graph.mode.value}/{args.form}: {result.iterations} iterations, "
          f"converged={result.converged}")
    return code, files


def cmd_wls(args, out):
    model = _load_model(args)
    meas = _rect(model, gio.load_measurements(args.measurements))
    system = wls.assemble(model, meas, args.diagonal_covariance)
    obs = wls.observability(system)
    x = wls.solve(system)
    files = {"results": out / "wls.json"}
    gio.save_json({"observability": obs, "buses": _polar_rows(x)}, files["results"])
    return EXIT_OK, files


def cmd_compare(args, out):
    model = _load_model(args)
    meas = _rect(model, gio.load_measurements(args.measurements))
    truth = gio.load_state(args.truth)
    x_wls = wls.solve(wls.assemble(model, meas, args.diagonal_covariance))
    files = {k: out / f"{k}.csv" for k in ("rmse_ratio", "ae_quantiles", "ae_raw")}
    summary = {"wls_rmse": None, "modes": {}}
    with open(files["rmse_ratio"], "w", newline="") as f1, \
            open(files["ae_quantiles"], "w", newline="") as f2, \
            open(files["ae_raw"], "w", newline="") as f3:
        w1, w2, w3 = csv.writer(f1), csv.writer(f2), csv.writer(f3)
        w1.writerow(["iteration", "mode", "ratio_magnitude", "ratio_angle"])
        w2.writerow(["iteration", "mode", "quantity", "q25", "q50", "q75", "whisker_lo",
                     "whisker_hi"])
        w3.writerow(["iteration", "mode", "bus", "ae_magnitude", "ae_angle"])
        for mode in args.modes:
            graph = build_graph(model, meas, mode, diagonal_covariance=args.diagonal_covariance)
            result = GbpSolver(graph, _solver_config(args)).run(check_beliefs=False)
            rep = wls.metrics(result.trace.bus_means(mode), x_wls, truth)
            summary["wls_rmse"] = list(rep.wls_rmse)
            summary["modes"][mode] = {
                "iterations": result.iterations,
                "converged": result.converged,
                "iterations_to_ratio_1.01": rep.iterations_to_ratio(1.01),
                "final_ratio": rep.rmse_ratio[-1].tolist(),
            }
            for it, (rm, ra) in enumerate(rep.rmse_ratio, start=1):
                w1.writerow([it, mode, repr(float(rm)), repr(float(ra))])
            for name, ae in (("magnitude", rep.ae_magnitude), ("angle", rep.ae_angle)):
                q = wls.ae_quantiles(ae)
                for it in range(len(ae)):
                    w2.writerow([it + 1, mode, name] + [repr(float(q[k][it])) for k in
                                ("q25", "q50", "q75", "whisker_lo", "whisker_hi")])
            for it in range(len(rep.ae_magnitude)):
                for bus in range(model.n_buses):
                    w3.writerow([it + 1, mode, bus, repr(float(rep.ae_magnitude[it, bus])),
                                 repr(float(rep.ae_angle[it, bus]))])
    files["summary"] = out / "compare.json"
    gio.save_json(summary, files["summary"])
    return EXIT_OK, files


def _rho_row(run_id, system, p, var_v, model, meas, method):
    graph = build_graph(model, meas, GraphMode.FUSION)
    _, rep = analyze(graph, method=method)
    return [run_id, system, p, var_v, repr(rep.rho), repr(rep.one_minus_rho), rep.method]


def cmd_converge(args, out):
    files = {"report": out / "rho.csv"}
    rows = []
    if args.sweep:
        rng = np.random.default_rng(args.seed)
        for run_id in range(args.runs):
            n = int(rng.choice(args.sizes))
            p = float(rng.uniform(*args.p_range))
            lo, hi = np.log10(args.var_voltage_range)
            var_v = float(10 ** rng.uniform(lo, hi))
            model = synthetic_grid(n, args.degree, rng)
            pmu = add_random_pmus(model, place_pmus_greedy(model), p, rng)
            polar = generate_measurements(model, synth_state(model, rng), pmu, (var_v, var_v),
                                          tuple(args.var_current), rng)
            rows.append(_rho_row(run_id, f"synthetic-{n}", p, var_v, model,
                                 to_rectangular(polar), args.method))
    else:
        model = _load_model(args)
        if not args.measurements:
            raise UsageError("--measurements is required without --sweep")
        meas = _rect(model, gio.load_measurements(args.measurements))
        system = Path(args.network).stem if args.network else "builtin"
        rows.append(_rho_row(0, system, "", "", model, meas, args.method))
    with open(files["report"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "system", "p", "var_v", "rho", "one_minus_rho", "method"])
        w.writerows(rows)
    worst = min(float(r[5]) for r in rows)
    print(f"{len(rows)} runs, min 1-rho = {worst:.6g}")
    return EXIT_OK, files


def _load_conditions(folder):
    folder = Path(folder)
    meas_files = sorted(folder.glob("measurements_*.json"))
    if not meas_files:
        raise UsageError(f"{folder}: no measurements_<k>.json files")
    out = []
    for mf in meas_files:
        key = mf.stem.split("_", 1)[1]
        sf = folder / f"state_{key}.json"
        if not sf.exists():
            raise UsageError(f"{folder}: {sf.name} missing for {mf.name}")
        out.append((gio.load_state(sf), gio.load_measurements(mf)))
    return out


def cmd_stream(args, out):
    model = _load_model(args)
    files = {}
    if args.conditions:
        schedule = [Condition(s, _rect(model, m)) for s, m in _load_conditions(args.conditions)]
    else:
        rng = np.random.default_rng(args.seed)
        pmu = add_random_pmus(model, place_pmus_greedy(model), args.redundancy, rng)
        schedule = make_schedule(model, pmu, args.n_conditions, rng)
        folder = out / "conditions"
        folder.mkdir(parents=True, exist_ok=True)
        for k, cond in enumerate(schedule):
            gio.save_state(cond.truth, folder / f"state_{k:03d}.json")
            gio.save_measurements(cond.polar, folder / f"measurements_{k:03d}.json")
        gio.save_pmu(pmu, folder / "pmu.json")
        files["conditions"] = folder
    cfg = StreamConfig(args.fraction, args.aging, args.iterations_per_condition, args.seed)
    trace = run_stream(model, schedule, cfg, _solver_config(args))
    files["trace"] = out / "stream_trace.csv"
    trace.to_csv(files["trace"])
    return EXIT_OK, files


def cmd_bench(args, out):
    files = {"timing": out / "bench.csv"}
    rows = []
    for n in args.sizes:
        rng = np.random.default_rng(args.seed)
        model = synthetic_grid(n, args.degree, rng) if n > 1 else None
        if model is None:
            from .power_model import Bus, BusBranchModel
            model = BusBranchModel([Bus(0)], [])
            pmu = PmuConfig({0: None})
        else:
            pmu = add_random_pmus(model, place_pmus_greedy(model), args.redundancy, rng)
        polar = generate_measurements(model, synth_state(model, rng), pmu, rng=rng)
        graph = build_graph(model, to_rectangular(polar), args.mode)
        solver = GbpSolver(graph, _solver_config(args))
        solver.step()  # compile and warm caches
        t0 = time.perf_counter()
        for _ in range(args.iterations):
            solver.step()
        per = (time.perf_counter() - t0) / args.iterations
        rows.append([n, args.mode, args.form, repr(per)])
        print(f"{n:6d} buses: {per * 1e3:.3f} ms/iteration")
    with open(files["timing"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["buses", "mode", "form", "seconds_per_iteration"])
        w.writerows(rows)
    return EXIT_OK, files


# ---- parser ---------------------------------------------------------------------


def _add_network(p, measurements=True):
    p.add_argument("--network", help="network JSON file")
    p.add_argument("--builtin", choices=["three-bus"], help="use a built-in network")
    p.add_argument("--synthetic", type=int, metavar="N", help="seeded synthetic grid with N buses")
    p.add_argument("--degree", type=float, default=3.0, help="average bus degree of synthetic grids")
    if measurements:
        p.add_argument("--measurements", help="measurement JSON file")


def _add_solver(p):
    p.add_argument("--mode", choices=[m.value for m in GraphMode], default="fusion")
    p.add_argument("--form", choices=FORMS, default="moment")
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--rcond", type=float, default=1e-12)
    p.add_argument("--damping", type=float, default=0.0)
    p.add_argument("--diagonal-covariance", action="store_true",
                   help="drop real/imaginary cross-covariances")


def build_parser():
    parser = argparse.ArgumentParser(prog="gbpse", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out-dir", default=".")
    parser.add_argument("--config", help="JSON file of option values (or a run manifest)")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesise PMU measurements")
    _add_network(p, measurements=False)
    p.add_argument("--state", help="ground-truth state JSON (synthesised if absent)")
    p.add_argument("--pmu", help="PMU placement JSON")
    p.add_argument("--pmu-buses", type=_int_list, help="PMU buses with default channels")
    p.add_argument("--placement", choices=["greedy", "all"], default="greedy")
    p.add_argument("--redundancy", type=float, default=0.0,
                   help="probability of an extra PMU at each remaining bus")
    p.add_argument("--var-voltage", type=_pair, default=[1e-8, 1e-8])
    p.add_argument("--var-current", type=_pair, default=[1e-6, 1e-6])
    p.add_argument("--noiseless", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("solve", help="run GBP")
    _add_network(p)
    _add_solver(p)
    p.add_argument("--dump-graph", action="store_true")
    p.add_argument("--dump-messages", action="store_true")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("wls", help="centralised weighted least squares")
    _add_network(p)
    p.add_argument("--diagonal-covariance", action="store_true")
    p.set_defaults(func=cmd_wls)

    p = sub.add_parser("compare", help="RMSE ratio and AE series for several modes")
    _add_network(p)
    _add_solver(p)
    p.add_argument("--truth", required=True, help="ground-truth state JSON")
    p.add_argument("--modes", type=lambda s: s.split(","), default=["scalar", "multivariate", "fusion"])
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("converge", help="spectral radius of the mean recursion")
    _add_network(p)
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--sizes", type=_int_list, default=[30, 60, 100, 200])
    p.add_argument("--p-range", type=_range, default=[0.2, 0.8])
    p.add_argument("--var-voltage-range", type=_range, default=[1e-8, 1e-6])
    p.add_argument("--var-current", type=_pair, default=[1e-6, 1e-6])
    p.add_argument("--method", choices=["auto", "dense", "power"], default="auto")
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("stream", help="asynchronous measurement stream")
    _add_network(p, measurements=False)
    _add_solver(p)
    p.add_argument("--conditions", help="folder of measurements_<k>.json / state_<k>.json")
    p.add_argument("--n-conditions", type=int, default=4)
    p.add_argument("--redundancy", type=float, default=0.5)
    p.add_argument("--fraction", type=float, default=0.6)
    p.add_argument("--aging", type=float, default=1e2)
    p.add_argument("--iterations-per-condition", type=int, default=9)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("bench", help="per-iteration timing on synthetic grids")
    p.add_argument("--sizes", type=_int_list, default=[100, 200, 400, 800])
    p.add_argument("--degree", type=float, default=3.0)
    p.add_argument("--redundancy", type=float, default=0.5)
    p.add_argument("--iterations", type=int, default=20)
    _add_solver(p)
    p.set_defaults(func=cmd_bench)
    return parser


def _apply_config(parser, argv):
    """Parse ``argv``; values from ``--config`` fill every option not given explicitly."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    data = gio.load_json(args.config)
    if isinstance(data, dict) and "config" in data and "command" in data:
        data = data["config"]
    if not isinstance(data, dict):
        raise UsageError(f"{args.config}: expected a JSON object")
    for key, value in data.items():
        if key in ("command", "config", "func"):
            continue
        if not hasattr(args, key):
            raise UsageError(f"{args.config}: unknown option {key!r}")
        if not _given(argv, key):
            setattr(args, key, value)
    return args


def _given(argv, key):
    flag = "--" + key.replace("_", "-")
    return any(a == flag or a.startswith(flag + "=") for a in argv)


def _manifest(args, files, code):
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    inputs = {k: config[k] for k in ("network", "measurements", "truth", "state", "pmu", "conditions")
              if config.get(k)}
    return {
        "command": args.command,
        "version": __version__,
        "seed": args.seed,
        "inputs": inputs,
        "config": config,
        "outputs": {k: str(v) for k, v in files.items()},
        "exit_code": code,
    }


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        code, files = args.func(args, out)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GbpseError as exc:  # pragma: no cover - every subclass is handled above
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    manifest = out / f"{args.command}_manifest.json"
    gio.save_json(_manifest(args, files, code), manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
