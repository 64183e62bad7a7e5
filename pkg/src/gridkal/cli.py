"""Command-line front end: ``gridkal {validate,simulate,reduce,estimate,benchmark}``.

Exit status is 0 on success, 1 on a validation or numerical failure and 2
on a usage error. Every run that gets past argument parsing writes
``run.json`` into ``--out`` with the resolved configuration and its status.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridkal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def common(sp, scenario=True):
        sp.add_argument("--network", help="network JSON file (overrides the scenario's reference)")
        if scenario:
            sp.add_argument("--scenario", required=True, help="scenario JSON file")
            sp.add_argument("--out", required=True, help="output directory")
            sp.add_argument("--seed", type=int, help="master seed override")
        sp.add_argument("--threads", type=int, help="thread cap (default: $GRIDKAL_THREADS or all cores)")

    v = sub.add_parser("validate", help="check a network file")
    common(v, scenario=False)
    v.add_argument("--out", help="optional output directory for run.json")

    s = sub.add_parser("simulate", help="simulate the nonlinear (or linear) model")
    common(s)
    s.add_argument("--model", choices=["nonlinear", "linear"], default="nonlinear")

    r = sub.add_parser("reduce", help="build a projection basis and the reduction-error curve")
    common(r)
    r.add_argument("--order", type=int, help="reduced order n")
    r.add_argument("--mor-tol", type=float, help="relative energy tolerance (pod only)")

    e = sub.add_parser("estimate", help="run one filter on one realization")
    common(e)
    e.add_argument("--filter", required=True, choices=["kf", "rkf", "cskf", "enkf", "renkf"])
    e.add_argument("--order", type=int, help="reduced order n")

    b = sub.add_parser("benchmark", help="run the full filter comparison")
    common(b)
    b.add_argument("--filter", action="append", choices=["kf", "rkf", "cskf", "enkf", "renkf"],
                   help="restrict to this filter (repeatable)")
    b.add_argument("--order", type=int, help="reduced order n")
    b.add_argument("--realizations", type=int, help="Monte-Carlo realization count")
    return p


def _set_threads(n: int | None) -> int:
    if n is None:
        env = os.environ.get("GRIDKAL_THREADS")
        n = int(env) if env and env.isdigit() and int(env) > 0 else (os.cpu_count() or 1)
    for var in _THREAD_VARS:
        os.environ[var] = str(n)
    return n


def _write_run(out: Path | None, record: dict) -> None:
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _load_scenario(args):
    from .bench import load_scenario
    from .network import load_network

    net, ref = None, None
    if args.network:
        net, ref = load_network(args.network), str(args.network)
    sc = load_scenario(args.scenario, network=net, network_ref=ref)
    if args.seed is not None:
        sc.seed = args.seed
    return sc


def _validate(args, out: Path | None, record: dict) -> int:
    from .network import load_network, validate_network

    if not args.network:
        print("gridkal validate: --network is required", file=sys.stderr)
        return 2
    record["config"] = {"network": args.network}
    problems = validate_network(load_network(args.network, check=False))
    for d in problems:
        print(d)
    print(f"{len(problems)} diagnostics")
    record["diagnostics"] = [str(d) for d in problems]
    return 0 if not problems else 1


def _simulate(args, out: Path, record: dict) -> int:
    from .bench import prepare_linear, write_trajectory_csv
    from .simulation import simulate_linear, simulate_nonlinear

    sc = _load_scenario(args)
    record["config"] = sc.to_dict() | {"model": args.model}
    setup = prepare_linear(sc)
    if args.model == "nonlinear":
        traj = simulate_nonlinear(sc.network, sc.mesh, sc.signals, setup.stationary, sc.tau, sc.theta,
                                  sc.K, seed=sc.seed)
    else:
        traj = simulate_linear(setup.sys, sc.signals, setup.stationary.vector, sc.tau, sc.theta, sc.K,
                               seed=sc.seed)
    write_trajectory_csv(out / f"{args.model}.csv", traj.states, sc.tau, with_k=False)
    write_trajectory_csv(out / "boundary_noise.csv", traj.noise, sc.tau, with_k=False)
    return 0


def _reduce(args, out: Path, record: dict) -> int:
    import time

    from .bench import MorConfig, emit_report, prepare_linear, reduction_sweep, Report
    from .mor import build_basis, save_basis, system_hash

    sc = _load_scenario(args)
    sc.mor = sc.mor or MorConfig()
    if args.order is not None:
        sc.mor.order = args.order
    record["config"] = sc.to_dict() | {"mor_tol": args.mor_tol}
    setup = prepare_linear(sc)
    t0 = time.perf_counter()
    snapshots = None
    if sc.mor.method == "pod":
        from .simulation import BoundarySignal, simulate_linear
        det = [BoundarySignal(s.node, s.segments) for s in sc.signals]
        snapshots = simulate_linear(setup.sys, det, setup.stationary.vector, sc.tau, sc.theta, sc.K).states
    order = None if (args.mor_tol is not None and args.order is None) else sc.mor.order
    basis = build_basis(setup.sys, order, sc.mor.method, snapshots=snapshots, tol=args.mor_tol,
                        shifts=sc.mor.shifts)
    seconds = time.perf_counter() - t0
    save_basis(basis, out / "basis", system_hash(setup.sys))
    curve = reduction_sweep(sc, sc.sweep, setup) if sc.sweep else []
    emit_report(Report([], curve, {"N": setup.sys.N, "n": basis.n, "basis_s": seconds,
                                   "diagnostics": basis.diagnostics}), out)
    record["basis"] = {"n": basis.n, "n_pressure": basis.n_pressure, "n_flux": basis.n_flux}
    for msg in basis.diagnostics:
        print(f"gridkal reduce: {msg}", file=sys.stderr)
    return 0


def _estimate(args, out: Path, record: dict) -> int:
    from .bench import MorConfig, emit_report, run_scenario

    sc = _load_scenario(args)
    sc.filters = [args.filter]
    sc.realizations = 1
    sc.sweep = []
    if args.order is not None:
        sc.mor = sc.mor or MorConfig()
        sc.mor.order = args.order
    if args.filter in ("rkf", "cskf", "renkf") and sc.mor is None:
        sc.mor = MorConfig()
    record["config"] = sc.to_dict()
    rep, trajs = run_scenario(sc, keep_trajectories=True, progress=_progress)
    emit_report(rep, out, trajs, sc.tau)
    _print_rows(rep)
    return 0


def _benchmark(args, out: Path, record: dict) -> int:
    from .bench import MorConfig, emit_report, run_scenario

    sc = _load_scenario(args)
    if args.filter:
        sc.filters = list(dict.fromkeys(args.filter))
    if args.order is not None:
        sc.mor = sc.mor or MorConfig()
        sc.mor.order = args.order
    if args.realizations is not None:
        sc.realizations = args.realizations
    record["config"] = sc.to_dict()
    rep = run_scenario(sc, progress=_progress)
    emit_report(rep, out)
    _print_rows(rep)
    return 0


def _progress(msg: str) -> None:
    print(f"gridkal: {msg}", file=sys.stderr, flush=True)


def _print_rows(rep) -> None:
    print(f"{'filter':8s} {'error':>10s} {'offline_s':>10s} {'online_s':>10s} {'postproc_s':>10s}")
    for r in rep.rows:
        print(f"{r.filter:8s} {r.error:10.3e} {r.offline_s:10.3e} {r.online_s:10.3e} {r.postproc_s:10.3e}")
    for n, e in rep.mor_curve:
        print(f"n={n:3d} reduction error {e:.3e}")


_COMMANDS = {"validate": _validate, "simulate": _simulate, "reduce": _reduce,
             "estimate": _estimate, "benchmark": _benchmark}


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    threads = _set_threads(args.threads)
    out = Path(args.out) if getattr(args, "out", None) else None
    record = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv),
              "threads": threads, "status": "running"}
    if args.command != "validate":
        scenario = Path(args.scenario)
        if not scenario.exists():
            print(f"gridkal {args.command}: scenario file not found: {scenario}", file=sys.stderr)
            record.update(status="failed", error=f"scenario file not found: {scenario}")
            _write_run(out, record)
            return 1
        out.mkdir(parents=True, exist_ok=True)

    from .bench import BenchError
    from .discretization import DiscretizationError, StationaryError
    from .filters import FilterError
    from .mor import ReductionError
    from .network import NetworkError
    from .simulation import SimulationError

    try:
        code = _COMMANDS[args.command](args, out, record)
    except (NetworkError, BenchError, DiscretizationError, StationaryError, FilterError,
            ReductionError, SimulationError) as exc:
        module = type(exc).__module__.rsplit(".", 1)[-1]
        stage = getattr(exc, "stage", "") or getattr(exc, "locus", "") or args.command
        text = str(exc)
        if stage and text.startswith(f"{stage}: "):
            text = text[len(stage) + 2:]
        msg = f"[{module}/{stage}] {text}"
        print(f"gridkal {args.command}: {msg}", file=sys.stderr)
        record.update(status="failed", error=msg)
        _write_run(out, record)
        return 1
    record["status"] = "ok" if code == 0 else "failed"
    _write_run(out, record)
    return code


if __name__ == "__main__":
    sys.exit(main())
