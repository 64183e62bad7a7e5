"""Scenario orchestration, error metrics and report files for filter benchmarks.

One realization runs: nonlinear truth, synthetic boundary-flux
measurements, then every requested filter on the same measurements. The
expectation in the error metric is the average over realizations.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import __version__
from .discretization import (
    DescriptorSystem,
    MeshSpec,
    StationaryState,
    assemble_linear,
    assemble_output,
    linearize_friction,
    noise_amplitude,
    stationary_solve,
)
from .filters import (
    EstimateTrajectory,
    OUParams,
    build_filter_model,
    build_reduced_filter_model,
    filter_inputs,
    precompute_gains,
    prolong_estimate,
    run_cskf,
    run_enkf,
    run_kf,
    run_rkf,
)
from .mor import ProjectionBasis, augment_basis, build_basis, reduce_system, reduction_error
from .network import PipeNetwork, builtin_diamond, load_network, network_from_dict
from .simulation import (
    MEASUREMENT_STD_FLOOR,
    BoundarySignal,
    Segment,
    Trajectory,
    boundary_inputs,
    simulate_linear,
    simulate_nonlinear,
    stream_rng,
    synthesize_measurements,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FILTERS = ("kf", "rkf", "cskf", "enkf", "renkf")
_NEEDS_BASIS = {"rkf", "cskf", "renkf"}
_SCENARIO_KEYS = {"network", "mesh", "time", "signals", "measurement", "seed", "linearization",
                  "noise", "mor", "filters", "ensemble_size", "realizations", "norm", "sweep"}


class BenchError(RuntimeError):
    """Failure with the pipeline stage that raised it."""

    def __init__(self, message: str, stage: str = ""):
        super().__init__(f"{stage}: {message}" if stage else message)
        self.stage = stage


@dataclass
class MorConfig:
    method: str = "moment-matching"
    order: int = 29
    shifts: tuple[float, ...] = (0.0,)


@dataclass
class Scenario:
    network: PipeNetwork
    mesh: MeshSpec
    T: float
    K: int
    theta: float
    signals: list[BoundarySignal]
    measured: list[str]
    noise_percent: float
    seed: int = 0
    network_ref: str = ""
    linearization: dict[str, float] | None = None
    z_rule: str = "stationary-deviation"
    mor: MorConfig | None = None
    filters: list[str] = field(default_factory=lambda: list(FILTERS))
    ensemble_size: int = 100
    realizations: int = 5
    norm: str = "mass"
    sweep: list[int] = field(default_factory=list)

    @property
    def tau(self) -> float:
        return self.T / self.K

    def initial_pressures(self) -> dict[str, float]:
        return {s.node: float(s.deterministic(0.0)[0]) for s in self.signals}

    def linearization_pressures(self) -> dict[str, float]:
        return dict(self.linearization) if self.linearization else self.initial_pressures()

    def validate(self) -> None:
        if not self.T > 0 or self.K < 1:
            raise BenchError("T must be positive and steps at least 1", "scenario")
        if not 0.5 <= self.theta <= 1.0:
            raise BenchError(f"theta must lie in [0.5, 1], got {self.theta}", "scenario")
        unknown = sorted(set(self.filters) - set(FILTERS))
        if unknown:
            raise BenchError(f"unknown filters {unknown}", "scenario")
        if _NEEDS_BASIS & set(self.filters) and self.mor is None:
            raise BenchError("filters rkf, cskf and renkf need a 'mor' block", "scenario")
        if self.realizations < 1:
            raise BenchError("realizations must be at least 1", "scenario")
        if {"enkf", "renkf"} & set(self.filters) and self.ensemble_size < 2:
            raise BenchError("ensemble_size must be at least 2", "scenario")
        if self.norm not in ("mass", "euclidean"):
            raise BenchError(f"norm must be 'mass' or 'euclidean', got {self.norm!r}", "scenario")
        if self.z_rule not in ("stationary-deviation", "zero"):
            raise BenchError(f"unknown noise rule {self.z_rule!r}", "scenario")
        boundary = set(self.network.boundary_nodes)
        nodes = [s.node for s in self.signals]
        if sorted(nodes) != sorted(boundary):
            raise BenchError(f"signals must cover exactly the boundary nodes {sorted(boundary)}", "scenario")
        for s in self.signals:
            try:
                s.check(self.T)
            except Exception as exc:
                raise BenchError(str(exc), "scenario") from None
        bad = [v for v in self.measured if v not in boundary]
        if bad:
            raise BenchError(f"measured nodes {bad} are not boundary nodes", "scenario")
        if self.linearization is not None and set(self.linearization) != boundary:
            raise BenchError("linearization must give a pressure for every boundary node", "scenario")

    def to_dict(self) -> dict:
        out = {
            "network": self.network_ref,
            "mesh": self.mesh.to_dict(),
            "time": {"T": self.T, "steps": self.K, "theta": self.theta},
            "signals": [
                {"node": s.node, "u_D": [seg.to_dict() for seg in s.segments],
                 "ou": {"kappa": s.kappa, "mu": s.mu, "sigma": s.sigma}}
                for s in self.signals
            ],
            "measurement": {"nodes": list(self.measured), "noise_percent": self.noise_percent},
            "seed": self.seed,
            "noise": {"z_rule": self.z_rule},
            "filters": list(self.filters),
            "ensemble_size": self.ensemble_size,
            "realizations": self.realizations,
            "norm": self.norm,
        }
        if self.linearization is not None:
            out["linearization"] = dict(self.linearization)
        if self.mor is not None:
            out["mor"] = {"method": self.mor.method, "order": self.mor.order,
                          "shifts": list(self.mor.shifts)}
        if self.sweep:
            out["sweep"] = list(self.sweep)
        return out


def _segment(raw: Mapping, locus: str) -> Segment:
    try:
        kind = raw["kind"]
        t0, t1 = float(raw["t0"]), float(raw["t1"])
        if kind == "constant":
            return Segment(kind, t0, t1, value=float(raw["value"]))
        if kind == "linear":
            return Segment(kind, t0, t1, v0=float(raw["v0"]), v1=float(raw["v1"]))
        if kind in ("sin", "cos"):
            return Segment(kind, t0, t1, A=float(raw["A"]), B=float(raw["B"]), omega=float(raw["omega"]))
    except KeyError as exc:
        raise BenchError(f"missing field {exc.args[0]!r}", locus) from None
    raise BenchError(f"unknown segment kind {raw.get('kind')!r}", locus)


def resolve_network(ref, base: Path | None = None) -> PipeNetwork:
    """``builtin:diamond``, an inline network object, or a path (relative to ``base``)."""
    if isinstance(ref, Mapping):
        return network_from_dict(ref)
    if not isinstance(ref, str) or not ref:
        raise BenchError("scenario names no network", "scenario")
    if ref == "builtin:diamond":
        return builtin_diamond()
    path = Path(ref)
    if not path.is_absolute() and base is not None:
        path = base / path
    if not path.exists():
        raise BenchError(f"network file not found: {path}", "scenario")
    return load_network(path)


def scenario_from_dict(data: Mapping, base: Path | None = None,
                       network: PipeNetwork | None = None, network_ref: str | None = None) -> Scenario:
    """Parse a scenario document; ``network`` overrides its network reference."""
    extra = set(data) - _SCENARIO_KEYS
    if extra:
        raise BenchError(f"unknown keys {sorted(extra)}", "scenario")
    for key in ("mesh", "time", "signals", "measurement"):
        if key not in data:
            raise BenchError(f"missing field '{key}'", "scenario")
    ref = network_ref if network_ref is not None else data.get("network", "")
    net = network if network is not None else resolve_network(ref, base)
    tm = data["time"]
    signals = []
    for i, raw in enumerate(data["signals"]):
        locus = f"signals[{i}]"
        if "node" not in raw or "u_D" not in raw:
            raise BenchError("signal needs 'node' and 'u_D'", locus)
        ou = raw.get("ou", {})
        signals.append(BoundarySignal(
            raw["node"], tuple(_segment(s, f"{locus}.u_D[{j}]") for j, s in enumerate(raw["u_D"])),
            kappa=float(ou.get("kappa", 0.0)), mu=float(ou.get("mu", 0.0)),
            sigma=float(ou.get("sigma", 0.0)),
        ))
    meas = data["measurement"]
    mor = None
    if "mor" in data:
        m = data["mor"]
        mor = MorConfig(m.get("method", "moment-matching"), int(m.get("order", 29)),
                        tuple(float(s) for s in m.get("shifts", (0.0,))))
    try:
        sc = Scenario(
            network=net,
            mesh=MeshSpec.from_dict(data["mesh"]),
            T=float(tm["T"]), K=int(tm["steps"]), theta=float(tm.get("theta", 0.51)),
            signals=signals,
            measured=list(meas.get("nodes", [])),
            noise_percent=float(meas.get("noise_percent", 0.01)),
            seed=int(data.get("seed", 0)),
            network_ref=ref if isinstance(ref, str) else "inline",
            linearization={k: float(v) for k, v in data["linearization"].items()}
            if data.get("linearization") else None,
            z_rule=data.get("noise", {}).get("z_rule", "stationary-deviation"),
            mor=mor,
            filters=list(data.get("filters", FILTERS)),
            ensemble_size=int(data.get("ensemble_size", 100)),
            realizations=int(data.get("realizations", 5)),
            norm=data.get("norm", "mass"),
            sweep=[int(n) for n in data.get("sweep", [])],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise BenchError(str(exc), "scenario") from None
    sc.validate()
    return sc


def load_scenario(path, network: PipeNetwork | None = None, network_ref: str | None = None) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise BenchError(f"scenario file not found: {path}", "scenario")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BenchError(f"{exc.msg} at line {exc.lineno} column {exc.colno}", "scenario") from None
    return scenario_from_dict(data, path.parent, network, network_ref)


@dataclass
class FilterRow:
    filter: str
    error: float
    offline_s: float
    online_s: float
    postproc_s: float
    dimension: int
    prolongation: bool
    offline_is_sampling: bool


@dataclass
class Report:
    rows: list[FilterRow]
    mor_curve: list[tuple[int, float]] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def row(self, name: str) -> FilterRow:
        for r in self.rows:
            if r.filter == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "rows": [asdict(r) for r in self.rows],
                "mor_curve": [[int(n), float(e)] for n, e in self.mor_curve],
                "metadata": self.metadata}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Report":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise BenchError(f"unsupported report schema {data.get('schema_version')}", "report")
        return cls([FilterRow(**r) for r in data["rows"]],
                   [(int(n), float(e)) for n, e in data["mor_curve"]],
                   dict(data.get("metadata", {})), data["schema_version"])


# -- metric ------------------------------------------------------------------

def norm_weight(sys: DescriptorSystem, norm: str = "mass"):
    """Dof indices (pressure and flux) and the matching weight matrix."""
    idx = np.concatenate([sys.pressure, sys.flux])
    if norm == "euclidean":
        return idx, sp.identity(len(idx), format="csr")
    M = sp.csr_matrix(sys.mass)
    return idx, M[idx][:, idx]


def error_metric(estimates: Sequence[np.ndarray], truths: Sequence[np.ndarray], weight=None,
                 dofs: np.ndarray | None = None) -> float:
    """Temporal mean of ``||E[x_k - x_{k|k}]|| / ||E[x_k]||``.

    Rows are time steps. The expectation is the average over the given
    realizations; ``dofs`` selects the compared components and ``weight``
    (default identity) defines the norm on them.
    """
    if len(estimates) != len(truths) or not estimates:
        raise BenchError("need the same positive number of estimates and truths", "metric")
    est = np.mean([np.asarray(getattr(e, "x", e), dtype=float) for e in estimates], axis=0)
    tru = np.mean([np.asarray(t, dtype=float) for t in truths], axis=0)
    if est.shape != tru.shape:
        raise BenchError(f"estimate shape {est.shape} differs from truth shape {tru.shape}", "metric")
    return relative_error_series(est, tru, weight, dofs).mean()


def relative_error_series(est: np.ndarray, tru: np.ndarray, weight=None,
                          dofs: np.ndarray | None = None) -> np.ndarray:
    est, tru = np.atleast_2d(est), np.atleast_2d(tru)
    if est.ndim == 2 and est.shape[0] != tru.shape[0]:
        raise BenchError("series lengths differ", "metric")
    if dofs is not None:
        est, tru = est[:, dofs], tru[:, dofs]

    def norms(X):
        WX = X if weight is None else (weight @ X.T).T
        return np.sqrt(np.maximum(np.einsum("ij,ij->i", X, WX), 0.0))

    den = norms(tru)
    if np.any(den == 0):
        raise BenchError(f"reference has zero norm at step {int(np.argmin(den)) + 1}", "metric")
    return norms(tru - est) / den


def truth_in_filter_layout(traj: Trajectory) -> np.ndarray:
    """States ``[x_k; u_S(t_k)]`` for ``k = 1..K`` (the same mesh, so no resampling)."""
    return np.hstack([traj.states, traj.noise])[1:]


# -- pipeline ----------------------------------------------------------------

@dataclass
class Setup:
    """Data-independent part of a scenario: linear model, noise model, basis."""

    stationary: StationaryState
    linearization: StationaryState
    net_lin: PipeNetwork
    sys: DescriptorSystem
    Z: np.ndarray
    ou: OUParams
    inputs: np.ndarray
    x0: np.ndarray
    std: np.ndarray
    basis: ProjectionBasis | None = None
    basis_seconds: float = 0.0


def realization_seed(master: int, r: int, purpose: str) -> int:
    return int(stream_rng(master, "realization", r, purpose).integers(2 ** 63 - 1))


def _stage(name: str):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, etype, exc, tb):
            if exc is not None and not isinstance(exc, BenchError) and isinstance(exc, Exception):
                raise BenchError(f"{type(exc).__name__}: {exc}", name) from exc
            return False
    return _Ctx()


def prepare(sc: Scenario) -> Setup:
    """Stationary states, linearized model, noise amplitudes and the shared ``R``.

    The per-channel measurement std is taken from the deterministic truth
    (all OU parts switched off) so that ``R``, and with it every gain, does
    not depend on any realization.
    """
    with _stage("stationary"):
        stat = stationary_solve(sc.network, sc.initial_pressures(), sc.mesh)
        lin_p = sc.linearization_pressures()
        stat_lin = stat if lin_p == sc.initial_pressures() else stationary_solve(sc.network, lin_p)
        net_lin = linearize_friction(sc.network, stat_lin)
    with _stage("discretization"):
        sys = assemble_output(net_lin, assemble_linear(net_lin, sc.mesh), sc.measured)
        Z = noise_amplitude(net_lin, sys, stat_lin) if sc.z_rule == "stationary-deviation" else np.zeros(sys.N)
    ou = OUParams.from_signals(sc.signals, sys.boundary)
    uD, _ = boundary_inputs(sc.signals, sys.boundary, sc.tau, sc.K, sc.seed)
    inputs = filter_inputs(uD, sc.theta)
    x0 = np.concatenate([stat.vector, np.zeros(len(sys.boundary))])
    with _stage("measurement"):
        zero_noise = np.zeros((sc.K + 1, len(sys.boundary)))
        det = simulate_nonlinear(sc.network, sc.mesh, sc.signals, stat, sc.tau, sc.theta, sc.K,
                                 noise=zero_noise)
        clean = (sys.C @ det.states[1:].T).T
        std = sc.noise_percent * np.max(np.abs(clean), axis=0) if sys.R_out else np.zeros(0)
        std = np.maximum(std, MEASUREMENT_STD_FLOOR)
    setup = Setup(stat, stat_lin, net_lin, sys, Z, ou, inputs, x0, std)
    if _NEEDS_BASIS & set(sc.filters):
        with _stage("mor"):
            t0 = time.perf_counter()
            setup.basis = build_basis(sys, sc.mor.order, sc.mor.method, shifts=sc.mor.shifts)
            setup.basis_seconds = time.perf_counter() - t0
    return setup


def run_scenario(sc: Scenario, keep_trajectories: bool = False,
                 progress: Callable[[str], None] | None = None):
    """Run every requested filter on ``sc.realizations`` realizations.

    Returns the :class:`Report`; with ``keep_trajectories`` also a dict of
    realization-averaged full-coordinate estimates (and the averaged truth).
    Offline work shared across realizations (bases, gains) is timed once;
    online times are medians over realizations.
    """
    say = progress or (lambda msg: log.info(msg))
    sc.validate()
    t_start = time.perf_counter()
    setup = prepare(sc)
    sys, R = setup.sys, np.diag(setup.std ** 2)
    tau, theta, K = sc.tau, sc.theta, sc.K
    nb = len(sys.boundary)
    Vx = augment_basis(setup.basis, nb).Vx if setup.basis is not None else None

    models = {}
    offline = {}
    with _stage("filters"):
        if {"kf", "cskf", "enkf"} & set(sc.filters):
            t0 = time.perf_counter()
            models["full"] = build_filter_model(sys, setup.ou, tau, theta, setup.Z, R)
            build_s = time.perf_counter() - t0
            if "kf" in sc.filters:
                say("precomputing full-order Kalman gains")
                gains = precompute_gains(models["full"], models["full"].Q_matrix, K)
                offline["kf"] = build_s + gains.seconds
                models["kf_gains"] = gains
            offline["full_build"] = build_s
        if "renkf" in sc.filters:
            t0 = time.perf_counter()
            models["reduced"] = build_reduced_filter_model(sys, setup.basis, setup.ou, tau, theta, setup.Z, R)
            offline["renkf_build"] = time.perf_counter() - t0

    sums = {f: None for f in sc.filters}
    truth_sum = None
    online = {f: [] for f in sc.filters}
    offl = {f: [] for f in sc.filters}
    post = {f: [] for f in sc.filters}
    for r in range(sc.realizations):
        truth_seed = realization_seed(sc.seed, r, "truth")
        with _stage("truth"):
            say(f"realization {r + 1}/{sc.realizations}: nonlinear truth")
            truth = simulate_nonlinear(sc.network, sc.mesh, sc.signals, setup.stationary, tau, theta, K,
                                       seed=truth_seed)
        with _stage("measurement"):
            meas = synthesize_measurements(truth, sc.network, sc.mesh, sc.measured, sc.noise_percent,
                                           realization_seed(sc.seed, r, "measurement"), std=setup.std)
        tru = truth_in_filter_layout(truth)
        truth_sum = tru if truth_sum is None else truth_sum + tru
        y = meas.y
        for name in sc.filters:
            say(f"realization {r + 1}/{sc.realizations}: {name}")
            with _stage(name):
                est = _run_filter(name, sc, setup, models, offline, Vx, R, y, realization_seed(sc.seed, r, name))
            sums[name] = est.x if sums[name] is None else sums[name] + est.x
            online[name].append(est.timing["online_s"])
            offl[name].append(est.timing["offline_s"])
            post[name].append(est.timing["postproc_s"])

    idx, W = norm_weight(sys, sc.norm)
    truth_mean = truth_sum / sc.realizations
    rows = []
    dims = {"kf": sys.N + nb, "cskf": sys.N + nb, "enkf": sys.N + nb}
    if setup.basis is not None:
        dims.update(rkf=setup.basis.n + nb, renkf=setup.basis.n + nb)
    for name in sc.filters:
        mean = sums[name] / sc.realizations
        with _stage("metric"):
            err = float(relative_error_series(mean, truth_mean, W, idx).mean())
        rows.append(FilterRow(
            filter=name, error=err,
            offline_s=float(np.median(offl[name])), online_s=float(np.median(online[name])),
            postproc_s=float(np.median(post[name])), dimension=dims[name],
            prolongation=name in ("rkf", "renkf"), offline_is_sampling=name in ("enkf", "renkf"),
        ))
    curve = reduction_sweep(sc, sc.sweep, setup) if sc.sweep else []
    report = Report(rows, curve, _metadata(sc, setup, time.perf_counter() - t_start))
    if keep_trajectories:
        trajs = {name: sums[name] / sc.realizations for name in sc.filters}
        trajs["truth"] = truth_mean
        return report, trajs
    return report


def _run_filter(name, sc, setup, models, offline, Vx, R, y, seed) -> EstimateTrajectory:
    sys, tau, theta = setup.sys, sc.tau, sc.theta
    if name == "kf":
        est = run_kf(models["full"], setup.inputs, y, setup.x0, gains=models["kf_gains"])
        est.timing["offline_s"] = offline["kf"]
        return est
    if name == "rkf":
        est = run_rkf(sys, setup.basis, setup.ou, tau, theta, setup.Z, R, setup.inputs, y, setup.x0,
                      basis_seconds=setup.basis_seconds)
        return prolong_estimate(est)
    if name == "cskf":
        est = run_cskf(models["full"], Vx, setup.inputs, y, setup.x0, basis_seconds=setup.basis_seconds)
        est.timing["offline_s"] += offline["full_build"]
        return est
    if name == "enkf":
        return run_enkf(models["full"], sc.ensemble_size, setup.inputs, y, setup.x0, seed=seed)
    if name == "renkf":
        est = run_enkf(models["reduced"], sc.ensemble_size, setup.inputs, y, Vx.T @ setup.x0, seed=seed)
        est.timing["offline_s"] += offline["renkf_build"] + setup.basis_seconds
        return prolong_estimate(est, Vx)
    raise BenchError(f"unknown filter {name!r}", "filters")


def reduction_sweep(sc: Scenario, orders: Sequence[int], setup: Setup | None = None) -> list[tuple[int, float]]:
    """``(n, reduction error)`` for each order on the deterministic scenario (OU parts off)."""
    if not orders:
        return []
    setup = setup or prepare_linear(sc)
    sys = setup.sys
    det = [BoundarySignal(s.node, s.segments) for s in sc.signals]
    with _stage("mor"):
        full = simulate_linear(sys, det, setup.stationary.vector, sc.tau, sc.theta, sc.K)
        method = sc.mor.method if sc.mor else "moment-matching"
        shifts = sc.mor.shifts if sc.mor else (0.0,)
        curve = []
        for n in orders:
            basis = build_basis(sys, n, method, shifts=shifts, snapshots=full.states if method == "pod" else None)
            red = reduce_system(sys, basis)
            rt = simulate_linear(red, det, basis.V.T @ setup.stationary.vector, sc.tau, sc.theta, sc.K)
            curve.append((int(n), reduction_error(full.states, rt.states, basis, sys.mass)))
    return curve


def prepare_linear(sc: Scenario) -> Setup:
    """Linear model only (no measurements, no basis); enough for sweeps and simulations."""
    with _stage("stationary"):
        stat = stationary_solve(sc.network, sc.initial_pressures(), sc.mesh)
        lin_p = sc.linearization_pressures()
        stat_lin = stat if lin_p == sc.initial_pressures() else stationary_solve(sc.network, lin_p)
        net_lin = linearize_friction(sc.network, stat_lin)
    with _stage("discretization"):
        sys = assemble_output(net_lin, assemble_linear(net_lin, sc.mesh), sc.measured)
    ou = OUParams.from_signals(sc.signals, sys.boundary)
    x0 = np.concatenate([stat.vector, np.zeros(len(sys.boundary))])
    return Setup(stat, stat_lin, net_lin, sys, np.zeros(sys.N), ou, np.zeros((sc.K, 0)), x0,
                 np.zeros(sys.R_out))


def _metadata(sc: Scenario, setup: Setup, wall: float) -> dict:
    return {
        "version": __version__,
        "N": int(setup.sys.N),
        "n": int(setup.basis.n) if setup.basis is not None else None,
        "boundary": list(setup.sys.boundary),
        "realizations": sc.realizations,
        "ensemble_size": sc.ensemble_size,
        "seed": sc.seed,
        "norm": sc.norm,
        "measurement_std": [float(s) for s in setup.std],
        "threads": int(os.environ.get("GRIDKAL_THREADS", "0") or 0) or os.cpu_count(),
        "platform": platform.platform(),
        "wall_s": wall,
    }


TIMING_FIELDS = ("offline_s", "online_s", "postproc_s", "wall_s", "platform")


def emit_report(rep: Report, out, trajectories: Mapping[str, np.ndarray] | None = None,
                tau: float | None = None) -> list[Path]:
    """Write ``report.json``, ``errors.csv``, ``mor_curve.csv`` and optional trajectory CSVs."""
    out = Path(out)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        p = out / "report.json"
        p.write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
        written.append(p)
        p = out / "errors.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["filter", "error", "offline_s", "online_s", "postproc_s"])
            for r in rep.rows:
                w.writerow([r.filter, repr(r.error), repr(r.offline_s), repr(r.online_s), repr(r.postproc_s)])
        written.append(p)
        p = out / "mor_curve.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "error"])
            for n, e in rep.mor_curve:
                w.writerow([n, repr(float(e))])
        written.append(p)
        if trajectories:
            tdir = out / "trajectories"
            tdir.mkdir(exist_ok=True)
            for name, X in trajectories.items():
                p = tdir / f"{name}.csv"
                write_trajectory_csv(p, X, tau or 1.0, start=1)
                written.append(p)
    except OSError as exc:
        raise BenchError(f"cannot write {exc.filename or out}: {exc.strerror}", "report") from None
    return written


def write_trajectory_csv(path, X: np.ndarray, tau: float, start: int = 0, with_k: bool = True) -> None:
    """Rows ``k,t,dof_0..`` for ``k = start, start+1, ...``; ``with_k=False`` drops ``k``."""
    X = np.atleast_2d(X)
    k = np.arange(start, start + X.shape[0])
    cols = [f"dof_{i}" for i in range(X.shape[1])]
    if with_k:
        data, header, fmt = np.column_stack([k, k * tau, X]), ["k", "t"] + cols, ["%d", "%.12g"]
    else:
        data, header, fmt = np.column_stack([k * tau, X]), ["t"] + cols, ["%.12g"]
    np.savetxt(path, data, delimiter=",", header=",".join(header), comments="",
               fmt=fmt + ["%.17g"] * X.shape[1])


def load_report(path) -> Report:
    return Report.from_dict(json.loads(Path(path).read_text()))
