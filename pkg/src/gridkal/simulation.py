"""Time integration of the nonlinear and linear network models.

Both integrators use the θ-scheme on ``E x' = A x + B u (- F(x))`` with the
boundary forcing ``θ u_D(t_{k+1}) + (1-θ) u_D(t_k) + u_S(t_k)``: the
deterministic part is θ-averaged, the stochastic part enters explicitly.
"""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import (
    DescriptorSystem,
    MeshSpec,
    NonlinearFriction,
    StationaryState,
    assemble_skeleton,
    output_matrix,
)
from .network import PipeNetwork

log = logging.getLogger(__name__)

MEASUREMENT_STD_FLOOR = 1e-12


class SimulationError(RuntimeError):
    pass


def stream_rng(seed: int, *key: str | int) -> np.random.Generator:
    """Independent generator for a named stream under a master seed."""
    words = [k if isinstance(k, int) else zlib.crc32(k.encode("utf-8")) for k in key]
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(words)))


@dataclass(frozen=True)
class Segment:
    kind: str  # constant | linear | sin | cos
    t0: float
    t1: float
    value: float = 0.0
    v0: float = 0.0
    v1: float = 0.0
    A: float = 0.0
    B: float = 0.0
    omega: float = 0.0

    def __call__(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.full_like(t, self.value)
        if self.kind == "linear":
            return self.v0 + (self.v1 - self.v0) * (t - self.t0) / (self.t1 - self.t0)
        if self.kind == "sin":
            return self.A + self.B * np.sin(self.omega * t)
        if self.kind == "cos":
            return self.A + self.B * np.cos(self.omega * t)
        raise ValueError(f"unknown segment kind {self.kind!r}")

    def to_dict(self) -> dict:
        base = {"kind": self.kind, "t0": self.t0, "t1": self.t1}
        if self.kind == "constant":
            base["value"] = self.value
        elif self.kind == "linear":
            base.update(v0=self.v0, v1=self.v1)
        else:
            base.update(A=self.A, B=self.B, omega=self.omega)
        return base


@dataclass(frozen=True)
class BoundarySignal:
    """Boundary pressure ``u_D(t) + u_S(t)`` with an OU stochastic part."""

    node: str
    segments: tuple[Segment, ...]
    kappa: float = 0.0
    mu: float = 0.0
    sigma: float = 0.0

    def check(self, T: float) -> None:
        segs = self.segments
        if not segs:
            raise SimulationError(f"signal {self.node}: no segments")
        if segs[0].t0 > 0:
            raise SimulationError(f"signal {self.node}: segments start after t=0")
        for s in segs:
            if not s.t1 > s.t0:
                raise SimulationError(f"signal {self.node}: breakpoints not increasing")
        for s, nxt in zip(segs, segs[1:]):
            if not nxt.t0 == s.t1:
                raise SimulationError(f"signal {self.node}: gap or overlap at t={s.t1}")
        if segs[-1].t1 < T:
            raise SimulationError(f"signal {self.node}: segments end before T={T}")
        if self.kappa < 0 or self.sigma < 0:
            raise SimulationError(f"signal {self.node}: kappa and sigma must be >= 0")

    def deterministic(self, t) -> np.ndarray:
        """Evaluate u_D; segment k covers [t0, t1), the last one is closed."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        starts = np.array([s.t0 for s in self.segments])
        which = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(self.segments) - 1)
        out = np.empty_like(t)
        for k, seg in enumerate(self.segments):
            mask = which == k
            if mask.any():
                out[mask] = seg(t[mask])
        return out

    @classmethod
    def constant(cls, node: str, value: float, T: float, **ou) -> "BoundarySignal":
        return cls(node, (Segment("constant", 0.0, T, value=value),), **ou)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (K+1, N)
    noise: np.ndarray  # (K+1, |V_B|) realized u_S paths, boundary order
    boundary: tuple[str, ...]
    model: str  # nonlinear | linear

    @property
    def K(self) -> int:
        return len(self.times) - 1


@dataclass
class MeasurementSeries:
    y: np.ndarray  # (K, R_out), y[k-1] belongs to t_k
    R: np.ndarray  # (R_out, R_out) diagonal
    seed: int
    nodes: tuple[str, ...] = ()
    degenerate: list[str] = field(default_factory=list)


def simulate_ou(kappa: float, mu: float, sigma: float, u0: float, tau: float, K: int,
                seed: int, stream: str = "ou") -> np.ndarray:
    """Drift-implicit Euler-Maruyama path of an OU process, length ``K+1``."""
    rng = stream_rng(seed, "ou", stream)
    dW = rng.standard_normal(K) * math.sqrt(tau)
    out = np.empty(K + 1)
    out[0] = u0
    decay = 1.0 / (1.0 + tau * kappa)
    shift = tau * kappa * mu
    for k in range(K):
        out[k + 1] = decay * (out[k] + shift + sigma * dW[k])
    return out


def _order_signals(signals: Sequence[BoundarySignal], boundary: Sequence[str]) -> list[BoundarySignal]:
    by_node = {s.node: s for s in signals}
    if len(by_node) != len(signals):
        raise SimulationError("more than one signal for a boundary node")
    missing = [v for v in boundary if v not in by_node]
    if missing:
        raise SimulationError(f"no signal for boundary nodes {missing}")
    extra = sorted(set(by_node) - set(boundary))
    if extra:
        raise SimulationError(f"signals for non-boundary nodes {extra}")
    return [by_node[v] for v in boundary]


def boundary_inputs(signals: Sequence[BoundarySignal], boundary: Sequence[str], tau: float,
                    K: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic values ``u_D(t_k)`` and OU paths ``u_S(t_k)``, each ``(K+1, |V_B|)``."""
    ordered = _order_signals(signals, boundary)
    times = tau * np.arange(K + 1)
    uD = np.column_stack([s.deterministic(times) for s in ordered]) if ordered else np.zeros((K + 1, 0))
    uS = np.zeros_like(uD)
    for j, s in enumerate(ordered):
        if s.sigma > 0 or s.mu != 0:
            uS[:, j] = simulate_ou(s.kappa, s.mu, s.sigma, 0.0, tau, K, seed, stream=s.node)
    return uD, uS


def theta_inputs(uD: np.ndarray, uS: np.ndarray, theta: float) -> np.ndarray:
    """Per-step forcing ``θ u_D(t_{k+1}) + (1-θ) u_D(t_k) + u_S(t_k)``, shape ``(K, |V_B|)``."""
    return theta * uD[1:] + (1.0 - theta) * uD[:-1] + uS[:-1]


def _check_theta(theta: float) -> None:
    if not 0.5 <= theta <= 1.0:
        raise SimulationError(f"theta must lie in [0.5, 1], got {theta}")


def simulate_linear(sys: DescriptorSystem, signals: Sequence[BoundarySignal], x0: np.ndarray,
                    tau: float, theta: float, K: int, seed: int = 0,
                    noise: np.ndarray | None = None) -> Trajectory:
    """θ-scheme for the linear descriptor system.

    ``x0`` is the initial state (the stationary vector for the full model,
    its projection for a reduced one). ``noise`` overrides the OU paths.
    """
    _check_theta(theta)
    uD, uS = boundary_inputs(signals, sys.boundary, tau, K, seed)
    if noise is not None:
        uS = noise
    u = theta_inputs(uD, uS, theta)
    if sys.is_reduced:
        At = sys.E - tau * theta * sys.A
        rhs_mat = sys.E + tau * (1 - theta) * sys.A
        Bt = tau * np.asarray(sys.B)
        try:
            lu = _dense_lu(At)
        except np.linalg.LinAlgError as exc:
            raise SimulationError("singular A_tau") from exc
        solve = lambda r: lu(r)  # noqa: E731
    else:
        At = (sys.E - tau * theta * sys.A).tocsc()
        rhs_mat = (sys.E + tau * (1 - theta) * sys.A).tocsr()
        Bt = (tau * sys.B).tocsr()
        try:
            fact = spla.splu(At)
        except RuntimeError as exc:
            raise SimulationError("singular A_tau") from exc
        solve = fact.solve
    X = np.empty((K + 1, sys.N))
    X[0] = x0
    for k in range(K):
        X[k + 1] = solve(rhs_mat @ X[k] + Bt @ u[k])
    return Trajectory(tau * np.arange(K + 1), X, uS, tuple(sys.boundary), "linear")


def _dense_lu(M: np.ndarray):
    import scipy.linalg as sla

    lu, piv = sla.lu_factor(M, check_finite=True)
    if np.min(np.abs(np.diag(lu))) <= 1e-14 * max(np.max(np.abs(np.diag(lu))), 1e-300):
        raise np.linalg.LinAlgError("singular matrix")
    return lambda r: sla.lu_solve((lu, piv), r)


def simulate_nonlinear(net: PipeNetwork, mesh: MeshSpec, signals: Sequence[BoundarySignal],
                       stat: StationaryState, tau: float, theta: float, K: int, seed: int = 0,
                       tol: float = 1e-10, max_iter: int = 30,
                       noise: np.ndarray | None = None) -> Trajectory:
    """θ-scheme for the nonlinear model with implicit friction (Newton per step)."""
    _check_theta(theta)
    sys = assemble_skeleton(net, mesh)
    friction = NonlinearFriction(net, sys)
    uD, uS = boundary_inputs(signals, sys.boundary, tau, K, seed)
    if noise is not None:
        uS = noise
    u = theta_inputs(uD, uS, theta)
    x0 = stat.vector
    if x0 is None or len(x0) != sys.N:
        raise SimulationError("stationary state lacks a dof vector for this mesh")
    E = sys.E.tocsr()
    A = sys.A.tocsr()
    explicit_op = (E + tau * (1 - theta) * A).tocsr()
    implicit_op = (E - tau * theta * A).tocsr()
    Bt = (tau * sys.B).tocsr()
    p_idx = sys.pressure
    linear_lu = None if friction.active else spla.splu(implicit_op.tocsc())
    X = np.empty((K + 1, sys.N))
    X[0] = x0
    F_old = friction.load(x0)
    for k in range(K):
        xk = X[k]
        rhs = explicit_op @ xk + Bt @ u[k] - tau * (1 - theta) * F_old
        if linear_lu is not None:
            x = linear_lu.solve(rhs)
        else:
            x = xk.copy()
            scale = 1.0 + float(np.max(np.abs(xk)))
            for _ in range(max_iter):
                F = friction.load(x)
                r = implicit_op @ x + tau * theta * F - rhs
                J = (implicit_op + tau * theta * friction.jacobian(x)).tocsc()
                dx = spla.spsolve(J, r)
                x = x - dx
                if np.max(np.abs(dx)) <= tol * scale:
                    break
            else:
                raise SimulationError(f"Newton did not converge at step {k + 1}")
        if np.any(x[p_idx] <= 0):
            raise SimulationError(f"non-positive pressure at step {k + 1}")
        X[k + 1] = x
        F_old = friction.load(x)
    return Trajectory(tau * np.arange(K + 1), X, uS, tuple(sys.boundary), "nonlinear")


def synthesize_measurements(truth: Trajectory, net: PipeNetwork, mesh: MeshSpec,
                            measured: Sequence[str], noise_percent: float, seed: int,
                            std: np.ndarray | None = None) -> MeasurementSeries:
    """Noisy boundary-flux outputs of a truth trajectory for steps ``k = 1..K``.

    Each channel's noise std is ``noise_percent`` times its largest clean
    magnitude; a channel that is identically zero gets a tiny floor instead.
    A given ``std`` replaces that rule, e.g. to share one ``R`` across
    Monte-Carlo realizations.
    """
    sys = assemble_skeleton(net, mesh)
    C = output_matrix(net, sys, measured)
    clean = (C @ truth.states[1:].T).T
    R_out = C.shape[0]
    if std is not None:
        std = np.array(std, dtype=float)
        if std.shape != (R_out,) or np.any(std < 0):
            raise SimulationError(f"std must be {R_out} non-negative values")
    elif R_out:
        std = noise_percent * np.max(np.abs(clean), axis=0)
    else:
        std = np.zeros(0)
    degenerate = []
    for c in range(R_out):
        if std[c] <= 0:
            degenerate.append(measured[c])
            if noise_percent > 0:
                log.warning("channel %s has zero output; using std floor %g",
                            measured[c], MEASUREMENT_STD_FLOOR)
                std[c] = MEASUREMENT_STD_FLOOR
    rng = stream_rng(seed, "measurement")
    v = rng.standard_normal(clean.shape) * std
    return MeasurementSeries(clean + v, np.diag(std ** 2), seed, tuple(measured), degenerate)


def kirchhoff_residual(sys: DescriptorSystem, x: np.ndarray) -> float:
    """Largest flux imbalance over interior nodes."""
    if len(sys.multiplier) == 0:
        return 0.0
    A = sp.csr_matrix(sys.A)
    return float(np.max(np.abs(A[sys.multiplier] @ x)))
