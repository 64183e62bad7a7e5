"""Mixed finite-element descriptor systems for pipe networks.

Per pipe, pressure is piecewise constant and flux is continuous piecewise
linear; interior-node pressures are Lagrange multipliers that enforce flux
balance. The state is ordered ``[pressure | flux | multipliers]`` and the
linear model reads ``E x' = A x + B u``, ``y = C x``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .network import PipeNetwork, incidence_maps, set_linear_friction

_GAUSS = (0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0))


class DiscretizationError(ValueError):
    pass


class StationaryError(RuntimeError):
    pass


@dataclass(frozen=True)
class MeshSpec:
    """Either a fixed element count per pipe or a maximal element length."""

    elements_per_pipe: int | None = None
    max_element_length: float | None = None

    def __post_init__(self):
        if (self.elements_per_pipe is None) == (self.max_element_length is None):
            raise DiscretizationError("give exactly one of elements_per_pipe, max_element_length")

    def elements(self, length: float) -> int:
        if self.elements_per_pipe is not None:
            return int(self.elements_per_pipe)
        if not self.max_element_length > 0:
            return 0
        return int(math.ceil(length / self.max_element_length - 1e-12))

    @classmethod
    def from_dict(cls, data: Mapping) -> "MeshSpec":
        return cls(data.get("elements_per_pipe"), data.get("max_element_length"))

    def to_dict(self) -> dict:
        if self.elements_per_pipe is not None:
            return {"elements_per_pipe": self.elements_per_pipe}
        return {"max_element_length": self.max_element_length}


@dataclass
class DescriptorSystem:
    """``E x' = A x + B u``, ``y = C x`` with block index bookkeeping.

    Full-order systems hold scipy sparse matrices and the mesh layout;
    reduced systems (see :mod:`gridkal.mor`) hold small dense arrays and
    leave the mesh fields empty.
    """

    E: sp.spmatrix | np.ndarray
    A: sp.spmatrix | np.ndarray
    B: sp.spmatrix | np.ndarray
    C: sp.spmatrix | np.ndarray
    pressure: np.ndarray
    flux: np.ndarray
    multiplier: np.ndarray
    boundary: tuple[str, ...]
    interior: tuple[str, ...]
    mass: sp.spmatrix | np.ndarray
    measured: tuple[str, ...] = ()
    edges: tuple[str, ...] = ()
    elements: dict[str, int] = field(default_factory=dict)
    element_length: dict[str, float] = field(default_factory=dict)
    p_offset: dict[str, int] = field(default_factory=dict)
    q_offset: dict[str, int] = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.E.shape[0]

    @property
    def R_out(self) -> int:
        return self.C.shape[0]

    @property
    def is_reduced(self) -> bool:
        return not sp.issparse(self.E)

    def flux_dofs(self, edge_id: str) -> np.ndarray:
        start = self.q_offset[edge_id]
        return np.arange(start, start + self.elements[edge_id] + 1)

    def pressure_dofs(self, edge_id: str) -> np.ndarray:
        start = self.p_offset[edge_id]
        return np.arange(start, start + self.elements[edge_id])


def _dense(M) -> np.ndarray:
    return M.toarray() if sp.issparse(M) else np.asarray(M)


def max_symmetric_eigenvalue(A) -> float:
    """Largest eigenvalue of (A + A^T)/2, computed per decoupled block."""
    S = sp.csr_matrix((A + A.T) * 0.5) if sp.issparse(A) else sp.csr_matrix((A + A.T) * 0.5)
    S.eliminate_zeros()
    if S.nnz == 0:
        return 0.0
    ncomp, labels = connected_components(S, directed=False)
    best = -np.inf
    for c in range(ncomp):
        idx = np.flatnonzero(labels == c)
        block = S[idx][:, idx].toarray()
        best = max(best, float(np.linalg.eigvalsh(block)[-1]))
    return best


def is_dissipative(A, rtol: float = 1e-10) -> bool:
    scale = sp.linalg.norm(A, np.inf) if sp.issparse(A) else np.linalg.norm(A, np.inf)
    return max_symmetric_eigenvalue(A) <= rtol * max(scale, 1.0)


def _assemble(net: PipeNetwork, mesh: MeshSpec, damping: Mapping[str, float]) -> DescriptorSystem:
    edges = net.edges
    boundary = tuple(net.boundary_nodes)
    interior = tuple(net.interior_nodes)
    b_index = {v: i for i, v in enumerate(boundary)}
    elements = {}
    for e in edges:
        m = mesh.elements(e.length)
        if m < 1:
            raise DiscretizationError(f"edge {e.id}: mesh yields {m} elements")
        elements[e.id] = m
    n_p = sum(elements.values())
    n_q = sum(m + 1 for m in elements.values())
    n_l = len(interior)
    N = n_p + n_q + n_l
    l_index = {v: n_p + n_q + i for i, v in enumerate(interior)}

    Er, Ec, Ev = [], [], []
    Ar, Ac, Av = [], [], []
    Mr, Mc, Mv = [], [], []
    Br, Bc, Bv = [], [], []
    p_offset, q_offset, hs = {}, {}, {}
    p0, q0 = 0, n_p
    local_mass = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    for e in edges:
        m = elements[e.id]
        h = e.length / m
        p_offset[e.id], q_offset[e.id], hs[e.id] = p0, q0, h
        pi = p0 + np.arange(m)
        ql = q0 + np.arange(m)
        qr = ql + 1
        # pressure mass and divergence rows
        Er += list(pi); Ec += list(pi); Ev += [e.a * h] * m
        Mr += list(pi); Mc += list(pi); Mv += [h] * m
        Ar += list(pi) + list(pi); Ac += list(ql) + list(qr); Av += [1.0] * m + [-1.0] * m
        # weak gradient rows (negative transpose of the divergence)
        Ar += list(ql) + list(qr); Ac += list(pi) + list(pi); Av += [-1.0] * m + [1.0] * m
        for r in range(2):
            for c in range(2):
                rows = ql if r == 0 else qr
                cols = ql if c == 0 else qr
                Er += list(rows); Ec += list(cols); Ev += [e.b * h * local_mass[r, c]] * m
                Mr += list(rows); Mc += list(cols); Mv += [h * local_mass[r, c]] * m
                dl = damping.get(e.id, 0.0)
                if dl:
                    Ar += list(rows); Ac += list(cols); Av += [-dl * h * local_mass[r, c]] * m
        # node coupling: +p(0) at the first flux dof, -p(l) at the last
        for node, qdof, sign in ((e.source, q0, 1.0), (e.target, q0 + m, -1.0)):
            if node in l_index:
                lam = l_index[node]
                Ar += [qdof, lam]; Ac += [lam, qdof]; Av += [sign, -sign]
            else:
                Br.append(qdof); Bc.append(b_index[node]); Bv.append(sign)
        p0 += m
        q0 += m + 1

    shape = (N, N)
    E = sp.csr_matrix((Ev, (Er, Ec)), shape=shape)
    A = sp.csr_matrix((Av, (Ar, Ac)), shape=shape)
    M = sp.csr_matrix((Mv, (Mr, Mc)), shape=shape)
    B = sp.csr_matrix((Bv, (Br, Bc)), shape=(N, len(boundary)))
    for mat in (E, A, M, B):
        mat.sum_duplicates()
        mat.sort_indices()
    return DescriptorSystem(
        E=E, A=A, B=B, C=sp.csr_matrix((0, N)),
        pressure=np.arange(n_p), flux=np.arange(n_p, n_p + n_q),
        multiplier=np.arange(n_p + n_q, N),
        boundary=boundary, interior=interior, mass=M,
        edges=tuple(e.id for e in edges), elements=elements, element_length=hs,
        p_offset=p_offset, q_offset=q_offset,
    )


def assemble_linear(net: PipeNetwork, mesh: MeshSpec) -> DescriptorSystem:
    """Assemble the linear-friction descriptor system. Every edge needs ``d_lin``."""
    missing = [e.id for e in net.edges if e.d_lin is None]
    if missing:
        raise DiscretizationError(f"missing d_lin on edges {missing}")
    return _assemble(net, mesh, {e.id: e.d_lin for e in net.edges})


def assemble_skeleton(net: PipeNetwork, mesh: MeshSpec) -> DescriptorSystem:
    """Frictionless operator; the nonlinear simulator adds friction on top."""
    return _assemble(net, mesh, {})


def output_matrix(net: PipeNetwork, sys: DescriptorSystem, measured: Sequence[str]) -> sp.csr_matrix:
    """Rows give the net mass inflow from each measured boundary node into the network."""
    kinds = {n.id: n.kind for n in net.nodes}
    for v in measured:
        if v not in kinds:
            raise DiscretizationError(f"measured node {v} is unknown")
        if v not in sys.boundary:
            raise DiscretizationError(f"measured node {v} is not a boundary node")
    Bt = sp.csr_matrix(sys.B).T.tocsr()
    rows = [sys.boundary.index(v) for v in measured]
    if not rows:
        return sp.csr_matrix((0, sys.N))
    return Bt[rows].tocsr()


def assemble_output(net: PipeNetwork, sys: DescriptorSystem, measured: Sequence[str]) -> DescriptorSystem:
    sys.C = output_matrix(net, sys, measured)
    sys.measured = tuple(measured)
    return sys


class NonlinearFriction:
    """Flux-row friction load ``∫ d |q| q / p ψ_j`` with two-point Gauss quadrature."""

    def __init__(self, net: PipeNetwork, sys: DescriptorSystem, eps_scale: float = 1e-12):
        p_idx, ql, qr, h, d = [], [], [], [], []
        for e in net.edges:
            m = sys.elements[e.id]
            p_idx.append(sys.p_offset[e.id] + np.arange(m))
            left = sys.q_offset[e.id] + np.arange(m)
            ql.append(left)
            qr.append(left + 1)
            h.append(np.full(m, sys.element_length[e.id]))
            d.append(np.full(m, e.d))
        self.p = np.concatenate(p_idx)
        self.ql = np.concatenate(ql)
        self.qr = np.concatenate(qr)
        self.h = np.concatenate(h)
        self.d = np.concatenate(d)
        self.N = sys.N
        self.eps_scale = eps_scale
        self.active = bool(np.any(self.d > 0))

    def load(self, x: np.ndarray) -> np.ndarray:
        F = np.zeros(self.N)
        if not self.active:
            return F
        p = x[self.p]
        for xi in _GAUSS:
            q = (1 - xi) * x[self.ql] + xi * x[self.qr]
            g = 0.5 * self.h * self.d * np.abs(q) * q / p
            np.add.at(F, self.ql, (1 - xi) * g)
            np.add.at(F, self.qr, xi * g)
        return F

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        if not self.active:
            return sp.csr_matrix((self.N, self.N))
        p = x[self.p]
        qscale = max(float(np.max(np.abs(x[self.ql]), initial=0.0)), 1.0)
        eps = self.eps_scale * qscale
        rows, cols, vals = [], [], []
        for xi in _GAUSS:
            q = (1 - xi) * x[self.ql] + xi * x[self.qr]
            w = 0.5 * self.h * self.d
            dg_dq = w * 2.0 * np.sqrt(q * q + eps * eps) / p
            dg_dp = -w * np.abs(q) * q / (p * p)
            for phi, row in ((1 - xi, self.ql), (xi, self.qr)):
                rows += [row, row, row]
                cols += [self.ql, self.qr, self.p]
                vals += [phi * dg_dq * (1 - xi), phi * dg_dq * xi, phi * dg_dp]
        J = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.N, self.N),
        )
        J.sum_duplicates()
        return J


@dataclass
class StationaryState:
    """Steady nonlinear flow: nodal pressures, per-edge flux and profile averages."""

    pressures: dict[str, float]
    flux: dict[str, float]
    p_av: dict[str, float]
    q_av: dict[str, float]
    p_dev: dict[str, float]
    vector: np.ndarray | None = None

    def profile(self, net: PipeNetwork, edge_id: str, x: np.ndarray) -> np.ndarray:
        e = net.edge(edge_id)
        q = self.flux[edge_id]
        ps = self.pressures[e.source]
        return np.sqrt(ps * ps - 2.0 * e.d * q * abs(q) * np.asarray(x))


def _edge_flux(dpi: np.ndarray, cond: np.ndarray) -> np.ndarray:
    return cond * np.sign(dpi) * np.sqrt(np.abs(dpi))


def stationary_solve(
    net: PipeNetwork,
    boundary_pressures: Mapping[str, float],
    mesh: MeshSpec | None = None,
    tol: float = 1e-10,
    max_iter: int = 50,
) -> StationaryState:
    """Solve the steady nonlinear network problem.

    Per pipe the steady equations integrate to ``p_s^2 - p_t^2 = 2 d l q|q|``,
    so only the squared interior pressures are unknown. They minimise a
    strictly convex potential whose gradient is the Kirchhoff residual; a
    damped Newton iteration drives that residual below ``tol``. With a mesh,
    element-midpoint averages use its elements (otherwise 1000 points) and
    the discrete steady state vector is attached.
    """
    boundary = net.boundary_nodes
    interior = net.interior_nodes
    for v in boundary:
        if v not in boundary_pressures:
            raise StationaryError(f"missing boundary pressure for {v}")
        if not boundary_pressures[v] > 0:
            raise StationaryError(f"boundary pressure at {v} must be positive")
    pb = np.array([boundary_pressures[v] for v in boundary], dtype=float)
    idx = {v: i for i, v in enumerate(interior)}
    nI = len(interior)
    src = [e.source for e in net.edges]
    dst = [e.target for e in net.edges]
    pi = {v: boundary_pressures[v] ** 2 for v in boundary}

    if np.all(pb == pb[0]):
        for v in interior:
            pi[v] = pb[0] ** 2
        flux = {e.id: 0.0 for e in net.edges}
    else:
        if any(e.d <= 0 for e in net.edges):
            raise StationaryError("zero-friction edge: steady flux undetermined")
        cond = np.array([1.0 / math.sqrt(2.0 * e.d * e.length) for e in net.edges])
        # signed incidence restricted to interior nodes (+1 at source)
        Ni = np.zeros((nI, len(net.edges)))
        fixed = np.zeros(len(net.edges))
        for k, (s, t) in enumerate(zip(src, dst)):
            if s in idx:
                Ni[idx[s], k] += 1.0
            else:
                fixed[k] += pi[s]
            if t in idx:
                Ni[idx[t], k] -= 1.0
            else:
                fixed[k] -= pi[t]

        def deltas(z):
            return Ni.T @ z + fixed

        def potential(z):
            dz = deltas(z)
            return float(np.sum(2.0 / 3.0 * cond * np.abs(dz) ** 1.5))

        # initial guess: unit-conductance harmonic interpolation of squared pressures
        if nI:
            L = Ni @ Ni.T
            z = np.linalg.solve(L, -Ni @ fixed)
        else:
            z = np.zeros(0)
        scale = float(np.max(pb) ** 2)
        qscale = float(np.max(cond) * math.sqrt(scale))
        converged = nI == 0
        for _ in range(max_iter):
            if nI == 0:
                break
            dz = deltas(z)
            q = _edge_flux(dz, cond)
            r = Ni @ q
            if np.max(np.abs(r)) <= tol:
                converged = True
                break
            w = cond / (2.0 * np.sqrt(np.maximum(np.abs(dz), 1e-14 * scale)))
            H = (Ni * w) @ Ni.T
            step = np.linalg.solve(H, -r)
            f0 = potential(z)
            slope = float(r @ step)
            # near the solution the predicted decrease drops below the rounding level of the
            # potential, which can then no longer rank steps; take the full Newton step
            resolved = -slope > 64 * np.finfo(float).eps * max(abs(f0), 1e-300)
            t = 1.0
            while t > 1e-12:
                trial = z + t * step
                if np.all(trial > 0) and (not resolved or potential(trial) <= f0 + 1e-4 * t * slope):
                    break
                t *= 0.5
            z = z + t * step
        if not converged:
            dz = deltas(z)
            r = Ni @ _edge_flux(dz, cond)
            if np.max(np.abs(r)) > max(tol, 1e-12 * qscale):
                raise StationaryError(f"Newton did not converge in {max_iter} iterations "
                                      f"(residual {np.max(np.abs(r)):.3e})")
        for v, i in idx.items():
            if not z[i] > 0:
                raise StationaryError(f"non-positive pressure at node {v}")
            pi[v] = z[i]
        dz = np.array([pi[s] - pi[t] for s, t in zip(src, dst)])
        qs = _edge_flux(dz, cond)
        flux = {e.id: float(q) for e, q in zip(net.edges, qs)}

    pressures = {v: math.sqrt(pi[v]) for v in net.node_ids}
    p_av, q_av, p_dev = {}, {}, {}
    for e in net.edges:
        m = mesh.elements(e.length) if mesh is not None else 1000
        mids = (np.arange(m) + 0.5) * e.length / m
        q = flux[e.id]
        prof2 = pressures[e.source] ** 2 - 2.0 * e.d * q * abs(q) * mids
        if np.any(prof2 <= 0):
            raise StationaryError(f"non-positive pressure along pipe {e.id}")
        prof = np.sqrt(prof2)
        p_av[e.id] = float(prof.mean())
        q_av[e.id] = q
        p_dev[e.id] = float(np.max(np.abs(prof - prof.mean())))
    state = StationaryState(pressures, flux, p_av, q_av, p_dev)
    if mesh is not None:
        state.vector = discrete_stationary_vector(net, mesh, state, tol=tol)
    return state


def sample_stationary(net: PipeNetwork, sys: DescriptorSystem, stat: StationaryState) -> np.ndarray:
    """Closed-form steady profiles sampled onto the dof layout of ``sys``."""
    x = np.zeros(sys.N)
    for e in net.edges:
        m = sys.elements[e.id]
        mids = (np.arange(m) + 0.5) * sys.element_length[e.id]
        x[sys.pressure_dofs(e.id)] = stat.profile(net, e.id, mids)
        x[sys.flux_dofs(e.id)] = stat.flux[e.id]
    for i, v in enumerate(sys.interior):
        x[sys.multiplier[i]] = stat.pressures[v]
    return x


def discrete_stationary_vector(
    net: PipeNetwork, mesh: MeshSpec, stat: StationaryState, tol: float = 1e-10, max_iter: int = 50
) -> np.ndarray:
    """Fixed point of the discrete nonlinear model, seeded by the closed-form profile."""
    sys = assemble_skeleton(net, mesh)
    friction = NonlinearFriction(net, sys)
    u = np.array([stat.pressures[v] for v in sys.boundary])
    bu = sys.B @ u
    x = sample_stationary(net, sys, stat)
    scale = max(float(np.max(np.abs(x))), 1.0)
    for _ in range(max_iter):
        r = sys.A @ x + bu - friction.load(x)
        if np.max(np.abs(r)) <= tol * scale:
            return x
        J = (sys.A - friction.jacobian(x)).tocsc()
        x = x - sp.linalg.spsolve(J, r)
    r = sys.A @ x + bu - friction.load(x)
    if np.max(np.abs(r)) > tol * scale:
        raise StationaryError("discrete steady state did not converge")
    return x


def linearize_friction(net: PipeNetwork, stat: StationaryState) -> PipeNetwork:
    """Fill ``d_lin = d |q_av| / p_av`` on every edge."""
    values = {}
    for e in net.edges:
        p_av = stat.p_av[e.id]
        if not p_av > 0:
            raise StationaryError(f"edge {e.id}: average pressure {p_av} is not positive")
        values[e.id] = e.d * abs(stat.q_av[e.id]) / p_av
    return set_linear_friction(net, values)


def noise_amplitude(net: PipeNetwork, sys: DescriptorSystem, stat: StationaryState) -> np.ndarray:
    """Diagonal of the system-noise amplitude Z.

    Pressure dofs of a pipe get the maximal deviation of the steady pressure
    profile from its pipe average; steady flux is constant along a pipe, so
    its deviation and hence its amplitude is zero. Multipliers stay zero.
    """
    z = np.zeros(sys.N)
    for e in net.edges:
        z[sys.pressure_dofs(e.id)] = stat.p_dev[e.id]
        z[sys.flux_dofs(e.id)] = 0.0
    return z
