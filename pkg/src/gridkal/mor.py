"""Structure-preserving projection bases and reduced descriptor systems."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import DescriptorSystem, is_dissipative

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-10


class ReductionError(RuntimeError):
    pass


@dataclass
class ProjectionBasis:
    """Orthonormal ``V`` (N x n) that never mixes pressure and flux rows.

    Columns are ordered ``[pressure | flux | multipliers]``. Only the
    identity basis carries multiplier columns; constructed bases span
    junction-balanced fluxes and need none.
    """

    V: np.ndarray
    n_pressure: int
    n_flux: int
    n_multiplier: int
    method: str
    diagnostics: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.V.shape[1]

    @property
    def N(self) -> int:
        return self.V.shape[0]

    def orthonormality_defect(self) -> float:
        return float(np.max(np.abs(self.V.T @ self.V - np.eye(self.n)), initial=0.0))


@dataclass
class AugmentedBasis:
    Vx: np.ndarray
    n_boundary: int

    @property
    def n(self) -> int:
        return self.Vx.shape[1]


def _orthonormalize_into(Q: list[np.ndarray], v: np.ndarray, drop_tol: float) -> bool:
    """Modified Gram-Schmidt with one reorthogonalization pass; False if ``v`` is dependent."""
    norm0 = np.linalg.norm(v)
    if norm0 == 0:
        return False
    w = v / norm0
    for _ in range(2):
        for q in Q:
            w = w - (q @ w) * q
    norm = np.linalg.norm(w)
    if norm <= drop_tol:
        return False
    Q.append(w / norm)
    return True


def identity_basis(sys: DescriptorSystem) -> ProjectionBasis:
    """``V = I`` in the natural dof order; reduction becomes a no-op."""
    N = sys.N
    return ProjectionBasis(np.eye(N), len(sys.pressure), len(sys.flux), len(sys.multiplier), "identity")


def _assemble_basis(sys: DescriptorSystem, p_cols: list[np.ndarray], q_cols: list[np.ndarray],
                    method: str, diagnostics: list[str]) -> ProjectionBasis:
    npc, nqc = len(p_cols), len(q_cols)
    V = np.zeros((sys.N, npc + nqc))
    for j, col in enumerate(p_cols):
        V[sys.pressure, j] = col
    for j, col in enumerate(q_cols):
        V[sys.flux, npc + j] = col
    return ProjectionBasis(V, npc, nqc, 0, method, diagnostics)


def _block(M, rows, cols):
    return sp.csr_matrix(M)[rows][:, cols]


def krylov_candidates(sys: DescriptorSystem, shifts: Sequence[float], max_blocks: int):
    """Ordered candidate columns ``(kind, vector)`` for the split moment-matching basis.

    For every shift ``s`` the block-Krylov sequence of ``(sE - A)^{-1} E`` on
    ``(sE - A)^{-1} B`` is split into pressure and flux parts. Each flux part
    is preceded by its discrete divergence, a pressure vector, so truncation
    never breaks the compatibility ``div V_q ⊆ V_p``. Flux parts satisfy the
    junction balance exactly, hence so does every reduced flux.
    """
    pr, fl = sys.pressure, sys.flux
    E = sp.csc_matrix(sys.E)
    A = sp.csc_matrix(sys.A)
    Epp_inv = 1.0 / _block(sys.E, pr, pr).diagonal()
    Apq = _block(sys.A, pr, fl)
    B = sp.csr_matrix(sys.B).toarray()
    factors = []
    for s in shifts:
        try:
            lu = spla.splu((s * E - A).tocsc())
        except RuntimeError as exc:
            raise ReductionError(f"singular shifted pencil at s={s}") from exc
        W = lu.solve(B)
        if not np.all(np.isfinite(W)):
            raise ReductionError(f"singular shifted pencil at s={s}")
        factors.append((lu, W))
    out = []
    # block Arnoldi in the full state space keeps later moments numerically independent
    arnoldi: list[np.ndarray] = []
    for _ in range(max_blocks):
        for i, (lu, W) in enumerate(factors):
            fresh = []
            for j in range(W.shape[1]):
                if _orthonormalize_into(arnoldi, W[:, j], 1e-13):
                    fresh.append(arnoldi[-1])
            out += [("p", w[pr]) for w in fresh]
            out += [("p", Epp_inv * (Apq @ w[fl])) for w in fresh]
            out += [("q", w[fl]) for w in fresh]
            if not fresh:
                continue
            factors[i] = (lu, lu.solve(E @ np.column_stack(fresh)))
    return out


def build_basis(sys: DescriptorSystem, order: int | None = None, method: str = "moment-matching",
                snapshots: np.ndarray | None = None, tol: float | None = None,
                shifts: Sequence[float] = (0.0,), drop_tol: float = 1e-10) -> ProjectionBasis:
    """Construct a projection basis with ``order`` columns.

    ``moment-matching`` matches moments of ``(sE - A)^{-1}B`` at ``shifts``;
    ``pod`` uses per-block left singular vectors of ``snapshots`` (rows are
    states), truncated at ``order`` or at relative energy ``tol``. Junction
    multipliers get no columns: every basis flux already balances at the
    junctions, so the constraints hold identically in the reduced model.
    ``order == N`` returns the identity basis.
    """
    N = sys.N
    diagnostics: list[str] = []
    if method == "identity" or order == N:
        return identity_basis(sys)
    if order is None and tol is None:
        raise ReductionError("give an order or a tolerance")
    if order is not None and not 0 < order < N:
        raise ReductionError(f"order must lie in [1, {N}], got {order}")
    target = order

    if method == "moment-matching":
        if target is None:
            raise ReductionError("moment-matching needs an explicit order")
        p_cols: list[np.ndarray] = []
        q_cols: list[np.ndarray] = []
        block_size = max(1, sys.B.shape[1]) * len(shifts)
        max_blocks = int(np.ceil(target / block_size)) + 2
        while True:
            p_cols.clear()
            q_cols.clear()
            for kind, v in krylov_candidates(sys, shifts, max_blocks):
                if len(p_cols) + len(q_cols) >= target:
                    break
                _orthonormalize_into(p_cols if kind == "p" else q_cols, v, drop_tol)
            if len(p_cols) + len(q_cols) >= target or max_blocks > 4 * target:
                break
            max_blocks *= 2
        achieved = len(p_cols) + len(q_cols)
        if achieved < target:
            msg = f"numerical rank exhausted: achieved order {achieved} < requested {order}"
            log.warning(msg)
            diagnostics.append(msg)
        return _assemble_basis(sys, p_cols, q_cols, method, diagnostics)

    if method == "pod":
        if snapshots is None:
            raise ReductionError("pod requires snapshots")
        S = np.asarray(snapshots)
        Up, sp_ = np.linalg.svd(S[:, sys.pressure].T, full_matrices=False)[:2]
        Uq, sq = np.linalg.svd(S[:, sys.flux].T, full_matrices=False)[:2]
        if target is not None:
            # interleave by singular value so both blocks get their share
            vals = sorted([(s, "p", i) for i, s in enumerate(sp_)] + [(s, "q", i) for i, s in enumerate(sq)],
                          key=lambda t: -t[0])
            chosen = [t for t in vals if t[0] > drop_tol * max(vals[0][0], 1e-300)][:target]
        else:
            chosen = []
            for s_vals, kind in ((sp_, "p"), (sq, "q")):
                energy = np.cumsum(s_vals ** 2) / max(np.sum(s_vals ** 2), 1e-300)
                keep = int(np.searchsorted(energy, 1.0 - tol) + 1)
                chosen += [(s_vals[i], kind, i) for i in range(min(keep, len(s_vals)))]
        p_cols, q_cols = [], []
        for _, kind, i in sorted(chosen, key=lambda t: (t[1], t[2])):
            if kind == "p":
                _orthonormalize_into(p_cols, Up[:, i], drop_tol)
            else:
                _orthonormalize_into(q_cols, Uq[:, i], drop_tol)
        achieved = len(p_cols) + len(q_cols)
        if target is not None and achieved < target:
            msg = f"numerical rank exhausted: achieved order {achieved} < requested {order}"
            log.warning(msg)
            diagnostics.append(msg)
        return _assemble_basis(sys, p_cols, q_cols, method, diagnostics)

    raise ReductionError(f"unknown method {method!r}")


def reduce_system(sys: DescriptorSystem, basis: ProjectionBasis) -> DescriptorSystem:
    """Galerkin projection ``V^T E V, V^T A V, V^T B, C V``."""
    V = basis.V
    if V.shape[0] != sys.N:
        raise ReductionError(f"basis has {V.shape[0]} rows, system has {sys.N} states")

    def proj(M):
        MV = M @ V
        return V.T @ np.asarray(MV)

    Er, Ar = proj(sys.E), proj(sys.A)
    Br = V.T @ (sys.B.toarray() if sp.issparse(sys.B) else sys.B)
    Cr = np.asarray(sys.C @ V) if sys.C.shape[0] else np.zeros((0, basis.n))
    mass = proj(sys.mass)
    npr, nq = basis.n_pressure, basis.n_flux
    red = DescriptorSystem(
        E=Er, A=Ar, B=Br, C=Cr,
        pressure=np.arange(npr), flux=np.arange(npr, npr + nq),
        multiplier=np.arange(npr + nq, basis.n),
        boundary=sys.boundary, interior=sys.interior, mass=mass, measured=sys.measured,
    )
    if not is_dissipative(Ar):
        raise ReductionError("reduced system lost dissipativity")
    return red


def augment_basis(basis: ProjectionBasis | np.ndarray, n_boundary: int) -> AugmentedBasis:
    """``V_x = diag(V, I)`` acting on the state extended by the OU inputs."""
    V = basis.V if isinstance(basis, ProjectionBasis) else np.asarray(basis)
    N, n = V.shape
    Vx = np.zeros((N + n_boundary, n + n_boundary))
    Vx[:N, :n] = V
    Vx[N:, n:] = np.eye(n_boundary)
    return AugmentedBasis(Vx, n_boundary)


def l2_norms(mass, X: np.ndarray) -> np.ndarray:
    """Row-wise discrete L2 norms ``sqrt(x^T M x)``."""
    MX = (mass @ X.T).T
    return np.sqrt(np.maximum(np.einsum("ij,ij->i", X, MX), 0.0))


def reduction_error(full_states: np.ndarray, reduced_states: np.ndarray, basis: ProjectionBasis,
                    mass) -> float:
    """``max_k ||x_k - V x̂_k|| / ||x_k||`` in the mass-weighted L2 norm.

    Both trajectories come from the same deterministic scenario. A zero
    reference trajectory returns 0 with a logged diagnostic.
    """
    if full_states.shape[0] != reduced_states.shape[0]:
        raise ReductionError("trajectories differ in length")
    if reduced_states.shape[1] != basis.n or full_states.shape[1] != basis.N:
        raise ReductionError("trajectory dimensions do not match the basis")
    diff = full_states - reduced_states @ basis.V.T
    num = l2_norms(mass, diff)
    den = l2_norms(mass, full_states)
    ok = den > 0
    if not np.any(ok):
        log.warning("reference trajectory is identically zero; reduction error set to 0")
        return 0.0
    if np.any(num[~ok] > 0):
        return float("inf")
    return float(np.max(num[ok] / den[ok]))


def system_hash(sys: DescriptorSystem) -> str:
    h = hashlib.sha256()
    for M in (sys.E, sys.A, sys.B):
        Mc = sp.csr_matrix(M)
        for arr in (Mc.indptr, Mc.indices, Mc.data):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_basis(basis: ProjectionBasis, path: str | Path, source_hash: str = "") -> None:
    """Write ``<path>.npy`` with V and ``<path>.json`` with its metadata."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), basis.V)
    meta = {"N": basis.N, "n": basis.n, "method": basis.method, "n_pressure": basis.n_pressure,
            "n_flux": basis.n_flux, "n_multiplier": basis.n_multiplier, "source_hash": source_hash}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_basis(path: str | Path) -> tuple[ProjectionBasis, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    V = np.load(path.with_suffix(".npy"))
    if V.shape != (meta["N"], meta["n"]):
        raise ReductionError("basis file does not match its sidecar")
    return ProjectionBasis(V, meta["n_pressure"], meta["n_flux"], meta["n_multiplier"], meta["method"]), meta
