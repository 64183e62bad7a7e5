"""Time-discrete filter model and the KF, RKF, CSKF, EnKF and REnKF estimators.

The filter state is the network state extended by the OU parts of the
boundary pressures, ``[x; u_S]``. One θ-step and one drift-implicit OU step
give the linear recursion ``x_{k+1} = Φ x_k + Ψ u_k + w_k`` with
``u_k = (θ u_D(t_{k+1}) + (1-θ) u_D(t_k), 1)`` and measurements
``y_k = H x_k + v_k``.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from ._sparse import SparseLU
from .discretization import DescriptorSystem
from .mor import AugmentedBasis, ProjectionBasis, augment_basis, reduce_system
from .simulation import stream_rng


class FilterError(RuntimeError):
    pass


@dataclass(frozen=True)
class OUParams:
    """Per-boundary OU parameters in boundary order."""

    kappa: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_signals(cls, signals, boundary: Sequence[str]) -> "OUParams":
        by_node = {s.node: s for s in signals}
        get = lambda attr: np.array([getattr(by_node[v], attr) for v in boundary], dtype=float)  # noqa: E731
        return cls(get("kappa"), get("mu"), get("sigma"))


def _sym(P: np.ndarray) -> np.ndarray:
    P += P.T
    P *= 0.5
    return P


@dataclass
class DiscreteFilterModel:
    """``x_{k+1} = Φ x_k + Ψ u_k + w_k``, ``w ~ N(0, Q)``; ``y_k = H x_k + v_k``, ``v ~ N(0, R)``.

    A dense model stores ``Φ`` explicitly. A sparse model keeps it factored:
    the top rows are ``[A_τ^{-1}(E + τ(1-θ)A), τ A_τ^{-1} B]`` and the OU rows
    are the diagonal ``(I + τ𝔎)^{-1}``. ``Q`` is a vector when diagonal.
    """

    Psi: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray
    n_state: int
    n_boundary: int
    tau: float = 0.0
    theta: float = 0.0
    tag: str = "full"
    Phi: np.ndarray | None = None
    _lu: SparseLU | None = field(default=None, repr=False)
    _rhs: sp.csr_matrix | None = field(default=None, repr=False)
    _TB: np.ndarray | None = field(default=None, repr=False)
    _decay: np.ndarray | None = field(default=None, repr=False)
    _fingerprint: str = field(default="", repr=False)
    _noise_factor: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.n_state + self.n_boundary

    @property
    def is_sparse(self) -> bool:
        return self.Phi is None

    @property
    def Q_matrix(self) -> np.ndarray:
        return np.diag(self.Q) if self.Q.ndim == 1 else self.Q

    @classmethod
    def from_matrices(cls, Phi, Psi, Q, H, R, tag: str = "synthetic") -> "DiscreteFilterModel":
        """Dense model from explicit matrices; the OU block is treated as part of the state."""
        Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
        dim = Phi.shape[0]
        Q = np.asarray(Q, dtype=float)
        Psi = np.asarray(Psi, dtype=float).reshape(dim, -1)
        H = np.asarray(H, dtype=float).reshape(-1, dim)
        R = np.atleast_2d(np.asarray(R, dtype=float))
        model = cls(Psi, Q.reshape(dim) if Q.ndim <= 1 else Q, H, R, dim, 0, tag=tag, Phi=Phi)
        model._fingerprint = _hash_arrays(Phi, Psi, model.Q, H, R)
        return model

    def apply_phi(self, X: np.ndarray) -> np.ndarray:
        """``Φ X`` for a vector or a column block."""
        if not self.is_sparse:
            return self.Phi @ X
        N = self.n_state
        top = self._lu.solve(self._rhs @ X[:N]) + self._TB @ X[N:]
        bottom = self._decay[:, None] * X[N:] if X.ndim == 2 else self._decay * X[N:]
        return np.concatenate([top, bottom], axis=0)

    def transition(self) -> np.ndarray:
        """Dense ``Φ`` (for inspection and small systems)."""
        if not self.is_sparse:
            return self.Phi
        return self.apply_phi(np.eye(self.dim))

    def predict_mean(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.apply_phi(x) + self.Psi @ u

    def propagate_cov(self, P: np.ndarray) -> np.ndarray:
        """``Φ P Φ^T + Q`` for symmetric ``P``, symmetrized."""
        W = self.apply_phi(P)
        out = self.apply_phi(np.ascontiguousarray(W.T))
        if self.Q.ndim == 1:
            out[np.diag_indices_from(out)] += self.Q
        else:
            out += self.Q
        return _sym(out)

    def noise_factor(self) -> np.ndarray:
        """``L`` with ``L L^T = Q``; a vector of standard deviations when ``Q`` is diagonal."""
        if self._noise_factor is None:
            self._noise_factor = _psd_factor(self.Q)
        return self._noise_factor

    def fingerprint(self) -> str:
        return self._fingerprint


def _psd_factor(M: np.ndarray) -> np.ndarray:
    if M.ndim == 1:
        return np.sqrt(np.maximum(M, 0.0))
    w, U = np.linalg.eigh(0.5 * (M + M.T))
    return U * np.sqrt(np.maximum(w, 0.0))


def _sample(factor: np.ndarray, rng: np.random.Generator, m: int) -> np.ndarray:
    z = rng.standard_normal((factor.shape[0] if factor.ndim == 1 else factor.shape[1], m))
    return factor[:, None] * z if factor.ndim == 1 else factor @ z


def _hash_arrays(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        if a is None:
            h.update(b"none")
            continue
        if sp.issparse(a):
            a = sp.csr_matrix(a)
            for part in (a.indptr, a.indices, a.data):
                h.update(np.ascontiguousarray(part).tobytes())
        else:
            a = np.ascontiguousarray(np.asarray(a, dtype=float))
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
    return h.hexdigest()


def _check_ou(ou: OUParams, nb: int, tau: float) -> np.ndarray:
    if not (len(ou.kappa) == len(ou.mu) == len(ou.sigma) == nb):
        raise FilterError(f"OU parameters for {len(ou.kappa)} nodes, system has {nb} boundary nodes")
    return 1.0 / (1.0 + tau * ou.kappa)


def _ou_psi(ou: OUParams, decay: np.ndarray, tau: float) -> np.ndarray:
    return tau * decay * ou.kappa * ou.mu


def _measurement_map(sys: DescriptorSystem, nb: int) -> np.ndarray:
    C = sys.C.toarray() if sp.issparse(sys.C) else np.asarray(sys.C, dtype=float)
    return np.hstack([C.reshape(-1, sys.N), np.zeros((C.shape[0] if C.size else sys.R_out, nb))])


def _check_R(R, n_out: int) -> np.ndarray:
    R = np.atleast_2d(np.asarray(R, dtype=float)) if n_out else np.zeros((0, 0))
    if R.shape != (n_out, n_out):
        raise FilterError(f"R has shape {R.shape}, expected {(n_out, n_out)}")
    if n_out:
        if not np.allclose(R, R.T):
            raise FilterError("R is not symmetric")
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            raise FilterError("R is not positive definite") from None
    return R


def build_filter_model(sys: DescriptorSystem, ou: OUParams, tau: float, theta: float,
                       Z: np.ndarray, R) -> DiscreteFilterModel:
    """Assemble ``Φ, Ψ, H, Q`` of the time-discrete stochastic model.

    ``Z`` is the diagonal of the system-noise amplitude; it must vanish on
    multiplier rows because the algebraic constraints are not perturbed.
    Sparse systems give a factored model, reduced ones a dense model.
    """
    N, nb = sys.N, len(sys.boundary)
    Z = np.asarray(Z, dtype=float)
    if Z.shape != (N,):
        raise FilterError(f"Z has shape {Z.shape}, expected ({N},)")
    if np.any(Z[sys.multiplier] != 0):
        raise FilterError("Z must vanish on multiplier rows")
    decay = _check_ou(ou, nb, tau)
    H = _measurement_map(sys, nb)
    R = _check_R(R, H.shape[0])
    Qd = tau * np.concatenate([Z ** 2, ou.sigma ** 2])

    if sys.is_reduced:
        E, A, B = (np.asarray(M, dtype=float) for M in (sys.E, sys.A, sys.B))
        At = E - tau * theta * A
        try:
            lu = sla.lu_factor(At, check_finite=True)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise FilterError("singular A_tau") from exc
        if np.min(np.abs(np.diag(lu[0]))) <= 1e-14 * np.max(np.abs(np.diag(lu[0]))):
            raise FilterError("singular A_tau")
        TB = tau * sla.lu_solve(lu, B.reshape(N, nb))
        Phi = np.zeros((N + nb, N + nb))
        Phi[:N, :N] = sla.lu_solve(lu, E + tau * (1 - theta) * A)
        Phi[:N, N:] = TB
        Phi[N:, N:] = np.diag(decay)
        Psi = np.zeros((N + nb, nb + 1))
        Psi[:N, :nb] = TB
        Psi[N:, nb] = _ou_psi(ou, decay, tau)
        model = DiscreteFilterModel(Psi, Qd, H, R, N, nb, tau, theta, "reduced", Phi=Phi)
        model._fingerprint = _hash_arrays(Phi, Psi, Qd, H, R)
        return model

    E, A = sp.csr_matrix(sys.E), sp.csr_matrix(sys.A)
    At = (E - tau * theta * A).tocsc()
    try:
        lu = SparseLU(At)
    except RuntimeError as exc:
        raise FilterError("singular A_tau") from exc
    Bd = sp.csr_matrix(sys.B).toarray()
    TB = tau * lu.solve(Bd) if nb else np.zeros((N, 0))
    if not np.all(np.isfinite(TB)):
        raise FilterError("singular A_tau")
    Psi = np.zeros((N + nb, nb + 1))
    Psi[:N, :nb] = TB
    Psi[N:, nb] = _ou_psi(ou, decay, tau)
    rhs = (E + tau * (1 - theta) * A).tocsr()
    model = DiscreteFilterModel(Psi, Qd, H, R, N, nb, tau, theta, "full",
                                _lu=lu, _rhs=rhs, _TB=TB, _decay=decay)
    model._fingerprint = _hash_arrays(At, rhs, Psi, Qd, H, R)
    return model


def build_reduced_filter_model(sys: DescriptorSystem, basis: ProjectionBasis, ou: OUParams,
                               tau: float, theta: float, Z: np.ndarray, R) -> DiscreteFilterModel:
    """Reduce first, then discretize in time: ``Φ̂`` comes from ``Ê, Â``.

    The state noise is projected, ``Q̂ = V_x^T Q V_x``, with ``V_x = diag(V, I)``.
    """
    red = reduce_system(sys, basis)
    zeros = np.zeros(basis.n)
    model = build_filter_model(red, ou, tau, theta, zeros, R)
    Vx = augment_basis(basis, len(sys.boundary)).Vx
    Qfull = tau * np.concatenate([np.asarray(Z, dtype=float) ** 2, ou.sigma ** 2])
    Qr = Vx.T @ (Qfull[:, None] * Vx)
    model.Q = 0.5 * (Qr + Qr.T)
    model._fingerprint = _hash_arrays(model.Phi, model.Psi, model.Q, model.H, model.R)
    return model


def filter_inputs(uD: np.ndarray, theta: float) -> np.ndarray:
    """Rows ``(θ u_D(t_{k+1}) + (1-θ) u_D(t_k), 1)`` for ``k = 0..K-1``."""
    ubar = theta * uD[1:] + (1.0 - theta) * uD[:-1]
    return np.hstack([ubar, np.ones((ubar.shape[0], 1))])


@dataclass
class FilterState:
    x_pred: np.ndarray | None
    x_corr: np.ndarray
    P_pred: np.ndarray | None
    P_corr: np.ndarray
    K_gain: np.ndarray | None = None
    k: int = 0


def initial_state(x0: np.ndarray, P0: np.ndarray) -> FilterState:
    return FilterState(None, np.asarray(x0, dtype=float), None, np.asarray(P0, dtype=float), None, 0)


def kf_predict(state: FilterState, model: DiscreteFilterModel, u: np.ndarray) -> FilterState:
    if state.x_corr.shape != (model.dim,) or state.P_corr.shape != (model.dim, model.dim):
        raise FilterError(f"state has dimension {state.x_corr.shape}, model {model.dim}")
    if np.shape(u) != (model.Psi.shape[1],):
        raise FilterError(f"input has shape {np.shape(u)}, expected ({model.Psi.shape[1]},)")
    x_pred = model.predict_mean(state.x_corr, u)
    P_pred = model.propagate_cov(state.P_corr)
    return FilterState(x_pred, state.x_corr, P_pred, state.P_corr, None, state.k + 1)


def _gain(P_pred: np.ndarray, H: np.ndarray, R: np.ndarray) -> np.ndarray:
    PHt = P_pred @ H.T
    S = H @ PHt + R
    S = 0.5 * (S + S.T)
    try:
        cho = sla.cho_factor(S)
    except np.linalg.LinAlgError:
        raise FilterError("singular innovation covariance") from None
    return sla.cho_solve(cho, PHt.T).T


def _cov_correct(P_pred: np.ndarray, K: np.ndarray, H: np.ndarray) -> np.ndarray:
    return _sym(P_pred - K @ (H @ P_pred))


def kf_correct(state: FilterState, model: DiscreteFilterModel, y: np.ndarray) -> FilterState:
    if state.P_pred is None:
        raise FilterError("correct called before predict")
    H = model.H
    if H.shape[0] == 0:
        return FilterState(state.x_pred, state.x_pred, state.P_pred, state.P_pred,
                           np.zeros((model.dim, 0)), state.k)
    K = _gain(state.P_pred, H, model.R)
    x_corr = state.x_pred + K @ (np.asarray(y, dtype=float) - H @ state.x_pred)
    P_corr = _cov_correct(state.P_pred, K, H)
    return FilterState(state.x_pred, x_corr, state.P_pred, P_corr, K, state.k)


def covariance_defect(P: np.ndarray) -> float:
    """Smallest eigenvalue relative to the trace; ``>= -1e-10`` is the PSD contract."""
    tr = float(np.trace(P))
    lam = float(np.linalg.eigvalsh(0.5 * (P + P.T))[0])
    return lam / tr if tr > 0 else lam


@dataclass
class GainSequence:
    """Offline artifact: gains ``K_1..K_K`` and the diagonals of ``P_{k|k}``."""

    gains: np.ndarray  # (K, dim, R_out)
    P_diag: np.ndarray  # (K, dim)
    fingerprint: str
    seconds: float = 0.0
    covariances: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.gains).tobytes()).hexdigest()


def precompute_gains(model: DiscreteFilterModel, P0: np.ndarray, K: int,
                     keep_cov: Sequence[int] = ()) -> GainSequence:
    """Covariance and gain recursion without any data.

    Uses the exact arithmetic of :func:`kf_predict`/:func:`kf_correct`, so
    the result is bit-identical to a streaming run. ``keep_cov`` lists steps
    whose full ``P_{k|k}`` is stored.
    """
    t0 = time.perf_counter()
    P = np.array(P0, dtype=float)
    H, R = model.H, model.R
    gains = np.zeros((K, model.dim, H.shape[0]))
    diag = np.zeros((K, model.dim))
    keep = set(keep_cov)
    covs = {}
    for k in range(K):
        P_pred = model.propagate_cov(P)
        if H.shape[0]:
            Kk = _gain(P_pred, H, R)
            P = _cov_correct(P_pred, Kk, H)
            gains[k] = Kk
        else:
            P = P_pred
        diag[k] = np.diag(P)
        if k + 1 in keep:
            covs[k + 1] = P.copy()
    fp = _hash_arrays(np.frombuffer(model.fingerprint().encode(), dtype=np.uint8).astype(float),
                      np.asarray(P0), np.array([K], dtype=float))
    return GainSequence(gains, diag, fp, time.perf_counter() - t0, covs)


def save_gains(gains: GainSequence, path: str | Path) -> str:
    """Write ``<path>.npz`` and a JSON sidecar; returns the content hash."""
    path = Path(path)
    np.savez(path.with_suffix(".npz"), gains=gains.gains, P_diag=gains.P_diag)
    meta = {"fingerprint": gains.fingerprint, "gain_sha256": gains.digest,
            "steps": int(gains.gains.shape[0])}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return gains.digest


def load_gains(path: str | Path, model: DiscreteFilterModel | None = None,
               P0: np.ndarray | None = None) -> GainSequence:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    with np.load(path.with_suffix(".npz")) as data:
        gains = GainSequence(data["gains"], data["P_diag"], meta["fingerprint"])
    if gains.digest != meta["gain_sha256"]:
        raise FilterError(f"{path}: gain file does not match its hash")
    if model is not None and P0 is not None:
        expect = _hash_arrays(np.frombuffer(model.fingerprint().encode(), dtype=np.uint8).astype(float),
                              np.asarray(P0), np.array([gains.gains.shape[0]], dtype=float))
        if expect != gains.fingerprint:
            raise FilterError(f"{path}: gains belong to a different model or P0")
    return gains


@dataclass
class EstimateTrajectory:
    """Corrected estimates ``x_{k|k}`` for ``k = 1..K`` (rows)."""

    x: np.ndarray
    tag: str  # full | reduced
    gain_mode: str  # streaming | precomputed | ensemble
    timing: dict[str, float]
    covariances: dict[int, np.ndarray] = field(default_factory=dict)
    basis: np.ndarray | None = None
    name: str = ""

    @property
    def K(self) -> int:
        return self.x.shape[0]


def _timing(offline=0.0, online=0.0, postproc=0.0) -> dict[str, float]:
    return {"offline_s": float(offline), "online_s": float(online), "postproc_s": float(postproc)}


def _check_series(model: DiscreteFilterModel, inputs: np.ndarray, y: np.ndarray) -> int:
    inputs, y = np.atleast_2d(inputs), np.asarray(y)
    K = inputs.shape[0]
    if inputs.shape[1] != model.Psi.shape[1]:
        raise FilterError(f"inputs have {inputs.shape[1]} columns, model expects {model.Psi.shape[1]}")
    if y.shape[0] != K:
        raise FilterError(f"{K} inputs but {y.shape[0]} measurements")
    if model.H.shape[0] and y.shape[1] != model.H.shape[0]:
        raise FilterError(f"measurements have {y.shape[1]} channels, model has {model.H.shape[0]}")
    return K


def run_kf(model: DiscreteFilterModel, inputs: np.ndarray, y: np.ndarray, x0: np.ndarray,
           P0: np.ndarray | None = None, gains: GainSequence | None = None,
           keep_cov: Sequence[int] = ()) -> EstimateTrajectory:
    """Kalman filter; with ``gains`` only the mean recursion runs online.

    ``P0`` defaults to ``Q``. ``inputs`` has rows ``u_k`` (see
    :func:`filter_inputs`), ``y`` rows ``y_{k+1}``.
    """
    K = _check_series(model, inputs, y)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.dim,):
        raise FilterError(f"x0 has shape {x0.shape}, model dimension is {model.dim}")
    X = np.empty((K, model.dim))
    H = model.H
    if gains is not None:
        if gains.gains.shape[0] < K or gains.gains.shape[1] != model.dim:
            raise FilterError("precomputed gains do not fit the model or horizon")
        t0 = time.perf_counter()
        x = x0
        for k in range(K):
            x_pred = model.predict_mean(x, inputs[k])
            x = x_pred + gains.gains[k] @ (y[k] - H @ x_pred) if H.shape[0] else x_pred
            X[k] = x
        online = time.perf_counter() - t0
        return EstimateTrajectory(X, model.tag, "precomputed", _timing(gains.seconds, online),
                                  dict(gains.covariances))
    P0 = model.Q_matrix if P0 is None else np.asarray(P0, dtype=float)
    keep = set(keep_cov)
    covs = {}
    t0 = time.perf_counter()
    state = initial_state(x0, P0.copy())
    for k in range(K):
        state = kf_correct(kf_predict(state, model, inputs[k]), model, y[k])
        X[k] = state.x_corr
        if k + 1 in keep:
            covs[k + 1] = state.P_corr.copy()
    online = time.perf_counter() - t0
    return EstimateTrajectory(X, model.tag, "streaming", _timing(0.0, online), covs)


def run_rkf(sys: DescriptorSystem, basis: ProjectionBasis, ou: OUParams, tau: float, theta: float,
            Z: np.ndarray, R, inputs: np.ndarray, y: np.ndarray, x0: np.ndarray,
            basis_seconds: float = 0.0) -> EstimateTrajectory:
    """Reduced Kalman filter in dimension ``n + |V_B|``.

    ``x0`` is the full augmented initial state; it is projected. Gains are
    precomputed offline. The returned trajectory stays in reduced
    coordinates; see :func:`prolong_estimate`.
    """
    t0 = time.perf_counter()
    model = build_reduced_filter_model(sys, basis, ou, tau, theta, Z, R)
    Vx = augment_basis(basis, len(sys.boundary)).Vx
    gains = precompute_gains(model, model.Q, inputs.shape[0])
    offline = basis_seconds + time.perf_counter() - t0
    est = run_kf(model, inputs, y, Vx.T @ np.asarray(x0, dtype=float), gains=gains)
    est.timing["offline_s"] = offline
    est.basis = Vx
    est.tag = "reduced"
    return est


def prolong_estimate(reduced: EstimateTrajectory, Vx: np.ndarray | AugmentedBasis | None = None,
                     cov_steps: Sequence[int] = ()) -> EstimateTrajectory:
    """``x = V_x x̂`` per step; ``P = V_x P̂ V_x^T`` only at ``cov_steps``."""
    if isinstance(Vx, AugmentedBasis):
        Vx = Vx.Vx
    Vx = reduced.basis if Vx is None else np.asarray(Vx)
    if Vx is None:
        raise FilterError("no basis to prolong with")
    if Vx.shape[1] != reduced.x.shape[1]:
        raise FilterError(f"basis has {Vx.shape[1]} columns, estimate has dimension {reduced.x.shape[1]}")
    t0 = time.perf_counter()
    X = reduced.x @ Vx.T
    covs = {}
    for k in cov_steps:
        if k not in reduced.covariances:
            raise FilterError(f"no reduced covariance stored for step {k}")
        covs[k] = Vx @ reduced.covariances[k] @ Vx.T
    timing = dict(reduced.timing)
    timing["postproc_s"] = timing.get("postproc_s", 0.0) + time.perf_counter() - t0
    return EstimateTrajectory(X, "full", reduced.gain_mode, timing, covs, Vx, reduced.name)


def cskf_matrices(model: DiscreteFilterModel, VP: np.ndarray):
    """``Φ̃ = V_P^T Φ V_P``, ``H̃ = H V_P``, ``Q̃ = V_P^T Q V_P`` (reduction after discretization)."""
    VP = np.asarray(VP, dtype=float)
    if VP.shape[0] != model.dim:
        raise FilterError(f"V_P has {VP.shape[0]} rows, model dimension is {model.dim}")
    Phi_t = VP.T @ model.apply_phi(VP)
    H_t = model.H @ VP
    Q_t = VP.T @ (model.Q[:, None] * VP) if model.Q.ndim == 1 else VP.T @ model.Q @ VP
    return Phi_t, H_t, 0.5 * (Q_t + Q_t.T)


def run_cskf(model: DiscreteFilterModel, VP: np.ndarray | AugmentedBasis, inputs: np.ndarray,
             y: np.ndarray, x0: np.ndarray, P0: np.ndarray | None = None,
             basis_seconds: float = 0.0) -> EstimateTrajectory:
    """Covariance-subspace KF: low-rank covariance and gain, full-order mean.

    The reduced covariance recursion and the gains ``K = V_P K̃`` are
    computed offline; online work is the full-order mean recursion.
    """
    if isinstance(VP, AugmentedBasis):
        VP = VP.Vx
    t0 = time.perf_counter()
    Phi_t, H_t, Q_t = cskf_matrices(model, VP)
    small = DiscreteFilterModel.from_matrices(Phi_t, np.zeros((Phi_t.shape[0], model.Psi.shape[1])),
                                              Q_t, H_t, model.R, tag="cskf")
    P0_t = Q_t if P0 is None else VP.T @ np.asarray(P0) @ VP
    red_gains = precompute_gains(small, P0_t, inputs.shape[0])
    full = GainSequence(np.einsum("ij,kjr->kir", VP, red_gains.gains), red_gains.P_diag,
                        red_gains.fingerprint)
    offline = basis_seconds + time.perf_counter() - t0
    est = run_kf(model, inputs, y, x0, gains=full)
    est.timing["offline_s"] = offline
    est.tag = "full"
    return est


def run_enkf(model: DiscreteFilterModel, M: int, inputs: np.ndarray, y: np.ndarray,
             x0: np.ndarray, P0: np.ndarray | None = None, seed: int = 0,
             perturb: bool = True, keep_cov: Sequence[int] = ()) -> EstimateTrajectory:
    """Perturbed-observation ensemble Kalman filter with ``M`` members.

    The gain uses sample cross-covariances, ``K = C_xy (C_yy + R)^{-1}``,
    so no ``dim x dim`` covariance is ever formed. Random draws come from a
    stream keyed by ``(seed, step)`` with one column per member; their
    generation counts as offline time, everything else as online time.
    ``keep_cov`` steps store the sample covariance of the corrected ensemble.
    """
    if M < 2:
        raise FilterError(f"ensemble size must be at least 2, got {M}")
    K = _check_series(model, inputs, y)
    H, R = model.H, model.R
    n_out = H.shape[0]
    sampling = 0.0
    t0 = time.perf_counter()
    Lq = model.noise_factor()
    L0 = Lq if P0 is None else _psd_factor(np.asarray(P0, dtype=float))
    Lr = np.linalg.cholesky(R) if n_out else np.zeros((0, 0))
    rng = stream_rng(seed, "enkf", "init")
    ens = np.asarray(x0, dtype=float)[:, None] + _sample(L0, rng, M)
    sampling += time.perf_counter() - t0

    X = np.empty((K, model.dim))
    keep = set(keep_cov)
    covs = {}
    online = 0.0
    for k in range(K):
        t1 = time.perf_counter()
        rng = stream_rng(seed, "enkf", k + 1)
        W = _sample(Lq, rng, M)
        V = Lr @ rng.standard_normal((n_out, M)) if perturb and n_out else np.zeros((n_out, M))
        t2 = time.perf_counter()
        sampling += t2 - t1
        ens = model.apply_phi(ens) + (model.Psi @ inputs[k])[:, None] + W
        if n_out:
            Y = H @ ens
            dx = ens - ens.mean(axis=1, keepdims=True)
            dy = Y - Y.mean(axis=1, keepdims=True)
            Cxy = dx @ dy.T / (M - 1)
            Cyy = dy @ dy.T / (M - 1)
            S = 0.5 * (Cyy + Cyy.T) + R
            try:
                cho = sla.cho_factor(S)
            except np.linalg.LinAlgError:
                raise FilterError("singular C_yy + R") from None
            gain = sla.cho_solve(cho, Cxy.T).T
            ens = ens + gain @ (y[k][:, None] + V - Y)
        X[k] = ens.mean(axis=1)
        if k + 1 in keep:
            d = ens - X[k][:, None]
            covs[k + 1] = d @ d.T / (M - 1)
        online += time.perf_counter() - t2
    return EstimateTrajectory(X, model.tag, "ensemble", _timing(sampling, online), covs)
