"""Error metrics and the residual-based a posteriori estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla

from .fem import FineOperators
from .grid import coarse_neighborhood


class ZeroReferenceError(ValueError):
    """The reference solution has zero norm, so relative errors are undefined."""


def _norm(Op, v) -> float:
    return math.sqrt(max(float(v @ (Op @ v)), 0.0))


def error_norms(u_fine: np.ndarray, u_ms_fine: np.ndarray, A, M) -> tuple[float, float]:
    """Relative L2 and energy errors of ``u_ms_fine`` against ``u_fine``."""
    e = np.asarray(u_fine) - np.asarray(u_ms_fine)
    ref_l2, ref_a = _norm(M, u_fine), _norm(A, u_fine)
    if ref_l2 == 0 or ref_a == 0:
        raise ZeroReferenceError("reference solution is zero; relative error undefined")
    return _norm(M, e) / ref_l2, _norm(A, e) / ref_a


def _fine_states(traj, P=None) -> np.ndarray:
    states = traj.states if hasattr(traj, "states") else np.asarray(traj)
    if P is not None and states.shape[1] == P.shape[1] != P.shape[0]:
        return np.asarray(P @ states.T).T
    return states


def space_time_error(traj_fine, traj_ms, P, A, M, dt: float) -> float:
    """``||e(T)||_M^2 + dt * sum_{n=1..N} ||e(t_n)||_A^2``."""
    uf = _fine_states(traj_fine)
    um = _fine_states(traj_ms, P)
    if uf.shape != um.shape:
        raise ValueError(f"trajectory shapes differ: {uf.shape} vs {um.shape}")
    e = uf - um
    energy = sum(_norm(A, e[n]) ** 2 for n in range(1, e.shape[0]))
    return _norm(M, e[-1]) ** 2 + dt * energy


def residual_vectors(ops: FineOperators, states: np.ndarray, loads: np.ndarray,
                     dt: float) -> np.ndarray:
    """Global residual functionals ``b^{n+1} - M (u^{n+1} - u^n)/dt - A u^{n+1}``, one row per slab."""
    u = np.asarray(states)
    du = (u[1:] - u[:-1]) / dt
    r = loads[1:] - np.asarray(ops.M @ du.T).T - np.asarray(ops.A @ u[1:].T).T
    return r


def local_residual_norms(ops: FineOperators, states: np.ndarray, loads: np.ndarray,
                         dt: float) -> np.ndarray:
    """Squared ``Q*`` residual norms, shape ``(n_steps, n_vertices)``.

    For each coarse neighborhood the Riesz representer ``phi`` of the residual on
    ``V_0(omega_i)`` is computed once per slab; ``||R||^2 = dt * a(phi, phi)``.
    One factorization per neighborhood serves every slab.
    """
    r = residual_vectors(ops, states, loads, dt)
    g = ops.grid
    out = np.zeros((r.shape[0], g.n_vertices))
    for v in range(g.n_vertices):
        idx = coarse_neighborhood(g, v).interior
        if idx.size == 0:
            continue
        lu = spla.splu(ops.A[idx][:, idx].tocsc())
        rv = np.ascontiguousarray(r[:, idx].T)
        phi = lu.solve(rv)
        out[:, v] = dt * np.einsum("ij,ij->j", rv, phi)
    return np.maximum(out, 0.0)


def local_residual_norm(n: int, vertex: int, ops: FineOperators, states: np.ndarray,
                        loads: np.ndarray, dt: float) -> float:
    """``||R_i^n||_{Q*}`` for the slab ``(t_n, t_{n+1})`` and one neighborhood."""
    if not 0 <= n < len(states) - 1:
        raise IndexError(f"slab {n} needs state {n + 1}")
    idx = coarse_neighborhood(ops.grid, vertex).interior
    u0, u1 = states[n], states[n + 1]
    r = loads[n + 1] - ops.M @ ((u1 - u0) / dt) - ops.A @ u1
    rv = r[idx]
    phi = spla.splu(ops.A[idx][:, idx].tocsc()).solve(rv)
    return math.sqrt(max(dt * float(rv @ phi), 0.0))


@dataclass
class ErrorReport:
    eps_L: float
    eps_R: float
    bound: float
    Lambda: float
    M_overlap: int
    residual_sq: np.ndarray = field(repr=False)
    e0_sq: float = 0.0
    eps: float | None = None
    eps_a: float | None = None

    @property
    def ratio(self) -> float:
        return self.eps_R / self.eps_L if self.eps_L > 0 else math.inf

    @property
    def reliable(self) -> bool:
        return self.eps_L <= self.bound

    def summary(self) -> dict:
        d = {
            "eps": self.eps, "eps_a": self.eps_a, "eps_L": self.eps_L, "eps_R": self.eps_R,
            "ratio": self.ratio, "bound": self.bound, "reliable": self.reliable,
            "Lambda": self.Lambda, "M_overlap": self.M_overlap, "e0_sq": self.e0_sq,
            "residual_sum": float(self.residual_sq.sum()),
        }
        return {k: v for k, v in d.items() if v is not None}

    def to_text(self) -> str:
        def fmt(v):
            if isinstance(v, bool):
                return str(v).lower()
            if isinstance(v, int):
                return str(v)
            return f"{v:.10e}"
        return "".join(f"{k} = {fmt(v)}\n" for k, v in self.summary().items())

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    def write_residual_csv(self, path) -> None:
        lines = ["step,vertex,residual_sq"]
        for n, row in enumerate(self.residual_sq):
            lines += [f"{n},{i},{v:.10e}" for i, v in enumerate(row)]
        Path(path).write_text("\n".join(lines) + "\n")


def posterior_report(residual_sq: np.ndarray, e0_sq: float, Lambda: float, M_overlap: int,
                     eps_L: float, eps: float | None = None,
                     eps_a: float | None = None) -> ErrorReport:
    """Estimator total and the reliability bound ``2M(1 + 1/Lambda) sum R^2 + ||e(0)||^2``."""
    rs = np.asarray(residual_sq, dtype=float)
    total = float(rs.sum())
    eps_R = total + e0_sq
    bound = 2.0 * M_overlap * (1.0 + 1.0 / Lambda) * total + e0_sq
    return ErrorReport(eps_L, eps_R, bound, Lambda, M_overlap, rs, e0_sq, eps, eps_a)
