"""Backward and forward Euler for reduced and fine systems."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .basis import MultiscaleSpace
from .fem import FineOperators, assemble_load
from .grid import Grid


class StabilityError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"solution became non-finite at step {step}")
        self.step = step


@dataclass
class Trajectory:
    dt: float
    states: np.ndarray  # (n_steps + 1, dim)
    space: str
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def __getitem__(self, n: int) -> np.ndarray:
        return self.states[n]


class _Solver:
    """Factor once, solve many. Dense SPD matrices use Cholesky, sparse use SuperLU."""

    def __init__(self, K):
        if sp.issparse(K):
            self._lu = spla.splu(sp.csc_matrix(K))
            self.solve = self._lu.solve
        else:
            self._cho = la.cho_factor(np.asarray(K))
            self.solve = lambda b: la.cho_solve(self._cho, b)


def _load_fn(loads, dim: int) -> Callable[[int], np.ndarray]:
    if loads is None:
        zero = np.zeros(dim)
        return lambda n: zero
    if callable(loads):
        return loads
    arr = np.asarray(loads, dtype=float)
    return lambda n: arr[n]


def _m_norm(M, v) -> float:
    return float(np.sqrt(max(v @ (M @ v), 0.0)))


def backward_euler(A_r, M_r, loads, u_init, dt: float, n_steps: int) -> Trajectory:
    """Solve ``(M/dt + A) U^n = (M/dt) U^{n-1} + b^n`` with ``b^n`` the load at ``t_n``.

    ``meta`` records ``||U^n||_M`` and the stability bound
    ``||U^0|| + dt sum_{j<=n} ||f^j||`` where ``||f^j||`` is the L2 norm of the
    load's Riesz representer in the trial space (``sqrt(b^T M^{-1} b)``).
    """
    if dt <= 0:
        raise ValueError(f"time step must be positive, got {dt}")
    u = np.asarray(u_init, dtype=float).copy()
    dim = u.shape[0]
    load = _load_fn(loads, dim)
    K = M_r / dt + A_r
    step = _Solver(K)
    mass = _Solver(M_r)
    states = np.empty((n_steps + 1, dim))
    states[0] = u
    norms = np.empty(n_steps + 1)
    bound = np.empty(n_steps + 1)
    norms[0] = bound[0] = _m_norm(M_r, u)
    for n in range(1, n_steps + 1):
        b = np.asarray(load(n), dtype=float)
        u = step.solve(M_r @ u / dt + b)
        if not np.all(np.isfinite(u)):
            raise DivergenceError(n)
        states[n] = u
        norms[n] = _m_norm(M_r, u)
        fnorm = np.sqrt(max(b @ mass.solve(b), 0.0)) if np.any(b) else 0.0
        bound[n] = bound[n - 1] + dt * fnorm
    tol = 1e-10 * np.maximum(bound, 1e-300)
    meta = {
        "scheme": "backward",
        "norms": norms,
        "stability_bound": bound,
        "stable": bool(np.all(norms <= bound + tol)),
    }
    return Trajectory(dt, states, "", meta)


def lambda_max(A_r, M_r, tol: float = 1e-6, max_iter: int = 100000, seed: int = 0) -> float:
    """Largest generalized eigenvalue of ``(A_r, M_r)`` by power iteration on ``M^{-1} A``."""
    mass = _Solver(M_r)
    x = np.random.default_rng(seed).standard_normal(M_r.shape[0])
    lam = 0.0
    for _ in range(max_iter):
        y = mass.solve(A_r @ x)
        ny = _m_norm(M_r, y)
        if ny == 0:
            return 0.0
        x = y / ny
        new = float(x @ (A_r @ x))
        if abs(new - lam) <= tol * abs(new):
            return new
        lam = new
    return lam


def forward_euler(A_r, M_r, loads, u_init, dt: float, n_steps: int,
                  enforce_stability: bool = True) -> Trajectory:
    """Solve ``M U^{n+1} = (M - dt A) U^n + dt b^n`` with ``b^n`` the load at ``t_n``."""
    if dt <= 0:
        raise ValueError(f"time step must be positive, got {dt}")
    lam = lambda_max(A_r, M_r)
    margin = 2.0 - dt * lam
    if enforce_stability and margin < 0:
        raise StabilityError(
            f"dt * lambda_max = {dt * lam:.6g} > 2 (lambda_max = {lam:.6g}); "
            f"largest stable dt is {2.0 / lam:.6g}")
    u = np.asarray(u_init, dtype=float).copy()
    dim = u.shape[0]
    load = _load_fn(loads, dim)
    mass = _Solver(M_r)
    states = np.empty((n_steps + 1, dim))
    states[0] = u
    for n in range(n_steps):
        with np.errstate(over="ignore", invalid="ignore"):
            rhs = M_r @ u - dt * (A_r @ u) + dt * np.asarray(load(n), dtype=float)
        if not np.all(np.isfinite(rhs)):
            raise DivergenceError(n + 1)
        u = mass.solve(rhs)
        if not np.all(np.isfinite(u)):
            raise DivergenceError(n + 1)
        states[n + 1] = u
    meta = {"scheme": "forward", "lambda_max": lam, "stability_margin": margin}
    return Trajectory(dt, states, "", meta)


def march(A_r, M_r, loads, u_init, dt, n_steps, scheme: str = "backward", **kw) -> Trajectory:
    if scheme == "backward":
        return backward_euler(A_r, M_r, loads, u_init, dt, n_steps)
    if scheme == "forward":
        return forward_euler(A_r, M_r, loads, u_init, dt, n_steps, **kw)
    raise ValueError(f"unknown scheme {scheme!r}")


# fine and reduced drivers ------------------------------------------------

def load_series(grid: Grid, f: Callable | None, dt: float, n_steps: int) -> np.ndarray:
    """Fine load vectors at ``t_0 .. t_N`` as an ``(N + 1, n_nodes)`` array."""
    out = np.zeros((n_steps + 1, grid.n_nodes))
    if f is not None:
        for n in range(n_steps + 1):
            out[n] = assemble_load(grid, f, n * dt)
    return out


def interpolate(grid: Grid, u0) -> np.ndarray:
    """Nodal values of ``u0(x, y)`` (or pass-through for a vector), zero on the boundary."""
    if callable(u0):
        x, y = grid.node_coords()
        v = np.broadcast_to(np.asarray(u0(x, y), dtype=float), x.shape).copy()
    else:
        v = np.asarray(u0, dtype=float).copy()
    v[grid.boundary_nodes()] = 0.0
    return v


def fine_reference(ops: FineOperators, loads: np.ndarray, u0, dt: float, n_steps: int,
                   scheme: str = "backward", **kw) -> Trajectory:
    """Dirichlet-eliminated fine solve; states are full fine-node vectors."""
    idx = ops.interior
    A = ops.A[idx][:, idx].tocsc()
    M = ops.M[idx][:, idx].tocsc()
    u = interpolate(ops.grid, u0)
    tr = march(A, M, lambda n: loads[n][idx], u[idx], dt, n_steps, scheme, **kw)
    full = np.zeros((tr.states.shape[0], ops.grid.n_nodes))
    full[:, idx] = tr.states
    return Trajectory(dt, full, "fine", tr.meta)


def project_initial(space: MultiscaleSpace, M_fine, u0: np.ndarray) -> np.ndarray:
    """Reduced coefficients of the L2 projection of ``u0`` onto the multiscale space."""
    rhs = space.P.T @ (M_fine @ np.asarray(u0, dtype=float))
    return la.cho_solve(la.cho_factor(space.M_ms), rhs)


def multiscale_solve(space: MultiscaleSpace, ops: FineOperators, loads: np.ndarray, u0,
                     dt: float, n_steps: int, scheme: str = "backward", **kw) -> Trajectory:
    """Reduced solve; states are reduced coefficient vectors."""
    c0 = project_initial(space, ops.M, interpolate(ops.grid, u0))
    red = np.asarray(space.P.T @ loads.T).T
    tr = march(space.A_ms, space.M_ms, red, c0, dt, n_steps, scheme, **kw)
    tr.space = "ms"
    return tr


def write_snapshot(path, grid: Grid, values: np.ndarray, t: float) -> None:
    """Header ``nfx nfy t`` then nodal values row-major, bottom row first."""
    v = np.asarray(values).reshape(grid.nfy + 1, grid.nfx + 1)
    lines = [f"{grid.nfx} {grid.nfy} {t:.17g}"]
    lines += [" ".join(f"{x:.12e}" for x in row) for row in v]
    Path(path).write_text("\n".join(lines) + "\n")


def read_snapshot(path) -> tuple[int, int, float, np.ndarray]:
    tokens = Path(path).read_text().split()
    nfx, nfy, t = int(tokens[0]), int(tokens[1]), float(tokens[2])
    vals = np.array(tokens[3:], dtype=float).reshape(nfy + 1, nfx + 1)
    return nfx, nfy, t, vals
