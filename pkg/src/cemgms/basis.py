"""Constrained and relaxed multiscale basis functions on oversampling regions."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import FineOperators, cell_energies
from .grid import DofSet, Grid, oversample
from .media import PermeabilityField
from .spectral import AuxiliarySpace

FLAVORS = ("constrained", "relaxed")


class BasisError(RuntimeError):
    pass


@dataclass
class LocalSystem:
    """Oversampling-region data shared by all columns of one element."""

    element: int
    m: int
    region: DofSet
    A: sp.csr_matrix  # Dirichlet-eliminated stiffness on interior nodes
    Q: np.ndarray  # (n_interior, n_constraints) columns S_k phi_k
    constraint_ids: np.ndarray  # global aux indices of the columns of Q

    @property
    def interior(self) -> np.ndarray:
        return self.region.interior

    def column_of(self, aux_index: int) -> int:
        return int(np.searchsorted(self.constraint_ids, aux_index))


def local_system(ops: FineOperators, aux: AuxiliarySpace, element: int, m: int) -> LocalSystem:
    g = ops.grid
    region = oversample(g, element, m)
    idx = region.interior
    A = ops.A[idx][:, idx].tocsr()
    elems = g.elements_in_box(*g.oversample_box(element, m))
    elems.sort()
    blocks, ids = [], []
    for k in elems:
        d = aux.dofs[k]
        pos = np.searchsorted(idx, d.nodes)
        pos = np.minimum(pos, len(idx) - 1)
        keep = idx[pos] == d.nodes
        block = np.zeros((len(idx), aux.counts[k]))
        block[pos[keep]] = aux.q[k][keep]
        blocks.append(block)
        ids.append(aux.aux_offsets[k] + np.arange(aux.counts[k]))
    return LocalSystem(element, m, region, A, np.hstack(blocks), np.concatenate(ids))


def _kkt_solve(sys: LocalSystem, js) -> np.ndarray:
    n, nc = sys.Q.shape
    Qs = sp.csr_matrix(sys.Q)
    K = sp.bmat([[sys.A, Qs], [Qs.T, None]], format="csc")
    try:
        lu = spla.splu(K, permc_spec="MMD_ATA")
    except RuntimeError as exc:
        raise BasisError(
            f"element {sys.element}, m={sys.m}: singular constraint system ({exc})") from exc
    rhs = np.zeros((n + nc, len(js)))
    for c, j in enumerate(js):
        rhs[n + sys.column_of(j), c] = 1.0
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise BasisError(f"element {sys.element}, m={sys.m}: non-finite constrained solution")
    return x[:n]


def _relaxed_solve(sys: LocalSystem, js) -> np.ndarray:
    Qs = sp.csr_matrix(sys.Q)
    B = (sys.A + Qs @ Qs.T).tocsc()
    try:
        lu = spla.splu(B)
    except RuntimeError as exc:
        raise BasisError(f"element {sys.element}, m={sys.m}: factorization failed ({exc})") from exc
    rhs = sys.Q[:, [sys.column_of(j) for j in js]]
    return lu.solve(np.ascontiguousarray(rhs))


def element_basis(ops: FineOperators, aux: AuxiliarySpace, element: int, m: int,
                  flavor: str = "constrained") -> tuple[np.ndarray, np.ndarray]:
    """All basis functions of one element: ``(interior node ids, values (n, L_i))``."""
    if m < 1:
        raise BasisError(f"oversampling layers must be >= 1, got {m}")
    sys = local_system(ops, aux, element, m)
    js = [aux.aux_index(element, j) for j in range(aux.counts[element])]
    if flavor == "constrained":
        vals = _kkt_solve(sys, js)
    elif flavor == "relaxed":
        vals = _relaxed_solve(sys, js)
    else:
        raise BasisError(f"unknown flavor {flavor!r}; expected one of {FLAVORS}")
    return sys.interior, vals


def _extend(ops: FineOperators, nodes: np.ndarray, values: np.ndarray) -> np.ndarray:
    psi = np.zeros(ops.grid.n_nodes)
    psi[nodes] = values
    return psi


def build_constrained_basis(ops: FineOperators, aux: AuxiliarySpace, element: int,
                            j: int, m: int) -> np.ndarray:
    """Energy minimizer that is ``phi_j^(i)``-orthogonal, extended by zero."""
    if not 0 <= j < aux.counts[element]:
        raise BasisError(f"element {element} has {aux.counts[element]} auxiliary functions")
    if m < 1:
        raise BasisError(f"oversampling layers must be >= 1, got {m}")
    sys = local_system(ops, aux, element, m)
    return _extend(ops, sys.interior, _kkt_solve(sys, [aux.aux_index(element, j)])[:, 0])


def build_relaxed_basis(ops: FineOperators, aux: AuxiliarySpace, element: int,
                        j: int, m: int) -> np.ndarray:
    """Minimizer of ``a(psi, psi) + s(pi psi - phi_j, pi psi - phi_j)``, extended by zero."""
    if not 0 <= j < aux.counts[element]:
        raise BasisError(f"element {element} has {aux.counts[element]} auxiliary functions")
    if m < 1:
        raise BasisError(f"oversampling layers must be >= 1, got {m}")
    sys = local_system(ops, aux, element, m)
    return _extend(ops, sys.interior, _relaxed_solve(sys, [aux.aux_index(element, j)])[:, 0])


# global space ------------------------------------------------------------

@dataclass
class MultiscaleSpace:
    P: sp.csc_matrix  # (n_nodes, n_ms)
    columns: list[tuple[int, int]]  # (element, eigen index) per column
    flavor: str
    m: np.ndarray  # layers per column
    A_ms: np.ndarray = field(repr=False)
    M_ms: np.ndarray = field(repr=False)

    @property
    def n_ms(self) -> int:
        return self.P.shape[1]

    def prolong(self, c: np.ndarray) -> np.ndarray:
        return self.P @ c

    def restrict_vector(self, b: np.ndarray) -> np.ndarray:
        return self.P.T @ b


def assemble_ms_space(columns, flavor: str, A: sp.spmatrix, M: sp.spmatrix,
                      m=None) -> MultiscaleSpace:
    """Stack ``(element, j, psi)`` columns (fine vectors or sparse) and form ``A_ms``, ``M_ms``."""
    cols = sorted(columns, key=lambda c: (c[0], c[1]))
    if not cols:
        raise BasisError("no basis columns")
    P = sp.hstack([sp.csc_matrix(np.asarray(c[2]).reshape(-1, 1)) if not sp.issparse(c[2])
                   else sp.csc_matrix(c[2]) for c in cols], format="csc")
    return _finish_space(P, [(c[0], c[1]) for c in cols], flavor, A, M, m)


def _finish_space(P, labels, flavor, A, M, m) -> MultiscaleSpace:
    P = P.tocsc()
    P.sort_indices()
    A_ms = (P.T @ (A @ P)).toarray()
    M_ms = (P.T @ (M @ P)).toarray()
    A_ms = 0.5 * (A_ms + A_ms.T)
    M_ms = 0.5 * (M_ms + M_ms.T)
    try:
        np.linalg.cholesky(M_ms)
    except np.linalg.LinAlgError:
        raise BasisError("reduced mass matrix is not positive definite "
                         "(linearly dependent basis columns)") from None
    mm = np.broadcast_to(np.asarray(0 if m is None else m), (P.shape[1],)).copy()
    return MultiscaleSpace(P, labels, flavor, mm, A_ms, M_ms)


def build_multiscale_space(ops: FineOperators, aux: AuxiliarySpace, m,
                           flavor: str = "constrained", workers: int = 1) -> MultiscaleSpace:
    """Build every column; ``m`` is a uniform count or one count per element."""
    n_el = ops.grid.n_elements
    ms = np.full(n_el, m, dtype=int) if np.isscalar(m) else np.asarray(m, dtype=int)

    def job(e):
        return element_basis(ops, aux, e, int(ms[e]), flavor)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(job, range(n_el)))
    else:
        results = [job(e) for e in range(n_el)]

    rows, data, indptr, labels, mcol = [], [], [0], [], []
    for e, (nodes, vals) in enumerate(results):
        for j in range(vals.shape[1]):
            rows.append(nodes)
            data.append(vals[:, j])
            indptr.append(indptr[-1] + len(nodes))
            labels.append((e, j))
            mcol.append(ms[e])
    P = sp.csc_matrix((np.concatenate(data), np.concatenate(rows), np.array(indptr)),
                      shape=(ops.grid.n_nodes, len(labels)))
    return _finish_space(P, labels, flavor, ops.A, ops.M, np.array(mcol))


def constraint_residual(ops: FineOperators, aux: AuxiliarySpace, space: MultiscaleSpace) -> float:
    """Max deviation of ``s(psi, phi)`` from the Kronecker target inside each region."""
    worst = 0.0
    g = ops.grid
    for c, (e, j) in enumerate(space.columns):
        psi = space.P[:, c].toarray().ravel()
        elems = g.elements_in_box(*g.oversample_box(e, int(space.m[c])))
        target_id = aux.aux_index(e, j)
        for k in elems:
            vals = aux.q[k].T @ psi[aux.dofs[k].nodes]
            target = np.zeros_like(vals)
            if k == e:
                target[target_id - aux.aux_offsets[k]] = 1.0
            worst = max(worst, float(np.max(np.abs(vals - target))))
    return worst


def decay_profile(psi: np.ndarray, grid: Grid, field: PermeabilityField,
                  element: int) -> np.ndarray:
    """Fraction of the (matrix) energy of ``psi`` in each coarse layer around ``element``.

    Layer 0 is the element itself; layer ``l`` is ``K_{i,l}`` minus ``K_{i,l-1}``.
    """
    I, J = grid.element_ij(element)
    ce = grid.cell_element()
    layer = np.maximum(np.abs(ce % grid.Nx - I), np.abs(ce // grid.Nx - J))
    en = cell_energies(grid, field, psi)
    total = en.sum()
    if total <= 0:
        raise BasisError("basis function has zero energy")
    return np.bincount(layer, weights=en, minlength=max(grid.Nx, grid.Ny)) / total


# cache -------------------------------------------------------------------

def save_basis(path, space: MultiscaleSpace, header: dict) -> None:
    """Write the basis columns (CSC index lists and values) with a JSON header."""
    P = space.P.tocsc()
    head = dict(header, flavor=space.flavor)
    np.savez_compressed(
        Path(path), header=np.array(json.dumps(head, sort_keys=True)),
        data=P.data, indices=P.indices, indptr=P.indptr, shape=np.array(P.shape),
        columns=np.array(space.columns, dtype=int), m=space.m)


def load_basis(path, ops: FineOperators, expected: dict) -> MultiscaleSpace:
    """Load a cached basis; every key of ``expected`` must match the stored header."""
    with np.load(Path(path)) as z:
        head = json.loads(str(z["header"]))
        for key, val in expected.items():
            if head.get(key) != val:
                raise BasisError(f"basis cache mismatch on {key!r}: {head.get(key)!r} != {val!r}")
        P = sp.csc_matrix((z["data"], z["indices"], z["indptr"]), shape=tuple(z["shape"]))
        labels = [tuple(int(v) for v in c) for c in z["columns"]]
        m = z["m"].copy()
    return _finish_space(P, labels, head["flavor"], ops.A, ops.M, m)
