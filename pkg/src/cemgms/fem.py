"""Q1 finite element operators on the fine grid.

All matrices live on the full fine-node index space (no boundary conditions);
Dirichlet conditions are applied afterwards by :func:`restrict`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .grid import DofSet, Grid
from .media import (FractureSet, PartitionOfUnity, PermeabilityField, grad_sq_sum_at,
                    kappa_tilde, partition_of_unity)

_GAUSS = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


def _shape(xi, eta):
    """Q1 shape functions and reference gradients at ``(xi, eta)`` in [0, 1]^2."""
    N = np.array([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta])
    dxi = np.array([-(1 - eta), 1 - eta, eta, -eta])
    deta = np.array([-(1 - xi), -xi, xi, 1 - xi])
    return N, dxi, deta


def element_matrices(hx: float, hy: float) -> tuple[np.ndarray, np.ndarray]:
    """Unit-coefficient Q1 stiffness and mass on an ``hx x hy`` cell by 2x2 Gauss."""
    K = np.zeros((4, 4))
    Mm = np.zeros((4, 4))
    jac = hx * hy / 4.0  # product weight 1/4 per point on [0,1]^2
    for xi in _GAUSS:
        for eta in _GAUSS:
            N, dxi, deta = _shape(xi, eta)
            gx, gy = dxi / hx, deta / hy
            K += jac * (np.outer(gx, gx) + np.outer(gy, gy))
            Mm += jac * np.outer(N, N)
    return K, Mm


def _assemble(grid: Grid, coef: np.ndarray, Ke: np.ndarray,
              cells: np.ndarray | None = None) -> sp.csr_matrix:
    cn = grid.cell_nodes if cells is None else grid.cell_nodes[cells]
    c = coef if cells is None else coef[cells]
    rows = np.repeat(cn, 4, axis=1).ravel()
    cols = np.tile(cn, (1, 4)).ravel()
    data = (c[:, None] * Ke.ravel()[None, :]).ravel()
    n = grid.n_nodes
    return sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()


def assemble_stiffness(grid: Grid, field: PermeabilityField) -> sp.csr_matrix:
    K, _ = element_matrices(grid.hx, grid.hy)
    return _assemble(grid, field.cells, K)


def assemble_mass(grid: Grid) -> sp.csr_matrix:
    _, Mm = element_matrices(grid.hx, grid.hy)
    return _assemble(grid, np.ones(grid.n_cells), Mm)


def assemble_s_mass(grid: Grid, ktilde: np.ndarray) -> sp.csr_matrix:
    _, Mm = element_matrices(grid.hx, grid.hy)
    return _assemble(grid, np.asarray(ktilde, dtype=float), Mm)


def assemble_load(grid: Grid, f: Callable, t: float) -> np.ndarray:
    """Load vector ``(f(., t), phi_i)`` with 2x2 Gauss per cell.

    ``f(x, y, t)`` must accept arrays.
    """
    x0 = (np.arange(grid.nfx) * grid.hx)[None, :]
    y0 = (np.arange(grid.nfy) * grid.hy)[:, None]
    w = grid.hx * grid.hy / 4.0
    local = np.zeros((grid.n_cells, 4))
    for xi in _GAUSS:
        for eta in _GAUSS:
            N, _, _ = _shape(xi, eta)
            x = np.broadcast_to(x0 + xi * grid.hx, (grid.nfy, grid.nfx))
            y = np.broadcast_to(y0 + eta * grid.hy, (grid.nfy, grid.nfx))
            fv = np.broadcast_to(np.asarray(f(x, y, t), dtype=float), x.shape).ravel()
            local += w * fv[:, None] * N[None, :]
    return np.bincount(grid.cell_nodes.ravel(), weights=local.ravel(),
                       minlength=grid.n_nodes)


# fractures ---------------------------------------------------------------

def _edge_lengths(grid: Grid, edges: np.ndarray) -> np.ndarray:
    horizontal = (edges[:, 1] - edges[:, 0]) == 1
    return np.where(horizontal, grid.hx, grid.hy)


def _fracture_entries(grid: Grid, edges: np.ndarray, kappas: np.ndarray,
                      weights: np.ndarray):
    """Per-edge 2x2 stiffness, mass and weighted-mass entries along fracture edges.

    The weighted mass uses ``kappa_f * sum_j |grad chi_j|^2`` at the edge midpoint.
    """
    le = _edge_lengths(grid, edges)
    x, y = grid.node_coords()
    gs = grad_sq_sum_at(grid, x[edges].mean(axis=1), y[edges].mean(axis=1))
    kpat = np.array([1.0, -1.0, -1.0, 1.0])
    mpat = np.array([2.0, 1.0, 1.0, 2.0]) / 6.0
    k = ((weights * kappas / le)[:, None] * kpat).ravel()
    m = ((weights * le)[:, None] * mpat).ravel()
    s = ((weights * kappas * gs * le)[:, None] * mpat).ravel()
    return k, m, s


def edge_cells(grid: Grid, edges: np.ndarray) -> np.ndarray:
    """Owning fine cell of each edge: the cell above (horizontal) or to the right (vertical),
    falling back to the other side on the top or right domain boundary."""
    i = edges[:, 0] % (grid.nfx + 1)
    j = edges[:, 0] // (grid.nfx + 1)
    horizontal = (edges[:, 1] - edges[:, 0]) == 1
    j = np.where(horizontal & (j == grid.nfy), j - 1, j)
    i = np.where(~horizontal & (i == grid.nfx), i - 1, i)
    return j * grid.nfx + i


def _pairs(edges: np.ndarray):
    return np.repeat(edges, 2, axis=1).ravel(), np.tile(edges, (1, 2)).ravel()


def fracture_matrices(fractures: FractureSet, grid: Grid):
    """1D linear-element stiffness, mass and weighted mass along fracture edges."""
    n = grid.n_nodes
    edges = fractures.edges
    if len(edges) == 0:
        z = sp.csr_matrix((n, n))
        return z, z.copy(), z.copy()
    k, m, s = _fracture_entries(grid, edges, fractures.kappas, np.ones(len(edges)))
    rows, cols = _pairs(edges)
    return tuple(sp.coo_matrix((d, (rows, cols)), shape=(n, n)).tocsr() for d in (k, m, s))


def add_fracture_terms(A: sp.spmatrix, M: sp.spmatrix, fractures: FractureSet,
                       grid: Grid) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    if len(fractures) == 0:
        return A.tocsr(), M.tocsr()
    Af, Mf, _ = fracture_matrices(fractures, grid)
    return (A + Af).tocsr(), (M + Mf).tocsr()


# restriction -------------------------------------------------------------

def restrict(Op: sp.spmatrix, dofs: DofSet, dirichlet: bool) -> sp.csr_matrix:
    """Principal submatrix on ``dofs``; with ``dirichlet`` boundary nodes are dropped."""
    idx = dofs.interior if dirichlet else dofs.nodes
    Op = Op.tocsr()
    return Op[idx][:, idx].tocsr()


def cell_energies(grid: Grid, field: PermeabilityField, u: np.ndarray) -> np.ndarray:
    """Per-cell ``int kappa |grad u_h|^2``."""
    K, _ = element_matrices(grid.hx, grid.hy)
    ue = u[grid.cell_nodes]
    return field.cells * np.einsum("ca,ab,cb->c", ue, K, ue)


# bundled fine-scale problem ---------------------------------------------

@dataclass(frozen=True)
class FineOperators:
    """Global fine operators plus what is needed for element-local assembly."""

    grid: Grid
    field: PermeabilityField
    fractures: FractureSet
    pou: PartitionOfUnity
    ktilde: np.ndarray
    A: sp.csr_matrix
    M: sp.csr_matrix
    S: sp.csr_matrix

    def _local(self, coef: np.ndarray, Ke: np.ndarray, dofs: DofSet,
               cells: np.ndarray) -> sp.csr_matrix:
        cn = np.searchsorted(dofs.nodes, self.grid.cell_nodes[cells])
        n = len(dofs)
        rows = np.repeat(cn, 4, axis=1).ravel()
        cols = np.tile(cn, (1, 4)).ravel()
        data = (coef[cells][:, None] * Ke.ravel()[None, :]).ravel()
        return sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()

    def element_operators(self, element: int) -> tuple[DofSet, sp.csr_matrix, sp.csr_matrix]:
        """Neumann (unconstrained) ``a_i`` and ``s_i`` on the nodes of one coarse element.

        Each fracture edge belongs to exactly one element (see :func:`edge_cells`),
        so the element forms sum to the global ones. Splitting a shared edge
        between two elements would give both a nearly identical fracture mode and
        make the orthogonality constraints close to contradictory.
        """
        g = self.grid
        dofs = g.element_dofs(element)
        cells = g.element_cells(element)
        K, Mm = element_matrices(g.hx, g.hy)
        Ai = self._local(self.field.cells, K, dofs, cells)
        Si = self._local(self.ktilde, Mm, dofs, cells)
        edges = self.fractures.edges
        if len(edges):
            mine = g.cell_element()[edge_cells(g, edges)] == element
            if mine.any():
                e = edges[mine]
                k, _, s = _fracture_entries(g, e, self.fractures.kappas[mine], np.ones(len(e)))
                rows, cols = _pairs(np.searchsorted(dofs.nodes, e))
                Ai = Ai + sp.coo_matrix((k, (rows, cols)), shape=Ai.shape).tocsr()
                Si = Si + sp.coo_matrix((s, (rows, cols)), shape=Si.shape).tocsr()
        return dofs, Ai.tocsr(), Si

    @property
    def interior(self) -> np.ndarray:
        return self.grid.interior_nodes()


def assemble_operators(grid: Grid, field: PermeabilityField,
                       fractures: FractureSet | None = None) -> FineOperators:
    if not field.matches(grid):
        raise ValueError(
            f"field shape {field.values.shape} does not match grid {grid.nfy}x{grid.nfx}")
    fractures = fractures or FractureSet()
    pou = partition_of_unity(grid)
    kt = kappa_tilde(field, pou)
    A = assemble_stiffness(grid, field)
    M = assemble_mass(grid)
    S = assemble_s_mass(grid, kt)
    if len(fractures):
        Af, Mf, Sf = fracture_matrices(fractures, grid)
        A, M, S = (A + Af).tocsr(), (M + Mf).tocsr(), (S + Sf).tocsr()
    return FineOperators(grid, field, fractures, pou, kt, A, M, S)
