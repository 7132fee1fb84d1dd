"""Nested uniform fine/coarse Cartesian meshes on a rectangle.

Numbering conventions (fixed, used by every assembly):

* fine node ``(i, j)`` -> ``j * (nfx + 1) + i``, bottom row first
* fine cell ``(i, j)`` -> ``j * nfx + i``
* coarse element ``(I, J)`` -> ``J * Nx + I``
* coarse vertex ``(I, J)`` -> ``J * (Nx + 1) + I``
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GridError(ValueError):
    """Raised for inconsistent mesh sizes or out-of-range indices."""


@dataclass(frozen=True)
class DofSet:
    """Sorted fine-node indices of a rectangular region.

    ``boundary[k]`` is True when ``nodes[k]`` lies on the region boundary.
    ``box`` holds the fine-node index bounds ``(i0, i1, j0, j1)`` (inclusive).
    """

    nodes: np.ndarray
    boundary: np.ndarray
    box: tuple[int, int, int, int]

    @property
    def interior(self) -> np.ndarray:
        return self.nodes[~self.boundary]

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node) -> bool:
        k = np.searchsorted(self.nodes, node)
        return bool(k < len(self.nodes) and self.nodes[k] == node)


@dataclass(frozen=True)
class Grid:
    nfx: int
    nfy: int
    Nx: int
    Ny: int
    lx: float = 1.0
    ly: float = 1.0
    _cell_nodes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("nfx", "nfy", "Nx", "Ny"):
            if getattr(self, name) < 2:
                raise GridError(f"{name} must be >= 2, got {getattr(self, name)}")
        if self.nfx % self.Nx or self.nfy % self.Ny:
            raise GridError(
                f"fine size {self.nfx}x{self.nfy} is not divisible by "
                f"coarse size {self.Nx}x{self.Ny}"
            )
        i, j = np.meshgrid(np.arange(self.nfx), np.arange(self.nfy))
        sw = (j * (self.nfx + 1) + i).ravel()
        # SW, SE, NE, NW
        cn = np.stack([sw, sw + 1, sw + self.nfx + 2, sw + self.nfx + 1], axis=1)
        cn.setflags(write=False)
        object.__setattr__(self, "_cell_nodes", cn)

    # sizes -----------------------------------------------------------
    @property
    def hx(self) -> float:
        return self.lx / self.nfx

    @property
    def hy(self) -> float:
        return self.ly / self.nfy

    @property
    def h(self) -> float:
        return self.hx

    @property
    def Hx(self) -> float:
        return self.lx / self.Nx

    @property
    def Hy(self) -> float:
        return self.ly / self.Ny

    @property
    def H(self) -> float:
        return self.Hx

    @property
    def rx(self) -> int:
        """Fine cells per coarse element along x."""
        return self.nfx // self.Nx

    @property
    def ry(self) -> int:
        return self.nfy // self.Ny

    @property
    def n_nodes(self) -> int:
        return (self.nfx + 1) * (self.nfy + 1)

    @property
    def n_cells(self) -> int:
        return self.nfx * self.nfy

    @property
    def n_elements(self) -> int:
        return self.Nx * self.Ny

    @property
    def n_vertices(self) -> int:
        return (self.Nx + 1) * (self.Ny + 1)

    @property
    def area(self) -> float:
        return self.lx * self.ly

    @property
    def cell_nodes(self) -> np.ndarray:
        """``(n_cells, 4)`` node indices per fine cell in SW, SE, NE, NW order."""
        return self._cell_nodes

    # coordinates -----------------------------------------------------
    def node_coords(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.linspace(0.0, self.lx, self.nfx + 1)
        y = np.linspace(0.0, self.ly, self.nfy + 1)
        X, Y = np.meshgrid(x, y)
        return X.ravel(), Y.ravel()

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        x = (np.arange(self.nfx) + 0.5) * self.hx
        y = (np.arange(self.nfy) + 0.5) * self.hy
        X, Y = np.meshgrid(x, y)
        return X.ravel(), Y.ravel()

    def vertex_coords(self, vertex: int) -> tuple[float, float]:
        I, J = self.vertex_ij(vertex)
        return I * self.Hx, J * self.Hy

    def node_index(self, i: int, j: int) -> int:
        return j * (self.nfx + 1) + i

    def boundary_nodes(self) -> np.ndarray:
        whole = self.region(0, self.nfx, 0, self.nfy)
        return whole.nodes[whole.boundary]

    def interior_nodes(self) -> np.ndarray:
        return self.region(0, self.nfx, 0, self.nfy).interior

    # coarse index maps -----------------------------------------------
    def element_ij(self, element: int) -> tuple[int, int]:
        if not 0 <= element < self.n_elements:
            raise GridError(f"element {element} out of range [0, {self.n_elements})")
        return element % self.Nx, element // self.Nx

    def vertex_ij(self, vertex: int) -> tuple[int, int]:
        if not 0 <= vertex < self.n_vertices:
            raise GridError(f"vertex {vertex} out of range [0, {self.n_vertices})")
        return vertex % (self.Nx + 1), vertex // (self.Nx + 1)

    def element_cells(self, element: int) -> np.ndarray:
        I, J = self.element_ij(element)
        return self.block_cells(I, I + 1, J, J + 1)

    def block_cells(self, I0: int, I1: int, J0: int, J1: int) -> np.ndarray:
        """Fine cells of the coarse block ``[I0, I1) x [J0, J1)``."""
        i = np.arange(I0 * self.rx, I1 * self.rx)
        j = np.arange(J0 * self.ry, J1 * self.ry)
        return (j[:, None] * self.nfx + i[None, :]).ravel()

    def cell_element(self) -> np.ndarray:
        """Coarse element owning each fine cell."""
        i = np.arange(self.nfx) // self.rx
        j = np.arange(self.nfy) // self.ry
        return (j[:, None] * self.Nx + i[None, :]).ravel()

    def region(self, i0: int, i1: int, j0: int, j1: int) -> DofSet:
        """Fine nodes of the closed node-index box, boundary flagged."""
        i = np.arange(i0, i1 + 1)
        j = np.arange(j0, j1 + 1)
        nodes = (j[:, None] * (self.nfx + 1) + i[None, :]).ravel()
        bi = (i == i0) | (i == i1)
        bj = (j == j0) | (j == j1)
        boundary = (bj[:, None] | bi[None, :]).ravel()
        return DofSet(nodes, boundary, (i0, i1, j0, j1))

    def coarse_block(self, I0: int, I1: int, J0: int, J1: int) -> DofSet:
        return self.region(I0 * self.rx, I1 * self.rx, J0 * self.ry, J1 * self.ry)

    def element_dofs(self, element: int) -> DofSet:
        I, J = self.element_ij(element)
        return self.coarse_block(I, I + 1, J, J + 1)

    def oversample_box(self, element: int, m: int) -> tuple[int, int, int, int]:
        """Coarse index box ``(I0, I1, J0, J1)`` (half-open) of ``K_{i,m}``."""
        if m < 0:
            raise GridError(f"oversampling layers must be >= 0, got {m}")
        I, J = self.element_ij(element)
        return (max(I - m, 0), min(I + m + 1, self.Nx),
                max(J - m, 0), min(J + m + 1, self.Ny))

    def elements_in_box(self, I0: int, I1: int, J0: int, J1: int) -> np.ndarray:
        Is = np.arange(I0, I1)
        Js = np.arange(J0, J1)
        return (Js[:, None] * self.Nx + Is[None, :]).ravel()

    def neighborhood_elements(self, vertex: int) -> np.ndarray:
        I, J = self.vertex_ij(vertex)
        return self.elements_in_box(max(I - 1, 0), min(I + 1, self.Nx),
                                    max(J - 1, 0), min(J + 1, self.Ny))

    def max_overlap(self) -> int:
        """Maximum number of coarse neighborhoods containing one fine cell."""
        counts = np.zeros(self.n_cells, dtype=int)
        for v in range(self.n_vertices):
            I, J = self.vertex_ij(v)
            cells = self.block_cells(max(I - 1, 0), min(I + 1, self.Nx),
                                     max(J - 1, 0), min(J + 1, self.Ny))
            counts[cells] += 1
        return int(counts.max())


def build_grid(nfx: int, nfy: int, Nx: int, Ny: int,
               lx: float = 1.0, ly: float = 1.0) -> Grid:
    return Grid(int(nfx), int(nfy), int(Nx), int(Ny), float(lx), float(ly))


def coarse_neighborhood(grid: Grid, vertex: int) -> DofSet:
    """Fine nodes of the neighborhood of a coarse vertex.

    The whole boundary of the neighborhood (parts on the domain boundary
    included) is flagged, matching a homogeneous Dirichlet local space.
    """
    I, J = grid.vertex_ij(vertex)
    return grid.coarse_block(max(I - 1, 0), min(I + 1, grid.Nx),
                             max(J - 1, 0), min(J + 1, grid.Ny))


def oversample(grid: Grid, element: int, m: int) -> DofSet:
    """Fine nodes of ``K_i`` enlarged by ``m`` coarse layers, clipped to the domain."""
    return grid.coarse_block(*grid.oversample_box(element, m))
