"""Permeability rasters, partition of unity, weighted coefficient, fractures."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .grid import Grid


class MediaError(ValueError):
    pass


@dataclass(frozen=True)
class PermeabilityField:
    """Per-fine-cell coefficient, stored as a ``(nfy, nfx)`` raster (bottom row first)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=float)
        if v.ndim != 2:
            raise MediaError("permeability raster must be two-dimensional")
        bad = np.flatnonzero(~(v.ravel() > 0) | ~np.isfinite(v.ravel()))
        if bad.size:
            raise MediaError(
                f"non-positive or non-finite permeability at cell {int(bad[0])} "
                f"(value {v.ravel()[bad[0]]!r})"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def cells(self) -> np.ndarray:
        return self.values.ravel()

    @property
    def kappa_min(self) -> float:
        return float(self.values.min())

    @property
    def kappa_max(self) -> float:
        return float(self.values.max())

    @property
    def contrast(self) -> float:
        return self.kappa_max / self.kappa_min

    def checksum(self) -> str:
        return hashlib.sha256(self.values.tobytes()).hexdigest()

    def scaled(self, c: float) -> "PermeabilityField":
        return PermeabilityField(self.values * c)

    def matches(self, grid: Grid) -> bool:
        return self.values.shape == (grid.nfy, grid.nfx)


def uniform_field(grid: Grid, value: float = 1.0) -> PermeabilityField:
    return PermeabilityField(np.full((grid.nfy, grid.nfx), float(value)))


def load_permeability(path, grid: Grid) -> PermeabilityField:
    """Read a permeability file (header ``nfx nfy`` then ``nfy`` rows)."""
    text = Path(path).read_text().split()
    if len(text) < 2:
        raise MediaError(f"{path}: missing 'nfx nfy' header")
    nfx, nfy = int(text[0]), int(text[1])
    if (nfx, nfy) != (grid.nfx, grid.nfy):
        raise MediaError(
            f"{path}: field is {nfx}x{nfy} but grid has {grid.nfx}x{grid.nfy} fine cells"
        )
    data = np.array([float(t) for t in text[2:]])
    if data.size != nfx * nfy:
        raise MediaError(f"{path}: expected {nfx * nfy} values, found {data.size}")
    return PermeabilityField(data.reshape(nfy, nfx))


def save_permeability(path, field: PermeabilityField) -> None:
    nfy, nfx = field.values.shape
    lines = [f"{nfx} {nfy}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in field.values]
    Path(path).write_text("\n".join(lines) + "\n")


def synth_channel_field(grid: Grid, seed: int, contrast: float,
                        n_channels: int, n_inclusions: int) -> PermeabilityField:
    """Background 1 with thin channels and rectangular inclusions set to ``contrast``.

    Channels are one fine cell thick, horizontal or vertical, with random
    position and a length between 30% and 80% of the domain width.
    Inclusions are rectangles of 1% to 4% of the domain width per side.
    """
    if contrast < 1:
        raise MediaError(f"contrast must be >= 1, got {contrast}")
    rng = np.random.default_rng(seed)
    nx, ny = grid.nfx, grid.nfy
    k = np.ones((ny, nx))
    for _ in range(n_channels):
        vertical = bool(rng.integers(2))
        along, across = (ny, nx) if vertical else (nx, ny)
        length = int(rng.integers(max(1, int(0.3 * along)), max(2, int(0.8 * along)) + 1))
        start = int(rng.integers(0, along - length + 1))
        pos = int(rng.integers(0, across))
        if vertical:
            k[start:start + length, pos] = contrast
        else:
            k[pos, start:start + length] = contrast
    for _ in range(n_inclusions):
        wx = int(rng.integers(max(1, nx // 100), max(2, nx // 25) + 1))
        wy = int(rng.integers(max(1, ny // 100), max(2, ny // 25) + 1))
        x0 = int(rng.integers(0, nx - wx + 1))
        y0 = int(rng.integers(0, ny - wy + 1))
        k[y0:y0 + wy, x0:x0 + wx] = contrast
    return PermeabilityField(k)


# partition of unity ------------------------------------------------------

@dataclass(frozen=True)
class PartitionOfUnity:
    """Bilinear coarse hats.

    ``chi`` is ``(n_vertices, n_nodes)``: hat values at fine nodes.
    ``grad_sq`` is ``(n_vertices, n_cells)``: ``|grad chi_j|^2`` at fine-cell centers.
    """

    grid: Grid
    chi: sp.csr_matrix
    grad_sq: sp.csr_matrix

    def grad_sq_sum(self) -> np.ndarray:
        return np.asarray(self.grad_sq.sum(axis=0)).ravel()


def _hat_1d(n_fine: int, n_coarse: int, length: float, at_centers: bool):
    """Values and derivatives of 1D coarse hats at fine nodes or fine-cell centers."""
    r = n_fine // n_coarse
    H = length / n_coarse
    if at_centers:
        t = np.arange(n_fine) + 0.5
    else:
        t = np.arange(n_fine + 1, dtype=float)
    left = np.minimum((t // r).astype(int), n_coarse - 1)
    xi = t / r - left
    cols = np.arange(t.size)
    rows = np.concatenate([left, left + 1])
    cc = np.concatenate([cols, cols])
    val = sp.csr_matrix((np.concatenate([1 - xi, xi]), (rows, cc)),
                        shape=(n_coarse + 1, t.size))
    der = sp.csr_matrix((np.concatenate([-np.ones_like(xi), np.ones_like(xi)]) / H,
                         (rows, cc)), shape=(n_coarse + 1, t.size))
    val.eliminate_zeros()
    return val, der


def partition_of_unity(grid: Grid) -> PartitionOfUnity:
    bx, _ = _hat_1d(grid.nfx, grid.Nx, grid.lx, at_centers=False)
    by, _ = _hat_1d(grid.nfy, grid.Ny, grid.ly, at_centers=False)
    chi = sp.kron(by, bx, format="csr")
    cx, dx = _hat_1d(grid.nfx, grid.Nx, grid.lx, at_centers=True)
    cy, dy = _hat_1d(grid.nfy, grid.Ny, grid.ly, at_centers=True)
    gx = sp.kron(cy, dx, format="csr")
    gy = sp.kron(dy, cx, format="csr")
    grad_sq = (gx.multiply(gx) + gy.multiply(gy)).tocsr()
    grad_sq.eliminate_zeros()
    return PartitionOfUnity(grid, chi, grad_sq)


def grad_sq_sum_at(grid: Grid, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``sum_j |grad chi_j|^2`` at arbitrary points (continuous across coarse lines)."""
    xi = np.asarray(x) / grid.Hx
    eta = np.asarray(y) / grid.Hy
    xi = xi - np.minimum(np.floor(xi), grid.Nx - 1)
    eta = eta - np.minimum(np.floor(eta), grid.Ny - 1)
    return (2 * ((1 - eta) ** 2 + eta ** 2) / grid.Hx ** 2
            + 2 * ((1 - xi) ** 2 + xi ** 2) / grid.Hy ** 2)


def kappa_tilde(field: PermeabilityField, pou: PartitionOfUnity) -> np.ndarray:
    """Per-cell ``kappa * sum_j |grad chi_j|^2`` at cell centers."""
    if not field.matches(pou.grid):
        raise MediaError("permeability field does not match the grid")
    kt = field.cells * pou.grad_sq_sum()
    floor = 1e-14 * field.kappa_min / pou.grid.H ** 2
    return np.where(kt > floor, kt, floor)


# fractures ---------------------------------------------------------------

@dataclass(frozen=True)
class FractureSegment:
    endpoints: tuple[float, float, float, float]
    kappa_f: float
    edges: np.ndarray  # (n_edges, 2) fine-node indices


@dataclass(frozen=True)
class FractureSet:
    segments: tuple[FractureSegment, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def edges(self) -> np.ndarray:
        if not self.segments:
            return np.zeros((0, 2), dtype=int)
        return np.concatenate([s.edges for s in self.segments])

    @property
    def kappas(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0)
        return np.concatenate([np.full(len(s.edges), s.kappa_f) for s in self.segments])


def _snap(value: float, step: float, what: str) -> int:
    k = round(value / step)
    if abs(k * step - value) > 1e-9 * max(1.0, abs(value)):
        raise MediaError(f"fracture endpoint {what}={value} is not on a fine-grid node")
    return int(k)


def fracture_segment(grid: Grid, x1: float, y1: float, x2: float, y2: float,
                     kappa_f: float) -> FractureSegment:
    if not kappa_f > 0:
        raise MediaError(f"fracture coefficient must be positive, got {kappa_f}")
    i1, i2 = _snap(x1, grid.hx, "x"), _snap(x2, grid.hx, "x")
    j1, j2 = _snap(y1, grid.hy, "y"), _snap(y2, grid.hy, "y")
    for i in (i1, i2):
        if not 0 <= i <= grid.nfx:
            raise MediaError(f"fracture endpoint x index {i} outside the domain")
    for j in (j1, j2):
        if not 0 <= j <= grid.nfy:
            raise MediaError(f"fracture endpoint y index {j} outside the domain")
    if i1 != i2 and j1 != j2:
        raise MediaError(f"fracture ({x1}, {y1})-({x2}, {y2}) is not axis-aligned")
    if i1 == i2 and j1 == j2:
        raise MediaError(f"fracture ({x1}, {y1})-({x2}, {y2}) has zero length")
    if j1 == j2:
        i = np.arange(min(i1, i2), max(i1, i2))
        a = j1 * (grid.nfx + 1) + i
        edges = np.stack([a, a + 1], axis=1)
    else:
        j = np.arange(min(j1, j2), max(j1, j2))
        a = j * (grid.nfx + 1) + i1
        edges = np.stack([a, a + grid.nfx + 1], axis=1)
    return FractureSegment((x1, y1, x2, y2), float(kappa_f), edges)


def load_fractures(path, grid: Grid) -> FractureSet:
    """Read ``x1 y1 x2 y2 kappa_f`` lines; blank lines and ``#`` comments are skipped."""
    segs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise MediaError(f"{path}:{lineno}: expected 'x1 y1 x2 y2 kappa_f'")
        try:
            segs.append(fracture_segment(grid, *map(float, parts)))
        except MediaError as exc:
            raise MediaError(f"{path}:{lineno}: {exc}") from None
    return FractureSet(tuple(segs))


def save_fractures(path, fractures: FractureSet) -> None:
    lines = [" ".join(f"{c:.17g}" for c in (*s.endpoints, s.kappa_f))
             for s in fractures.segments]
    Path(path).write_text("".join(line + "\n" for line in lines))


def three_fracture_network(grid: Grid, kappa_f: float = 1e4) -> FractureSet:
    """Three fine-edge-aligned fractures used by the fracture study."""
    def snap(v, step):
        return round(v / step) * step

    hx, hy = grid.hx, grid.hy
    coords = [
        (0.1, 0.5, 0.75, 0.5),
        (0.3, 0.15, 0.3, 0.85),
        (0.45, 0.25, 0.9, 0.25),
    ]
    segs = [fracture_segment(grid, snap(x1, hx), snap(y1, hy), snap(x2, hx), snap(y2, hy), kappa_f)
            for x1, y1, x2, y2 in coords]
    return FractureSet(tuple(segs))
