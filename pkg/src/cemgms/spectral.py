"""Local spectral problems and the auxiliary space.

Each coarse element solves the Neumann eigenproblem ``a_i(phi, v) = lam s_i(phi, v)``
with dense symmetric-definite LAPACK. Individual eigenvectors inside a degenerate
cluster are solver dependent; only their span is meaningful.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as la

from .fem import FineOperators
from .grid import DofSet


class SpectralError(RuntimeError):
    pass


def _fix_sign(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def local_eigens(ops: FineOperators, element: int, L: int):
    """First ``L + 1`` eigenpairs on one coarse element.

    Returns ``(eigenvalues, eigenvectors, dofs, S_i)``; eigenvectors are columns on
    ``dofs.nodes``, normalized to ``s_i(phi, phi) = 1``.
    """
    dofs, Ai, Si = ops.element_operators(element)
    n = len(dofs)
    if L < 1 or L + 1 > n:
        raise SpectralError(
            f"element {element}: need 1 <= L and L + 1 <= {n} local nodes, got L={L}")
    Ad, Sd = Ai.toarray(), Si.toarray()
    try:
        vals, vecs = la.eigh(Ad, Sd, subset_by_index=[0, L])
    except la.LinAlgError as exc:
        raise SpectralError(f"element {element}: eigensolver failed ({exc})") from exc
    return vals, _fix_sign(vecs), dofs, Si


def _threshold_eigens(ops: FineOperators, element: int, tol: float):
    dofs, Ai, Si = ops.element_operators(element)
    vals, vecs = la.eigh(Ai.toarray(), Si.toarray())
    L = max(1, int(np.sum(vals < tol)))
    if L + 1 > len(dofs):
        raise SpectralError(f"element {element}: threshold {tol} exhausts the local space")
    return vals[:L + 1], _fix_sign(vecs[:, :L + 1]), dofs, Si


@dataclass
class AuxiliarySpace:
    """Per-element eigenpairs; functions live on their own element only.

    A *broken* vector concatenates per-element nodal vectors in element order
    (``offsets`` gives the slices); it represents discontinuous functions such as
    the output of :func:`pi_project`.
    """

    eigenvalues: list[np.ndarray]  # L_i + 1 values each
    vectors: list[np.ndarray]  # (n_i, L_i)
    dofs: list[DofSet]
    S_local: list
    counts: np.ndarray

    def __post_init__(self):
        self.q = [S @ V for S, V in zip(self.S_local, self.vectors)]
        sizes = np.array([len(d) for d in self.dofs])
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.aux_offsets = np.concatenate([[0], np.cumsum(self.counts)])

    @property
    def n_elements(self) -> int:
        return len(self.dofs)

    @property
    def n_aux(self) -> int:
        return int(self.aux_offsets[-1])

    @property
    def Lambda(self) -> float:
        return float(min(ev[-1] for ev in self.eigenvalues))

    def aux_index(self, element: int, j: int) -> int:
        return int(self.aux_offsets[element] + j)

    def to_broken(self, v: np.ndarray) -> np.ndarray:
        return np.concatenate([v[d.nodes] for d in self.dofs])

    def _pieces(self, v: np.ndarray):
        v = np.asarray(v, dtype=float)
        if v.shape[0] == self.offsets[-1]:
            return [v[self.offsets[i]:self.offsets[i + 1]] for i in range(self.n_elements)]
        return [v[d.nodes] for d in self.dofs]

    def pi_coefficients(self, v: np.ndarray) -> np.ndarray:
        """``s_i(v, phi_j^(i))`` for every auxiliary function, in aux order."""
        return np.concatenate([q.T @ p for q, p in zip(self.q, self._pieces(v))])

    def s_inner(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(sum(pu @ (S @ pv) for S, pu, pv in
                         zip(self.S_local, self._pieces(u), self._pieces(v))))

    def aux_function(self, element: int, j: int) -> np.ndarray:
        """Auxiliary function as a broken vector."""
        out = np.zeros(self.offsets[-1])
        out[self.offsets[element]:self.offsets[element + 1]] = self.vectors[element][:, j]
        return out


def build_aux_space(ops: FineOperators, L: int | Sequence[int] | None = 4,
                    threshold: float | None = None, workers: int = 1) -> AuxiliarySpace:
    """Solve every element's spectral problem.

    ``L`` is a uniform count or one count per element; with ``threshold`` set,
    each element keeps all eigenvalues below it (at least one).
    """
    n = ops.grid.n_elements
    if threshold is not None:
        def job(e):
            return _threshold_eigens(ops, e, threshold)
    else:
        Ls = np.full(n, L, dtype=int) if np.isscalar(L) else np.asarray(L, dtype=int)
        if Ls.shape != (n,):
            raise SpectralError(f"need {n} per-element counts, got {Ls.shape}")

        def job(e):
            return local_eigens(ops, e, int(Ls[e]))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(job, range(n)))
    else:
        results = [job(e) for e in range(n)]
    vals = [r[0] for r in results]
    return AuxiliarySpace(
        eigenvalues=vals,
        vectors=[r[1][:, :-1] for r in results],
        dofs=[r[2] for r in results],
        S_local=[r[3] for r in results],
        counts=np.array([len(v) - 1 for v in vals]),
    )


def pi_project(aux: AuxiliarySpace, v: np.ndarray) -> np.ndarray:
    """``pi(v)`` as a broken vector; ``v`` may be a fine-node or broken vector."""
    c = aux.pi_coefficients(v)
    out = np.empty(aux.offsets[-1])
    for i, V in enumerate(aux.vectors):
        out[aux.offsets[i]:aux.offsets[i + 1]] = V @ c[aux.aux_offsets[i]:aux.aux_offsets[i + 1]]
    return out
