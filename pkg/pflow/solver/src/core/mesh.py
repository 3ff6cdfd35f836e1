from __future__ import annotations
import math
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy import sparse

from utils.error_handler import MeshError
from utils.logger import get_logger

logger = get_logger(__name__)


class Mesh:
    """Simplicial triangulation with shape-regularity bookkeeping.

    vertices has shape (nv, d), cells (nc, d+1). Arrays are frozen after
    construction; every derived quantity is cached on first access.
    """

    def __init__(self, vertices: np.ndarray, cells: np.ndarray,
                 domain_volume: Optional[float] = None):
        self.vertices = np.array(vertices, dtype=float)
        self.cells = np.array(cells, dtype=np.int64)
        self.domain_volume = domain_volume

        if self.vertices.ndim != 2 or self.cells.ndim != 2:
            raise MeshError("vertices and cells must be two-dimensional arrays")
        if self.cells.shape[1] != self.dim + 1:
            raise MeshError(f"cells must have {self.dim + 1} vertices in d={self.dim}")
        if self.cells.size and (self.cells.min() < 0 or self.cells.max() >= len(self.vertices)):
            raise MeshError("cell references a vertex out of range", code='MSH_002')
        if np.any(self.signed_volumes <= 0):
            raise MeshError("mesh contains cells with non-positive volume")

        self.vertices.setflags(write=False)
        self.cells.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    # -- cell geometry ------------------------------------------------------

    @cached_property
    def jacobians(self) -> np.ndarray:
        """B_K with columns v_i - v_0, so x = v_0 + B_K xhat"""
        corners = self.vertices[self.cells]
        return np.swapaxes(corners[:, 1:, :] - corners[:, :1, :], 1, 2)

    @cached_property
    def signed_volumes(self) -> np.ndarray:
        return np.linalg.det(self.jacobians) / math.factorial(self.dim)

    @cached_property
    def volumes(self) -> np.ndarray:
        return np.abs(self.signed_volumes)

    @cached_property
    def inverse_jacobians(self) -> np.ndarray:
        return np.linalg.inv(self.jacobians)

    @cached_property
    def barycenters(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)

    @cached_property
    def diameters(self) -> np.ndarray:
        """h_K: longest edge"""
        corners = self.vertices[self.cells]
        diffs = corners[:, :, None, :] - corners[:, None, :, :]
        return np.sqrt((diffs ** 2).sum(axis=-1)).max(axis=(1, 2))

    @cached_property
    def facet_measures(self) -> np.ndarray:
        """(nc, d+1) measures of the facet opposite each local vertex"""
        d = self.dim
        corners = self.vertices[self.cells]
        out = np.empty((self.num_cells, d + 1))
        for i in range(d + 1):
            face = np.delete(corners, i, axis=1)
            edges = face[:, 1:, :] - face[:, :1, :]
            gram = np.einsum('kia,kja->kij', edges, edges)
            out[:, i] = np.sqrt(np.abs(np.linalg.det(gram))) / math.factorial(d - 1)
        return out

    @cached_property
    def inball_diameters(self) -> np.ndarray:
        """rho_K = 2 d |K| / sum of facet measures"""
        return 2 * self.dim * self.volumes / self.facet_measures.sum(axis=1)

    @cached_property
    def gamma0(self) -> float:
        return float(np.max(self.diameters / self.inball_diameters))

    @cached_property
    def h(self) -> float:
        return float(np.max(self.diameters))

    @property
    def total_volume(self) -> float:
        return float(self.volumes.sum())

    # -- topology -----------------------------------------------------------

    @cached_property
    def _facet_data(self):
        d = self.dim
        local = [np.delete(np.arange(d + 1), i) for i in range(d + 1)]
        faces = np.sort(np.concatenate([self.cells[:, idx] for idx in local]), axis=1)
        unique, inverse, counts = np.unique(faces, axis=0, return_inverse=True,
                                            return_counts=True)
        if np.any(counts > 2):
            raise MeshError("facet shared by more than two cells")
        return unique, counts

    @cached_property
    def boundary_facets(self) -> np.ndarray:
        unique, counts = self._facet_data
        return unique[counts == 1]

    @cached_property
    def boundary_vertex_flags(self) -> np.ndarray:
        flags = np.zeros(self.num_vertices, dtype=bool)
        flags[self.boundary_facets.ravel()] = True
        flags.setflags(write=False)
        return flags

    @cached_property
    def _edge_data(self):
        d = self.dim
        pairs = [(i, j) for i in range(d + 1) for j in range(i + 1, d + 1)]
        local = np.sort(np.concatenate([self.cells[:, [i, j]] for i, j in pairs]), axis=1)
        edges, inverse, counts = np.unique(local, axis=0, return_inverse=True,
                                           return_counts=True)
        cell_edges = inverse.reshape(len(pairs), self.num_cells).T
        return edges, cell_edges, counts

    @property
    def edges(self) -> np.ndarray:
        return self._edge_data[0]

    @property
    def cell_edges(self) -> np.ndarray:
        """(nc, number of local edges) global edge indices, local order (0,1),(0,2),(1,2),..."""
        return self._edge_data[1]

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        if self.dim != 2:
            raise MeshError("boundary_edges is only defined for triangles")
        return np.flatnonzero(self._edge_data[2] == 1)

    @cached_property
    def incidence(self) -> sparse.csr_matrix:
        """cells x vertices 0/1 matrix"""
        rows = np.repeat(np.arange(self.num_cells), self.dim + 1)
        data = np.ones(rows.size)
        return sparse.csr_matrix((data, (rows, self.cells.ravel())),
                                 shape=(self.num_cells, self.num_vertices))

    @cached_property
    def vertex_cells(self) -> List[np.ndarray]:
        csc = self.incidence.tocsc()
        return [csc.indices[csc.indptr[v]:csc.indptr[v + 1]] for v in range(self.num_vertices)]

    @cached_property
    def patch_matrix(self) -> sparse.csr_matrix:
        adjacency = (self.incidence @ self.incidence.T).tocsr()
        adjacency.sort_indices()
        return adjacency

    def patch(self, K: int) -> np.ndarray:
        """Cells sharing at least one vertex with K (K included), sorted"""
        if not 0 <= K < self.num_cells:
            raise MeshError(f"cell index {K} out of range", code='MSH_002')
        m = self.patch_matrix
        return m.indices[m.indptr[K]:m.indptr[K + 1]].copy()

    @cached_property
    def patch_volume_ratios(self) -> np.ndarray:
        """|S_K| / |K|"""
        patch_volumes = self.patch_matrix.astype(bool).astype(float) @ self.volumes
        return patch_volumes / self.volumes

    @cached_property
    def patch_multiplicity(self) -> np.ndarray:
        """number of patches each cell belongs to"""
        return np.diff(self.patch_matrix.indptr)


def square_mesh(n: int, lower: Sequence[float] = (0.0, 0.0), size: float = 1.0) -> Mesh:
    """Structured triangulation of lower + [0, size]^2, each square cut along one diagonal"""
    if int(n) != n or n < 1:
        raise MeshError("n must be a positive integer")
    if size <= 0:
        raise MeshError("size must be positive")
    n = int(n)
    ticks = np.linspace(0.0, size, n + 1)
    X, Y = np.meshgrid(ticks + lower[0], ticks + lower[1], indexing='xy')
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing='xy')
    v00 = (j * (n + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower_cells = np.column_stack([v00, v10, v11])
    upper_cells = np.column_stack([v00, v11, v01])
    cells = np.empty((2 * n * n, 3), dtype=np.int64)
    cells[0::2] = lower_cells
    cells[1::2] = upper_cells
    return Mesh(vertices, cells, domain_volume=size ** 2)


def unit_square_mesh(n: int) -> Mesh:
    return square_mesh(n)


def refine_uniform(m: Mesh) -> Mesh:
    """Red refinement: every triangle split into four through its edge midpoints"""
    if m.dim != 2:
        raise MeshError("uniform refinement is implemented for triangles only")
    edges = m.edges
    midpoints = 0.5 * (m.vertices[edges[:, 0]] + m.vertices[edges[:, 1]])
    vertices = np.vstack([m.vertices, midpoints])

    nv = m.num_vertices
    v0, v1, v2 = m.cells.T
    # local edge order (0,1), (0,2), (1,2)
    m01, m02, m12 = (nv + m.cell_edges[:, k] for k in range(3))
    children = np.stack([
        np.column_stack([v0, m01, m02]),
        np.column_stack([m01, v1, m12]),
        np.column_stack([m02, m12, v2]),
        np.column_stack([m01, m12, m02]),
    ], axis=1).reshape(-1, 3)
    refined = Mesh(vertices, children, domain_volume=m.domain_volume)
    logger.debug(f"Refined mesh: {m.num_cells} -> {refined.num_cells} cells")
    return refined


def refine(m: Mesh, levels: int) -> List[Mesh]:
    """The family m, refine_uniform(m), ... with `levels` members"""
    if levels < 1:
        raise MeshError("levels must be at least 1")
    family = [m]
    for _ in range(levels - 1):
        family.append(refine_uniform(family[-1]))
    return family


def mesh_stats(m: Mesh) -> Dict[str, Any]:
    return {
        'vertices': m.num_vertices,
        'cells': m.num_cells,
        'boundary_vertices': int(m.boundary_vertex_flags.sum()),
        'h': m.h,
        'gamma0': m.gamma0,
        'volume': m.total_volume,
        'max_patch_ratio': float(m.patch_volume_ratios.max()),
        'max_patch_multiplicity': int(m.patch_multiplicity.max())
    }
