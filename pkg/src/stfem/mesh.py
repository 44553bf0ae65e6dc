"""Simplicial meshes of the space-time cylinder ``(0,1)^d x (0,T)``.

Vertices carry coordinates ``(x_1, ..., x_d, t)`` so time is always the last
axis.  Each simplex is stored as an *ordered* vertex tuple together with a
bisection tag; the order and tag together define the refinement edge
(Maubach's tagged bisection, which reduces to newest-vertex bisection on
triangles).  Structured meshes use the Kuhn subdivision of the unit cube,
for which tagged bisection stays conforming.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "CorruptMeshError",
    "FaceTag",
    "SpaceTimeMesh",
    "build_structured_mesh",
    "refine",
    "refine_uniformly",
    "mesh_size",
    "write_vtk",
]

_COORD_TOL = 1e-12


class CorruptMeshError(ValueError):
    """Raised for degenerate or inconsistent simplices."""


class FaceTag(enum.IntEnum):
    Interior = 0
    SigmaLateral = 1
    SigmaZero = 2
    SigmaT = 3


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SpaceTimeMesh:
    """Immutable conforming simplicial mesh of ``Q = (0,1)^d x (0,T)``.

    Attributes
    ----------
    spatial_dim : int
        ``d`` in {1, 2}; simplices have ``d + 2`` vertices.
    final_time : float
    vertices : ndarray, shape (Nv, d + 1)
    simplices : ndarray, shape (Ne, d + 2)
        Ordered vertex tuples; the refinement edge is ``(s[0], s[tag])``.
    tags : ndarray, shape (Ne,)
        Bisection tags in ``1..d+1``.
    parent : ndarray, shape (Ne,)
        Index of the element of the previous mesh this element descends
        from (identity for freshly generated meshes).
    """

    spatial_dim: int
    final_time: float
    vertices: np.ndarray
    simplices: np.ndarray
    tags: np.ndarray
    parent: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.spatial_dim not in (1, 2):
            raise ValueError(f"spatial_dim must be 1 or 2, got {self.spatial_dim}")
        D = self.spatial_dim + 1
        object.__setattr__(self, "vertices", _frozen(self.vertices, float))
        object.__setattr__(self, "simplices", _frozen(self.simplices, np.int64))
        object.__setattr__(self, "tags", _frozen(self.tags, np.int64))
        if self.parent is None:
            object.__setattr__(self, "parent", _frozen(np.arange(len(self.simplices)), np.int64))
        else:
            object.__setattr__(self, "parent", _frozen(self.parent, np.int64))
        if self.vertices.ndim != 2 or self.vertices.shape[1] != D:
            raise CorruptMeshError("vertex array has wrong shape")
        if self.simplices.ndim != 2 or self.simplices.shape[1] != D + 1:
            raise CorruptMeshError("simplex array has wrong shape")
        small = np.abs(self.signed_volumes) <= 1e-13 * self.diameters ** self.dim
        if np.any(small):
            raise CorruptMeshError(f"degenerate simplex {int(np.flatnonzero(small)[0])}")

    # -- sizes -------------------------------------------------------------
    @property
    def dim(self) -> int:
        """Dimension of the space-time simplices, ``d + 1``."""
        return self.spatial_dim + 1

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.simplices)

    # -- geometry ----------------------------------------------------------
    @cached_property
    def jacobians(self) -> np.ndarray:
        """Affine map Jacobians ``J[e]`` with columns ``v_i - v_0``."""
        P = self.vertices[self.simplices]
        return np.transpose(P[:, 1:, :] - P[:, :1, :], (0, 2, 1))

    @cached_property
    def signed_volumes(self) -> np.ndarray:
        return np.linalg.det(self.jacobians) / math.factorial(self.dim)

    @cached_property
    def volumes(self) -> np.ndarray:
        return np.abs(self.signed_volumes)

    @cached_property
    def diameters(self) -> np.ndarray:
        """Element diameters ``h_K`` (longest edge)."""
        P = self.vertices[self.simplices]
        h = np.zeros(len(P))
        for i, j in itertools.combinations(range(self.dim + 1), 2):
            h = np.maximum(h, np.linalg.norm(P[:, i] - P[:, j], axis=1))
        return h

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.simplices].mean(axis=1)

    # -- topology ----------------------------------------------------------
    @cached_property
    def _face_data(self):
        D = self.dim
        local = [tuple(i for i in range(D + 1) if i != j) for j in range(D + 1)]
        all_faces = np.sort(self.simplices[:, local].reshape(-1, D), axis=1)
        faces, inverse, counts = np.unique(
            all_faces, axis=0, return_inverse=True, return_counts=True
        )
        inverse = inverse.ravel()
        if counts.max(initial=0) > 2:
            raise CorruptMeshError("a face is shared by more than two simplices")
        owner_elem = np.repeat(np.arange(self.n_elements), D + 1)
        order = np.argsort(inverse, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        owners = np.full((len(faces), 2), -1, dtype=np.int64)
        owners[:, 0] = owner_elem[order[starts]]
        two = counts == 2
        owners[two, 1] = owner_elem[order[starts[two] + 1]]
        return faces, owners

    @property
    def faces(self) -> np.ndarray:
        """Unique faces as sorted vertex tuples, shape (Nf, d + 1)."""
        return self._face_data[0]

    @property
    def face_owners(self) -> np.ndarray:
        """Adjacent elements per face; second column is -1 on the boundary."""
        return self._face_data[1]

    @cached_property
    def face_tags(self) -> np.ndarray:
        faces, owners = self._face_data
        t = self.vertices[faces, -1]
        tags = np.full(len(faces), FaceTag.Interior, dtype=np.int64)
        bnd = owners[:, 1] < 0
        at0 = np.all(np.abs(t) <= _COORD_TOL, axis=1)
        atT = np.all(np.abs(t - self.final_time) <= _COORD_TOL * max(1.0, self.final_time), axis=1)
        tags[bnd] = FaceTag.SigmaLateral
        tags[bnd & at0] = FaceTag.SigmaZero
        tags[bnd & atT] = FaceTag.SigmaT
        tags.flags.writeable = False
        return tags

    def boundary_faces(self, tag: FaceTag) -> np.ndarray:
        return np.flatnonzero(self.face_tags == tag)

    def on_lateral(self, points: np.ndarray) -> np.ndarray:
        x = np.asarray(points)[..., : self.spatial_dim]
        return np.any((np.abs(x) <= _COORD_TOL) | (np.abs(x - 1.0) <= _COORD_TOL), axis=-1)

    def at_time(self, points: np.ndarray, t: float) -> np.ndarray:
        return np.abs(np.asarray(points)[..., -1] - t) <= _COORD_TOL * max(1.0, self.final_time)

    def refinement_edges(self) -> np.ndarray:
        """Refinement edge ``(s[0], s[tag])`` of every simplex."""
        idx = np.arange(self.n_elements)
        return np.stack([self.simplices[:, 0], self.simplices[idx, self.tags]], axis=1)


def build_structured_mesh(d: int, n: int, T: float = 1.0) -> SpaceTimeMesh:
    """Kuhn-subdivided tensor mesh of ``(0,1)^d x (0,T)`` with ``n`` cells per axis.

    Each of the ``n^(d+1)`` boxes is split into ``(d+1)!`` simplices along
    its main diagonal, so ``d=1`` gives ``2 n^2`` triangles and ``d=2`` gives
    ``6 n^3`` tetrahedra.
    """
    if d not in (1, 2):
        raise ValueError(f"spatial dimension must be 1 or 2, got {d}")
    if int(n) != n or n < 1:
        raise ValueError(f"need n >= 1 subdivisions, got {n}")
    if not T > 0:
        raise ValueError(f"final time must be positive, got {T}")
    D = d + 1
    n = int(n)
    axes = [np.arange(n + 1) / n] * d + [np.arange(n + 1) * (T / n)]
    grid = np.meshgrid(*axes, indexing="ij")
    vertices = np.stack([g.ravel(order="F") for g in grid], axis=1)
    strides = (n + 1) ** np.arange(D)

    corners = np.stack(
        np.meshgrid(*[np.arange(n)] * D, indexing="ij"), axis=-1
    ).reshape(-1, D)
    corners = corners[np.lexsort(corners.T)]
    cells = []
    for perm in itertools.permutations(range(D)):
        path = [np.zeros(D, dtype=np.int64)]
        for axis in perm:
            step = path[-1].copy()
            step[axis] += 1
            path.append(step)
        offs = np.array([p @ strides for p in path])
        cells.append(corners @ strides)
        cells[-1] = cells[-1][:, None] + offs[None, :]
    simplices = np.stack(cells, axis=1).reshape(-1, D + 1)
    tags = np.full(len(simplices), D, dtype=np.int64)
    return SpaceTimeMesh(d, float(T), vertices, simplices, tags)


def mesh_size(mesh: SpaceTimeMesh) -> float:
    """Global mesh size ``h = max_K h_K``; per-element values are ``mesh.diameters``."""
    if mesh.n_elements == 0:
        raise ValueError("empty mesh")
    return float(mesh.diameters.max())


def _edge_keys(a, b, base):
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    return lo * base + hi


def refine(mesh: SpaceTimeMesh, marked: Iterable[int]) -> SpaceTimeMesh:
    """Bisect every marked simplex at least once and restore conformity.

    Closure follows the marked-edge rule: whenever an element contains an
    edge scheduled for bisection, its own refinement edge is scheduled too.
    Rounds of bisection repeat until no scheduled edge is left.  ``parent``
    of the returned mesh points into ``mesh``.
    """
    marked = np.unique(np.fromiter((int(m) for m in marked), dtype=np.int64))
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.n_elements:
        raise IndexError("marked element index out of range")

    D = mesh.dim
    verts = [mesh.vertices]
    n_verts = mesh.n_vertices
    elems = mesh.simplices.copy()
    tags = mesh.tags.copy()
    lineage = np.arange(mesh.n_elements)
    base = np.int64(1) << np.int64(31)
    pairs = list(itertools.combinations(range(D + 1), 2))

    # edge key -> midpoint vertex, shared across rounds
    mid_keys = np.empty(0, dtype=np.int64)
    mid_ids = np.empty(0, dtype=np.int64)
    pending = np.unique(_edge_keys(elems[marked, 0], elems[marked, tags[marked]], base))

    while True:
        rows = np.arange(len(elems))
        ref_key = _edge_keys(elems[:, 0], elems[rows, tags], base)
        all_keys = np.stack(
            [_edge_keys(elems[:, i], elems[:, j], base) for i, j in pairs], axis=1
        )
        # an edge stays scheduled until no element contains it any more
        pending = np.intersect1d(pending, all_keys)
        if pending.size == 0:
            break
        while True:
            touched = np.isin(all_keys, pending).any(axis=1)
            need = touched & ~np.isin(ref_key, pending)
            if not need.any():
                break
            pending = np.union1d(pending, ref_key[need])

        bis = np.isin(ref_key, pending)
        keys, inv = np.unique(ref_key[bis], return_inverse=True)
        ids = np.empty(len(keys), dtype=np.int64)
        seen = np.isin(keys, mid_keys)
        ids[seen] = mid_ids[np.searchsorted(mid_keys, keys[seen])]
        fresh = keys[~seen]
        coords = np.concatenate(verts)
        verts.append(0.5 * (coords[fresh // base] + coords[fresh % base]))
        ids[~seen] = n_verts + np.arange(len(fresh))
        n_verts += len(fresh)
        mid_keys = np.concatenate([mid_keys, fresh])
        mid_ids = np.concatenate([mid_ids, ids[~seen]])
        order = np.argsort(mid_keys)
        mid_keys, mid_ids = mid_keys[order], mid_ids[order]
        mid = ids[inv.ravel()]

        ext = np.concatenate([elems[bis], mid[:, None]], axis=1)
        btags = tags[bis]
        child1 = np.empty((bis.sum(), D + 1), dtype=np.int64)
        child2 = np.empty_like(child1)
        for k in range(1, D + 1):
            sel = btags == k
            rest = list(range(k + 1, D + 1))
            child1[sel] = ext[sel][:, list(range(k)) + [D + 1] + rest]
            child2[sel] = ext[sel][:, list(range(1, k + 1)) + [D + 1] + rest]
        ctag = np.where(btags > 1, btags - 1, D)

        # children replace their parent in place: keeps ordering deterministic
        counts = np.where(bis, 2, 1)
        out_pos = np.concatenate([[0], np.cumsum(counts)[:-1]])
        new_elems = np.empty((counts.sum(), D + 1), dtype=np.int64)
        new_tags = np.empty(counts.sum(), dtype=np.int64)
        new_lineage = np.repeat(lineage, counts)
        keep = ~bis
        new_elems[out_pos[keep]] = elems[keep]
        new_tags[out_pos[keep]] = tags[keep]
        new_elems[out_pos[bis]] = child1
        new_elems[out_pos[bis] + 1] = child2
        new_tags[out_pos[bis]] = ctag
        new_tags[out_pos[bis] + 1] = ctag
        elems, tags, lineage = new_elems, new_tags, new_lineage

    return SpaceTimeMesh(
        mesh.spatial_dim, mesh.final_time, np.concatenate(verts), elems, tags, lineage
    )


def refine_uniformly(mesh: SpaceTimeMesh, times: int = 1) -> SpaceTimeMesh:
    """``times`` full uniform refinements; each is ``d + 1`` bisection generations.

    One pass halves every edge and multiplies the element count by ``2**(d+1)``.
    """
    for _ in range(times * mesh.dim):
        mesh = refine(mesh, np.arange(mesh.n_elements))
    return mesh


_VTK_CELL = {2: 5, 3: 10}


def write_vtk(
    path,
    mesh: SpaceTimeMesh,
    point_data: Mapping[str, np.ndarray] | None = None,
    cell_data: Mapping[str, np.ndarray] | None = None,
    title: str = "space-time mesh",
) -> Path:
    """Write a legacy ASCII VTK unstructured grid (triangles: type 5, tets: type 10)."""
    path = Path(path)
    P = np.zeros((mesh.n_vertices, 3))
    P[:, : mesh.dim] = mesh.vertices
    nloc = mesh.dim + 1
    lines = [
        "# vtk DataFile Version 3.0",
        title.replace("\n", " ")[:255],
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_vertices} double",
    ]
    lines += [" ".join(f"{c:.17g}" for c in row) for row in P]
    lines.append(f"CELLS {mesh.n_elements} {mesh.n_elements * (nloc + 1)}")
    lines += [f"{nloc} " + " ".join(map(str, s)) for s in mesh.simplices]
    lines.append(f"CELL_TYPES {mesh.n_elements}")
    lines += [str(_VTK_CELL[mesh.dim])] * mesh.n_elements

    def _block(kind, n, data):
        out = [f"{kind} {n}"]
        for name, values in data.items():
            values = np.asarray(values, dtype=float)
            if values.shape != (n,):
                raise ValueError(f"{kind.lower()} array {name!r} has shape {values.shape}, expected ({n},)")
            out.append(f"SCALARS {name} double 1")
            out.append("LOOKUP_TABLE default")
            out += [f"{v:.17g}" for v in values]
        return out

    if point_data:
        lines += _block("POINT_DATA", mesh.n_vertices, point_data)
    if cell_data:
        lines += _block("CELL_DATA", mesh.n_elements, cell_data)
    path.write_text("\n".join(lines) + "\n")
    return path
