"""Lagrange elements on simplices, quadrature, geometry and degree-of-freedom maps."""
from __future__ import annotations

import enum
import itertools
import math
import weakref
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import roots_jacobi

from .mesh import CorruptMeshError, SpaceTimeMesh

__all__ = [
    "SpaceKind",
    "ReferenceElement",
    "DofMap",
    "DiscreteFunction",
    "Tabulation",
    "simplex_quadrature",
    "build_reference_element",
    "build_dofmap",
    "element_geometry",
    "simplex_geometry",
    "mesh_geometry",
    "tabulate",
    "difference",
    "interpolate",
]


def simplex_quadrature(dim: int, degree: int):
    """Collapsed Gauss-Jacobi rule on the unit reference simplex.

    Exact for polynomials of total degree ``degree``; all weights are
    positive and sum to ``1/dim!``.
    """
    if dim < 1:
        raise ValueError("dim must be positive")
    n = max(1, math.ceil((degree + 1) / 2))
    rules = []
    for j in range(dim):
        alpha = dim - 1 - j
        x, w = roots_jacobi(n, alpha, 0.0)
        rules.append(((1.0 + x) / 2.0, w / 2.0 ** (alpha + 1)))
    us = np.stack(np.meshgrid(*[r[0] for r in rules], indexing="ij"), -1).reshape(-1, dim)
    ws = np.prod(np.stack(np.meshgrid(*[r[1] for r in rules], indexing="ij"), -1).reshape(-1, dim), axis=1)
    pts = np.empty_like(us)
    scale = np.ones(len(us))
    for j in range(dim):
        pts[:, j] = us[:, j] * scale
        scale = scale * (1.0 - us[:, j])
    return pts, ws


def _lattice_nodes(dim: int, k: int) -> np.ndarray:
    """Equispaced Lagrange nodes, vertices first then edge/face/cell interiors."""
    multi = [a for a in itertools.product(range(k + 1), repeat=dim + 1) if sum(a) == k]
    multi.sort(key=lambda a: (sum(1 for v in a if v), [-v for v in a]))
    verts = np.vstack([np.zeros(dim), np.eye(dim)])
    return np.array([np.asarray(a, float) @ verts / k for a in multi])


def _exponents(dim: int, k: int):
    return [e for e in itertools.product(range(k + 1), repeat=dim) if sum(e) <= k]


class ReferenceElement:
    """Nodal ``P_k`` element on the reference simplex with a tabulated quadrature.

    Attributes
    ----------
    dim, degree : int
    nodes : ndarray, shape (nb, dim)
    qpoints, qweights : ndarray
    phi, dphi, d2phi : ndarray
        Basis values ``(nq, nb)``, gradients ``(nq, nb, dim)`` and Hessians
        ``(nq, nb, dim, dim)`` at the quadrature points.
    """

    def __init__(self, dim: int, degree: int, quad_degree: int | None = None):
        if dim not in (2, 3):
            raise ValueError(f"reference simplex dimension must be 2 or 3, got {dim}")
        if degree not in (1, 2, 3):
            raise ValueError(f"polynomial degree must be 1, 2 or 3, got {degree}")
        if quad_degree is None:
            quad_degree = 2 * degree
        if quad_degree < 2 * degree:
            raise ValueError(f"quadrature degree {quad_degree} below 2k = {2 * degree}")
        self.dim = dim
        self.degree = degree
        self.quad_degree = quad_degree
        self.nodes = _lattice_nodes(dim, degree)
        self._exp = np.array(_exponents(dim, degree))
        V = self._monomials(self.nodes)
        self._coef = np.linalg.inv(V)
        self.qpoints, self.qweights = simplex_quadrature(dim, quad_degree)
        self._tables = {}
        self.phi = self.values(self.qpoints)
        self.dphi = self.gradients(self.qpoints)
        self.d2phi = self.hessians(self.qpoints)

    @property
    def n_basis(self) -> int:
        return len(self.nodes)

    @property
    def volume(self) -> float:
        return 1.0 / math.factorial(self.dim)

    def _monomials(self, pts, deriv=()):
        pts = np.asarray(pts, float)
        e = self._exp.copy()
        c = np.ones(len(e))
        for a in deriv:
            c = c * e[:, a]
            e[:, a] = np.maximum(e[:, a] - 1, 0)
        out = np.ones(pts.shape[:-1] + (len(e),))
        for a in range(self.dim):
            out = out * pts[..., a, None] ** e[:, a]
        return out * c

    def values(self, pts) -> np.ndarray:
        return self._monomials(pts) @ self._coef

    def gradients(self, pts) -> np.ndarray:
        return np.stack([self._monomials(pts, (a,)) @ self._coef for a in range(self.dim)], axis=-1)

    def shared_tables(self, pts):
        """Cached ``(values, gradients, hessians)`` at a point set; hessians are ``None`` for k=1."""
        pts = np.ascontiguousarray(pts, dtype=float)
        key = (pts.shape, pts.tobytes())
        hit = self._tables.get(key)
        if hit is None:
            hit = (self.values(pts), self.gradients(pts), self.hessians(pts) if self.degree > 1 else None)
            if len(self._tables) > 32:
                self._tables.clear()
            self._tables[key] = hit
        return hit

    def hessians(self, pts) -> np.ndarray:
        D = self.dim
        rows = [
            np.stack([self._monomials(pts, (a, b)) @ self._coef for b in range(D)], axis=-1)
            for a in range(D)
        ]
        return np.stack(rows, axis=-2)

    # reference integrals used for exact affine element matrices
    @cached_property
    def mass(self) -> np.ndarray:
        """``int phi_i phi_j``, symmetrized so transposes match bit for bit."""
        M = np.einsum("q,qi,qj->ij", self.qweights, self.phi, self.phi)
        return 0.5 * (M + M.T)

    @cached_property
    def convection(self) -> np.ndarray:
        """``C[a, i, j] = int phi_i d_a phi_j``."""
        return np.einsum("q,qi,qja->aij", self.qweights, self.phi, self.dphi)

    @cached_property
    def stiffness(self) -> np.ndarray:
        """``S[a, b, i, j] = int d_a phi_i d_b phi_j``."""
        S = np.einsum("q,qia,qjb->abij", self.qweights, self.dphi, self.dphi)
        return 0.5 * (S + S.transpose(1, 0, 3, 2))

    @cached_property
    def hessian_gradient(self) -> np.ndarray:
        """``H[a, b, c, i, j] = int d_c phi_i d_a d_b phi_j``."""
        return np.einsum("q,qic,qjab->abcij", self.qweights, self.dphi, self.d2phi)

    @cached_property
    def moments(self) -> np.ndarray:
        """``int phi_i`` and ``int d_a phi_i`` stacked as ``(dim + 1, nb)``."""
        return np.vstack([self.qweights @ self.phi, np.einsum("q,qia->ai", self.qweights, self.dphi)])


_REF_CACHE: dict = {}


def build_reference_element(dim: int, k: int, quad_degree: int | None = None) -> ReferenceElement:
    key = (dim, k, quad_degree if quad_degree is not None else 2 * k)
    if key not in _REF_CACHE:
        _REF_CACHE[key] = ReferenceElement(dim, k, quad_degree)
    return _REF_CACHE[key]


# -- geometry ------------------------------------------------------------------
def simplex_geometry(coords):
    """Affine data ``(J, J^{-T}, volume)`` for a simplex given by its vertex rows."""
    P = np.asarray(coords, float)
    D = P.shape[1]
    if P.shape != (D + 1, D):
        raise ValueError("need dim + 1 vertices of dimension dim")
    J = (P[1:] - P[0]).T
    det = np.linalg.det(J)
    scale = max(np.max(np.linalg.norm(P[1:] - P[0], axis=1)), 1e-300)
    if abs(det) <= 1e-13 * scale**D:
        raise CorruptMeshError("degenerate simplex: zero volume")
    return J, np.linalg.inv(J).T, abs(det) / math.factorial(D)


def element_geometry(mesh: SpaceTimeMesh, index: int):
    return simplex_geometry(mesh.vertices[mesh.simplices[index]])


@dataclass(frozen=True)
class MeshGeometry:
    jac: np.ndarray
    jac_inv: np.ndarray
    det: np.ndarray
    origin: np.ndarray


_GEOMETRY_CACHE: "weakref.WeakKeyDictionary[SpaceTimeMesh, MeshGeometry]" = weakref.WeakKeyDictionary()


def mesh_geometry(mesh: SpaceTimeMesh) -> MeshGeometry:
    geo = _GEOMETRY_CACHE.get(mesh)
    if geo is None:
        J = mesh.jacobians
        geo = MeshGeometry(J, np.linalg.inv(J), np.abs(np.linalg.det(J)), mesh.vertices[mesh.simplices[:, 0]])
        _GEOMETRY_CACHE[mesh] = geo
    return geo


# -- dof maps ------------------------------------------------------------------
class SpaceKind(enum.Enum):
    StateY0h = "state"
    AdjointPTh = "adjoint"


@dataclass(frozen=True, eq=False)
class DofMap:
    """Continuous ``P_k`` numbering plus the Dirichlet mask of one space.

    Vertex nodes keep the mesh vertex numbers, so ``coefficients[:Nv]`` are
    the vertex values.
    """

    mesh: SpaceTimeMesh
    degree: int
    kind: SpaceKind
    cell_dofs: np.ndarray
    node_coords: np.ndarray
    constrained: np.ndarray

    @property
    def n_dofs(self) -> int:
        return len(self.node_coords)

    @cached_property
    def free(self) -> np.ndarray:
        return np.flatnonzero(~self.constrained)

    @property
    def n_free(self) -> int:
        return int((~self.constrained).sum())

    @property
    def element(self) -> ReferenceElement:
        return build_reference_element(self.mesh.dim, self.degree)


_NUMBERING_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _numbering(mesh: SpaceTimeMesh, k: int):
    hit = _NUMBERING_CACHE.get(mesh, {}).get(k)
    if hit is not None:
        return hit
    ref = build_reference_element(mesh.dim, k)
    D = mesh.dim
    nv = mesh.n_vertices
    geo = mesh_geometry(mesh)
    if k == 1:
        cell_dofs = mesh.simplices.copy()
        coords = mesh.vertices.copy()
    else:
        extra = ref.nodes[D + 1:]
        pts = geo.origin[:, None, :] + np.einsum("eij,qj->eqi", geo.jac, extra)
        flat = pts.reshape(-1, D)
        # nodes are rationals with small denominators; 11 digits merge coincident copies
        _, first, inv = np.unique(np.round(flat, 11), axis=0, return_index=True, return_inverse=True)
        cell_dofs = np.concatenate([mesh.simplices, nv + inv.reshape(len(pts), -1)], axis=1)
        coords = np.vstack([mesh.vertices, flat[first]])
    cell_dofs.flags.writeable = False
    coords.flags.writeable = False
    _NUMBERING_CACHE.setdefault(mesh, {})[k] = (cell_dofs, coords)
    return cell_dofs, coords


def build_dofmap(mesh: SpaceTimeMesh, k: int, space_kind: SpaceKind) -> DofMap:
    """Nodal map for ``Y_0h`` (zero on lateral boundary and ``t=0``) or ``P_Th``
    (zero on lateral boundary and ``t=T``)."""
    space_kind = SpaceKind(space_kind)
    cell_dofs, coords = _numbering(mesh, k)
    t_fixed = 0.0 if space_kind is SpaceKind.StateY0h else mesh.final_time
    constrained = mesh.on_lateral(coords) | mesh.at_time(coords, t_fixed)
    return DofMap(mesh, k, space_kind, cell_dofs, coords, constrained)


# -- fields --------------------------------------------------------------------
@dataclass
class Tabulation:
    """Field data at quadrature points: value, spatial gradient, time
    derivative and spatial Laplacian, leading shape ``(ne, nq)``."""

    value: np.ndarray
    grad_x: np.ndarray
    dt: np.ndarray
    lap_x: np.ndarray

    def __sub__(self, other: "Tabulation") -> "Tabulation":
        return Tabulation(self.value - other.value, self.grad_x - other.grad_x,
                          self.dt - other.dt, self.lap_x - other.lap_x)

    def __mul__(self, c: float) -> "Tabulation":
        return Tabulation(c * self.value, c * self.grad_x, c * self.dt, c * self.lap_x)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class DiscreteFunction:
    """Finite element function given by all nodal values of a dof map."""

    dofmap: DofMap
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, float)
        if c.shape != (self.dofmap.n_dofs,):
            raise ValueError(f"expected {self.dofmap.n_dofs} coefficients, got {c.shape}")
        object.__setattr__(self, "coefficients", c)

    @property
    def mesh(self) -> SpaceTimeMesh:
        return self.dofmap.mesh

    def tabulate(self, elems, ref_pts, geo: MeshGeometry | None = None) -> Tabulation:
        mesh = self.mesh
        geo = geo or mesh_geometry(mesh)
        ref = self.dofmap.element
        d, D = mesh.spatial_dim, mesh.dim
        Jinv = geo.jac_inv[elems]
        u = self.coefficients[self.dofmap.cell_dofs[elems]]
        ref_pts = np.asarray(ref_pts, float)
        ne, nb = u.shape
        if ref_pts.ndim == 2:
            phi, dphi, d2phi = ref.shared_tables(ref_pts)
            nq = len(ref_pts)
            val = u @ phi.T
            gref = (u @ dphi.transpose(1, 0, 2).reshape(nb, -1)).reshape(ne, nq, D)
            href = None if d2phi is None else (u @ d2phi.transpose(1, 0, 2, 3).reshape(nb, -1)).reshape(ne, nq, D * D)
        else:
            phi, dphi = ref.values(ref_pts), ref.gradients(ref_pts)
            nq = ref_pts.shape[1]
            val = np.einsum("eb,eqb->eq", u, phi)
            gref = np.einsum("eb,eqba->eqa", u, dphi)
            href = None
            if ref.degree > 1:
                href = np.einsum("eb,eqbjm->eqjm", u, ref.hessians(ref_pts)).reshape(ne, nq, D * D)
        grad = gref @ Jinv
        if href is None:
            lap = np.zeros((ne, nq))
        else:
            Jx = Jinv[:, :, :d]
            S = (Jx @ Jx.transpose(0, 2, 1)).reshape(ne, D * D, 1)
            lap = (href @ S)[..., 0]
        return Tabulation(val, grad[..., :d], grad[..., d], lap)


@dataclass(frozen=True, eq=False)
class Combination:
    """Linear combination ``sum c_i f_i`` of fields, evaluated lazily."""

    terms: tuple

    def __sub__(self, other):
        return Combination(self.terms + ((-1.0, other),))


def difference(a, b) -> Combination:
    """The field ``a - b``; either side may be discrete, analytic or ``None``."""
    return Combination(((1.0, a), (-1.0, b)))


def tabulate(field, mesh: SpaceTimeMesh, elems, ref_pts, geo: MeshGeometry | None = None) -> Tabulation:
    """Evaluate ``field`` in the elements ``elems`` at reference points.

    ``ref_pts`` is either shared, shape ``(nq, D)``, or per element,
    ``(ne, nq, D)``.  ``field`` is a :class:`DiscreteFunction` or any object
    providing ``value``, ``grad_x``, ``dt`` and ``lap_x`` callables of
    physical points ``(..., D)``; ``None`` means the zero field.
    """
    elems = np.asarray(elems)
    geo = geo or mesh_geometry(mesh)
    if isinstance(field, Combination):
        parts = [c * tabulate(f, mesh, elems, ref_pts, geo) for c, f in field.terms]
        out = parts[0]
        for p in parts[1:]:
            out = Tabulation(out.value + p.value, out.grad_x + p.grad_x, out.dt + p.dt, out.lap_x + p.lap_x)
        return out
    if isinstance(field, DiscreteFunction):
        if field.mesh is not mesh:
            raise ValueError("discrete function lives on a different mesh")
        return field.tabulate(elems, ref_pts, geo)
    X = physical_points(geo, elems, ref_pts)
    if field is None:
        z = np.zeros(X.shape[:-1])
        return Tabulation(z, np.zeros(X.shape[:-1] + (mesh.spatial_dim,)), z, z)
    return Tabulation(field.value(X), field.grad_x(X), field.dt(X), field.lap_x(X))


def physical_points(geo: MeshGeometry, elems, ref_pts) -> np.ndarray:
    ref_pts = np.asarray(ref_pts, float)
    jt = geo.jac[elems].transpose(0, 2, 1)
    return geo.origin[elems][:, None, :] + ref_pts @ jt


def interpolate(func, dofmap: DofMap, *, apply_constraints: bool = True) -> DiscreteFunction:
    """Nodal interpolant of ``func(points) -> values``; constrained nodes are zeroed."""
    vals = np.asarray(func(dofmap.node_coords), float)
    if apply_constraints:
        vals = np.where(dofmap.constrained, 0.0, vals)
    return DiscreteFunction(dofmap, vals)
