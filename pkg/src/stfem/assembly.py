"""Element matrices of the stabilized space-time bilinear form and the
global block system ``K_h (y_h, p_h) = (0, f_h)``.

Trial functions are indexed by ``j`` (columns), test functions by ``i``
(rows).  With ``lam = 0`` the coupling blocks satisfy ``K_py = -K_yp^T``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .fem import (
    DofMap,
    MeshGeometry,
    ReferenceElement,
    SpaceKind,
    build_dofmap,
    build_reference_element,
    mesh_geometry,
    physical_points,
    simplex_geometry,
)
from .mesh import SpaceTimeMesh, build_structured_mesh, refine

__all__ = [
    "StabilizationMode",
    "StabilizationConfig",
    "ProblemCoefficients",
    "BlockSystem",
    "element_matrix",
    "element_matrices",
    "element_pieces",
    "element_load",
    "assemble_system",
    "inverse_constant",
    "default_theta",
    "stabilization_field",
]

LOAD_QUAD_MIN = 6
_CHUNK = 4096


class StabilizationMode(enum.Enum):
    PerElement = "per_element"
    Global = "global"


@dataclass(frozen=True)
class StabilizationConfig:
    """``lam_K = theta * h_K**2`` per element, or one global value.

    In global mode ``lam`` defaults to ``theta * min_K h_K**2``.
    """

    theta: float = 0.1
    mode: StabilizationMode = StabilizationMode.PerElement
    lam: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", StabilizationMode(self.mode))
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if self.lam is not None and not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam}")

    def field(self, mesh: SpaceTimeMesh) -> np.ndarray:
        return stabilization_field(mesh, self)


def stabilization_field(mesh: SpaceTimeMesh, config: StabilizationConfig) -> np.ndarray:
    if config.mode is StabilizationMode.Global:
        lam = config.theta * mesh.diameters.min() ** 2 if config.lam is None else config.lam
        return np.full(mesh.n_elements, float(lam))
    return config.theta * mesh.diameters**2


@dataclass(frozen=True)
class ProblemCoefficients:
    """Regularization ``varrho`` and diffusion ``nu`` (scalar or one value per element)."""

    varrho: float
    nu: float | np.ndarray = 1.0

    def __post_init__(self):
        if not self.varrho > 0:
            raise ValueError(f"varrho must be positive, got {self.varrho}")
        nu = np.asarray(self.nu, float)
        if nu.size == 0 or np.any(~np.isfinite(nu)) or np.any(nu <= 0):
            raise ValueError("nu must be positive and finite")

    def nu_field(self, n_elements: int) -> np.ndarray:
        nu = np.asarray(self.nu, float)
        if nu.ndim == 0:
            return np.full(n_elements, float(nu))
        if nu.shape != (n_elements,):
            raise ValueError(f"piecewise nu needs {n_elements} values, got {nu.shape}")
        return nu


# -- element level -------------------------------------------------------------
def element_pieces(jac_inv, det, ref: ReferenceElement) -> dict:
    """Elementary local matrices of a batch of affine elements.

    ``M = int phi_i phi_j``, ``Ct = int phi_i d_t phi_j``,
    ``Tt = int d_t phi_i d_t phi_j``, ``Ax = int grad_x phi_i . grad_x phi_j``
    and ``Lt = int d_t phi_i Lap_x phi_j``.
    """
    jac_inv = np.asarray(jac_inv, float)
    t = ref.dim - 1
    w = np.asarray(det, float)[:, None, None]
    Jt = jac_inv[:, :, t]
    Sx = np.einsum("eas,ebs->eab", jac_inv[:, :, :t], jac_inv[:, :, :t])
    out = {
        "M": w * ref.mass[None],
        "Ct": w * np.einsum("ea,aij->eij", Jt, ref.convection),
        "Tt": w * np.einsum("ea,eb,abij->eij", Jt, Jt, ref.stiffness),
        "Ax": w * np.einsum("eab,abij->eij", Sx, ref.stiffness),
    }
    if ref.degree > 1:
        out["Lt"] = w * np.einsum("eab,ec,abcij->eij", Sx, Jt, ref.hessian_gradient)
    else:
        out["Lt"] = np.zeros_like(out["M"])
    return out


def element_matrices(jac_inv, det, ref: ReferenceElement, varrho, nu, lam):
    """Local blocks ``(yy, yp, py, pp)`` for a batch of affine elements.

    ``jac_inv`` has shape ``(ne, D, D)``; ``det`` is ``|det J|``; ``nu`` and
    ``lam`` are per element.  All terms are polynomial on affine simplices,
    so they are exact given the reference tensors.
    """
    det = np.asarray(det, float)
    nu = np.broadcast_to(np.asarray(nu, float), det.shape)[:, None, None]
    lam = np.broadcast_to(np.asarray(lam, float), det.shape)
    if np.any(lam < 0):
        raise ValueError("stabilization parameter must be nonnegative")
    lam = lam[:, None, None]
    e = element_pieces(jac_inv, det, ref)
    CtT = np.swapaxes(e["Ct"], 1, 2)
    yy = varrho * (e["Ct"] + lam * e["Tt"] + nu * e["Ax"] - lam * nu * e["Lt"])
    yp = e["M"] + lam * CtT
    py = -e["M"] + lam * CtT
    pp = -e["Ct"] + lam * e["Tt"] + nu * e["Ax"] + lam * nu * e["Lt"]
    return yy, yp, py, pp


def element_matrix(geometry, ref: ReferenceElement, coeffs: ProblemCoefficients, lam_K: float):
    """Local blocks for one element given ``geometry = (J, J^{-T}, volume)``.

    ``nu`` must be scalar here (or a length-one array).
    """
    if lam_K < 0:
        raise ValueError("stabilization parameter must be nonnegative")
    J, JinvT, vol = geometry
    if not vol > 0:
        raise ValueError("element volume must be positive")
    det = vol * ref.volume**-1
    nu = float(np.ravel(coeffs.nu)[0])
    blocks = element_matrices(JinvT.T[None], np.array([det]), ref, coeffs.varrho, nu, lam_K)
    return tuple(b[0] for b in blocks)


def _load_rule(ref_dim: int, k: int):
    return build_reference_element(ref_dim, k, max(2 * k, LOAD_QUAD_MIN))


def element_loads(geo: MeshGeometry, elems, k: int, target, lam) -> np.ndarray:
    """Adjoint-test load ``-int_K y_d (psi_i - lam d_t psi_i)`` for a batch of elements."""
    D = geo.jac.shape[1]
    ref = _load_rule(D, k)
    X = physical_points(geo, elems, ref.qpoints)
    yd = np.broadcast_to(np.asarray(target(X), float), X.shape[:-1])
    dt_phi = np.einsum("ea,qia->eqi", geo.jac_inv[elems][:, :, D - 1], ref.dphi)
    test = ref.phi[None] - np.asarray(lam)[:, None, None] * dt_phi
    return -np.einsum("q,e,eq,eqi->ei", ref.qweights, geo.det[elems], yd, test)


def element_load(geometry, ref: ReferenceElement, target, lam_K: float, origin=None) -> np.ndarray:
    """Adjoint-test load of one element with ``geometry = (J, J^{-T}, volume)``.

    ``origin`` is the element's first vertex (defaults to the coordinate
    origin); the state-test part of the load is identically zero.
    """
    if lam_K < 0:
        raise ValueError("stabilization parameter must be nonnegative")
    J, JinvT, vol = geometry
    origin = np.zeros(ref.dim) if origin is None else np.asarray(origin, float)
    geo = MeshGeometry(J[None], JinvT.T[None], np.array([vol / ref.volume]), origin[None])
    return element_loads(geo, np.array([0]), ref.degree, target, np.array([float(lam_K)]))[0]


# -- inverse inequality constant ------------------------------------------------
def _element_inverse_ratio(jac_inv, det, h, ref: ReferenceElement) -> np.ndarray:
    """``max_w h_K ||Lap_x w|| / ||grad_x w||`` over ``P_k(K)`` for each element."""
    D = ref.dim
    d = D - 1
    out = np.zeros(len(det))
    for e in range(len(det)):
        Sx = jac_inv[e][:, :d] @ jac_inv[e][:, :d].T
        G = det[e] * np.einsum("ab,abij->ij", Sx, ref.stiffness)
        lap = np.einsum("qbjm,jm->qb", ref.d2phi, Sx)
        L = det[e] * np.einsum("q,qi,qj->ij", ref.qweights, lap, lap)
        gv, gV = np.linalg.eigh(G)
        keep = gv > 1e-12 * gv.max()
        W = gV[:, keep] / np.sqrt(gv[keep])
        mu = np.linalg.eigvalsh(W.T @ L @ W).max()
        out[e] = h[e] * np.sqrt(max(mu, 0.0))
    return out


@lru_cache(maxsize=None)
def inverse_constant(d: int, k: int, refinements: int = 3) -> float:
    """Numerical ``c_inv`` for ``||Lap_x w||_K <= c_inv h_K^-1 ||grad_x w||_K``.

    Maximized over all elements of a Kuhn cube mesh and its first uniform
    bisection generations, which cover the shape classes bisection produces.
    """
    if k == 1:
        return 0.0
    ref = build_reference_element(d + 1, k)
    mesh = build_structured_mesh(d, 1)
    best = 0.0
    for _ in range(refinements + 1):
        geo = mesh_geometry(mesh)
        best = max(best, _element_inverse_ratio(geo.jac_inv, geo.det, mesh.diameters, ref).max())
        mesh = refine(mesh, range(mesh.n_elements))
    return float(best)


def default_theta(d: int, k: int) -> float:
    """``0.1`` for ``k = 1``; ``0.9 c_inv^-2`` for higher degrees."""
    if k == 1:
        return 0.1
    return 0.9 / inverse_constant(d, k) ** 2


# -- global system -------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class BlockSystem:
    """Free-dof block system ``[[K_yy, K_yp], [K_py, K_pp]] x = (0, f)``.

    ``matrix`` is CSR of size ``n_state + n_adjoint``; ``state_dofs`` and
    ``adjoint_dofs`` are the global (unconstrained) indices of the free
    unknowns in each block.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    n_state: int
    n_adjoint: int
    state_map: DofMap
    adjoint_map: DofMap
    coefficients: ProblemCoefficients
    lam: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def mesh(self) -> SpaceTimeMesh:
        return self.state_map.mesh

    @property
    def state_dofs(self) -> np.ndarray:
        return self.state_map.free

    @property
    def adjoint_dofs(self) -> np.ndarray:
        return self.adjoint_map.free

    def blocks(self):
        """``(K11, K12, K21, K22)`` as CSR matrices."""
        n = self.n_state
        K = self.matrix
        return (K[:n, :n].tocsr(), K[:n, n:].tocsr(), K[n:, :n].tocsr(), K[n:, n:].tocsr())

    def split(self, x: np.ndarray):
        """Expand a free-dof solution vector to full nodal vectors ``(y, p)``."""
        y = np.zeros(self.state_map.n_dofs)
        p = np.zeros(self.adjoint_map.n_dofs)
        y[self.state_dofs] = x[: self.n_state]
        p[self.adjoint_dofs] = x[self.n_state:]
        return y, p

    def pack(self, y: np.ndarray, p: np.ndarray) -> np.ndarray:
        return np.concatenate([np.asarray(y)[self.state_dofs], np.asarray(p)[self.adjoint_dofs]])


def _free_index(dm: DofMap) -> np.ndarray:
    new = np.full(dm.n_dofs, -1, dtype=np.int64)
    new[dm.free] = np.arange(dm.n_free)
    return new


def _accumulate(keys, vals, nr: int, nc: int) -> sp.csr_matrix:
    """CSR from flat keys ``row * nc + col``; duplicates are summed in element order.

    A stable sort keeps contributions to each entry in traversal order, so
    identical inputs give bit-identical sums (and exactly opposite blocks
    stay exactly opposite).
    """
    order = np.argsort(keys, kind="stable")
    key = keys[order]
    v = vals[order]
    del order
    if key.size == 0:
        return sp.csr_matrix((nr, nc))
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    data = np.add.reduceat(v, starts)
    uk = key[starts]
    K = sp.csr_matrix((data, uk % nc, np.searchsorted(uk // nc, np.arange(nr + 1))), shape=(nr, nc))
    K.has_sorted_indices = True
    return K


def assemble_system(
    mesh: SpaceTimeMesh,
    dofmaps,
    coeffs: ProblemCoefficients,
    stab: StabilizationConfig,
    target=None,
    lam: np.ndarray | None = None,
) -> BlockSystem:
    """Assemble ``K_h`` and ``f_h`` on the free degrees of freedom.

    ``dofmaps`` is ``(state_map, adjoint_map)`` or a polynomial degree.
    ``target`` is a callable ``y_d(points)``; ``None`` means ``y_d = 0``.
    ``lam`` overrides the per-element stabilization field.
    """
    if isinstance(dofmaps, (int, np.integer)):
        dofmaps = (build_dofmap(mesh, int(dofmaps), SpaceKind.StateY0h),
                   build_dofmap(mesh, int(dofmaps), SpaceKind.AdjointPTh))
    ymap, pmap = dofmaps
    if ymap.mesh is not mesh or pmap.mesh is not mesh:
        raise ValueError("dof maps were built for a different mesh")
    if ymap.degree != pmap.degree:
        raise ValueError("state and adjoint maps must share the polynomial degree")
    if ymap.kind is not SpaceKind.StateY0h or pmap.kind is not SpaceKind.AdjointPTh:
        raise ValueError("expected (state, adjoint) dof maps")
    k = ymap.degree
    ref = build_reference_element(mesh.dim, k)
    geo = mesh_geometry(mesh)
    lam = stabilization_field(mesh, stab) if lam is None else np.asarray(lam, float)
    if lam.shape != (mesh.n_elements,):
        raise ValueError("lam must have one value per element")
    nu = coeffs.nu_field(mesh.n_elements)
    ny, npd = ymap.n_dofs, pmap.n_dofs
    nb = ref.n_basis

    # per block: flat free-index keys and values, filtered chunk by chunk to bound memory
    fmap = (_free_index(ymap), _free_index(pmap))
    nfree = (ymap.n_free, pmap.n_free)
    pairs = ((0, 0), (0, 1), (1, 0), (1, 1))
    keys = [[] for _ in pairs]
    vals = [[] for _ in pairs]
    f = np.zeros(npd)
    for start in range(0, mesh.n_elements, _CHUNK):
        el = np.arange(start, min(start + _CHUNK, mesh.n_elements))
        blocks = element_matrices(geo.jac_inv[el], geo.det[el], ref, coeffs.varrho, nu[el], lam[el])
        local = (fmap[0][ymap.cell_dofs[el]], fmap[1][pmap.cell_dofs[el]])
        for b, (i, j) in enumerate(pairs):
            r = np.repeat(local[i], nb, axis=1).ravel()
            c = np.tile(local[j], (1, nb)).ravel()
            keep = (r >= 0) & (c >= 0)
            keys[b].append(r[keep] * nfree[j] + c[keep])
            vals[b].append(blocks[b].ravel()[keep])
        if target is not None:
            np.add.at(f, pmap.cell_dofs[el], element_loads(geo, el, k, target, lam[el]))

    out = []
    for b, (i, j) in enumerate(pairs):
        kb, vb = np.concatenate(keys[b]), np.concatenate(vals[b])
        keys[b] = vals[b] = None
        out.append(_accumulate(kb, vb, nfree[i], nfree[j]))
        del kb, vb
    Kf = sp.vstack([sp.hstack(out[:2], format="csr"), sp.hstack(out[2:], format="csr")], format="csr")
    Kf.sort_indices()
    rhs = np.concatenate([np.zeros(ymap.n_free), f[pmap.free]])
    return BlockSystem(Kf, rhs, ymap.n_free, pmap.n_free, ymap, pmap, coeffs, lam)
