"""Error norms, the tracking functional, a residual indicator and Doerfler marking.

Fields passed to these functions may be :class:`~stfem.fem.DiscreteFunction`
objects, closed forms exposing ``value/grad_x/dt/lap_x`` callables,
combinations built with :func:`~stfem.fem.difference`, or ``None`` for zero.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import element_pieces
from .fem import (
    DiscreteFunction,
    build_reference_element,
    mesh_geometry,
    simplex_quadrature,
    tabulate,
)
from .mesh import FaceTag, SpaceTimeMesh

__all__ = [
    "NormParts",
    "ErrorReport",
    "CostReport",
    "norm_h",
    "norm_h_star",
    "l2_norm",
    "norm_matrix",
    "friedrichs_constant",
    "boundedness_constant",
    "cost_functional",
    "residual_indicator",
    "doerfler_mark",
]

DEFAULT_QUAD = 8
_CHUNK = 4096


@dataclass
class NormParts:
    """The six squared constituents of ``||(v, q)||_h``.

    Weights are already applied: ``state_trace_T = varrho ||v(., T)||^2``,
    ``state_dt = varrho sum lam_K ||v_t||_K^2`` and so on.
    """

    state_trace_T: float = 0.0
    state_grad: float = 0.0
    state_dt: float = 0.0
    adjoint_trace_0: float = 0.0
    adjoint_grad: float = 0.0
    adjoint_dt: float = 0.0

    @property
    def squared(self) -> float:
        return sum(getattr(self, f.name) for f in fields(self))

    @property
    def value(self) -> float:
        return math.sqrt(self.squared)


@dataclass
class ErrorReport:
    """Per-level error summary, one CSV row in the driver's report."""

    parts: NormParts = field(default_factory=NormParts)
    l2_y: float | None = None
    l2_p: float | None = None
    l2_u: float | None = None
    J: float | None = None
    eta2: float | None = None

    @property
    def norm_h(self) -> float:
        return self.parts.value

    def as_dict(self) -> dict:
        out = asdict(self.parts)
        out.update(norm_h=self.norm_h, l2_y=self.l2_y, l2_p=self.l2_p, l2_u=self.l2_u, J=self.J, eta2=self.eta2)
        return out


@dataclass
class CostReport:
    tracking: float
    control: float

    @property
    def total(self) -> float:
        return self.tracking + self.control


def _quad(mesh: SpaceTimeMesh, degree: int):
    return simplex_quadrature(mesh.dim, degree)


def _chunks(n):
    for s in range(0, n, _CHUNK):
        yield np.arange(s, min(s + _CHUNK, n))


def _lam_field(mesh, lam) -> np.ndarray:
    lam = np.broadcast_to(np.asarray(lam, float), (mesh.n_elements,))
    if np.any(lam < 0):
        raise ValueError("stabilization field must be nonnegative")
    return lam


def _volume_integrals(mesh, fields_, degree, kernel):
    """Sum over elements of ``int_K kernel(tabs, elems)`` with per-element output."""
    geo = mesh_geometry(mesh)
    pts, wts = _quad(mesh, degree)
    out = None
    for el in _chunks(mesh.n_elements):
        tabs = [tabulate(f, mesh, el, pts, geo) for f in fields_]
        vals = kernel(tabs, el)  # dict name -> (ne, nq)
        part = {k: (v @ wts) * geo.det[el] for k, v in vals.items()}
        if out is None:
            out = {k: np.zeros(mesh.n_elements) for k in part}
        for k, v in part.items():
            out[k][el] = v
    return out


def _face_rule(mesh: SpaceTimeMesh, faces: np.ndarray, degree: int):
    """Physical points and weights of a quadrature on the listed faces."""
    D = mesh.dim
    P = mesh.vertices[mesh.faces[faces]]  # (nf, D, D)
    ref, w = simplex_quadrature(D - 1, degree)
    E = P[:, 1:, :] - P[:, :1, :]
    gram = np.einsum("fia,fja->fij", E, E)
    meas = np.sqrt(np.abs(np.linalg.det(gram)))
    X = P[:, :1, :] + np.einsum("qi,fia->fqa", ref, E)
    return X, meas[:, None] * w[None, :]


def _to_reference(mesh, elems, X):
    geo = mesh_geometry(mesh)
    return np.einsum("eij,eqj->eqi", geo.jac_inv[elems], X - geo.origin[elems][:, None, :])


def _trace_sq(mesh, fld, tag: FaceTag, degree: int) -> float:
    faces = mesh.boundary_faces(tag)
    if fld is None or faces.size == 0:
        return 0.0
    X, W = _face_rule(mesh, faces, degree)
    elems = mesh.face_owners[faces, 0]
    tab = tabulate(fld, mesh, elems, _to_reference(mesh, elems, X))
    return float(np.sum(W * tab.value**2))


def _default_degree(*flds) -> int:
    deg = DEFAULT_QUAD
    for f in flds:
        if isinstance(f, DiscreteFunction):
            deg = max(deg, 2 * f.dofmap.degree)
    return deg


def norm_h(v, q, mesh: SpaceTimeMesh, varrho: float, lam, quad_degree: int | None = None) -> NormParts:
    """Constituents of ``||(v,q)||_h^2 = varrho ||v||_{h,T}^2 + ||q||_{h,0}^2``.

    ``lam`` is a scalar or a per-element stabilization field.
    """
    lam = _lam_field(mesh, lam)
    deg = quad_degree or _default_degree(v, q)

    def kernel(tabs, el):
        tv, tq = tabs
        return {
            "vg": np.sum(tv.grad_x**2, axis=-1),
            "vt": lam[el, None] * tv.dt**2,
            "qg": np.sum(tq.grad_x**2, axis=-1),
            "qt": lam[el, None] * tq.dt**2,
        }

    I = _volume_integrals(mesh, (v, q), deg, kernel)
    return NormParts(
        state_trace_T=varrho * _trace_sq(mesh, v, FaceTag.SigmaT, deg),
        state_grad=varrho * float(I["vg"].sum()),
        state_dt=varrho * float(I["vt"].sum()),
        adjoint_trace_0=_trace_sq(mesh, q, FaceTag.SigmaZero, deg),
        adjoint_grad=float(I["qg"].sum()),
        adjoint_dt=float(I["qt"].sum()),
    )


def norm_h_star(y, p, mesh: SpaceTimeMesh, varrho: float, lam, quad_degree: int | None = None) -> float:
    """``||(y,p)||_{h,*}``: ``||.||_h`` plus Laplacian and weighted L2 terms.

    Requires ``lam > 0`` on every element.
    """
    lam = _lam_field(mesh, lam)
    if np.any(lam <= 0):
        raise ValueError("the star norm needs a strictly positive stabilization field")
    deg = quad_degree or _default_degree(y, p)
    base = norm_h(y, p, mesh, varrho, lam, deg).squared

    def kernel(tabs, el):
        ty, tp = tabs
        lk = lam[el, None]
        return {
            "extra": varrho * lk * ty.lap_x**2
            + ((varrho + 1.0) / lk + lk) * ty.value**2
            + lk * tp.lap_x**2
            + (2.0 / lk + lk) * tp.value**2
        }

    I = _volume_integrals(mesh, (y, p), deg, kernel)
    return math.sqrt(base + float(I["extra"].sum()))


def _trace_mass(mesh, dofmap, tag: FaceTag) -> sp.csr_matrix:
    n = dofmap.n_dofs
    faces = mesh.boundary_faces(tag)
    if faces.size == 0:
        return sp.csr_matrix((n, n))
    k = dofmap.degree
    X, W = _face_rule(mesh, faces, 2 * k)
    elems = mesh.face_owners[faces, 0]
    R = _to_reference(mesh, elems, X)
    ref = build_reference_element(mesh.dim, k)
    phi = ref.values(R.reshape(-1, mesh.dim)).reshape(R.shape[0], R.shape[1], -1)
    loc = np.einsum("fq,fqi,fqj->fij", W, phi, phi)
    dofs = dofmap.cell_dofs[elems]
    nb = dofs.shape[1]
    return sp.coo_matrix((loc.ravel(), (np.repeat(dofs, nb, axis=1).ravel(), np.tile(dofs, (1, nb)).ravel())),
                         shape=(n, n)).tocsr()


def norm_matrix(system) -> sp.csr_matrix:
    """Matrix of ``||(v, q)||_h^2`` on the free dofs of an assembled system.

    ``x @ N @ x`` equals the squared norm of the pair encoded by ``x``, so the
    discrete coercivity constant is the smallest eigenvalue of the pencil
    ``(sym K, N)``.
    """
    mesh = system.mesh
    varrho = system.coefficients.varrho
    geo = mesh_geometry(mesh)
    nu = system.coefficients.nu_field(mesh.n_elements)
    out = []
    for dm, tag, w in ((system.state_map, FaceTag.SigmaT, varrho), (system.adjoint_map, FaceTag.SigmaZero, 1.0)):
        ref = build_reference_element(mesh.dim, dm.degree)
        e = element_pieces(geo.jac_inv, geo.det, ref)
        loc = e["Ax"] + system.lam[:, None, None] * e["Tt"]
        nb = ref.n_basis
        n = dm.n_dofs
        A = sp.coo_matrix((loc.ravel(), (np.repeat(dm.cell_dofs, nb, axis=1).ravel(),
                                         np.tile(dm.cell_dofs, (1, nb)).ravel())), shape=(n, n)).tocsr()
        A = w * (A + _trace_mass(mesh, dm, tag))
        out.append(A[dm.free][:, dm.free])
    return sp.block_diag(out, format="csr")


def friedrichs_constant(system) -> float:
    """Discrete ``c_F`` in ``||w|| <= c_F ||grad_x w||`` on the state space.

    Computed as ``lambda_min^{-1/2}`` of the pencil ``(A_x, M)`` over the free
    state dofs; it approaches ``1 / (sqrt(d) pi)`` under refinement.
    """
    mesh = system.mesh
    dm = system.state_map
    geo = mesh_geometry(mesh)
    ref = build_reference_element(mesh.dim, dm.degree)
    e = element_pieces(geo.jac_inv, geo.det, ref)
    nb = ref.n_basis
    rows = np.repeat(dm.cell_dofs, nb, axis=1).ravel()
    cols = np.tile(dm.cell_dofs, (1, nb)).ravel()
    n = dm.n_dofs
    A, M = (sp.coo_matrix((e[key].ravel(), (rows, cols)), shape=(n, n)).tocsr()[dm.free][:, dm.free]
            for key in ("Ax", "M"))
    if A.shape[0] <= 1500:
        lam_min = float(sla.eigh(A.toarray(), M.toarray(), eigvals_only=True, subset_by_index=(0, 0))[0])
    else:
        lam_min = float(spla.eigsh(A.tocsc(), k=1, M=M.tocsc(), sigma=0.0, which="LM",
                                   return_eigenvectors=False)[0])
    return 1.0 / math.sqrt(lam_min)


def boundedness_constant(varrho: float, lam, c_f: float) -> float:
    """``mu_b = max{4, 1 + lam c_F^2, 3 + 1/varrho, 1 + lam c_F^2 / varrho}^{1/2}``.

    A per-element ``lam`` enters through its maximum.
    """
    lam = float(np.max(lam))
    return math.sqrt(max(4.0, 1.0 + lam * c_f**2, 3.0 + 1.0 / varrho, 1.0 + lam * c_f**2 / varrho))


def l2_norm(f, mesh: SpaceTimeMesh, quad_degree: int | None = None) -> float:
    deg = quad_degree or _default_degree(f)
    I = _volume_integrals(mesh, (f,), deg, lambda tabs, el: {"v": tabs[0].value ** 2})
    return math.sqrt(float(I["v"].sum()))


class _Pointwise:
    """Wrap a plain callable ``f(X)`` as a value-only field."""

    def __init__(self, f, d):
        self.f = f
        self.d = d

    def value(self, X):
        return np.broadcast_to(np.asarray(self.f(X), float), X.shape[:-1])

    def grad_x(self, X):
        return np.zeros(X.shape[:-1] + (self.d,))

    def dt(self, X):
        return np.zeros(X.shape[:-1])

    lap_x = dt


def _as_field(f, mesh):
    if f is None or isinstance(f, DiscreteFunction) or hasattr(f, "lap_x") or hasattr(f, "terms"):
        return f
    return _Pointwise(f, mesh.spatial_dim)


def cost_functional(y_h, u_h, y_d, mesh: SpaceTimeMesh, varrho: float, quad_degree: int | None = None) -> CostReport:
    """``J = 1/2 ||y_h - y_d||^2 + varrho/2 ||u_h||^2`` with both addends reported.

    The default rule has degree ``max(2k, 6)``, the same as the load vector.
    """
    k = max((f.dofmap.degree for f in (y_h, u_h) if isinstance(f, DiscreteFunction)), default=1)
    deg = quad_degree or max(2 * k, 6)
    yd = _as_field(y_d, mesh)
    geo = mesh_geometry(mesh)
    pts, wts = _quad(mesh, deg)
    track = 0.0
    ctrl = 0.0
    for el in _chunks(mesh.n_elements):
        ty = tabulate(_as_field(y_h, mesh), mesh, el, pts, geo).value
        td = tabulate(yd, mesh, el, pts, geo).value
        tu = tabulate(_as_field(u_h, mesh), mesh, el, pts, geo).value
        track += float(((ty - td) ** 2 @ wts) @ geo.det[el])
        ctrl += float((tu**2 @ wts) @ geo.det[el])
    return CostReport(0.5 * track, 0.5 * varrho * ctrl)


# -- a posteriori indicator -----------------------------------------------------
def _face_normals(mesh: SpaceTimeMesh, faces: np.ndarray) -> np.ndarray:
    P = mesh.vertices[mesh.faces[faces]]
    E = P[:, 1:, :] - P[:, :1, :]
    if mesh.dim == 2:
        n = np.stack([-E[:, 0, 1], E[:, 0, 0]], axis=1)
    else:
        n = np.cross(E[:, 0], E[:, 1])
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def residual_indicator(mesh: SpaceTimeMesh, y_h, p_h, y_d, varrho: float, nu=1.0,
                       quad_degree: int | None = None, return_parts: bool = False):
    """Squared element indicators ``eta_K^2 = eta_{K,state}^2 + eta_{K,adjoint}^2``.

    Each part is ``h_K^2 ||R||_K^2 + h_K sum_F ||[nu grad_x w . n_x]||_F^2``
    over interior faces of ``K`` with the strong residuals
    ``R_state = varrho (y_t - nu Lap y) + p`` and
    ``R_adjoint = -p_t - nu Lap p - y + y_d``.
    """
    nu = np.broadcast_to(np.asarray(nu, float), (mesh.n_elements,))
    yd = _as_field(y_d, mesh)
    k = max((f.dofmap.degree for f in (y_h, p_h) if isinstance(f, DiscreteFunction)), default=1)
    deg = quad_degree or max(2 * k, 6)
    h = mesh.diameters

    def kernel(tabs, el):
        ty, tp, td = tabs
        n_ = nu[el, None]
        rs = varrho * (ty.dt - n_ * ty.lap_x) + tp.value
        ra = -tp.dt - n_ * tp.lap_x - ty.value + td.value
        return {"state": rs**2, "adjoint": ra**2}

    I = _volume_integrals(mesh, (y_h, p_h, yd), deg, kernel)
    eta_s = h**2 * I["state"]
    eta_a = h**2 * I["adjoint"]

    interior = np.flatnonzero(mesh.face_owners[:, 1] >= 0)
    for start in range(0, interior.size, 16 * _CHUNK):
        faces = interior[start:start + 16 * _CHUNK]
        X, W = _face_rule(mesh, faces, max(2 * k, 2))
        e0, e1 = mesh.face_owners[faces, 0], mesh.face_owners[faces, 1]
        nx = _face_normals(mesh, faces)[:, : mesh.spatial_dim]
        for fld, acc in ((y_h, eta_s), (p_h, eta_a)):
            if fld is None:
                continue
            g0 = tabulate(fld, mesh, e0, _to_reference(mesh, e0, X)).grad_x * nu[e0, None, None]
            g1 = tabulate(fld, mesh, e1, _to_reference(mesh, e1, X)).grad_x * nu[e1, None, None]
            jump = np.einsum("fqa,fa->fq", g0 - g1, nx)
            jf = np.sum(W * jump**2, axis=1)
            np.add.at(acc, e0, h[e0] * jf)
            np.add.at(acc, e1, h[e1] * jf)
    eta2 = eta_s + eta_a
    if return_parts:
        return eta2, eta_s, eta_a
    return eta2


def doerfler_mark(eta2, theta: float = 0.5) -> np.ndarray:
    """Smallest greedy set carrying ``theta`` of the total squared indicator.

    Elements are taken by decreasing ``eta2``; ties go to the lower index.
    """
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    eta2 = np.asarray(eta2, float)
    if eta2.size == 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((np.arange(eta2.size), -eta2))
    cum = np.cumsum(eta2[order])
    total = cum[-1]
    if total <= 0:
        return np.empty(0, dtype=np.int64)
    m = int(np.searchsorted(cum, theta * total, side="left")) + 1
    return np.sort(order[: min(m, eta2.size)])
