import numpy as np
import pytest
from numpy.polynomial.legendre import leggauss

from conftest import random_mesh
from stfem.assembly import ProblemCoefficients, StabilizationConfig, assemble_system
from stfem.estimate import (
    boundedness_constant,
    cost_functional,
    doerfler_mark,
    friedrichs_constant,
    l2_norm,
    norm_h,
    norm_h_star,
    norm_matrix,
    residual_indicator,
)
from stfem.fem import DiscreteFunction, SpaceKind, build_dofmap, difference, interpolate
from stfem.mesh import SpaceTimeMesh, build_structured_mesh, refine_uniformly
from stfem.problems import BallTarget, d1_smooth_example, smooth_example


def _zero(dm):
    return DiscreteFunction(dm, np.zeros(dm.n_dofs))


def _hat_oracle(cx, ct):
    """Hexagonal hat of width 1/2 for diagonals along x = t, in closed form."""
    def f(x, t):
        X, T = x - cx, t - ct
        return np.maximum(0.0, 1.0 - 2.0 * np.maximum.reduce([np.abs(X), np.abs(T), np.abs(X - T)]))
    return f


def _grid_sq_grad(f, N=1600, eps=1e-7):
    """Midpoint sums of (f_x^2, f_t^2) on the unit square via central differences."""
    c = (np.arange(N) + 0.5) / N
    x, t = np.meshgrid(c, c, indexing="ij")
    fx = (f(x + eps, t) - f(x - eps, t)) / (2 * eps)
    ft = (f(x, t + eps) - f(x, t - eps)) / (2 * eps)
    return (fx**2).mean(), (ft**2).mean()


def _trace_sq(f, t, N=20000):
    c = (np.arange(N) + 0.5) / N
    return (f(c, np.full(N, t)) ** 2).mean()


def test_zero_pair():
    m = build_structured_mesh(2, 2)
    dm = build_dofmap(m, 1, SpaceKind.StateY0h)
    parts = norm_h(_zero(dm), _zero(dm), m, 0.1, 0.01)
    assert parts.squared == 0.0
    assert norm_h_star(_zero(dm), _zero(dm), m, 0.1, 0.01) == 0.0


@pytest.mark.parametrize("k", [1, 2])
def test_homogeneity(k, rng):
    m = random_mesh(2, 3, steps=2)
    dy = build_dofmap(m, k, SpaceKind.StateY0h)
    dp = build_dofmap(m, k, SpaceKind.AdjointPTh)
    v = DiscreteFunction(dy, rng.standard_normal(dy.n_dofs))
    q = DiscreteFunction(dp, rng.standard_normal(dp.n_dofs))
    lam = 0.1 * m.diameters**2
    a = norm_h(v, q, m, 0.3, lam).value
    b = norm_h(DiscreteFunction(dy, 2 * v.coefficients), DiscreteFunction(dp, 2 * q.coefficients), m, 0.3, lam).value
    assert b == pytest.approx(2 * a, rel=1e-13)
    parts = norm_h(v, q, m, 0.3, lam)
    assert min(vars(parts).values()) >= 0


def test_hat_functions_against_grid_oracle():
    m = build_structured_mesh(1, 2)
    dm = build_dofmap(m, 1, SpaceKind.StateY0h)
    centre = int(np.flatnonzero(np.all(m.vertices == [0.5, 0.5], axis=1))[0])
    bottom = int(np.flatnonzero(np.all(m.vertices == [0.5, 0.0], axis=1))[0])
    top = int(np.flatnonzero(np.all(m.vertices == [0.5, 1.0], axis=1))[0])
    hv = np.zeros(dm.n_dofs)
    hv[centre] = 1.0
    hv[top] = 0.5
    hq = np.zeros(dm.n_dofs)
    hq[centre] = -1.0
    hq[bottom] = 2.0
    fv = lambda x, t: _hat_oracle(0.5, 0.5)(x, t) + 0.5 * _hat_oracle(0.5, 1.0)(x, t)
    fq = lambda x, t: -_hat_oracle(0.5, 0.5)(x, t) + 2.0 * _hat_oracle(0.5, 0.0)(x, t)
    # nodal values of the oracle agree with the coefficients
    assert np.allclose(fv(m.vertices[:, 0], m.vertices[:, 1]), hv)
    varrho, lam = 0.7, 0.3
    vx, vt = _grid_sq_grad(fv)
    qx, qt = _grid_sq_grad(fq)
    oracle = varrho * (_trace_sq(fv, 1.0) + vx + lam * vt) + _trace_sq(fq, 0.0) + qx + lam * qt
    got = norm_h(DiscreteFunction(dm, hv), DiscreteFunction(dm, hq), m, varrho, lam).squared
    assert got == pytest.approx(oracle, rel=5e-3)
    # traces alone are exact rationals: 0.25 * 1/3 and 4 * 1/3
    parts = norm_h(DiscreteFunction(dm, hv), DiscreteFunction(dm, hq), m, varrho, lam)
    assert parts.state_trace_T == pytest.approx(varrho * 0.25 / 3, rel=1e-13)
    assert parts.adjoint_trace_0 == pytest.approx(4 / 3, rel=1e-13)


def _tensor_oracle(ex, varrho, lam, n=40):
    """Star-norm pieces of a closed-form pair by tensor Gauss-Legendre on Q."""
    d = ex.spatial_dim
    g, w = leggauss(n)
    g, w = 0.5 * (g + 1), 0.5 * w
    grids = np.meshgrid(*([g] * (d + 1)), indexing="ij")
    X = np.stack(grids, axis=-1).reshape(-1, d + 1)
    W = np.prod(np.stack(np.meshgrid(*([w] * (d + 1)), indexing="ij"), -1).reshape(-1, d + 1), axis=1)
    gs = np.stack(np.meshgrid(*([g] * d), indexing="ij"), -1).reshape(-1, d)
    ws = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij"), -1).reshape(-1, d), axis=1)
    y, p = ex.state, ex.adjoint
    I = lambda v: float(W @ v)
    trace = lambda f, t: float(ws @ f(np.column_stack([gs, np.full(len(gs), t)])) ** 2)
    base = varrho * (trace(y, 1.0) + I(np.sum(y.grad_x(X) ** 2, -1)) + lam * I(y.dt(X) ** 2)) \
        + trace(p, 0.0) + I(np.sum(p.grad_x(X) ** 2, -1)) + lam * I(p.dt(X) ** 2)
    extra = varrho * lam * I(y.lap_x(X) ** 2) + ((varrho + 1) / lam + lam) * I(y(X) ** 2) \
        + lam * I(p.lap_x(X) ** 2) + (2 / lam + lam) * I(p(X) ** 2)
    return base, base + extra


@pytest.mark.parametrize("d", [1, 2])
def test_closed_form_norms_against_tensor_oracle(d):
    ex = smooth_example(0.01) if d == 2 else d1_smooth_example(0.01)
    m = build_structured_mesh(d, 2)
    lam = 0.05
    base, star = _tensor_oracle(ex, 0.01, lam)
    got = norm_h(ex.state, ex.adjoint, m, 0.01, lam, quad_degree=20).squared
    got_star = norm_h_star(ex.state, ex.adjoint, m, 0.01, lam, quad_degree=20) ** 2
    assert got == pytest.approx(base, rel=1e-8)
    assert got_star == pytest.approx(star, rel=1e-8)


def test_star_dominates_and_p1_extra_terms(rng):
    m = random_mesh(2, 1, steps=2)
    dy = build_dofmap(m, 1, SpaceKind.StateY0h)
    dp = build_dofmap(m, 1, SpaceKind.AdjointPTh)
    v = DiscreteFunction(dy, rng.standard_normal(dy.n_dofs))
    q = DiscreteFunction(dp, rng.standard_normal(dp.n_dofs))
    varrho = 0.2
    lam = 0.1 * m.diameters**2
    h = norm_h(v, q, m, varrho, lam).value
    s = norm_h_star(v, q, m, varrho, lam)
    assert s >= h
    # for P1 the Laplacians vanish, leaving only the weighted L2 terms
    one = SpaceTimeMesh(2, 1.0, np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 1, 1.0]]), np.array([[0, 1, 2, 3]]),
                        np.array([3]))
    dm = build_dofmap(one, 1, SpaceKind.StateY0h)
    f = DiscreteFunction(dm, rng.standard_normal(4))
    g = DiscreteFunction(dm, rng.standard_normal(4))
    L = 0.05
    lhs = norm_h_star(f, g, one, varrho, L) ** 2 - norm_h(f, g, one, varrho, L).squared
    rhs = ((varrho + 1) / L + L) * l2_norm(f, one) ** 2 + (2 / L + L) * l2_norm(g, one) ** 2
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_star_rejects_zero_lambda():
    m = build_structured_mesh(1, 2)
    dm = build_dofmap(m, 1, SpaceKind.StateY0h)
    with pytest.raises(ValueError):
        norm_h_star(_zero(dm), _zero(dm), m, 0.1, 0.0)


def test_cost_functional_examples():
    m = build_structured_mesh(2, 2)
    yd = BallTarget()
    r = cost_functional(yd, lambda X: np.zeros(X.shape[:-1]), yd, m, 0.01)
    assert r.total == 0.0
    r = cost_functional(yd, lambda X: np.full(X.shape[:-1], np.sqrt(2.0)), yd, m, 0.01)
    assert r.tracking == 0.0 and r.total == pytest.approx(0.01, rel=1e-12)


def test_indicator_zero_and_linearity():
    m = random_mesh(2, 4, steps=2)
    dy = build_dofmap(m, 1, SpaceKind.StateY0h)
    dp = build_dofmap(m, 1, SpaceKind.AdjointPTh)
    eta = residual_indicator(m, _zero(dy), _zero(dp), lambda X: np.zeros(X.shape[:-1]), 0.1)
    assert np.all(eta == 0)
    yd = smooth_example(0.1).target
    _, _, a1 = residual_indicator(m, _zero(dy), _zero(dp), yd, 0.1, return_parts=True)
    _, s2, a2 = residual_indicator(m, _zero(dy), _zero(dp), lambda X: 2 * yd(X), 0.1, return_parts=True)
    assert np.allclose(np.sqrt(a2), 2 * np.sqrt(a1), rtol=1e-12)
    assert np.all(s2 == 0)


def test_indicator_reorder_invariant(rng):
    m = random_mesh(2, 6, steps=2)
    ex = smooth_example(0.1)
    perm = rng.permutation(m.n_elements)
    pm = SpaceTimeMesh(m.spatial_dim, m.final_time, m.vertices, m.simplices[perm], m.tags[perm])
    tot = []
    for mm in (m, pm):
        y = interpolate(ex.y, build_dofmap(mm, 1, SpaceKind.StateY0h))
        p = interpolate(ex.p, build_dofmap(mm, 1, SpaceKind.AdjointPTh))
        eta = residual_indicator(mm, y, p, ex.target, 0.1)
        tot.append(eta)
    assert tot[1] == pytest.approx(tot[0][perm], rel=1e-10)
    assert tot[1].sum() == pytest.approx(tot[0].sum(), rel=1e-12)


def test_doerfler_examples():
    assert doerfler_mark([16, 1, 1, 1, 1], 0.5).tolist() == [0]
    eta = np.array([0.0, 3.0, 1.0, 0.0, 2.0])
    assert doerfler_mark(eta, 1.0).tolist() == [1, 2, 4]
    for n in (1, 7, 10):
        assert len(doerfler_mark(np.ones(n), 0.5)) == int(np.ceil(n / 2))
    assert doerfler_mark(np.zeros(4), 0.5).size == 0
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            doerfler_mark([1.0], bad)


def test_doerfler_minimal(rng):
    for _ in range(20):
        eta = rng.random(50) ** 3
        th = rng.uniform(0.1, 0.9)
        mk = doerfler_mark(eta, th)
        assert eta[mk].sum() >= th * eta.sum()
        top = np.sort(eta)[::-1]
        assert top[: len(mk) - 1].sum() < th * eta.sum()


def test_interpolation_error_decreases():
    ex = smooth_example(0.01)
    m = build_structured_mesh(2, 2)
    errs = []
    for _ in range(3):
        y = interpolate(ex.y, build_dofmap(m, 1, SpaceKind.StateY0h))
        p = interpolate(ex.p, build_dofmap(m, 1, SpaceKind.AdjointPTh))
        lam = 0.1 * m.diameters**2
        errs.append(norm_h(difference(ex.state, y), difference(ex.adjoint, p), m, 0.01, lam).value)
        m = refine_uniformly(m)
    assert errs[0] > errs[1] > errs[2]


@pytest.mark.parametrize("k", [1, 2])
def test_norm_matrix_matches_norm_h(k, rng):
    m = random_mesh(2, 8, steps=2)
    S = assemble_system(m, k, ProblemCoefficients(0.05), StabilizationConfig())
    N = norm_matrix(S)
    x = rng.standard_normal(S.matrix.shape[0])
    y, p = S.split(x)
    ref = norm_h(DiscreteFunction(S.state_map, y), DiscreteFunction(S.adjoint_map, p), m, 0.05, S.lam).squared
    assert x @ (N @ x) == pytest.approx(ref, rel=1e-11)


def test_friedrichs_and_boundedness_constants():
    S = assemble_system(build_structured_mesh(2, 4), 1, ProblemCoefficients(1.0), StabilizationConfig())
    cf = friedrichs_constant(S)
    # discrete functions are admissible in the continuous Poincare inequality
    assert 0.15 < cf <= 1 / (np.sqrt(2) * np.pi)
    assert boundedness_constant(1.0, 0.0, cf) == pytest.approx(2.0)
    assert boundedness_constant(0.01, 0.0, cf) == pytest.approx(np.sqrt(103.0))
    assert boundedness_constant(1.0, [0.1, 100.0], 1.0) == pytest.approx(np.sqrt(101.0))
