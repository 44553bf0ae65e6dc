import numpy as np
import pytest
import scipy.sparse as sp

from stfem.assembly import ProblemCoefficients, StabilizationConfig, assemble_system
from stfem.linalg import (
    ILU0,
    PRECONDITIONER_NAMES,
    PreconditionerError,
    build_block_preconditioner,
    build_preconditioner,
    build_system_preconditioner,
    fgmres,
    pd_probe,
    read_matrix_market,
    write_matrix_market,
    write_solver_csv,
)
from stfem.mesh import build_structured_mesh
from stfem.problems import smooth_example


def test_identity_one_iteration(rng):
    b = rng.standard_normal(30)
    x, rep = fgmres(sp.identity(30, format="csr"), b)
    assert np.allclose(x, b) and rep.iterations == 1 and rep.converged


def test_two_by_two():
    x, rep = fgmres(sp.csr_matrix([[2.0, 1.0], [0.0, 1.0]]), np.array([3.0, 1.0]))
    assert np.allclose(x, [1.0, 1.0], atol=1e-12) and rep.converged


def test_zero_rhs():
    x, rep = fgmres(sp.identity(5, format="csr"), np.zeros(5))
    assert np.all(x == 0) and rep.converged and rep.iterations == 0


@pytest.mark.parametrize("n", [10, 77, 200])
def test_spd_matches_dense(n, rng):
    B = rng.standard_normal((n, n))
    A = B @ B.T + n * np.eye(n)
    b = rng.standard_normal(n)
    x, rep = fgmres(sp.csr_matrix(A), b, rtol=1e-12, restart=n)
    assert rep.converged
    assert np.allclose(x, np.linalg.solve(A, b), atol=1e-8)


def test_nonsymmetric_restarted_matches_dense(rng):
    n = 150
    A = sp.random(n, n, density=0.05, random_state=1) + 4 * sp.identity(n)
    b = rng.standard_normal(n)
    x, rep = fgmres(A.tocsr(), b, rtol=1e-10, restart=10, maxit=2000)
    assert rep.converged and rep.restarts > 1
    assert np.allclose(x, np.linalg.solve(A.toarray(), b), atol=1e-7)


def test_history_monotone_within_cycle(rng):
    n = 120
    A = sp.random(n, n, density=0.05, random_state=3) + 3 * sp.identity(n)
    _, rep = fgmres(A.tocsr(), rng.standard_normal(n), restart=200)
    h = np.array(rep.residuals)
    assert np.all(np.diff(h) <= 1e-12)
    assert len(h) == rep.iterations + 1


def test_nonconvergence_returns_best_iterate(rng, caplog):
    n = 60
    A = sp.csr_matrix(np.roll(np.eye(n), 1, axis=0))  # cyclic shift: GMRES stagnates
    b = np.zeros(n)
    b[0] = 1.0
    x, rep = fgmres(A, b, restart=5, maxit=20)
    assert not rep.converged
    assert rep.iterations == 20
    assert np.linalg.norm(b - A @ x) <= np.linalg.norm(b) + 1e-12
    assert "did not converge" in caplog.text


def test_flexible_preconditioner_allowed(rng):
    n = 80
    A = sp.diags([np.linspace(1, 50, n)], [0]).tocsr() + sp.random(n, n, density=0.02, random_state=2)
    calls = {"k": 0}

    def varying(r):
        calls["k"] += 1
        return r / A.diagonal() * (1.0 + 0.1 * (calls["k"] % 3))

    b = rng.standard_normal(n)
    x, rep = fgmres(A.tocsr(), b, M=varying, rtol=1e-10)
    assert rep.converged and np.linalg.norm(b - A @ x) <= 1e-10 * np.linalg.norm(b) * 1.01


@pytest.mark.parametrize("kwargs", [dict(rtol=0.0), dict(rtol=1.0), dict(restart=0)])
def test_fgmres_rejects_bad_parameters(kwargs):
    with pytest.raises(ValueError):
        fgmres(sp.identity(3, format="csr"), np.ones(3), **kwargs)


def test_jacobi_exact_on_diagonal(rng):
    d = rng.random(40) + 0.5
    A = sp.diags(d).tocsr()
    x, rep = fgmres(A, np.ones(40), M=build_preconditioner(A, "jacobi"))
    assert rep.iterations == 1 and np.allclose(x, 1 / d)


def test_ilu0_exact_on_triangular(rng):
    n = 50
    L = sp.tril(sp.random(n, n, density=0.1, random_state=4), -1) + sp.diags(rng.random(n) + 1.0)
    L = L.tocsr()
    b = rng.standard_normal(n)
    z = ILU0(L)(b)
    assert np.allclose(L @ z, b, atol=1e-12)
    U = L.T.tocsr()
    assert np.allclose(U @ ILU0(U)(b), b, atol=1e-12)


def test_ilu0_matches_full_lu_on_tridiagonal(rng):
    n = 30
    A = sp.diags([-np.ones(n - 1), 4 * np.ones(n), -2 * np.ones(n - 1)], [-1, 0, 1]).tocsr()
    b = rng.standard_normal(n)
    assert np.allclose(A @ ILU0(A)(b), b, atol=1e-12)  # no fill for tridiagonal


def test_zero_diagonal_reported():
    A = sp.csr_matrix(np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 3.0]]))
    for kind in ("jacobi", "sgs", "ilu0"):
        with pytest.raises(PreconditionerError, match="row 1"):
            build_preconditioner(A, kind)


def test_sgs_reduces_residual(rng):
    n = 40
    A = sp.diags([-np.ones(n - 1), 4 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]).tocsr()
    b = rng.standard_normal(n)
    one = build_preconditioner(A, "sgs", sweeps=1)(b)
    three = build_preconditioner(A, "sgs", sweeps=3)(b)
    assert np.linalg.norm(b - A @ three) < np.linalg.norm(b - A @ one) < np.linalg.norm(b)


@pytest.fixture(scope="module")
def smooth_system():
    m = build_structured_mesh(2, 8)
    ex = smooth_example(0.01)
    return assemble_system(m, 1, ProblemCoefficients(0.01), StabilizationConfig(), target=ex.target)


def test_preconditioned_beats_unpreconditioned(smooth_system):
    S = smooth_system
    _, plain = fgmres(S.matrix, S.rhs, restart=50, maxit=3000)
    counts = {}
    for kind in ("jacobi", "sgs", "ilu0", "lu"):
        _, rep = fgmres(S.matrix, S.rhs, build_block_preconditioner(S, kind), maxit=3000)
        assert rep.converged
        counts[kind] = rep.iterations
    assert plain.converged
    assert all(c < plain.iterations for c in counts.values())


def test_all_preconditioners_agree(smooth_system):
    S = smooth_system
    ref, _ = fgmres(S.matrix, S.rhs, rtol=1e-12, maxit=5000)
    for name in PRECONDITIONER_NAMES:
        x, rep = fgmres(S.matrix, S.rhs, build_system_preconditioner(S, name), rtol=1e-12, maxit=5000)
        assert rep.converged, name
        assert np.allclose(x, ref, atol=1e-6 * np.abs(ref).max()), name


def test_block_preconditioner_structure(smooth_system):
    S = smooth_system
    M = build_block_preconditioner(S, "lu")
    K11, _, _, K22 = S.blocks()
    r = np.random.default_rng(0).standard_normal(S.matrix.shape[0])
    z = M(r)
    assert np.allclose(K11 @ z[: S.n_state], r[: S.n_state])
    assert np.allclose(K22 @ z[S.n_state:], r[S.n_state:])


def test_pd_probe_examples(smooth_system):
    assert pd_probe(sp.identity(10), trials=50, rng=0) == pytest.approx(1.0)
    assert pd_probe(np.array([[0.0, 1.0], [-1.0, 0.0]]), trials=1000, rng=0) == 0.0
    assert pd_probe(smooth_system, trials=200, rng=0) > 0
    with pytest.raises(ValueError):
        pd_probe(sp.identity(3), trials=0)


def test_matrix_market_roundtrip(tmp_path, smooth_system):
    S = smooth_system
    write_matrix_market(tmp_path / "K.mtx", S.matrix, "system")
    write_matrix_market(tmp_path / "f.mtx", S.rhs)
    K = read_matrix_market(tmp_path / "K.mtx")
    f = read_matrix_market(tmp_path / "f.mtx")
    assert abs(K - S.matrix).max() == 0.0
    assert np.array_equal(f.ravel(), S.rhs)


def test_solver_csv(tmp_path):
    _, rep = fgmres(sp.csr_matrix([[2.0, 1.0], [0.0, 1.0]]), np.array([3.0, 1.0]))
    write_solver_csv(tmp_path / "s.csv", rep)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "iter,relres"
    assert len(lines) == rep.iterations + 2
