import numpy as np
import pytest

from stfem.mesh import build_structured_mesh, refine


def random_mesh(d, seed, steps=4, n=None, fraction=0.2):
    """Structured mesh followed by ``steps`` refinements of random element subsets."""
    rng = np.random.default_rng(seed)
    mesh = build_structured_mesh(d, n or (2 if d == 2 else 3))
    for _ in range(steps):
        k = max(1, int(fraction * mesh.n_elements))
        mesh = refine(mesh, rng.choice(mesh.n_elements, size=k, replace=False))
    return mesh


def face_census(mesh):
    """Map each sorted face tuple to the number of simplices containing it."""
    D = mesh.dim
    counts = {}
    for s in mesh.simplices:
        for i in range(D + 1):
            key = tuple(sorted(np.delete(s, i)))
            counts[key] = counts.get(key, 0) + 1
    return counts


def on_boundary(mesh, face):
    P = mesh.vertices[list(face)]
    x, t = P[:, :-1], P[:, -1]
    for j in range(mesh.spatial_dim):
        if np.allclose(x[:, j], 0) or np.allclose(x[:, j], 1):
            return True
    return np.allclose(t, 0) or np.allclose(t, mesh.final_time)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[num])
