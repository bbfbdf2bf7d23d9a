from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from udgeeg.cutcell import build_cut_mesh
from udgeeg.dg import assemble_system
from udgeeg.grid import BoundingBox, build_grid
from udgeeg.levelset import DomainSpec, discretize, four_sphere_domains, four_sphere_fields

BOX_EDGE = 194.08


def two_domain_spec(sigma_in=1.0, sigma_out=1.0) -> DomainSpec:
    return DomainSpec.create(("s",), [("in", [{"s": "-"}], sigma_in), ("out", [{"s": "+"}], sigma_out)])


def single_domain_spec(sigma=1.0) -> DomainSpec:
    return DomainSpec.create(("s",), [("all", [{"s": "-"}], sigma)])


def cut_mesh_from(phi, n, lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0), spec=None, **kw):
    mesh = build_grid(BoundingBox(lo, hi), n)
    spec = spec or two_domain_spec()
    return build_cut_mesh(mesh, [discretize(phi, mesh, "s")], spec, **kw)


def four_sphere_mesh(n):
    mesh = build_grid(BoundingBox.cube((0, 0, 0), BOX_EDGE), n)
    return build_cut_mesh(mesh, four_sphere_fields(mesh), four_sphere_domains())


def direct_solve(M, F) -> np.ndarray:
    """Zero-mean solution of M x = f by sparse LU of the system bordered with the constant."""
    n = M.shape[0]
    one = sp.csr_matrix(np.ones((1, n)))
    A = sp.bmat([[M.bsr.tocsr(), one.T], [one, None]]).tocsc()
    F = np.atleast_2d(np.asarray(F, dtype=float).T).T
    rhs = np.vstack([F.reshape(n, -1), np.zeros((1, F.reshape(n, -1).shape[1]))])
    X = spla.splu(A).solve(rhs)[:n]
    return X.reshape(np.shape(F))


@pytest.fixture(scope="session")
def sphere8():
    return four_sphere_mesh(8)


@pytest.fixture(scope="session")
def sphere8_matrix(sphere8):
    return assemble_system(sphere8)


@pytest.fixture(scope="session")
def sphere16():
    return four_sphere_mesh(16)


@pytest.fixture(scope="session")
def sphere16_matrix(sphere16):
    return assemble_system(sphere16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok, detail: str) -> None:
    status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
    line = f"criterion {criterion}: {status}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
