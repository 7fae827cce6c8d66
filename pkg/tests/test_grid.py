import numpy as np
import pytest
import scipy.sparse.linalg as sla
from hypothesis import given, strategies as st

from hydot import grid as gm

# Independent quadrature oracles --------------------------------------------

_GP = np.array([-1.0, 1.0]) / np.sqrt(3.0)


def _shape_1d(t):
    return np.array([(1 - t) / 2, (1 + t) / 2]), np.array([-0.5, 0.5])


def _gauss_hex(hx, hy, hz):
    """Element stiffness and mass by 2x2x2 Gauss quadrature on the reference cube."""
    K = np.zeros((8, 8))
    M = np.zeros((8, 8))
    jac = hx * hy * hz / 8.0
    for a in _GP:
        for b in _GP:
            for c in _GP:
                nx, dx = _shape_1d(a)
                ny, dy = _shape_1d(b)
                nz, dz = _shape_1d(c)
                N, G = [], []
                for k in (0, 1):
                    for j in (0, 1):
                        for i in (0, 1):
                            N.append(nx[i] * ny[j] * nz[k])
                            G.append([dx[i] * ny[j] * nz[k] * 2 / hx,
                                      nx[i] * dy[j] * nz[k] * 2 / hy,
                                      nx[i] * ny[j] * dz[k] * 2 / hz])
                N, G = np.array(N), np.array(G)
                K += G @ G.T * jac
                M += np.outer(N, N) * jac
    return K, M


def _gauss_quad(hx, hy):
    F = np.zeros((4, 4))
    for a in _GP:
        for b in _GP:
            nx, _ = _shape_1d(a)
            ny, _ = _shape_1d(b)
            N = np.array([nx[i] * ny[j] for j in (0, 1) for i in (0, 1)])
            F += np.outer(N, N) * hx * hy / 4.0
    return F


# build_grid -----------------------------------------------------------------

def test_single_cell_grid():
    g = gm.build_grid(2, 2, 2, 1, 1, 1)
    assert g.N == 8
    assert g.spacing == pytest.approx((2.0, 2.0, 1.0))


def test_vertex_count_is_product():
    assert gm.build_grid(3, 2, 2, 1, 1, 1).N == 12


def test_phantom_sized_grid():
    g = gm.build_grid(17, 17, 9, 6, 6, 2.5)
    assert g.N == 2601
    xs, ys, zs = g.axes()
    assert xs[-1] - xs[0] == pytest.approx(12.0)
    assert ys[-1] - ys[0] == pytest.approx(12.0)
    assert zs[-1] - zs[0] == pytest.approx(2.5)


@pytest.mark.parametrize("args", [(1, 2, 2, 1, 1, 1), (2, 2, 0, 1, 1, 1), (2, 2, 2, 0, 1, 1),
                                  (2, 2, 2, 1, -1, 1), (2.5, 2, 2, 1, 1, 1)])
def test_build_grid_rejects_bad_input(args):
    with pytest.raises(ValueError):
        gm.build_grid(*args)


def test_x_fastest_ordering():
    g = gm.build_grid(4, 3, 2, 1, 1, 1)
    X = g.coordinates()
    assert np.all(np.diff(X[:4, 0]) > 0) and np.all(X[:4, 1:] == X[0, 1:])
    assert g.index(1, 2, 1) == 1 + 4 * (2 + 3 * 1)


def test_face_labels_and_masks():
    g = gm.build_grid(5, 4, 3, 1, 1, 1)
    ix, iy, iz = np.unravel_index(np.arange(g.N), (g.nz, g.ny, g.nx))[::-1]
    side = (ix == 0) | (ix == g.nx - 1) | (iy == 0) | (iy == g.ny - 1)
    np.testing.assert_array_equal(g.dirichlet_mask(), side)
    plates = (iz == 0) | (iz == g.nz - 1)
    np.testing.assert_array_equal(g.robin_mask(), plates)
    labels = g.face_labels()
    assert {k for k, v in labels.items() if v == "robin"} == {"z-", "z+"}


# stiffness -------------------------------------------------------------------

def test_constants_in_kernel_before_elimination():
    g = gm.build_grid(5, 4, 6, 1.0, 2.0, 1.5)
    K = gm.assemble_stiffness(g, dirichlet=False)
    np.testing.assert_allclose(K @ np.ones(g.N), 0.0, atol=1e-12)


def test_element_stiffness_matches_gauss_oracle():
    Ko, Mo = _gauss_hex(0.3, 0.7, 1.1)
    np.testing.assert_allclose(gm.element_stiffness(0.3, 0.7, 1.1), Ko, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(gm.element_mass(0.3, 0.7, 1.1), Mo, rtol=1e-12, atol=1e-14)


def test_single_cell_stiffness_is_element_matrix():
    g = gm.build_grid(2, 2, 2, 1, 1, 1)
    np.testing.assert_allclose(gm.assemble_stiffness(g, dirichlet=False).toarray(),
                               gm.element_stiffness(*g.spacing), atol=1e-14)


def test_eliminated_stiffness_positive_definite():
    g = gm.build_grid(6, 6, 6, 1, 1, 1)
    ev = np.linalg.eigvalsh(gm.assemble_stiffness(g).toarray())
    assert ev.min() > 0


def test_dirichlet_elimination_decouples():
    g = gm.build_grid(5, 5, 4, 1, 1, 1)
    K = gm.assemble_stiffness(g).tocsr()
    mask = g.dirichlet_mask()
    sub = K[mask][:, ~mask]
    assert sub.nnz == 0
    np.testing.assert_array_equal(K.diagonal()[mask], 1.0)


# mass ------------------------------------------------------------------------

def test_consistent_mass_sums_to_volume():
    g = gm.build_grid(4, 5, 3, 1.0, 0.5, 2.0)
    assert gm.assemble_mass(g, lumped=False).sum() == pytest.approx(g.volume)
    assert gm.assemble_mass(g, lumped=True).sum() == pytest.approx(g.volume)


def test_lumped_interior_entry():
    g = gm.build_grid(5, 5, 5, 1.0, 1.5, 2.0)
    d = gm.assemble_mass(g).diagonal()
    assert d[g.index(2, 2, 2)] == pytest.approx(np.prod(g.spacing))


def test_lumped_and_consistent_row_sums_agree():
    g = gm.build_grid(4, 3, 5, 1, 1, 1)
    Mc = gm.assemble_mass(g, lumped=False)
    Ml = gm.assemble_mass(g, lumped=True)
    np.testing.assert_allclose(np.asarray(Mc.sum(axis=1)).ravel(), Ml.diagonal(), rtol=1e-13)
    assert Ml.nnz == g.N


# robin -----------------------------------------------------------------------

def test_robin_area():
    g = gm.build_grid(4, 6, 3, 1.5, 0.5, 2.0)
    assert gm.assemble_robin(g).sum() == pytest.approx(2 * (2 * g.Lx) * (2 * g.Ly))


def test_robin_zero_off_plates():
    g = gm.build_grid(4, 4, 5, 1, 1, 1)
    R = gm.assemble_robin(g).tocsr()
    iz = np.arange(g.N) // (g.nx * g.ny)
    interior = (iz > 0) & (iz < g.nz - 1)
    assert abs(R[interior]).sum() == 0


def test_face_mass_matches_gauss_oracle():
    np.testing.assert_allclose(gm.face_mass(0.4, 0.9), _gauss_quad(0.4, 0.9), rtol=1e-12)


# global properties ------------------------------------------------------------

def test_matrices_symmetric_and_psd(rng):
    g = gm.build_grid(6, 5, 4, 1, 1, 1)
    S = gm.assemble_system(g)
    for A in (S.K, S.M, S.R):
        assert abs(A - A.T).max() <= 1e-14 * abs(A).max()
    X = rng.standard_normal((g.N, 1000))
    assert np.all(np.einsum("ij,ij->j", X, S.K @ X) >= -1e-12)
    assert np.all(np.einsum("ij,ij->j", X, S.R @ X) >= -1e-12)
    assert np.all(S.M.diagonal() > 0)


def test_manufactured_solution_second_order():
    """-Lap(phi) + s phi = f with phi = cos(pi x/2Lx) cos(pi y/2Ly) cos(pi z/Lz).

    phi vanishes on the side faces and has zero normal derivative on the
    plates, so the Robin matrix is not needed (sigma' = 0).
    """
    L, Lz, s = 1.0, 1.0, 2.0
    errs, hs = [], []
    for n in (5, 9, 17):
        g = gm.build_grid(n, n, n, L, L, Lz)
        S = gm.assemble_system(g)
        X = g.coordinates()
        phi = np.cos(np.pi * X[:, 0] / (2 * L)) * np.cos(np.pi * X[:, 1] / (2 * L)) * np.cos(np.pi * X[:, 2] / Lz)
        lam = 2 * (np.pi / (2 * L)) ** 2 + (np.pi / Lz) ** 2
        b = S.restrict(S.M @ ((lam + s) * phi))
        x = sla.spsolve((S.K + s * S.M).tocsc(), b)
        errs.append(np.max(np.abs(x - phi)))
        hs.append(g.spacing[0])
    rates = np.log(np.array(errs[:-1]) / errs[1:]) / np.log(np.array(hs[:-1]) / hs[1:])
    assert np.all(rates > 1.8), rates


# point sources ---------------------------------------------------------------

def test_point_source_at_vertex():
    g = gm.build_grid(4, 4, 4, 1, 1, 1)
    b = gm.point_source_vector(g, g.coordinates()[g.index(1, 2, 3)])
    np.testing.assert_allclose(b, np.eye(g.N)[g.index(1, 2, 3)], atol=1e-14)


def test_point_source_at_cell_centre():
    g = gm.build_grid(3, 3, 3, 1, 1, 1)
    b = gm.point_source_vector(g, (-0.5, -0.5, 0.25))
    nz = b[b > 0]
    assert nz.size == 8
    np.testing.assert_allclose(nz, 1 / 8)


def test_point_source_at_face_centre():
    g = gm.build_grid(3, 3, 3, 1, 1, 1)
    b = gm.point_source_vector(g, (-0.5, -0.5, 0.0))
    nz = b[b > 0]
    assert nz.size == 4
    np.testing.assert_allclose(nz, 1 / 4)


def test_point_source_outside_rejected():
    g = gm.build_grid(3, 3, 3, 1, 1, 1)
    with pytest.raises(ValueError):
        gm.point_source_vector(g, (0, 0, 1.5))


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 2))
def test_point_source_partition_of_unity(x, y, z):
    g = gm.build_grid(5, 4, 3, 1, 1, 2)
    b = gm.point_source_vector(g, (x, y, z))
    assert b.sum() == pytest.approx(1.0)
    assert np.count_nonzero(b) <= 8 and b.min() >= 0
    # interpolation reproduces linear functions
    np.testing.assert_allclose(b @ g.coordinates(), (x, y, z), atol=1e-12)


# VTK -------------------------------------------------------------------------

def test_vtk_roundtrip(tmp_path, rng):
    g = gm.build_grid(4, 3, 2, 1, 2, 3)
    f = {"a": rng.standard_normal(g.N), "b": np.arange(g.N, dtype=float)}
    path = gm.write_vtk(tmp_path / "f.vtk", g, f)
    text = path.read_text().splitlines()
    assert text[0] == "# vtk DataFile Version 3.0"
    assert "DATASET STRUCTURED_POINTS" in text and "DIMENSIONS 4 3 2" in text
    header, back = gm.read_vtk(path)
    assert header["origin"] == g.origin and header["spacing"] == pytest.approx(g.spacing)
    np.testing.assert_allclose(back["a"], f["a"], rtol=1e-9)
    np.testing.assert_array_equal(back["b"], f["b"])


def test_vtk_rejects_wrong_length(tmp_path):
    g = gm.build_grid(2, 2, 2, 1, 1, 1)
    with pytest.raises(ValueError):
        gm.write_vtk(tmp_path / "x.vtk", g, {"a": np.zeros(7)})
