"""Fields, Born operator blocks, the measurement model and noise."""
import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from hydot import born, grid, krylov, optics, pals
from hydot.harness import full_diffusion_forward


# --- setup -------------------------------------------------------------------

def test_setup_sizes_and_ordering(born_fixture):
    g, _, setup, _, H = born_fixture
    assert setup.n_meas == 4 * 9 * 11 == H.shape[0]
    assert H.shape[1] == g.N
    seen = {setup.index(s, d, l) for s in range(4) for d in range(9) for l in range(11)}
    assert seen == set(range(setup.n_meas))
    assert setup.index(0, 0, 1) == 1 and setup.index(0, 1, 0) == 11 and setup.index(1, 0, 0) == 99


def test_extinction_rows_follow_wavelength_minor_order(born_fixture, table):
    _, _, setup, _, _ = born_fixture
    E = setup.extinction_rows()
    ext = table.extinction_at(setup.wavelengths)
    for s, d, l in [(0, 0, 0), (2, 5, 7), (3, 8, 10)]:
        np.testing.assert_array_equal(E[setup.index(s, d, l)], ext[l])


def test_geometry(born_fixture):
    g, _, setup, _, _ = born_fixture
    assert np.all(setup.sources[:, 2] == g.Lz)
    assert np.all(setup.detectors[..., 2] == 0.0)
    for s in range(setup.n_sources):
        off = setup.detectors[s, :, :2] - setup.sources[s, :2]
        np.testing.assert_allclose(np.sort(np.unique(off[:, 0].round(12))), [-0.5, 0.0, 0.5])
        np.testing.assert_allclose(off.mean(axis=0), 0.0, atol=1e-14)


def test_setup_rejections(cube10, table):
    g, _ = cube10
    with pytest.raises(ValueError):
        born.detector_pattern((0, 0, 0), n_ds=8)
    with pytest.raises(ValueError):
        born.source_lattice(g, 0)
    with pytest.raises(ValueError):
        born.make_setup(g, 4, [700.0], table, source_pitch=7.0)
    with pytest.raises(ValueError):
        born.MeasurementSetup(np.zeros((2, 3)), np.zeros((3, 9, 3)), [700.0], table)


# --- fields ------------------------------------------------------------------

@pytest.fixture(scope="module")
def fields(born_fixture):
    g, S, setup, _, _ = born_fixture
    return born.compute_fields(g, S, setup.subset([0, 1]), method="direct")


def test_incident_fields_positive(born_fixture, fields):
    g, S, _, _, _ = born_fixture
    interior = ~S.dirichlet
    assert np.all(fields.incident[:, :, interior] > 0)
    assert np.all(fields.incident[:, :, S.dirichlet] == 0)


def test_adjoint_reciprocity(born_fixture, fields):
    g, S, setup, _, _ = born_fixture
    sub = setup.subset([0, 1])
    for s in range(2):
        bi = S.restrict(grid.point_source_vector(g, sub.sources[s]))
        for d in range(sub.n_ds):
            bd = S.restrict(grid.point_source_vector(g, sub.detectors[s, d]))
            lhs = fields.incident[s] @ bd
            rhs = fields.adjoint[s, d] @ bi
            np.testing.assert_allclose(lhs, rhs, rtol=1e-10)


def test_fields_solve_their_pde(born_fixture, fields):
    g, S, setup, _, _ = born_fixture
    sig, sigp = setup.shifts()
    D = setup.diffusion()
    b = S.restrict(grid.point_source_vector(g, setup.sources[0]))
    for l in (0, 5, 10):
        A = S.K + sig[l] * S.M + sigp[l] * S.R
        r = A @ (D[l] * fields.incident[0, l]) - b
        assert np.linalg.norm(r) <= 1e-10 * np.linalg.norm(b)


def test_manufactured_mode_without_robin():
    """With ``R = 0`` and no absorption, ``K x = M f`` for a Laplacian eigenmode ``f``."""
    g = grid.build_grid(17, 17, 17, 2.0, 2.0, 2.0)
    S = grid.assemble_system(g)
    S0 = grid.SystemMatrices(S.K, S.M, sp.csr_matrix(S.K.shape), S.dirichlet)
    X, Y, Z = g.coordinates().T
    # x, y span [-2, 2] (zero on the sides); z spans [0, 2] (zero flux on the plates)
    f = np.cos(np.pi * X / 4) * np.cos(np.pi * Y / 4) * np.cos(np.pi * Z / 2)
    lam = np.pi ** 2 * (1 / 16 + 1 / 16 + 1 / 4)
    b = S.M @ f
    x, _ = born.solve_rhs(S0, b, [0.0], [0.0], [1.0], method="direct")
    exact = f / lam
    assert np.linalg.norm(x[0] - exact) / np.linalg.norm(exact) <= 2e-2


def test_krylov_fields_match_direct(born_fixture):
    g, S, setup, _, _ = born_fixture
    sub = setup.subset([1])
    tol = 1e-8
    a = born.compute_fields(g, S, sub, krylov.SolverConfig(tol=tol), method="krylov")
    b = born.compute_fields(g, S, sub, method="direct")
    err = np.linalg.norm(a.incident - b.incident) / np.linalg.norm(b.incident)
    assert err <= 1e3 * tol
    err = np.linalg.norm(a.adjoint - b.adjoint) / np.linalg.norm(b.adjoint)
    assert err <= 1e3 * tol
    assert len(a.stats) == 1 + sub.n_ds and all(isinstance(s, krylov.FamilyResult) for s in a.stats)


def test_unknown_field_method(born_fixture):
    g, S, setup, _, _ = born_fixture
    with pytest.raises(ValueError):
        born.solve_rhs(S, np.ones(g.N), [0.1], [0.1], [1.0], method="cg")


# --- operator ----------------------------------------------------------------

def test_block_entries_by_definition(born_fixture, fields):
    g, S, setup, provider, H = born_fixture
    blk = born.assemble_H_block(fields, 0, g, S)
    np.testing.assert_array_equal(blk, H[: setup.block_rows])
    nu = setup.params.nu
    w = S.mass_diagonal
    n = g.index(4, 5, 5)
    for d, l in [(0, 0), (4, 6), (8, 10)]:
        expected = -nu * fields.adjoint[0, d, l, n] * fields.incident[0, l, n] * w[n]
        row = setup.index(0, d, l)
        assert H[row, n] == pytest.approx(expected, rel=1e-14)
        e = np.zeros(g.N)
        e[n] = 1.0
        assert (H @ e)[row] == pytest.approx(expected, rel=1e-14)


def test_block_without_system_uses_lumped_weights(born_fixture, fields):
    g, S, _, _, _ = born_fixture
    np.testing.assert_allclose(born.assemble_H_block(fields, 1, g), born.assemble_H_block(fields, 1, g, S))


def test_operator_sign_and_zero(born_fixture):
    g, _, setup, _, H = born_fixture
    assert not np.any(H @ np.zeros(g.N))
    assert np.all(H @ np.ones(g.N) <= 0)


def test_provider_blocks_and_cache(born_fixture):
    g, S, setup, provider, H = born_fixture
    assert provider.shape == (setup.block_rows, g.N)
    calls = provider.calls
    np.testing.assert_array_equal(provider(2), H[2 * setup.block_rows: 3 * setup.block_rows])
    assert provider.calls == calls


def test_provider_records_krylov_stats(born_fixture):
    g, S, setup, _, H = born_fixture
    prov = born.BlockProvider(g, S, setup.subset([0]), method="krylov")
    blk = prov(0)
    assert np.linalg.norm(blk - H[: setup.block_rows]) <= 1e-5 * np.linalg.norm(blk)
    s, stats = prov.stats[0]
    assert s == 0 and len(stats) == 1 + setup.n_ds


def test_apply_operator_dispatch(born_fixture, rng):
    _, _, _, _, H = born_fixture
    x = rng.standard_normal(H.shape[1])
    ref = H @ x

    class Op:
        def matvec(self, v):
            return H @ v

    np.testing.assert_allclose(born.apply_operator(Op(), x), ref)
    np.testing.assert_allclose(born.apply_operator(lambda v: H @ v, x), ref)
    np.testing.assert_allclose(born.apply_operator(H, x), ref)


# --- measurement model -------------------------------------------------------

def test_forward_measure_examples(born_fixture, rng):
    g, _, setup, _, H = born_fixture
    mu = rng.uniform(0, 1, g.N)
    assert not np.any(born.forward_measure(H, np.zeros(4), mu, setup))
    flat = optics.ChromophoreTable(np.array([600.0, 1000.0]), np.ones((2, 1)), ("x",),
                                   np.array([1.0]), np.array([2.0]))
    one = born.MeasurementSetup(setup.sources, setup.detectors, setup.wavelengths, flat)
    np.testing.assert_allclose(born.forward_measure(H, [3.0], mu, one), 3.0 * (H @ mu))
    with pytest.raises(ValueError):
        born.forward_measure(H, [1.0, 2.0], mu, setup)
    with pytest.raises(ValueError):
        born.forward_measure(H[:-1], np.ones(4), mu, setup)


@given(st.integers(0, 2 ** 32 - 1))
def test_forward_measure_bilinear(born_fixture, seed):
    g, _, setup, _, H = born_fixture
    r = np.random.default_rng(seed)
    m1, m2 = r.uniform(0, 1, (2, g.N))
    c1, c2 = r.uniform(0, 30, (2, 4))
    y = lambda c, m: born.forward_measure(H, c, m, setup)
    scale = np.linalg.norm(y(c1, m1 + m2))
    np.testing.assert_allclose(y(c1, m1 + m2), y(c1, m1) + y(c1, m2), atol=1e-12 * scale)
    scale = np.linalg.norm(y(c1 + c2, m1))
    np.testing.assert_allclose(y(c1 + c2, m1), y(c1, m1) + y(c2, m1), atol=1e-12 * scale)


def test_add_noise_exact_snr_and_weights(rng):
    y = rng.standard_normal(500)
    for snr in (33.0, 30.0, 50.0):
        yn, eta, W = born.add_noise(y, snr, rng=7)
        assert 20 * np.log10(np.linalg.norm(y) / np.linalg.norm(eta)) == pytest.approx(snr, abs=1e-12)
        np.testing.assert_array_equal(yn, y + eta)
        sigma = np.linalg.norm(eta) / np.sqrt(y.size)
        np.testing.assert_allclose(W, 1.0 / sigma)


def test_add_noise_infinite_and_deterministic(rng):
    y = rng.standard_normal(50)
    yn, eta, W = born.add_noise(y, np.inf)
    assert not np.any(eta) and np.all(W == 1) and np.array_equal(yn, y)
    a = born.add_noise(y, 30, rng=3)[1]
    b = born.add_noise(y, 30, rng=3)[1]
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        born.add_noise(np.zeros(5), 30)


def test_block_file_roundtrip(tmp_path, born_fixture):
    _, _, setup, provider, _ = born_fixture
    blk = provider(0)
    p = born.write_block(tmp_path / "b0.bin", blk)
    raw = p.read_bytes()
    assert int.from_bytes(raw[:8], "little") == blk.shape[0]
    assert int.from_bytes(raw[8:16], "little") == blk.shape[1]
    assert len(raw) == 16 + 8 * blk.size
    np.testing.assert_array_equal(born.read_block(p), blk)
    p.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        born.read_block(p)
    with pytest.raises(ValueError):
        born.write_block(tmp_path / "x.bin", np.ones(3))


# --- Born versus the full model ----------------------------------------------

@pytest.fixture(scope="module")
def born_vs_full(born_fixture, table):
    g, S, setup, _, H = born_fixture
    p = pals.PaLSParams([0.6], [1.0], [[0.0, 0.0, 1.5]], nu_norm=1e-3 * min(g.spacing))
    mu = pals.shape(p, g)
    assert mu.sum() > 3
    y0 = full_diffusion_forward(g, S, setup, np.zeros(g.N), table.anomaly)
    out = []
    for f in (0.25, 0.5, 1.0, 2.0):
        c = f * table.anomaly
        yb = born.forward_measure(H, c, mu, setup)
        yf = full_diffusion_forward(g, S, setup, mu, c) - y0
        out.append(np.linalg.norm(yb - yf) / np.linalg.norm(yf))
    return np.array(out), y0, setup, H


def test_full_forward_without_anomaly_is_incident_readout(born_fixture, fields):
    g, S, setup, _, _ = born_fixture
    sub = setup.subset([0, 1])
    y0 = full_diffusion_forward(g, S, sub, np.zeros(g.N), np.ones(4))
    for s in range(2):
        for d in range(sub.n_ds):
            b = S.restrict(grid.point_source_vector(g, sub.detectors[s, d]))
            for l in range(sub.n_wl):
                assert y0[sub.index(s, d, l)] == pytest.approx(b @ fields.incident[s, l], rel=1e-12)


def test_born_close_to_full_model_for_weak_anomaly(born_vs_full):
    err = born_vs_full[0]
    assert err[0] <= 0.15


def test_born_discrepancy_grows_with_contrast(born_vs_full):
    err = born_vs_full[0]
    assert np.all(np.diff(err) > 0)
