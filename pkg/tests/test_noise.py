import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from posspde.errors import ConfigurationError, InputError
from posspde.mesh import build_interval_mesh, build_unit_square_mesh
from posspde.noise import (
    BrownianLattice,
    General,
    Linear,
    NoiseModel,
    batch_increments_at,
    builtin_model,
    increments_at,
    lattice_batch,
    model_from_expressions,
)


def test_lattice_is_reproducible_and_path_keyed():
    a = BrownianLattice(7, 3, 2, 256, 1.0)
    b = BrownianLattice(7, 3, 2, 256, 1.0)
    np.testing.assert_array_equal(a.dB, b.dB)
    assert not np.array_equal(a.dB, BrownianLattice(7, 4, 2, 256, 1.0).dB)
    assert not np.array_equal(a.dB, BrownianLattice(8, 3, 2, 256, 1.0).dB)
    assert not np.array_equal(a.dB[0], a.dB[1])


def test_mode_streams_do_not_depend_on_mode_count():
    one = BrownianLattice(1, 0, 1, 64, 2.0).dB
    three = BrownianLattice(1, 0, 3, 64, 2.0).dB
    np.testing.assert_array_equal(one[0], three[0])


def test_increment_distribution():
    T, K = 2.0, 1 << 14
    dB = BrownianLattice(11, 0, 1, K, T).dB[0]
    z = dB / np.sqrt(T / K)
    # Kolmogorov-Smirnov against N(0, 1); p-value far from the rejection zone
    assert stats.kstest(z, "norm").pvalue > 1e-4
    assert abs(z.mean()) < 5 / np.sqrt(K)
    assert abs(z.var() - 1) < 5 * np.sqrt(2 / K)


@given(st.integers(1, 10), st.integers(0, 10), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_dyadic_levels_are_bitwise_sums(log_k, log_f, path):
    K = 1 << log_k
    lat = BrownianLattice(5, path, 2, K, 1.0)
    f = 1 << min(log_f, log_k)
    coarse = lat.level(f)
    assert coarse.shape == (2, K // f)
    # brute-force pairwise tree
    ref = lat.dB
    g = 1
    while g < f:
        ref = ref[:, 0::2] + ref[:, 1::2]
        g *= 2
    np.testing.assert_array_equal(coarse, ref)
    np.testing.assert_allclose(coarse.sum(axis=1), lat.dB.sum(axis=1), rtol=1e-10, atol=1e-12)


def test_step_noise_normalization():
    T, K = 1.0, 64
    lat = BrownianLattice(2, 1, 1, K, T)
    fine = increments_at(lat, 1)
    assert fine.G1 is None and fine.G2 is None
    assert fine.dt == T / K
    s = increments_at(lat, 4)
    assert s.dt == 4 * T / K
    np.testing.assert_allclose(s.G, s.dB / np.sqrt(s.dt))
    # G = (G1 + G2) / sqrt(2) because dB = dB1 + dB2 with half steps
    np.testing.assert_allclose(s.G, (s.G1 + s.G2) / np.sqrt(2), rtol=1e-12, atol=1e-12)


def test_batch_matches_single_path_bitwise():
    ids = [0, 3, 9]
    dB = lattice_batch(4, ids, 1, 128, 0.5)
    for f in (1, 2, 8):
        batch = batch_increments_at(dB, f, 0.5)
        for row, p in enumerate(ids):
            single = increments_at(BrownianLattice(4, p, 1, 128, 0.5), f)
            np.testing.assert_array_equal(batch.dB[row], single.dB)
            np.testing.assert_array_equal(batch.G[row], single.G)
            if f > 1:
                np.testing.assert_array_equal(batch.G1[row], single.G1)


@pytest.mark.parametrize("K,factor", [(100, 1), (64, 3), (64, 128), (64, 0)])
def test_bad_lattice_shapes(K, factor):
    with pytest.raises(ConfigurationError):
        lat = BrownianLattice(0, 0, 1, K, 1.0)
        lat.level(factor)


def test_nonpositive_T_rejected():
    with pytest.raises(ConfigurationError):
        BrownianLattice(0, 0, 1, 8, 0.0)


def test_builtin_sine_models():
    mesh = build_unit_square_mesh(8)
    model = builtin_model("sine2d", mesh, lam=3.0)
    x, y = mesh.dof_coords.T
    np.testing.assert_allclose(model.E[0], np.sin(np.pi * x) * np.sin(np.pi * y))
    assert model.M == 1 and model.c_e == 1.0 and model.lam == 3.0 and model.linear
    assert model.spec.c_f == 3.0
    multi = builtin_model("sine2d", mesh, lam=1.0, modes=3)
    np.testing.assert_allclose(multi.E[1], np.sin(np.pi * x) * np.sin(2 * np.pi * y))
    np.testing.assert_allclose(multi.E[2], np.sin(2 * np.pi * x) * np.sin(np.pi * y))
    m1 = builtin_model("sine1d", build_interval_mesh(8), lam=-2.0)
    assert m1.spec.c_f == 2.0
    with pytest.raises(ConfigurationError):
        builtin_model("sine1d", mesh)
    with pytest.raises(ConfigurationError):
        builtin_model("cosine", mesh)
    with pytest.raises(ConfigurationError):
        builtin_model("sine2d", mesh, modes=0)


def test_general_coefficient_checks():
    g = General(f=np.tanh, c_f=1.0, df=lambda u: 1 / np.cosh(u) ** 2)
    assert g.c_f == 1.0
    with pytest.raises(ConfigurationError):
        General(f=lambda u: u + 1, c_f=1.0)
    mesh = build_unit_square_mesh(4)
    model = NoiseModel(builtin_model("sine2d", mesh).E, 1.0, g)
    assert not model.linear
    with pytest.raises(ConfigurationError):
        model.lam
    with pytest.raises(InputError):
        NoiseModel(2 * model.E, 1.0, g)
    np.testing.assert_allclose(Linear(2.0).df(np.zeros(3)), 2.0)


def test_expression_modes_warn_about_c_e(caplog):
    mesh = build_unit_square_mesh(8)
    with caplog.at_level(logging.WARNING, logger="posspde.noise"):
        model = model_from_expressions(["sin(pi*x)*sin(pi*y)", "0.5*sin(2*pi*x)"], mesh, 2.0)
    assert "nodal maximum" in caplog.text
    assert not model.c_e_exact
    assert model.M == 2
    assert model.c_e == pytest.approx(np.max(np.abs(model.E)))
    with pytest.raises(Exception):
        model_from_expressions(["__import__('os')"], mesh)
