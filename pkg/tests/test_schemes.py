import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from posspde.assembly import assemble
from posspde.errors import ConfigurationError
from posspde.linalg import dense_A
from posspde.mesh import build_unit_square_mesh
from posspde.noise import General, NoiseModel, builtin_model
from posspde.schemes import POSITIVE_SCHEMES, SchemeId, Stepper, milstein_multiplier

N_MESH = 6
DT = 2.0**-5
LAM = 3.0


@pytest.fixture(scope="module")
def setup():
    mesh = build_unit_square_mesh(N_MESH)
    ops = assemble(mesh)
    model = builtin_model("sine2d", mesh, lam=LAM)
    A = dense_A(ops)
    I = np.eye(ops.num_dofs)
    return dict(ops=ops, model=model, A=A, R=lambda w: np.linalg.inv(I + w * A),
                e=model.E[0], U=np.random.default_rng(0).random(ops.num_dofs) + 0.1)


def _step(name, s, U, G, G1=None, G2=None, dt=DT):
    return Stepper(name, s["ops"], s["model"], dt).step(U, np.atleast_1d(G), G1, G2)


def test_parse():
    assert SchemeId.parse("Strang-A") is SchemeId.STRANG_A
    assert SchemeId.parse(SchemeId.EMA) is SchemeId.EMA
    with pytest.raises(ConfigurationError):
        SchemeId.parse("rk4")


def test_split2_one_step(setup):
    s, G = setup, 0.7
    a = LAM * np.sqrt(DT) * s["e"]
    ref = s["R"](DT) @ (np.exp(a * G - a * a / 2) * s["U"])
    np.testing.assert_allclose(_step("split2", s, s["U"], G), ref, rtol=1e-9)


def test_strang_a_one_step(setup):
    s, G = setup, -1.3
    a = LAM * np.sqrt(DT) * s["e"]
    half = s["R"](DT / 2)
    ref = half @ (np.exp(a * G - a * a / 2) * (half @ s["U"]))
    np.testing.assert_allclose(_step("strang_a", s, s["U"], G), ref, rtol=1e-9)


def test_strang_b_one_step(setup):
    s = setup
    G1, G2 = np.array([0.4]), np.array([-2.1])
    a = LAM * np.sqrt(DT / 2) * s["e"]
    ref = np.exp(a * G2 - a * a / 2) * (s["R"](DT) @ (np.exp(a * G1 - a * a / 2) * s["U"]))
    G = (G1 + G2) / np.sqrt(2)
    np.testing.assert_allclose(_step("strang_b", s, s["U"], G, G1, G2), ref, rtol=1e-9)
    with pytest.raises(ConfigurationError):
        _step("strang_b", s, s["U"], G)


def test_ema_emi_one_step(setup):
    s, G = setup, 1.9
    a = LAM * np.sqrt(DT) * s["e"]
    R = s["R"](DT)
    np.testing.assert_allclose(_step("ema", s, s["U"], G), R @ ((1 + a * G) * s["U"]), rtol=1e-9)
    emi = R @ ((1 + a * G + 0.5 * a * a * (G * G - 1)) * s["U"])
    np.testing.assert_allclose(_step("emi", s, s["U"], G), emi, rtol=1e-9)
    np.testing.assert_allclose(_step("emi_clip", s, s["U"], G), np.maximum(emi, 0), rtol=1e-9)


def test_sexp_one_step(setup):
    s, G = setup, 0.3
    a = LAM * np.sqrt(DT) * s["e"]
    ref = scipy.linalg.expm(-DT * s["A"]) @ ((1 + a * G) * s["U"])
    np.testing.assert_allclose(_step("sexp", s, s["U"], G), ref, rtol=1e-10)


def test_lambda_zero_reduces_to_heat_solvers(setup):
    s = setup
    model0 = builtin_model("sine2d", s["ops"].mesh, lam=0.0)
    U = s["U"]
    for name in ("split2", "ema", "emi", "strang_b"):
        out = Stepper(name, s["ops"], model0, DT).step(U, np.array([5.0]), np.array([1.0]),
                                                       np.array([-1.0]))
        np.testing.assert_allclose(out, s["R"](DT) @ U, rtol=1e-9)
    out = Stepper("strang_a", s["ops"], model0, DT).step(U, np.array([5.0]))
    np.testing.assert_allclose(out, s["R"](DT / 2) @ s["R"](DT / 2) @ U, rtol=1e-9)


def test_emi_general_f_matches_linear_path(setup):
    s, G = setup, np.array([0.8])
    gen = General(f=lambda u: LAM * u, c_f=LAM, df=lambda u: np.full_like(u, LAM))
    model = NoiseModel(s["model"].E, 1.0, gen)
    st_gen = Stepper("emi", s["ops"], model, DT)
    np.testing.assert_allclose(st_gen.step(s["U"], G), _step("emi", s, s["U"], G), rtol=1e-12)


def test_ema_with_several_modes(setup):
    s = setup
    model = builtin_model("sine2d", s["ops"].mesh, lam=LAM, modes=3)
    G = np.array([0.5, -1.0, 2.0])
    noise = np.sqrt(DT) * LAM * (G @ model.E) * s["U"]
    out = Stepper("ema", s["ops"], model, DT).step(s["U"], G)
    np.testing.assert_allclose(out, s["R"](DT) @ (s["U"] + noise), rtol=1e-9)
    for name in ("split2", "strang_a", "strang_b", "sexp", "emi", "emi_clip"):
        with pytest.raises(ConfigurationError):
            Stepper(name, s["ops"], model, DT)


def test_stepper_argument_checks(setup):
    s = setup
    gen = NoiseModel(s["model"].E, 1.0, General(f=np.tanh, c_f=1.0))
    with pytest.raises(ConfigurationError):
        Stepper("emi", s["ops"], gen, DT)          # no f'
    with pytest.raises(ConfigurationError):
        Stepper("split2", s["ops"], gen, DT)       # nonlinear f
    Stepper("ema", s["ops"], gen, DT)
    with pytest.raises(ConfigurationError):
        Stepper("ema", s["ops"], s["model"], 0.0)
    other = builtin_model("sine2d", build_unit_square_mesh(4))
    with pytest.raises(ConfigurationError):
        Stepper("ema", s["ops"], other, DT)


def test_batched_step_equals_single(setup):
    s = setup
    rng = np.random.default_rng(1)
    U = rng.random((4, s["ops"].num_dofs))
    G, G1, G2 = rng.standard_normal((3, 4, 1))
    for name in SchemeId:
        st_ = Stepper(name, s["ops"], s["model"], DT)
        batch = st_.step(U, G, G1, G2)
        for p in range(4):
            np.testing.assert_allclose(batch[p], st_.step(U[p], G[p], G1[p], G2[p]),
                                       rtol=1e-12, atol=1e-15)


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 8.0), st.sampled_from([2.0**-k for k in range(2, 9)]),
       st.sampled_from(POSITIVE_SCHEMES))
@settings(max_examples=60, deadline=None)
def test_positive_schemes_map_nonnegative_to_nonnegative(seed, lam, dt, scheme):
    mesh = build_unit_square_mesh(8)
    ops = assemble(mesh)
    model = builtin_model("sine2d", mesh, lam=lam)
    rng = np.random.default_rng(seed)
    U = rng.random(ops.num_dofs) * (rng.random(ops.num_dofs) < 0.5)
    G, G1, G2 = 4 * rng.standard_normal((3, 1))
    out = Stepper(scheme, ops, model, dt).step(U, G, G1, G2)
    assert out.min() >= -1e-12 * max(np.abs(out).max(), 1e-300)


@given(st.floats(-1, 1), st.floats(-1e3, 1e3))
@settings(max_examples=300, deadline=None)
def test_milstein_multiplier_nonnegative_when_a_small(a, G):
    m = milstein_multiplier(a, G)
    assert m >= -1e-12 * max(1.0, abs(m))
    # completed-square form
    assert m == pytest.approx(0.5 * ((1 + a * G) ** 2 + (1 - a * a)), rel=1e-12, abs=1e-12)


def test_milstein_multiplier_can_be_negative_when_a_large():
    # minimum over G of the multiplier is (1 - a^2) / 2
    assert milstein_multiplier(2.0, -0.5) == pytest.approx(-1.5)
