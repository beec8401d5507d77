import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from needleforge.beam import (assemble_straight, beam_element_stiffness, build_needle_model,
                              cantilever_tip_deflection, element_frames, needle_forces,
                              needle_tip, straight_needle)
from needleforge.config import BeamParams
from needleforge.errors import ConfigError

P = BeamParams()


def flexibility_oracle(p, L):
    """Element stiffness from the cantilever flexibility of a Timoshenko beam."""
    E, G, A, I, J = p.young_modulus, p.shear_modulus, p.area, p.inertia, p.polar_inertia
    kGA = p.shear_correction * G * A
    f = np.array([[L ** 3 / (3 * E * I) + L / kGA, L ** 2 / (2 * E * I)],
                  [L ** 2 / (2 * E * I), L / (E * I)]])
    k = np.linalg.inv(f)
    K = np.zeros((12, 12))
    # relative tip deflection after removing node-1 rigid motion, per bending plane
    for disp, rot, s in ((1, 5, 1.0), (2, 4, -1.0)):
        B = np.zeros((2, 12))
        B[0, [disp, rot, 6 + disp]] = [-1.0, -s * L, 1.0]
        B[1, [rot, 6 + rot]] = [-s, s]
        K += B.T @ k @ B
    for a, c in ((0, E * A / L), (3, G * J / L)):
        K[np.ix_([a, a + 6], [a, a + 6])] += c * np.array([[1, -1], [-1, 1]])
    return K


def test_matches_flexibility_oracle():
    for L in (P.length / 30, 0.02, 0.3):
        K = beam_element_stiffness(P, L)
        ref = flexibility_oracle(P, L)
        scale = np.abs(ref).max()
        mask = np.abs(ref) > 1e-12 * scale
        assert np.abs(K - ref).max() <= 1e-12 * scale
        assert np.all(np.abs(K[mask] - ref[mask]) <= 1e-9 * np.abs(ref[mask]))


def test_shear_rigid_limit():
    p = BeamParams(shear_modulus=1e30)
    L = 0.01
    K = beam_element_stiffness(p, L)
    EI = p.young_modulus * p.inertia
    for v, t in ((1, 5), (2, 4)):
        assert np.isclose(abs(K[v, v]), 12 * EI / L ** 3, rtol=1e-12)
        assert np.isclose(abs(K[v, t]), 6 * EI / L ** 2, rtol=1e-12)
        assert np.isclose(K[t, t], 4 * EI / L, rtol=1e-12)
        assert np.isclose(K[t, t + 6], 2 * EI / L, rtol=1e-12)


def test_element_symmetric_with_six_rigid_modes():
    K = beam_element_stiffness(P, 0.005)
    assert np.array_equal(K, K.T)
    ev = np.linalg.eigvalsh(K)
    assert np.sum(np.abs(ev) < 1e-9 * ev.max()) == 6


def test_assembled_null_space_is_rigid_motion():
    K = assemble_straight(P, 10)
    ev = np.sort(np.abs(np.linalg.eigvalsh(K))) / np.abs(K).max()
    # six round-off level modes, then a gap of many orders of magnitude
    assert ev[5] < 1e-14 and ev[6] > 1e-11
    # an explicit small rigid rotation about z: v = theta * x, rz = theta
    x = np.linspace(0, P.length, 11)
    u = np.zeros((11, 6))
    u[:, 1] = x
    u[:, 5] = 1.0
    assert np.linalg.norm(K @ u.ravel()) <= 1e-9 * np.linalg.norm(K) * np.linalg.norm(u)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 6 * 6, elements=st.floats(-1, 1)))
def test_energy_nonnegative(u):
    K = assemble_straight(P, 5)
    assert 0.5 * u @ K @ u >= -1e-9 * np.linalg.norm(K) * (u @ u)


@pytest.mark.parametrize("n", [20, 30, 60])
def test_cantilever_transverse(n):
    load = 0.01
    EI = P.young_modulus * P.inertia
    kGA = P.shear_correction * P.shear_modulus * P.area
    ref = load * P.length ** 3 / (3 * EI) + load * P.length / kGA
    for direction in (1, 2):
        got = cantilever_tip_deflection(P, load, n_elements=n, direction=direction)
        assert abs(got - ref) <= 0.01 * abs(ref)


def test_cantilever_axial():
    load = 5.0
    got = cantilever_tip_deflection(P, load, direction=0)
    ref = load * P.length / (P.young_modulus * P.area)
    assert abs(got - ref) <= 1e-6 * ref


def test_cantilever_zero_load():
    assert cantilever_tip_deflection(P, 0.0) == 0.0


def test_doubling_stiffness_halves_bending():
    stiff_shear = BeamParams(shear_modulus=1e30)
    double = BeamParams(young_modulus=2 * P.young_modulus, shear_modulus=1e30)
    a = cantilever_tip_deflection(stiff_shear, 0.01)
    b = cantilever_tip_deflection(double, 0.01)
    assert np.isclose(b, a / 2, rtol=1e-9)


def test_invalid_params():
    with pytest.raises(ConfigError):
        BeamParams(radius=0.0)
    with pytest.raises(ConfigError):
        BeamParams(n_elements=1)
    with pytest.raises(ConfigError):
        beam_element_stiffness(P, 0.0)


def test_straight_needle_tip():
    model = build_needle_model(P)
    axis = np.array([1.0, 2.0, 2.0]) / 3
    base = np.array([0.01, -0.02, 0.03])
    s = straight_needle(model, base, axis)
    assert np.allclose(needle_tip(s), base + P.length * axis, atol=1e-15)
    assert np.allclose(s.positions[0], base)
    assert np.allclose(np.linalg.norm(s.quats, axis=1), 1.0, atol=1e-9)
    assert np.allclose(s.frames[:, :, 0], axis)


def test_rigid_translation_moves_tip():
    model = build_needle_model(P)
    s = straight_needle(model, [0, 0, -0.15], [0, 0, 1])
    t = np.array([1e-3, -2e-3, 5e-4])
    tip = needle_tip(s)
    s.positions += t
    assert np.array_equal(needle_tip(s), tip + t)


def test_undeformed_needle_is_force_free():
    model = build_needle_model(P)
    s = straight_needle(model, [0, 0, -0.15], [0.6, 0, 0.8])
    f, K = needle_forces(model, s)
    assert np.abs(f).max() < 1e-9
    assert np.allclose(K, K.T, atol=1e-9 * np.abs(K).max())


def test_corotated_cantilever_matches_linear_solution():
    # small tip load along y on a needle lying on x; one Newton step from rest
    p = BeamParams(n_elements=20)
    model = build_needle_model(p)
    s = straight_needle(model, [0, 0, 0], [1, 0, 0])
    _, K = needle_forces(model, s)
    f = np.zeros(model.n_dof)
    f[-5] = 1e-4
    u = np.zeros(model.n_dof)
    u[6:] = np.linalg.solve(K[6:, 6:], f[6:])
    expected = cantilever_tip_deflection(p, 1e-4, n_elements=20)
    assert np.isclose(u[-5], expected, rtol=1e-9)


def test_element_frames_zero_deformation_under_rigid_motion():
    model = build_needle_model(BeamParams(n_elements=6))
    s = straight_needle(model, [0.1, 0.2, 0.3], [0, 1, 1])
    _, d = element_frames(model, s)
    assert np.abs(d).max() < 1e-12
