import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from needleforge import coupling
from needleforge.beam import build_needle_model, straight_needle
from needleforge.config import BeamParams, FoamSpec
from needleforge.coupling import (CoupledSystem, InsertionConstraintSet, advance_insertion,
                                  anchor_positions, constraint_jacobians, constraint_rows,
                                  needle_point, reproject, solve_coupled_step)
from needleforge.errors import ConstraintDegeneracyError
from needleforge.mesh import build_foam_mesh

SPACING = 2e-3
AXIS = np.array([0.0, 0.0, 1.0])
ENTRY = np.zeros(3)


@pytest.fixture(scope="module")
def mesh():
    return build_foam_mesh(FoamSpec(size=(0.04, 0.04, 0.06), resolution=(4, 4, 6)))


@pytest.fixture(scope="module")
def needle_model():
    return build_needle_model(BeamParams(length=0.05, n_elements=10))


def insert(mesh, model, depth, step=1e-4, direction=AXIS):
    """Push a straight needle from outside to ``depth``; returns (state, constraint set)."""
    cset = InsertionConstraintSet()
    L = model.params.length
    state = None
    for d in np.arange(step, depth + step / 2, step):
        state = straight_needle(model, ENTRY + (d - L) * direction, direction)
        tangents = state.frames[:, :, 0]
        if cset.active:
            reproject(cset, state.positions, anchor_positions(cset, mesh, mesh.nodes),
                      model.rest_length, tangents)
        advance_insertion(cset, state.positions, mesh.nodes, mesh, ENTRY, AXIS, SPACING, L,
                          tangents=tangents)
    return state, cset


def test_outside_tissue_leaves_set_empty(mesh, needle_model):
    cset = InsertionConstraintSet()
    state = straight_needle(needle_model, [0, 0, -0.06], AXIS)
    advance_insertion(cset, state.positions, mesh.nodes, mesh, ENTRY, AXIS, SPACING,
                      needle_model.params.length)
    assert not cset.active and len(cset) == 0 and not cset.out_of_domain


def replay_count(depths, spacing):
    """Brute-force count of interior anchors for a tip depth schedule."""
    deepest, count = None, 0
    for d in depths:
        if d <= 0:
            continue
        if deepest is None:
            deepest = d
        while d - deepest > spacing:
            deepest = d
            count += 1
    return count


def test_insertion_schedule_replay(mesh, needle_model):
    step = 1e-4
    depth = 3.2 * SPACING
    _, cset = insert(mesh, needle_model, depth, step)
    depths = np.arange(step, depth + step / 2, step)
    assert len(cset) == 1 + replay_count(depths, SPACING) == 4


def test_anchor_reconstruction_and_frames(mesh, needle_model):
    state, cset = insert(mesh, needle_model, 0.02)
    anchors = anchor_positions(cset, mesh, mesh.nodes)
    L = needle_model.params.length
    tangents = state.frames[:, :, 0]
    p, t, _, _ = needle_point(state.positions, cset.arcs(), needle_model.rest_length, tangents)
    # anchors of a straight push lie on the needle, at arc = L - depth
    assert np.allclose(p, anchors, atol=1e-10)
    assert np.allclose(anchors[:, :2], 0, atol=1e-12)
    assert np.allclose(cset.entry.rest_anchor, ENTRY, atol=1e-12)
    arcs = cset.arcs()
    assert np.all(np.diff(arcs) > 0)
    gaps = np.diff(arcs)
    assert np.all((gaps >= 0.5 * SPACING) & (gaps <= 1.5 * SPACING))
    assert np.isclose(arcs[0], L - 0.02, atol=1e-9)
    for c, tk in zip(cset.constraints, t):
        assert np.allclose(c.frame @ c.frame.T, np.eye(2), atol=1e-9)
        assert np.abs(c.frame @ tk).max() <= 1e-9
        assert np.all((c.weights >= 0) & (c.weights <= 1)) and np.isclose(c.weights.sum(), 1)


def test_new_anchor_equals_tip(mesh, needle_model):
    cset = InsertionConstraintSet()
    L = needle_model.params.length
    direction = np.array([0.2, -0.1, 1.0])
    direction /= np.linalg.norm(direction)
    for d in (1e-3, 3.5e-3):
        state = straight_needle(needle_model, (d - L) * direction, direction)
        tangents = state.frames[:, :, 0]
        if cset.active:
            reproject(cset, state.positions, anchor_positions(cset, mesh, mesh.nodes),
                      needle_model.rest_length, tangents)
        n_before = len(cset)
        advance_insertion(cset, state.positions, mesh.nodes, mesh, ENTRY, AXIS, SPACING, L,
                          tangents=tangents)
        new = cset.constraints[-1]
        if len(cset) > n_before and n_before > 0:
            assert np.allclose(new.weights @ mesh.nodes[mesh.tets[new.tet]], state.positions[-1],
                               atol=1e-10)
    # entry anchor sits where the needle crosses the surface
    assert np.allclose(cset.entry.rest_anchor, ENTRY, atol=1e-10)


def test_punch_through_is_out_of_domain(mesh, needle_model):
    _, cset = insert(mesh, needle_model, 0.058, step=2e-3)
    state = straight_needle(needle_model, [0, 0, 0.065 - needle_model.params.length], AXIS)
    reproject(cset, state.positions, anchor_positions(cset, mesh, mesh.nodes),
              needle_model.rest_length, state.frames[:, :, 0])
    advance_insertion(cset, state.positions, mesh.nodes, mesh, ENTRY, AXIS, SPACING,
                      needle_model.params.length, tangents=state.frames[:, :, 0])
    assert cset.out_of_domain


def perturbed(state, dx, dtheta):
    s = state.copy()
    s.positions = s.positions + dx
    s.quats = (Rotation.from_rotvec(dtheta) * Rotation.from_quat(s.quats)).as_quat()
    return s


def bent_setup(mesh, needle_model, rng):
    state, cset = insert(mesh, needle_model, 0.015)
    state = perturbed(state, 2e-5 * rng.normal(size=state.positions.shape),
                      0.01 * rng.normal(size=state.positions.shape))
    tissue = mesh.nodes + 1e-5 * rng.normal(size=mesh.nodes.shape)
    return state, cset, tissue


def violation(cset, mesh, state, tissue, rest_length):
    return constraint_rows(cset, state.positions, tissue, mesh, rest_length,
                           state.frames[:, :, 0])[-1]


def test_jacobian_matches_finite_differences(mesh, needle_model, rng):
    state, cset, tissue = bent_setup(mesh, needle_model, rng)
    L0 = needle_model.rest_length
    J_n, J_t, c0 = constraint_jacobians(cset, state.positions, tissue, mesh, L0,
                                        state.frames[:, :, 0])
    n = needle_model.n_nodes
    v_n = rng.normal(size=(n, 6))
    v_t = rng.normal(size=tissue.shape)
    h = 1e-7
    plus = violation(cset, mesh, perturbed(state, h * v_n[:, :3], h * v_n[:, 3:]),
                     tissue + h * v_t, L0)
    minus = violation(cset, mesh, perturbed(state, -h * v_n[:, :3], -h * v_n[:, 3:]),
                      tissue - h * v_t, L0)
    fd = (plus - minus) / (2 * h)
    lin = J_n @ v_n.ravel() + J_t @ v_t.ravel()
    assert np.linalg.norm(fd - lin) <= 1e-6 * np.linalg.norm(fd)


def test_rigid_translation_has_zero_rate(mesh, needle_model, rng):
    state, cset, tissue = bent_setup(mesh, needle_model, rng)
    J_n, J_t, _ = constraint_jacobians(cset, state.positions, tissue, mesh,
                                       needle_model.rest_length, state.frames[:, :, 0])
    u = rng.normal(size=3)
    v_n = np.zeros((needle_model.n_nodes, 6))
    v_n[:, :3] = u
    v_t = np.tile(u, (len(tissue), 1))
    assert np.abs(J_n @ v_n.ravel() + J_t @ v_t.ravel()).max() < 1e-12 * np.linalg.norm(u) * 10


def test_axial_slide_has_zero_rate(mesh, needle_model):
    state, cset = insert(mesh, needle_model, 0.015)
    J_n, J_t, _ = constraint_jacobians(cset, state.positions, mesh.nodes, mesh,
                                       needle_model.rest_length, state.frames[:, :, 0])
    v_n = np.zeros((needle_model.n_nodes, 6))
    v_n[:, :3] = AXIS
    assert np.abs(J_n @ v_n.ravel()).max() < 1e-12


def test_constraint_forces_equal_and_opposite(mesh, needle_model, rng):
    state, cset, tissue = bent_setup(mesh, needle_model, rng)
    J_n, J_t, _ = constraint_jacobians(cset, state.positions, tissue, mesh,
                                       needle_model.rest_length, state.frames[:, :, 0])
    lam = rng.normal(size=J_n.shape[0])
    f_n = (J_n.T @ lam).reshape(-1, 6)[:, :3].sum(axis=0)
    f_t = (J_t.T @ lam).reshape(-1, 3).sum(axis=0)
    assert np.allclose(f_n + f_t, 0, atol=1e-12 * np.abs(lam).sum())


def test_multipliers_are_lateral(mesh, needle_model, rng):
    state, cset = insert(mesh, needle_model, 0.015)
    J_n, J_t, _ = constraint_jacobians(cset, state.positions, mesh.nodes, mesh,
                                       needle_model.rest_length, state.frames[:, :, 0])
    f = (J_n.T @ rng.normal(size=J_n.shape[0])).reshape(-1, 6)[:, :3]
    assert abs(f.sum(axis=0) @ AXIS) < 1e-12


def test_two_mass_kkt_oracle():
    # unit masses, constraint v2 - v1 = 0, forces +1 and -1
    J_t, J_n = np.array([[-1.0]]), np.array([[1.0]])
    dv_t, dv_n, lam = solve_coupled_step(np.eye(1), np.eye(1), J_t, J_n, np.array([1.0]),
                                         np.array([-1.0]), np.zeros(1), dt=1.0)
    assert abs(lam[0] - 1.0) <= 1e-10
    assert abs(dv_t[0]) <= 1e-10 and abs(dv_n[0]) <= 1e-10


def test_empty_constraint_set_is_uncoupled(rng):
    A_t = np.diag([2.0, 3.0, 4.0])
    A_n = np.diag([5.0, 6.0])
    b_t, b_n = rng.normal(size=3), rng.normal(size=2)
    dv_t, dv_n, lam = solve_coupled_step(A_t, A_n, np.zeros((0, 3)), np.zeros((0, 2)), b_t, b_n,
                                         np.zeros(0), dt=0.01)
    assert np.allclose(dv_t, b_t / [2, 3, 4]) and np.allclose(dv_n, b_n / [5, 6])
    assert lam.size == 0


def spd(rng, n):
    Q = rng.normal(size=(n, n))
    return Q @ Q.T + n * np.eye(n)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4))
def test_random_kkt_residual(seed, m):
    rng = np.random.default_rng(seed)
    nt, nn = 7, 5
    A_t, A_n = spd(rng, nt), spd(rng, nn)
    J_t, J_n = rng.normal(size=(m, nt)), rng.normal(size=(m, nn))
    b_t, b_n = rng.normal(size=nt), rng.normal(size=nn)
    v_t, v_n = rng.normal(size=nt), rng.normal(size=nn)
    c, dt, beta = 1e-3 * rng.normal(size=m), 0.01, 0.7
    dv_t, dv_n, lam = solve_coupled_step(A_t, sp.csr_matrix(A_n), J_t, J_n, b_t, b_n, c, dt,
                                         v_t=v_t, v_n=v_n, baumgarte=beta)
    # full KKT matrix residual
    K = np.block([[A_t, np.zeros((nt, nn)), -J_t.T],
                  [np.zeros((nn, nt)), A_n, -J_n.T],
                  [J_t, J_n, np.zeros((m, m))]])
    rhs = np.concatenate([b_t, b_n, -beta / dt * c - J_t @ v_t - J_n @ v_n])
    x = np.concatenate([dv_t, dv_n, lam])
    assert np.linalg.norm(K @ x - rhs) <= 1e-10 * np.linalg.norm(K) * max(np.linalg.norm(x), 1)
    rate = J_t @ (v_t + dv_t) + J_n @ (v_n + dv_n) + beta / dt * c
    assert np.abs(rate).max() <= 1e-8


def test_duplicate_rows_name_arcs():
    J = np.array([[1.0, 0.0], [1.0, 0.0]])
    Z = np.linalg.solve(np.eye(2), J.T)
    with pytest.raises(ConstraintDegeneracyError) as err:
        CoupledSystem(J, np.zeros((2, 1)), Z, np.zeros((1, 2)), arcs=[0.01, 0.01])
    assert "10.0000 mm" in str(err.value)


def test_hermite_curve_interpolates_nodes(needle_model, rng):
    state = straight_needle(needle_model, [0, 0, 0], [0, 0, 1])
    state = perturbed(state, 1e-4 * rng.normal(size=state.positions.shape),
                      0.02 * rng.normal(size=state.positions.shape))
    L0 = needle_model.rest_length
    arcs = np.arange(needle_model.n_nodes - 1) * L0
    p, t, e, xi = needle_point(state.positions, arcs, L0, state.frames[:, :, 0])
    assert np.allclose(p, state.positions[:-1], atol=1e-15)
    assert np.allclose(t, state.frames[:-1, :, 0], atol=1e-12)


def test_closest_points_recovers_arc(needle_model, rng):
    state = straight_needle(needle_model, [0, 0, 0], [0, 0, 1])
    state = perturbed(state, 1e-5 * rng.normal(size=state.positions.shape),
                      0.01 * rng.normal(size=state.positions.shape))
    L0 = needle_model.rest_length
    tangents = state.frames[:, :, 0]
    arcs = rng.uniform(0.0, needle_model.params.length * 0.999, size=20)
    p, _, _, _ = needle_point(state.positions, arcs, L0, tangents)
    e, xi, _ = coupling.closest_points(state.positions, p, L0, tangents)
    assert np.allclose((e + xi) * L0, arcs, atol=1e-9)
