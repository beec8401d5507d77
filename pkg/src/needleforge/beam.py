"""Flexible needle: serially linked co-rotational Timoshenko beam elements.

Each node carries 6 DOFs ``[tx, ty, tz, rx, ry, rz]``; node 0 is the needle
base held by the robot effector and the last node is the tip.  Node frames
store the needle axis in their first column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .config import BeamParams
from .errors import ConfigError


def beam_element_stiffness(p: BeamParams, element_length):
    """Local 12x12 Timoshenko stiffness, element axis along local x.

    DOF order ``[u1 v1 w1 tx1 ty1 tz1, u2 v2 w2 tx2 ty2 tz2]``.
    """
    L = float(element_length)
    if L <= 0:
        raise ConfigError("element length must be > 0")
    for name in ("young_modulus", "shear_modulus", "radius", "shear_correction"):
        if getattr(p, name) <= 0:
            raise ConfigError(f"needle {name} must be > 0")
    E, G, A, I, J = p.young_modulus, p.shear_modulus, p.area, p.inertia, p.polar_inertia
    phi = 12 * E * I / (p.shear_correction * G * A * L ** 2)
    return _timoshenko_local(E, G, A, I, I, J, L, phi, phi)


def _timoshenko_local(E, G, A, Iy, Iz, J, L, phi_y, phi_z):
    K = np.zeros((12, 12))
    ka = E * A / L
    kt = G * J / L
    K[0, 0] = K[6, 6] = ka
    K[0, 6] = K[6, 0] = -ka
    K[3, 3] = K[9, 9] = kt
    K[3, 9] = K[9, 3] = -kt

    # bending in x-y plane: v, theta_z
    c = E * Iz / ((1 + phi_y) * L ** 3)
    idx = [1, 5, 7, 11]
    kb = c * np.array([
        [12, 6 * L, -12, 6 * L],
        [6 * L, (4 + phi_y) * L ** 2, -6 * L, (2 - phi_y) * L ** 2],
        [-12, -6 * L, 12, -6 * L],
        [6 * L, (2 - phi_y) * L ** 2, -6 * L, (4 + phi_y) * L ** 2],
    ])
    K[np.ix_(idx, idx)] = kb

    # bending in x-z plane: w, theta_y (rotation sign flips the coupling)
    c = E * Iy / ((1 + phi_z) * L ** 3)
    idx = [2, 4, 8, 10]
    kb = c * np.array([
        [12, -6 * L, -12, -6 * L],
        [-6 * L, (4 + phi_z) * L ** 2, 6 * L, (2 - phi_z) * L ** 2],
        [-12, 6 * L, 12, 6 * L],
        [-6 * L, (2 - phi_z) * L ** 2, 6 * L, (4 + phi_z) * L ** 2],
    ])
    K[np.ix_(idx, idx)] = kb
    return K


def assemble_straight(p: BeamParams, n_elements=None):
    """Global stiffness of an undeformed needle lying along the x axis."""
    n = int(n_elements or p.n_elements)
    Ke = beam_element_stiffness(p, p.length / n)
    K = np.zeros((6 * (n + 1), 6 * (n + 1)))
    for e in range(n):
        s = slice(6 * e, 6 * e + 12)
        K[s, s] += Ke
    return K


def cantilever_tip_deflection(p: BeamParams, tip_load, n_elements=None, direction=1):
    """Transverse tip displacement of the base-clamped needle under a tip point load.

    ``direction`` selects the load/displacement DOF at the tip (0 axial, 1 or 2
    transverse).
    """
    K = assemble_straight(p, n_elements)
    Kff = K[6:, 6:]
    f = np.zeros(len(Kff))
    f[-6 + direction] = tip_load
    try:
        u = np.linalg.solve(Kff, f)
    except np.linalg.LinAlgError:
        raise ConfigError("singular cantilever system") from None
    return float(u[-6 + direction])


@dataclass(frozen=True)
class NeedleModel:
    params: BeamParams
    rest_length: float  # per element
    local_stiffness: np.ndarray
    masses: np.ndarray  # (n_nodes, 6) lumped diagonal

    @property
    def n_nodes(self):
        return self.params.n_elements + 1

    @property
    def n_dof(self):
        return 6 * self.n_nodes


def build_needle_model(p: BeamParams) -> NeedleModel:
    n = p.n_elements
    l0 = p.length / n
    m = p.density * p.area * l0
    rot = p.density * p.polar_inertia * l0
    w = np.full(n + 1, 1.0)
    w[[0, -1]] = 0.5
    masses = np.column_stack([np.outer(w * m, np.ones(3)), np.outer(w * rot, np.ones(3))])
    return NeedleModel(p, l0, beam_element_stiffness(p, l0), masses)


@dataclass
class NeedleState:
    positions: np.ndarray  # (n_nodes, 3)
    quats: np.ndarray  # (n_nodes, 4) scalar-last unit quaternions
    velocities: np.ndarray  # (n_nodes, 6) linear and spatial angular velocity

    def copy(self):
        return NeedleState(self.positions.copy(), self.quats.copy(), self.velocities.copy())

    @property
    def frames(self):
        return Rotation.from_quat(self.quats).as_matrix()

    @property
    def base_position(self):
        return self.positions[0]

    @property
    def base_frame(self):
        return Rotation.from_quat(self.quats[0]).as_matrix()


def frame_from_axis(axis, reference=None):
    """Rotation whose first column is ``axis``; minimal rotation from ``reference``."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    if reference is None:
        reference = np.eye(3)
    return align_axis(reference, axis)


def align_axis(frame, axis):
    """Rotate ``frame`` by the minimal rotation taking its first column onto ``axis``."""
    a = frame[:, 0]
    b = axis / np.linalg.norm(axis)
    return minimal_rotation(a, b) @ frame


def minimal_rotation(a, b):
    """Rotation matrix taking unit vector ``a`` onto unit vector ``b`` about ``a x b``."""
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    if c < -1 + 1e-12:
        # antiparallel: rotate by pi about any axis perpendicular to a
        perp = np.cross(a, [1.0, 0, 0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0, 1.0, 0])
        perp /= np.linalg.norm(perp)
        return 2 * np.outer(perp, perp) - np.eye(3)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx / (1 + c)


def _batched_minimal_rotation(a, b):
    v = np.cross(a, b)
    c = np.einsum("ij,ij->i", a, b)
    vx = np.zeros((len(a), 3, 3))
    vx[:, 0, 1], vx[:, 0, 2] = -v[:, 2], v[:, 1]
    vx[:, 1, 0], vx[:, 1, 2] = v[:, 2], -v[:, 0]
    vx[:, 2, 0], vx[:, 2, 1] = -v[:, 1], v[:, 0]
    return np.eye(3) + vx + np.matmul(vx, vx) / (1 + c)[:, None, None]


def straight_needle(model: NeedleModel, base, axis, reference=None) -> NeedleState:
    """Undeformed needle with its base at ``base`` pointing along ``axis``."""
    frame = frame_from_axis(axis, reference)
    s = np.arange(model.n_nodes) * model.rest_length
    positions = np.asarray(base, dtype=float) + s[:, None] * frame[:, 0]
    quats = np.tile(Rotation.from_matrix(frame).as_quat(), (model.n_nodes, 1))
    return NeedleState(positions, quats, np.zeros((model.n_nodes, 6)))


def needle_tip(state: NeedleState):
    return state.positions[-1].copy()


def element_frames(model: NeedleModel, state: NeedleState):
    """Co-rotated element frames and local deformation vectors.

    The element frame takes its x axis along the current chord and its
    y/z axes from the mid rotation between the two node frames.
    """
    Rn = state.frames
    Ra, Rb = Rn[:-1], Rn[1:]
    chord = state.positions[1:] - state.positions[:-1]
    length = np.linalg.norm(chord, axis=1)
    ex = chord / length[:, None]
    half = Rotation.from_matrix(np.matmul(np.swapaxes(Ra, 1, 2), Rb)).as_rotvec() * 0.5
    Rm = np.matmul(Ra, Rotation.from_rotvec(half).as_matrix())
    Re = np.matmul(_batched_minimal_rotation(Rm[:, :, 0], ex), Rm)
    ReT = np.swapaxes(Re, 1, 2)
    theta_a = Rotation.from_matrix(np.matmul(ReT, Ra)).as_rotvec()
    theta_b = Rotation.from_matrix(np.matmul(ReT, Rb)).as_rotvec()
    d = np.zeros((len(Re), 12))
    d[:, 3:6] = theta_a
    d[:, 6] = length - model.rest_length
    d[:, 9:12] = theta_b
    return Re, d


def _element_dofs(n_elements):
    return (6 * np.arange(n_elements)[:, None] + np.arange(12)).astype(int)


def needle_forces(model: NeedleModel, state: NeedleState):
    """Internal elastic forces/moments and dense tangent (element frames frozen)."""
    Re, d = element_frames(model, state)
    n_el = len(Re)
    K = model.local_stiffness
    f_loc = d @ K
    f = -np.matmul(f_loc.reshape(n_el, 4, 1, 3), np.swapaxes(Re, 1, 2)[:, None]).reshape(n_el, 12)
    dofs = _element_dofs(n_el)
    force = np.bincount(dofs.ravel(), weights=f.ravel(), minlength=model.n_dof)

    T = np.zeros((n_el, 12, 12))
    for k in range(4):
        T[:, 3 * k:3 * k + 3, 3 * k:3 * k + 3] = Re
    Kg = np.matmul(np.matmul(T, K), np.swapaxes(T, 1, 2))
    tangent = np.zeros((model.n_dof, model.n_dof))
    for e in range(n_el):
        s = slice(6 * e, 6 * e + 12)
        tangent[s, s] += Kg[e]
    return force, tangent


def integrate_rotations(quats, omega, dt):
    """Apply spatial angular velocities for one step: q <- exp(dt w) q."""
    return (Rotation.from_rotvec(dt * omega) * Rotation.from_quat(quats)).as_quat()
