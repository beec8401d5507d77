"""Implicit-Euler stepping of the coupled needle-tissue system.

A step linearizes the current state once (co-rotational forces, needle
tangent, constraint Jacobians, Schur complement) and caches the result on the
scene.  Clones share that cache, so trial steps issued by the inverse
controller from the same state only pay for the command-dependent part:
the prescribed base motion enters the needle right-hand side linearly.

The tissue implicit matrix ``(1 + dt a) M + (dt b + dt^2) K`` is factorized
with the co-rotated tangent of a reference state and refreshed whenever any
element has rotated more than ``tangent_refresh`` radians since then
(``tangent_refresh = 0`` refactorizes every step).  Forces are always exact.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial.transform import Rotation

from . import beam, coupling
from .config import SceneConfig
from .errors import ConstraintDegeneracyError, SimulationDiverged, UsageError
from .fem import assemble_tangent, build_tissue_model, element_forces, element_rotations, rest_state
from .mesh import build_foam_mesh, signed_volumes

PRE_INSERTION = "pre-insertion"
INSERTING = "inserting"
DONE = "done"
DIVERGED = "diverged"
OUT_OF_DOMAIN = "out-of-domain"
FACE_NORMAL = np.array([0.0, 0.0, 1.0])  # inward normal of the insertion face z = 0


@dataclass(frozen=True)
class EffectorCommand:
    target_translation: np.ndarray
    rcm_point: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.target_translation, dtype=float)
        r = np.asarray(self.rcm_point, dtype=float)
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(r))):
            raise ValueError("effector command must be finite")
        object.__setattr__(self, "target_translation", t)
        object.__setattr__(self, "rcm_point", r)


class TissueSolver:
    """Factorized tissue implicit matrix plus cached anchor compliance columns."""

    def __init__(self, model, cfg: SceneConfig, R):
        mat = model.material
        dt = cfg.dt
        K = assemble_tangent(model, R, free_only=True)
        M = sp.diags(np.repeat(model.masses, 3)[model.free_dofs])
        A = ((1 + dt * mat.rayleigh_mass) * M
             + (dt * mat.rayleigh_stiffness + dt * dt) * K).tocsc()
        self.lu = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options=dict(SymmetricMode=True))
        self.R_ref = R
        self.model = model
        self._columns = {}
        self._stack = np.zeros((model.n_free, 0))
        self._stack_uids = ()

    def max_rotation(self, R):
        tr = np.einsum("nij,nij->n", self.R_ref, R)
        return float(np.arccos(np.clip((tr.min() - 1) / 2, -1, 1)))

    def solve(self, b):
        return self.lu.solve(b)

    def anchor_matrix(self, constraints):
        """``[A^-1 P_c]`` for the given constraints, shape (n_free, 3 m).

        Columns are appended in place while the constraint list only grows;
        any other change rebuilds into fresh storage so earlier views stay valid.
        """
        uids = tuple(c.uid for c in constraints)
        m0 = len(self._stack_uids)
        if uids[:m0] != self._stack_uids:
            self._stack, self._stack_uids, m0 = np.zeros((self.model.n_free, 0)), (), 0
        if len(uids) > m0:
            need = 3 * len(uids)
            if need > self._stack.shape[1]:
                grown = np.zeros((self.model.n_free, max(need, 2 * self._stack.shape[1], 48)))
                grown[:, :3 * m0] = self._stack[:, :3 * m0]
                self._stack = grown
            for k in range(m0, len(uids)):
                self._stack[:, 3 * k:3 * k + 3] = self.anchor_columns(constraints[k])
            self._stack_uids = uids
        return self._stack[:, :3 * len(uids)]

    def anchor_columns(self, c):
        """``A^-1 P_c`` where ``P_c`` spreads a 3-vector onto the anchor's nodes."""
        G = self._columns.get(c.uid)
        if G is None:
            model = self.model
            P = np.zeros((model.n_free, 3))
            nodes = model.mesh.tets[c.tet]
            for w, node in zip(c.weights, nodes):
                for k in range(3):
                    j = model.free_index[3 * node + k]
                    if j >= 0:
                        P[j, k] += w
            G = self.lu.solve(P)
            self._columns[c.uid] = G
        return G


class _AnchorOperator:
    """``Z_t = A^-1 J_t^T = -G N`` applied without forming it."""

    def __init__(self, G, N):
        self.G, self.N = G, N

    def __matmul__(self, lam):
        return -(self.G @ (self.N @ lam))


@dataclass
class _Linearization:
    dv_free_t: np.ndarray
    needle_factor: tuple
    y0: np.ndarray
    S: np.ndarray
    system: coupling.CoupledSystem = None
    J_nb: np.ndarray = None  # constraint columns on the (prescribed) base DOFs
    violations: np.ndarray = None


@dataclass
class SimScene:
    cfg: SceneConfig
    mesh: object
    tissue_model: object
    needle_model: object
    tissue: object
    needle: object
    constraints: coupling.InsertionConstraintSet = field(default_factory=coupling.InsertionConstraintSet)
    time: float = 0.0
    steps: int = 0
    status: str = PRE_INSERTION
    message: str = ""
    _solver: TissueSolver = None
    _lin: _Linearization = None

    @property
    def entry_point(self):
        return np.asarray(self.cfg.entry_point, dtype=float)

    @property
    def insertion_axis(self):
        return np.asarray(self.cfg.insertion_axis, dtype=float)

    def needle_tip(self):
        return beam.needle_tip(self.needle)

    def effector_position(self):
        return self.needle.positions[0].copy()

    def entry_displacement(self):
        entry = self.constraints.entry
        if entry is None:
            return np.zeros(3)
        now = entry.weights @ self.tissue.positions[self.mesh.tets[entry.tet]]
        return now - entry.rest_anchor

    def clone(self):
        """Independent copy of the mutable state; models and caches are shared."""
        if self._lin is None and self.status in (PRE_INSERTION, INSERTING, DONE):
            try:
                self._linearize()
            except SimulationDiverged:
                pass
        return SimScene(cfg=self.cfg, mesh=self.mesh, tissue_model=self.tissue_model,
                        needle_model=self.needle_model, tissue=self.tissue.copy(),
                        needle=self.needle.copy(), constraints=self.constraints.copy(),
                        time=self.time, steps=self.steps, status=self.status,
                        message=self.message, _solver=self._solver, _lin=self._lin)

    def state_hash(self):
        h = hashlib.sha256()
        for arr in (self.tissue.positions, self.tissue.velocities, self.needle.positions,
                    self.needle.quats, self.needle.velocities):
            h.update(np.ascontiguousarray(arr).tobytes())
        for c in self.constraints.constraints:
            h.update(np.array([c.arc, c.tet, c.uid], dtype=float).tobytes())
            h.update(c.weights.tobytes())
            h.update(c.frame.tobytes())
        h.update(repr((self.time, self.steps, self.status)).encode())
        return h.hexdigest()

    def step(self, cmd: EffectorCommand, dt=None):
        return step(self, cmd, dt)

    def preview(self, cmd: EffectorCommand):
        return preview(self, cmd)

    # -- linearization ---------------------------------------------------

    def _linearize(self):
        if self._lin is not None:
            return self._lin
        cfg = self.cfg
        dt = cfg.dt
        tm, nm = self.tissue_model, self.needle_model
        g = np.asarray(cfg.gravity, dtype=float)

        R = element_rotations(tm, self.tissue.positions)
        if (self._solver is None or cfg.tangent_refresh == 0
                or self._solver.max_rotation(R) > cfg.tangent_refresh):
            self._solver = TissueSolver(tm, cfg, R)
        mat = tm.material
        masses3 = np.repeat(tm.masses, 3)
        f = element_forces(tm, self.tissue.positions, R, self.tissue.velocities,
                           vel_scale=mat.rayleigh_stiffness + dt)
        v = self.tissue.velocities.ravel()
        f = f - mat.rayleigh_mass * masses3 * v + masses3 * np.tile(g, tm.n_nodes)
        b_t = dt * f[tm.free_dofs]
        dv_free_t = self._solver.solve(b_t)

        p = nm.params
        fn, Kn = beam.needle_forces(nm, self.needle)
        Mn = nm.masses.ravel()
        vn = self.needle.velocities.ravel()
        gn = np.zeros_like(nm.masses)
        gn[:, :3] = g
        b_n = dt * (fn - (p.rayleigh_stiffness + dt) * (Kn @ vn) - p.rayleigh_mass * Mn * vn
                    + Mn * gn.ravel())
        A_n = (dt * p.rayleigh_stiffness + dt * dt) * Kn
        A_n[np.diag_indices_from(A_n)] += (1 + dt * p.rayleigh_mass) * Mn
        A_ff, A_fb = A_n[6:, 6:], A_n[6:, :6]
        try:
            fac = sla.cho_factor(A_ff)
        except np.linalg.LinAlgError:
            raise SimulationDiverged("needle system is not positive definite") from None
        lin = _Linearization(dv_free_t=dv_free_t, needle_factor=fac,
                             y0=sla.cho_solve(fac, b_n[6:]), S=sla.cho_solve(fac, A_fb))

        cset = self.constraints
        if cset.active:
            nn, nb, tn, tc, normals, viol = coupling.constraint_rows(
                cset, self.needle.positions, self.tissue.positions, self.mesh, nm.rest_length,
                self.needle.frames[:, :, 0])
            m2 = len(viol)
            J_n = coupling._needle_rows_to_sparse(nn, nb, nm.n_nodes).toarray()
            J_nf, J_nb = J_n[:, 6:], J_n[:, :6]
            # tissue rows restricted to free DOFs
            cols = tm.free_index[(3 * tn[:, :, None] + np.arange(3)).reshape(m2, -1)]
            vals = (tc[:, :, None] * normals[:, None, :]).reshape(m2, -1)
            keep = cols >= 0
            rows = np.broadcast_to(np.arange(m2)[:, None], cols.shape)
            J_t = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(m2, tm.n_free))
            m = len(cset)
            G = self._solver.anchor_matrix(cset.constraints)
            # P^T A^-1 P: gather the anchor rows of G (fixed DOFs carry zero weight)
            nodes = self.mesh.tets[[c.tet for c in cset.constraints]]
            w = np.array([c.weights for c in cset.constraints])
            rows = tm.free_index[3 * nodes[:, :, None] + np.arange(3)]
            wk = np.where(rows >= 0, w[:, :, None], 0.0)
            C = np.einsum("mak,makq->mkq", wk, G[np.maximum(rows, 0)]).reshape(3 * m, 3 * m)
            N = sp.block_diag([c.frame.T for c in cset.constraints], format="csr")
            W_t = np.asarray(N.T @ np.asarray(N.T @ C).T).T
            Z_t = _AnchorOperator(G, N)
            Z_n = sla.cho_solve(fac, J_nf.T)
            arcs = [c.arc for c in cset.constraints]
            lin.system = coupling.CoupledSystem(J_t, J_nf, Z_t, Z_n, arcs=arcs, W_t=W_t)
            lin.J_nb = J_nb
            lin.violations = viol
        self._lin = lin
        return lin


def build_scene(cfg: SceneConfig, mesh=None, tissue_model=None, needle_model=None) -> SimScene:
    """Foam at rest with a straight needle whose tip touches the entry point."""
    mesh = mesh if mesh is not None else build_foam_mesh(cfg.foam)
    tm = tissue_model if tissue_model is not None else build_tissue_model(mesh, cfg.material)
    nm = needle_model if needle_model is not None else beam.build_needle_model(cfg.needle)
    axis = np.asarray(cfg.insertion_axis, dtype=float)
    base = np.asarray(cfg.entry_point, dtype=float) - cfg.needle.length * axis
    needle = beam.straight_needle(nm, base, axis)
    return SimScene(cfg=cfg, mesh=mesh, tissue_model=tm, needle_model=nm,
                    tissue=rest_state(tm), needle=needle)


def executed_translation(position, target, reach):
    """Base displacement of one step toward ``target``, at most ``reach`` long."""
    d = np.asarray(target, dtype=float) - position
    dist = float(np.linalg.norm(d))
    return d if dist <= reach else d * (reach / dist)


def apply_effector_motion(scene: SimScene, cmd: EffectorCommand, dt=None, speed=None):
    """New base pose: clamped constant-speed translation, RCM-slaved orientation.

    Returns ``(position, frame)``.  Before insertion the needle keeps pointing
    along the insertion axis.
    """
    dt = scene.cfg.dt if dt is None else dt
    speed = scene.cfg.effector_speed if speed is None else speed
    p = scene.needle.positions[0]
    p_new = p + executed_translation(p, cmd.target_translation, speed * dt)
    if scene.status == PRE_INSERTION:
        axis = scene.insertion_axis
    else:
        axis = cmd.rcm_point - p_new
        if np.linalg.norm(axis) < 1e-12:
            axis = scene.needle.base_frame[:, 0]
    frame = beam.align_axis(scene.needle.base_frame, axis)
    return p_new, frame


def _motion(scene, lin, cmd, dt):
    """Base pose and needle velocity update for a command, plus multipliers."""
    needle = scene.needle
    p_new, frame_new = apply_effector_motion(scene, cmd, dt)
    vb_new = np.concatenate([
        (p_new - needle.positions[0]) / dt,
        Rotation.from_matrix(frame_new @ needle.base_frame.T).as_rotvec() / dt,
    ])
    dv_n = lin.y0 - lin.S @ (vb_new - needle.velocities[0])
    lam = None
    if lin.system is not None:
        v_t = scene.tissue.velocities.ravel()[scene.tissue_model.free_dofs]
        v_n = needle.velocities.ravel()[6:]
        # prescribed base velocity moves to the right-hand side
        shifted = lin.violations + (dt / scene.cfg.baumgarte) * (lin.J_nb @ vb_new)
        lam = lin.system.multipliers(lin.dv_free_t, dv_n, v_t, v_n, shifted, dt,
                                     scene.cfg.baumgarte)
        dv_n = dv_n + lin.system.Z_n @ lam
    return p_new, frame_new, vb_new, dv_n, lam


def preview(scene: SimScene, cmd: EffectorCommand):
    """Tip, effector and entry displacement one step ahead, without stepping.

    Agrees with ``clone`` + ``step`` + measuring; used for controller trials.
    Returns None when the state cannot be linearized.
    """
    if scene.status in (DIVERGED, OUT_OF_DOMAIN):
        raise UsageError(f"cannot step a scene with status {scene.status!r}")
    try:
        lin = scene._linearize()
    except (SimulationDiverged, np.linalg.LinAlgError):
        return None
    dt = scene.cfg.dt
    needle = scene.needle
    p_new, _, _, dv_n, lam = _motion(scene, lin, cmd, dt)
    tip = needle.positions[-1] + dt * (needle.velocities[-1, :3] + dv_n[-6:-3])
    entry = scene.constraints.entry
    if entry is None:
        disp = np.zeros(3)
    else:
        tm = scene.tissue_model
        nodes = scene.mesh.tets[entry.tet]
        rows = tm.free_index[3 * nodes[:, None] + np.arange(3)]
        free = rows >= 0
        dv = np.zeros((4, 3))
        dv[free] = lin.dv_free_t[rows[free]]
        if lam is not None:
            Z = lin.system.Z_t
            dv[free] -= Z.G[rows[free]] @ (Z.N @ lam)
        x = scene.tissue.positions[nodes] + dt * (scene.tissue.velocities[nodes] + dv)
        disp = entry.weights @ x - entry.rest_anchor
    return tip, p_new, disp


def step(scene: SimScene, cmd: EffectorCommand, dt=None) -> SimScene:
    """Advance the scene in place by one time step and return it.

    Divergence does not raise: the status becomes ``diverged`` and the state
    is left as it was before the failing step.
    """
    if scene.status in (DIVERGED, OUT_OF_DOMAIN):
        raise UsageError(f"cannot step a scene with status {scene.status!r}")
    cfg = scene.cfg
    if dt is not None and dt != cfg.dt:
        from dataclasses import replace
        scene.cfg = cfg = replace(cfg, dt=dt)
        scene._lin = None
        scene._solver = None
    dt = cfg.dt
    try:
        lin = scene._linearize()
    except (SimulationDiverged, np.linalg.LinAlgError) as exc:
        scene.status, scene.message = DIVERGED, str(exc)
        return scene

    needle, tissue = scene.needle, scene.tissue
    p_new, frame_new, vb_new, dv_n, lam = _motion(scene, lin, cmd, dt)
    v_t = tissue.velocities.ravel()[scene.tissue_model.free_dofs]
    v_n = needle.velocities.ravel()[6:]
    dv_t = lin.dv_free_t if lam is None else lin.dv_free_t + lin.system.Z_t @ lam

    new_tissue = tissue.copy()
    vt = new_tissue.velocities.reshape(-1)
    vt[scene.tissue_model.free_dofs] = v_t + dv_t
    new_tissue.positions = new_tissue.positions + dt * new_tissue.velocities

    new_needle = needle.copy()
    vn = new_needle.velocities.reshape(-1)
    vn[6:] = v_n + dv_n
    vn[:6] = vb_new
    new_needle.positions = new_needle.positions + dt * new_needle.velocities[:, :3]
    new_needle.quats = beam.integrate_rotations(new_needle.quats, new_needle.velocities[:, 3:], dt)
    new_needle.positions[0] = p_new
    new_needle.quats[0] = Rotation.from_matrix(frame_new).as_quat()

    finite = all(np.all(np.isfinite(a)) for a in (new_tissue.positions, new_needle.positions,
                                                   new_needle.quats))
    if not finite or np.any(signed_volumes(new_tissue.positions, scene.mesh.tets) <= 0):
        scene.status = DIVERGED
        scene.message = "non-finite state" if not finite else "element inversion"
        return scene

    scene.tissue, scene.needle = new_tissue, new_needle
    cset = scene.constraints = scene.constraints.copy()
    nm = scene.needle_model
    tangents = new_needle.frames[:, :, 0]
    if cset.active:
        anchors = coupling.anchor_positions(cset, scene.mesh, new_tissue.positions)
        coupling.reproject(cset, new_needle.positions, anchors, nm.rest_length, tangents)
    coupling.advance_insertion(cset, new_needle.positions, new_tissue.positions,
                               scene.mesh, scene.entry_point, FACE_NORMAL,
                               cfg.constraint_spacing, nm.params.length,
                               hint=new_needle.base_frame[:, 1], tangents=tangents)
    scene.time += dt
    scene.steps += 1
    scene._lin = None
    if cset.out_of_domain:
        scene.status = OUT_OF_DOMAIN
        scene.message = "needle left the foam block"
    elif cset.active and scene.status == PRE_INSERTION:
        scene.status = INSERTING
    return scene


def clone_scene(scene: SimScene) -> SimScene:
    return scene.clone()


def lateral_violations(scene: SimScene):
    """Distance of every anchor from the needle measured across the local axis."""
    cset = scene.constraints
    if not cset.active:
        return np.zeros(0)
    nm = scene.needle_model
    *_, viol = coupling.constraint_rows(cset, scene.needle.positions, scene.tissue.positions,
                                        scene.mesh, nm.rest_length, scene.needle.frames[:, :, 0])
    return np.abs(viol)
