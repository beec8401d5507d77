"""Needle-tissue sliding constraints and their Lagrange-multiplier solve.

Each constraint ties a point of the needle (found by closest-point projection
along the needle polyline, so axial sliding is free) to a tissue material
point carved by the tip.  Two scalar rows per constraint measure the relative
displacement along the two lateral frame directions.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .beam import _batched_minimal_rotation
from .errors import ConstraintDegeneracyError
from .mesh import locate_point

DUPLICATE_TOL = 1e-10
RANK_TOL = 1e-8  # relative; stiffer modes are treated as redundant


@dataclass
class InsertionConstraint:
    arc: float  # needle arc coordinate from the base (rest length units)
    tet: int
    weights: np.ndarray
    frame: np.ndarray  # (2, 3) lateral directions, orthonormal, orthogonal to the needle
    uid: int
    rest_anchor: np.ndarray = None


@dataclass
class InsertionConstraintSet:
    constraints: list = field(default_factory=list)
    out_of_domain: bool = False
    next_uid: int = 0

    @property
    def active(self):
        return bool(self.constraints)

    @property
    def entry(self):
        return self.constraints[0] if self.constraints else None

    def __len__(self):
        return len(self.constraints)

    def arcs(self):
        return np.array([c.arc for c in self.constraints])

    def copy(self):
        # constraint arrays are replaced, never mutated, so sharing them is safe
        return InsertionConstraintSet([copy.copy(c) for c in self.constraints],
                                      self.out_of_domain, self.next_uid)


def anchor_positions(cset, mesh, tissue_positions):
    if not cset.constraints:
        return np.zeros((0, 3))
    tets = mesh.tets[[c.tet for c in cset.constraints]]
    w = np.array([c.weights for c in cset.constraints])
    return np.einsum("ma,mak->mk", w, tissue_positions[tets])


def _lateral_frame(tangent, hint):
    n1 = hint - np.dot(hint, tangent) * tangent
    if np.linalg.norm(n1) < 1e-6:
        n1 = np.cross(tangent, [1.0, 0.0, 0.0])
        if np.linalg.norm(n1) < 1e-6:
            n1 = np.cross(tangent, [0.0, 1.0, 0.0])
    n1 /= np.linalg.norm(n1)
    return np.array([n1, np.cross(tangent, n1)])


def _hermite(xi):
    """Cubic Hermite basis (h00, h10, h01, h11) and its first two derivatives."""
    x2, x3 = xi * xi, xi * xi * xi
    h = np.stack([2 * x3 - 3 * x2 + 1, x3 - 2 * x2 + xi, 3 * x2 - 2 * x3, x3 - x2], axis=-1)
    dh = np.stack([6 * x2 - 6 * xi, 3 * x2 - 4 * xi + 1, 6 * xi - 6 * x2, 3 * x2 - 2 * xi], axis=-1)
    ddh = np.stack([12 * xi - 6, 6 * xi - 4, 6 - 12 * xi, 6 * xi - 2], axis=-1)
    return h, dh, ddh


def _curve(positions, tangents, rest_length, e, xi, order=1):
    """Centerline point (and derivatives w.r.t. xi) on elements ``e`` at ``xi``."""
    a, b = positions[e], positions[e + 1]
    if tangents is None:
        chord = b - a
        out = [a + xi[:, None] * chord, chord, np.zeros_like(chord)]
        return out[:order + 1]
    ta, tb = rest_length * tangents[e], rest_length * tangents[e + 1]
    out = []
    for basis in _hermite(xi)[:order + 1]:
        out.append(basis[:, :1] * a + basis[:, 1:2] * ta + basis[:, 2:3] * b + basis[:, 3:] * tb)
    return out


def needle_point(positions, arc, rest_length, tangents=None):
    """Point, unit tangent, element index and local coordinate at ``arc``.

    With node ``tangents`` (first axis of each node frame) the centerline is
    the cubic Hermite curve of the beam elements, otherwise the polyline.
    """
    n_el = len(positions) - 1
    s = np.atleast_1d(np.asarray(arc, dtype=float)) / rest_length
    e = np.clip(np.floor(s).astype(int), 0, n_el - 1)
    xi = s - e
    p, dp = _curve(positions, tangents, rest_length, e, xi)
    return p, dp / np.linalg.norm(dp, axis=1, keepdims=True), e, xi


def closest_points(positions, query, rest_length, tangents=None, iterations=6):
    """Closest centerline coordinates ``(e, xi_clamped, xi_raw)`` for each query point.

    Starts from the polyline projection and refines on the Hermite curve by
    Newton steps, hopping to the neighbouring element when ``xi`` leaves it.
    ``xi_raw > 1`` on the last element means the point lies beyond the tip.
    """
    a = positions[:-1]
    d = positions[1:] - positions[:-1]
    dd = np.einsum("ij,ij->i", d, d)
    rel = query[:, None, :] - a[None]
    t_raw = np.einsum("mek,ek->me", rel, d) / dd
    t = np.clip(t_raw, 0.0, 1.0)
    dist = np.linalg.norm(rel - t[..., None] * d[None], axis=2)
    e = np.argmin(dist, axis=1)
    rows = np.arange(len(query))
    xi = t_raw[rows, e]
    if tangents is None:
        return e, np.clip(xi, 0.0, 1.0), xi
    n_el = len(d)
    xi = np.clip(xi, 0.0, 1.0)
    for _ in range(iterations):
        p, dp, ddp = _curve(positions, tangents, rest_length, e, xi, order=2)
        r = p - query
        f = np.einsum("ij,ij->i", r, dp)
        fp = np.einsum("ij,ij->i", dp, dp) + np.einsum("ij,ij->i", r, ddp)
        xi = xi - f / np.where(fp > 0, fp, np.einsum("ij,ij->i", dp, dp))
        up = (xi > 1.0) & (e < n_el - 1)
        down = (xi < 0.0) & (e > 0)
        e = e + up - down
        xi = np.where(up, xi - 1.0, np.where(down, xi + 1.0, xi))
        xi = np.where((e == n_el - 1) & (xi > 1.0), xi, np.clip(xi, 0.0, None))
        xi = np.where((e == 0) & (xi < 0.0), 0.0, xi)
    return e, np.clip(xi, 0.0, 1.0), xi


def reproject(cset, needle_positions, anchors, rest_length, tangents=None):
    """Slide each constraint's needle coordinate to the closest needle point.

    Frames are transported by the minimal rotation between the old and new
    local tangents.  Constraints whose anchor lies beyond the tip are released.
    """
    if not cset.constraints:
        return
    e, xi, xi_raw = closest_points(needle_positions, anchors, rest_length, tangents)
    beyond = (e == len(needle_positions) - 2) & (xi_raw > 1.0)
    arcs = (e + xi) * rest_length
    _, tangents_at, _, _ = needle_point(needle_positions, arcs, rest_length, tangents)

    frames = np.array([c.frame for c in cset.constraints])
    old_t = np.cross(frames[:, 0], frames[:, 1])
    Rm = _batched_minimal_rotation(old_t, tangents_at)
    n1 = np.einsum("mij,mj->mi", Rm, frames[:, 0])
    n1 -= np.einsum("mi,mi->m", n1, tangents_at)[:, None] * tangents_at
    n1 /= np.linalg.norm(n1, axis=1, keepdims=True)
    n2 = np.cross(tangents_at, n1)

    kept = []
    for k, c in enumerate(cset.constraints):
        if beyond[k]:
            continue
        c.arc = float(arcs[k])
        c.frame = np.array([n1[k], n2[k]])
        kept.append(c)
    cset.constraints = kept


def _new_constraint(cset, mesh, tissue_positions, point, arc, tangent, hint):
    found = locate_point(mesh, point, positions=tissue_positions)
    if found is None:
        return None
    tet, w = found
    c = InsertionConstraint(arc=float(arc), tet=tet, weights=w,
                            frame=_lateral_frame(tangent, hint), uid=cset.next_uid,
                            rest_anchor=w @ mesh.nodes[mesh.tets[tet]])
    cset.next_uid += 1
    cset.constraints.append(c)
    return c


def _surface_crossing(positions, tangents, entry_point, axis, needle_length):
    """Point, arc and unit tangent where the current needle crosses the insertion plane."""
    rest_length = needle_length / (len(positions) - 1)
    h = (positions - entry_point) @ axis
    e = int(np.flatnonzero(h > 0)[0]) - 1
    if e < 0:
        e, xi = 0, 0.0
    else:
        xi = float(-h[e] / (h[e + 1] - h[e]))
        for _ in range(8):
            p, dp = _curve(positions, tangents, rest_length, np.array([e]), np.array([xi]))
            f, fp = float((p[0] - entry_point) @ axis), float(dp[0] @ axis)
            if fp <= 0:
                break
            xi = min(max(xi - f / fp, 0.0), 1.0)
    arc = (e + xi) * rest_length
    p, t, _, _ = needle_point(positions, arc, rest_length, tangents)
    return p[0], arc, t[0]


def advance_insertion(cset, needle_positions, tissue_positions, mesh,
                      entry_point, face_normal, spacing, needle_length, hint=None,
                      tangents=None):
    """Create the entry constraint on first penetration and carve new anchors.

    A new constraint is appended at the tip each time the tip gets more than
    ``spacing`` (along the needle) beyond the deepest constraint.  Returns the
    updated set; sets ``out_of_domain`` when an anchor point lies outside the
    foam block (punch-through).  The entry constraint sits where the needle
    crosses the plane through ``entry_point`` with normal ``face_normal``.
    """
    tip = needle_positions[-1]
    axis = np.asarray(face_normal, dtype=float)
    hint = np.array([1.0, 0.0, 0.0]) if hint is None else hint
    tangent = tip - needle_positions[-2] if tangents is None else np.array(tangents[-1], float)
    tangent /= np.linalg.norm(tangent)

    if not cset.constraints:
        if float(np.dot(tip - entry_point, axis)) <= 0:
            return cset
        crossing, arc, cross_tangent = _surface_crossing(needle_positions, tangents, entry_point,
                                                         axis, needle_length)
        if _new_constraint(cset, mesh, tissue_positions, crossing, arc, cross_tangent,
                           hint) is None:
            cset.out_of_domain = locate_point(mesh, crossing) is None
            return cset

    while needle_length - max(c.arc for c in cset.constraints) > spacing:
        if _new_constraint(cset, mesh, tissue_positions, tip, needle_length, tangent, hint) is None:
            # a point inside the rest block but outside the deformed tissue lies in a
            # surface dent; retry next step instead of ending the run
            cset.out_of_domain = locate_point(mesh, tip) is None
            break
    return cset


def constraint_rows(cset, needle_positions, tissue_positions, mesh, rest_length, tangents=None):
    """Row data of the constraint Jacobians and the current violations.

    Returns ``(needle_nodes, needle_blocks, tissue_nodes, tissue_coef, normals, c)``
    where row ``r = 2 * k + j`` uses lateral direction ``normals[r]`` and
    ``needle_blocks[r, i]`` holds the 6 entries (linear, angular) for needle
    node ``needle_nodes[r, i]``.
    """
    m = len(cset.constraints)
    arcs = np.array([c.arc for c in cset.constraints])
    p, _, e, xi = needle_point(needle_positions, arcs, rest_length, tangents)
    anchors = anchor_positions(cset, mesh, tissue_positions)
    normals = np.array([c.frame for c in cset.constraints]).reshape(2 * m, 3)
    rep = np.repeat(np.arange(m), 2)
    viol = np.einsum("rk,rk->r", normals, (p - anchors)[rep])
    e, xi = e[rep], xi[rep]
    needle_nodes = np.column_stack([e, e + 1])
    blocks = np.zeros((2 * m, 2, 6))
    if tangents is None:
        blocks[:, 0, :3] = (1 - xi)[:, None] * normals
        blocks[:, 1, :3] = xi[:, None] * normals
    else:
        # v_p = h00 v_a + h10 L w_a x t_a + h01 v_b + h11 L w_b x t_b
        h = _hermite(xi)[0]
        blocks[:, 0, :3] = h[:, :1] * normals
        blocks[:, 1, :3] = h[:, 2:3] * normals
        blocks[:, 0, 3:] = rest_length * h[:, 1:2] * np.cross(tangents[e], normals)
        blocks[:, 1, 3:] = rest_length * h[:, 3:] * np.cross(tangents[e + 1], normals)
    tissue_nodes = mesh.tets[[c.tet for c in cset.constraints]][rep]
    tissue_coef = -np.array([c.weights for c in cset.constraints])[rep]
    return needle_nodes, blocks, tissue_nodes, tissue_coef, normals, viol


def _rows_to_sparse(nodes, coef, normals, n_nodes, stride):
    r = len(nodes)
    k = nodes.shape[1]
    rows = np.repeat(np.arange(r), 3 * k)
    cols = (stride * nodes[:, :, None] + np.arange(3)).reshape(r, 3 * k).ravel()
    vals = (coef[:, :, None] * normals[:, None, :]).reshape(r, 3 * k).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(r, stride * n_nodes))


def _needle_rows_to_sparse(nodes, blocks, n_nodes):
    r = len(nodes)
    rows = np.repeat(np.arange(r), 12)
    cols = (6 * nodes[:, :, None] + np.arange(6)).reshape(r, 12).ravel()
    return sp.csr_matrix((blocks.reshape(r, 12).ravel(), (rows, cols)), shape=(r, 6 * n_nodes))


def constraint_jacobians(cset, needle_positions, tissue_positions, mesh, rest_length,
                         tangents=None):
    """Sparse ``(J_needle, J_tissue, violations)``.

    ``J_needle`` acts on the 6-DOF needle velocity vector (spatial angular
    velocities), ``J_tissue`` on the 3-DOF tissue velocity vector.
    """
    nn, nb, tn, tc, normals, viol = constraint_rows(
        cset, needle_positions, tissue_positions, mesh, rest_length, tangents)
    J_n = _needle_rows_to_sparse(nn, nb, len(needle_positions))
    J_t = _rows_to_sparse(tn, tc, normals, len(tissue_positions), 3)
    return J_n, J_t, viol


class CoupledSystem:
    """Schur-complement solver for the bilateral constraint KKT system.

    Given ``Z_t = A_t^-1 J_t^T`` and ``Z_n = A_n^-1 J_n^T``, the multipliers solve
    ``W lam = r`` with ``W = J_t Z_t + J_n Z_n``; the velocity corrections
    are then ``Z lam``.  The constraint is imposed on end-of-step velocities:
    ``J (v + dv) = -(baumgarte / dt) c``.

    ``Z_t`` may be any operator supporting ``Z_t @ lam`` when the tissue
    block ``W_t = J_t Z_t`` is supplied directly.
    """

    def __init__(self, J_t, J_n, Z_t, Z_n, arcs=None, W_t=None):
        self.J_t, self.J_n, self.Z_t, self.Z_n = J_t, J_n, Z_t, Z_n
        m = J_t.shape[0]
        self.m = m
        if m == 0:
            return
        if W_t is None:
            W_t = np.asarray(J_t @ Z_t)
        W = W_t + np.asarray(J_n @ Z_n)
        W = 0.5 * (W + W.T)
        self.W = W
        d = np.sqrt(np.clip(np.diag(W), 0, None))
        if not np.all(d > 0) or not np.all(np.isfinite(W)):
            raise ConstraintDegeneracyError(self._offending(arcs, np.arange(m)))
        # cosine in the compliance metric; 1 means two rows act identically
        cos = W / np.outer(d, d)
        dup = np.argwhere(np.triu(cos > 1 - DUPLICATE_TOL, 1))
        if len(dup):
            raise ConstraintDegeneracyError(self._offending(arcs, dup.ravel()))
        # Rows that are affine combinations of others (collinear anchors sharing
        # an element) are consistent redundancy: solve in the least-norm sense.
        w, V = np.linalg.eigh(W)
        keep = w > RANK_TOL * w[-1]
        self.rank = int(keep.sum())
        self._V, self._winv = V[:, keep], 1.0 / w[keep]

    @staticmethod
    def _offending(arcs, rows):
        if arcs is None:
            return []
        return sorted({float(arcs[r // 2]) for r in np.asarray(rows).tolist()})

    def multipliers(self, dv_free_t, dv_free_n, v_t, v_n, violations, dt, baumgarte=1.0):
        if self.m == 0:
            return np.zeros(0)
        rhs = (-(baumgarte / dt) * violations
               - self.J_t @ (v_t + dv_free_t) - self.J_n @ (v_n + dv_free_n))
        return self._V @ (self._winv * (self._V.T @ rhs))

    def solve(self, dv_free_t, dv_free_n, v_t, v_n, violations, dt, baumgarte=1.0):
        if self.m == 0:
            return dv_free_t, dv_free_n, np.zeros(0)
        lam = self.multipliers(dv_free_t, dv_free_n, v_t, v_n, violations, dt, baumgarte)
        return dv_free_t + self.Z_t @ lam, dv_free_n + self.Z_n @ lam, lam


def _solver(A):
    if callable(A):
        return A
    if sp.issparse(A):
        from scipy.sparse.linalg import splu
        lu = splu(sp.csc_matrix(A))
        return lu.solve
    fac = sla.cho_factor(np.asarray(A, dtype=float))
    return lambda b: sla.cho_solve(fac, b)


def solve_coupled_step(A_t, A_n, J_t, J_n, b_t, b_n, violations, dt,
                       v_t=None, v_n=None, baumgarte=1.0, arcs=None):
    """Solve ``A_t dv_t = b_t + J_t^T lam``, ``A_n dv_n = b_n + J_n^T lam`` under the constraint.

    ``A_t``/``A_n`` may be dense arrays, sparse matrices or solve callables.
    Returns ``(dv_t, dv_n, lam)``.
    """
    solve_t, solve_n = _solver(A_t), _solver(A_n)
    v_t = np.zeros(len(b_t)) if v_t is None else v_t
    v_n = np.zeros(len(b_n)) if v_n is None else v_n
    dv_t, dv_n = solve_t(np.asarray(b_t, dtype=float)), solve_n(np.asarray(b_n, dtype=float))
    m = J_t.shape[0]
    if m == 0:
        return dv_t, dv_n, np.zeros(0)
    Jt_d = J_t.toarray() if sp.issparse(J_t) else np.asarray(J_t)
    Jn_d = J_n.toarray() if sp.issparse(J_n) else np.asarray(J_n)
    Z_t = np.asarray(solve_t(Jt_d.T.copy())).reshape(len(b_t), m)
    Z_n = np.asarray(solve_n(Jn_d.T.copy())).reshape(len(b_n), m)
    system = CoupledSystem(Jt_d, Jn_d, Z_t, Z_n, arcs=arcs)
    return system.solve(dv_t, dv_n, v_t, v_n, np.asarray(violations, dtype=float), dt, baumgarte)
