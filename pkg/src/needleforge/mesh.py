"""Structured tetrahedral mesh of the rectangular foam block."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .config import FoamSpec
from .errors import ConfigError


@dataclass(frozen=True)
class TetMesh:
    """Tetrahedral mesh in its rest configuration (meters).

    ``surface_faces`` are oriented counter-clockwise seen from outside and
    ``surface_normals`` are the matching unit outward normals.
    """

    nodes: np.ndarray
    tets: np.ndarray
    fixed_nodes: np.ndarray
    surface_faces: np.ndarray
    surface_normals: np.ndarray
    surface_tets: np.ndarray

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_tets(self):
        return len(self.tets)

    def to_json(self):
        return {
            "nodes_mm": (self.nodes * 1e3).tolist(),
            "tets": self.tets.tolist(),
            "fixed_nodes": self.fixed_nodes.tolist(),
            "surface_faces": self.surface_faces.tolist(),
            "surface_normals": self.surface_normals.tolist(),
        }

    def save(self, path):
        from .io import atomic_write_text
        atomic_write_text(path, json.dumps(self.to_json()))


def signed_volumes(points, tets):
    v = points[tets]
    e1, e2, e3 = v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], v[:, 3] - v[:, 0]
    return np.einsum("ij,ij->i", np.cross(e1, e2), e3) / 6.0


# Kuhn split of the unit cube along its main diagonal: one tet per axis order.
def _cube_tets():
    out = []
    for perm in itertools.permutations(range(3)):
        corner = np.zeros(3, dtype=int)
        path = [tuple(corner)]
        for axis in perm:
            corner = corner.copy()
            corner[axis] = 1
            path.append(tuple(corner))
        sign = np.linalg.det(np.eye(3)[list(perm)])
        if sign < 0:
            path[1], path[2] = path[2], path[1]
        out.append(path)
    return out


_CUBE_TETS = _cube_tets()


def build_foam_mesh(spec: FoamSpec) -> TetMesh:
    """Regular hexahedral grid over the foam, each cube split into 6 tets.

    The block spans x, y in [-size/2, size/2] and z in [0, size_z]; z = 0 is
    the insertion face and, if ``spec.fix_far_face``, nodes on z = size_z are fixed.
    """
    if len(spec.size) != 3 or min(spec.size) <= 0:
        raise ConfigError(f"invalid foam size {spec.size}")
    if len(spec.resolution) != 3 or min(spec.resolution) < 1:
        raise ConfigError(f"invalid foam resolution {spec.resolution}")
    nx, ny, nz = (int(r) for r in spec.resolution)
    sx, sy, sz = spec.size

    xs = np.linspace(-sx / 2, sx / 2, nx + 1)
    ys = np.linspace(-sy / 2, sy / 2, ny + 1)
    zs = np.linspace(0.0, sz, nz + 1)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    nodes = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    index = np.arange(len(nodes)).reshape(nx + 1, ny + 1, nz + 1)

    ci, cj, ck = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    ci, cj, ck = ci.ravel(), cj.ravel(), ck.ravel()
    tets = []
    for path in _CUBE_TETS:
        tets.append(np.column_stack([index[ci + a, cj + b, ck + c] for a, b, c in path]))
    tets = np.stack(tets, axis=1).reshape(-1, 4)

    fixed = index[:, :, -1].ravel() if spec.fix_far_face else np.zeros(0, dtype=int)
    faces, normals, owners = _boundary_faces(nodes, tets)
    return TetMesh(nodes=nodes, tets=tets, fixed_nodes=np.sort(fixed),
                   surface_faces=faces, surface_normals=normals, surface_tets=owners)


_FACE_LOCAL = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


def all_faces(tets):
    """Every tet face as a sorted vertex triple, with owner tet and opposite vertex."""
    faces = tets[:, _FACE_LOCAL].reshape(-1, 3)
    owner = np.repeat(np.arange(len(tets)), 4)
    opposite = tets[:, [0, 1, 2, 3]].reshape(-1)
    return np.sort(faces, axis=1), faces, owner, opposite


def _boundary_faces(nodes, tets):
    key, faces, owner, opposite = all_faces(tets)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    once = counts[inv.ravel()] == 1
    faces, owner, opposite = faces[once], owner[once], opposite[once]
    a, b, c = nodes[faces[:, 0]], nodes[faces[:, 1]], nodes[faces[:, 2]]
    n = np.cross(b - a, c - a)
    inward = np.einsum("ij,ij->i", n, nodes[opposite] - a) > 0
    faces[inward] = faces[inward][:, [0, 2, 1]]
    n[inward] *= -1
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return faces, n, owner


def barycentric(points, tets, p):
    """Barycentric coordinates of ``p`` in each of ``tets`` (rows sum to 1)."""
    v = points[tets]
    T = np.transpose(v[:, 1:] - v[:, :1], (0, 2, 1))
    lam = np.linalg.solve(T, (p - v[:, 0])[..., None])[..., 0]
    return np.column_stack([1.0 - lam.sum(axis=1), lam])


def locate_point(mesh: TetMesh, p, positions=None, tol=1e-10):
    """Find the tet containing ``p``.

    ``positions`` overrides the rest node positions (deformed configuration).
    Returns ``(tet_index, weights)`` or ``None`` when ``p`` lies outside every tet.
    Points on shared faces resolve to the tet where ``p`` is most interior.
    """
    pts = mesh.nodes if positions is None else np.asarray(positions)
    p = np.asarray(p, dtype=float)
    v = pts[mesh.tets]
    lo, hi = v.min(axis=1), v.max(axis=1)
    pad = tol * max(1.0, float(np.abs(p).max()))
    cand = np.flatnonzero(np.all((p >= lo - pad) & (p <= hi + pad), axis=1))
    if len(cand) == 0:
        return None
    w = barycentric(pts, mesh.tets[cand], p)
    worst = w.min(axis=1)
    best = int(np.argmax(worst))
    if worst[best] < -tol:
        return None
    weights = w[best]
    if weights.min() < 0:
        weights = np.clip(weights, 0.0, None)
        weights /= weights.sum()
    return int(cand[best]), weights
