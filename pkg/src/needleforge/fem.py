"""Linear co-rotational elasticity on linear tetrahedra."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .config import MaterialParams
from .errors import ConfigError, MeshError, SimulationDiverged
from .mesh import TetMesh

VOLUME_EPS = 1e-12  # relative to (longest edge)^3
NEAR_SINGULAR_DET = 1e-6


def lame_parameters(m: MaterialParams):
    E, nu = m.young_modulus, m.poisson_ratio
    if not 0 <= nu < 0.5:
        raise ConfigError(f"poisson ratio must lie in [0, 0.5), got {nu}")
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    return lam, mu


def elasticity_matrix(m: MaterialParams):
    """6x6 isotropic matrix in Voigt order xx, yy, zz, xy, yz, zx (engineering shear)."""
    lam, mu = lame_parameters(m)
    D = np.zeros((6, 6))
    D[:3, :3] = lam
    D[np.arange(3), np.arange(3)] += 2 * mu
    D[np.arange(3, 6), np.arange(3, 6)] = mu
    return D


def _shape_gradients(v):
    """Gradients of the 4 linear shape functions, shape (..., 4, 3), and volume."""
    Dm = np.swapaxes(v[..., 1:, :] - v[..., :1, :], -1, -2)
    det = np.linalg.det(Dm)
    try:
        inv = np.linalg.inv(Dm)
    except np.linalg.LinAlgError:
        raise MeshError("degenerate tetrahedron (singular edge matrix)") from None
    g = inv  # rows of Dm^-1 are the gradients of N1..N3
    g0 = -g.sum(axis=-2, keepdims=True)
    return np.concatenate([g0, g], axis=-2), det / 6.0, inv


def _strain_matrix(grads):
    """Batched 6x12 strain-displacement matrices from shape gradients (..., 4, 3)."""
    B = np.zeros(grads.shape[:-2] + (6, 12))
    for a in range(4):
        gx, gy, gz = grads[..., a, 0], grads[..., a, 1], grads[..., a, 2]
        c = 3 * a
        B[..., 0, c] = gx
        B[..., 1, c + 1] = gy
        B[..., 2, c + 2] = gz
        B[..., 3, c], B[..., 3, c + 1] = gy, gx
        B[..., 4, c + 1], B[..., 4, c + 2] = gz, gy
        B[..., 5, c], B[..., 5, c + 2] = gz, gx
    return B


def _check_volumes(v, vol):
    edges = v[..., [1, 2, 3, 2, 3, 3], :] - v[..., [0, 0, 0, 1, 1, 2], :]
    longest = np.linalg.norm(edges, axis=-1).max(axis=-1)
    bad = vol <= VOLUME_EPS * longest ** 3
    if np.any(bad):
        idx = np.flatnonzero(np.atleast_1d(bad))
        raise MeshError(f"degenerate or inverted tetrahedra: {idx[:10].tolist()}")


def tet_rest_stiffness(vertices, m: MaterialParams):
    """12x12 stiffness V * B^T D B of one constant-strain tetrahedron."""
    v = np.asarray(vertices, dtype=float)
    grads, vol, _ = _shape_gradients(v)
    _check_volumes(v, vol)
    B = _strain_matrix(grads)
    K = vol * B.T @ elasticity_matrix(m) @ B
    return 0.5 * (K + K.T)


def _cofactors(r):
    """Cofactor matrices of 3x3 matrices stored as 9 component rows (row-major)."""
    a00, a01, a02, a10, a11, a12, a20, a21, a22 = r
    C = np.empty_like(r)
    C[0] = a11 * a22 - a12 * a21
    C[1] = a12 * a20 - a10 * a22
    C[2] = a10 * a21 - a11 * a20
    C[3] = a02 * a21 - a01 * a22
    C[4] = a00 * a22 - a02 * a20
    C[5] = a01 * a20 - a00 * a21
    C[6] = a01 * a12 - a02 * a11
    C[7] = a02 * a10 - a00 * a12
    C[8] = a00 * a11 - a01 * a10
    det = a00 * C[0] + a01 * C[1] + a02 * C[2]
    return C, det


def polar_rotation(F, max_iter=30, tol=1e-14):
    """Rotation factor of a batch of 3x3 matrices by Newton iteration R <- (R + R^-T)/2.

    Returns ``(R, det F)``.  Elements with ``det F < NEAR_SINGULAR_DET``
    fall back to the identity; the caller decides what to do with ``det F <= 0``.
    """
    F = np.asarray(F, dtype=float)
    shape = F.shape
    r = np.ascontiguousarray(F.reshape(-1, 9).T)
    _, det = _cofactors(r)
    bad = ~(det > NEAR_SINGULAR_DET)
    r[:, bad] = np.eye(3).reshape(9, 1)
    for _ in range(max_iter):
        C, d = _cofactors(r)
        r_new = 0.5 * (r + C / d)
        delta = np.abs(r_new - r).max() if r.size else 0.0
        r = r_new
        if delta < tol:
            break
    return r.T.reshape(shape), det.reshape(shape[:-2])


@dataclass(frozen=True)
class _Pattern:
    """Fixed CSR sparsity for scattering 12x12 element blocks."""

    shape: tuple
    indptr: np.ndarray
    indices: np.ndarray
    slot: np.ndarray  # per element entry -> CSR data index
    keep: np.ndarray  # mask of element entries that land in the matrix

    @classmethod
    def build(cls, dof_rows, n):
        rows = np.repeat(dof_rows, 12, axis=1).reshape(len(dof_rows), 144)
        cols = np.tile(dof_rows, (1, 12)).reshape(len(dof_rows), 144)
        keep = (rows >= 0) & (cols >= 0)
        key = rows[keep].astype(np.int64) * n + cols[keep]
        uniq, slot = np.unique(key, return_inverse=True)
        r, c = np.divmod(uniq, n)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, r + 1, 1)
        return cls((n, n), np.cumsum(indptr), c.astype(np.int32), slot.ravel(), keep)

    def assemble(self, blocks):
        data = np.bincount(self.slot, weights=blocks.reshape(len(blocks), 144)[self.keep],
                           minlength=len(self.indices))
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)


@dataclass(frozen=True)
class TissueModel:
    mesh: TetMesh
    material: MaterialParams
    stiffness: np.ndarray  # (n_tets, 12, 12) rest element stiffness
    rest: np.ndarray  # (n_tets, 4, 3) rest vertex positions
    dm_inv: np.ndarray  # (n_tets, 3, 3) inverse rest edge matrix
    volumes: np.ndarray
    masses: np.ndarray  # lumped, per node
    element_dofs: np.ndarray  # (n_tets, 12)
    free_dofs: np.ndarray
    free_index: np.ndarray  # global dof -> free dof index or -1
    free_pattern: _Pattern
    full_pattern: _Pattern

    @property
    def n_nodes(self):
        return self.mesh.n_nodes

    @property
    def n_free(self):
        return len(self.free_dofs)


@dataclass
class TissueState:
    positions: np.ndarray
    velocities: np.ndarray

    def copy(self):
        return TissueState(self.positions.copy(), self.velocities.copy())


def build_tissue_model(mesh: TetMesh, material: MaterialParams) -> TissueModel:
    v = mesh.nodes[mesh.tets]
    grads, vol, dm_inv = _shape_gradients(v)
    _check_volumes(v, vol)
    B = _strain_matrix(grads)
    D = elasticity_matrix(material)
    K = vol[:, None, None] * np.einsum("nki,kl,nlj->nij", B, D, B)
    K = 0.5 * (K + np.swapaxes(K, 1, 2))

    masses = np.bincount(mesh.tets.ravel(), weights=np.repeat(material.density * vol / 4.0, 4),
                         minlength=mesh.n_nodes)
    n_dof = 3 * mesh.n_nodes
    edofs = (3 * mesh.tets[:, :, None] + np.arange(3)).reshape(-1, 12)
    fixed = np.zeros(n_dof, dtype=bool)
    fixed[(3 * mesh.fixed_nodes[:, None] + np.arange(3)).ravel()] = True
    free = np.flatnonzero(~fixed)
    free_index = -np.ones(n_dof, dtype=np.int64)
    free_index[free] = np.arange(len(free))
    return TissueModel(mesh=mesh, material=material, stiffness=K, rest=v, dm_inv=dm_inv,
                       volumes=vol, masses=masses, element_dofs=edofs, free_dofs=free,
                       free_index=free_index,
                       free_pattern=_Pattern.build(free_index[edofs], len(free)),
                       full_pattern=_Pattern.build(edofs, n_dof))


def rest_state(model: TissueModel) -> TissueState:
    return TissueState(model.mesh.nodes.copy(), np.zeros_like(model.mesh.nodes))


def deformation_gradients(model: TissueModel, positions):
    x = positions[model.mesh.tets]
    Ds = np.swapaxes(x[:, 1:] - x[:, :1], 1, 2)
    return np.matmul(Ds, model.dm_inv)


def element_rotations(model: TissueModel, positions):
    """Per-element co-rotational frames; raises on element inversion."""
    R, det = polar_rotation(deformation_gradients(model, positions))
    if np.any(det <= 0) or not np.all(np.isfinite(det)):
        bad = np.flatnonzero(~(det > 0))
        raise SimulationDiverged(f"element inversion in tets {bad[:10].tolist()}")
    return R


def element_forces(model: TissueModel, positions, R, velocities=None, vel_scale=0.0):
    """Assembled elastic force -R K (R^T x - x0), optionally with -vel_scale * R K R^T v.

    Folding the velocity term into the same pass gives the implicit-Euler
    right-hand side at the cost of a single batched product.
    """
    x = positions[model.mesh.tets]
    if velocities is not None and vel_scale:
        x = x + vel_scale * velocities[model.mesh.tets]
    u = np.matmul(x, R) - model.rest
    f_loc = np.matmul(model.stiffness, u.reshape(-1, 12, 1)).reshape(-1, 4, 3)
    f = -np.matmul(f_loc, np.swapaxes(R, 1, 2))
    return np.bincount(model.element_dofs.ravel(), weights=f.ravel(),
                       minlength=3 * model.n_nodes)


def rotated_stiffness(model: TissueModel, R):
    """Per-element R K R^T blocks, shape (n_tets, 12, 12)."""
    n = len(R)
    K = model.stiffness.reshape(n, 4, 3, 4, 3)
    Kr = np.einsum("nik,nakbl,njl->naibj", R, K, R, optimize=True)
    return Kr.reshape(n, 12, 12)


def assemble_tangent(model: TissueModel, R, free_only=True):
    blocks = rotated_stiffness(model, R)
    pattern = model.free_pattern if free_only else model.full_pattern
    return pattern.assemble(blocks)


def corotational_forces(model: TissueModel, state: TissueState):
    """Global co-rotational force vector and tangent stiffness (rotations frozen).

    Fixed-node entries of the force are zero; fixed rows/columns of the
    tangent are replaced by identity rows/columns.
    """
    if state.positions.shape != model.mesh.nodes.shape:
        raise ValueError("state does not match model")
    R = element_rotations(model, state.positions)
    f = element_forces(model, state.positions, R)
    fixed = model.free_index < 0
    f[fixed] = 0.0
    K = assemble_tangent(model, R, free_only=False).tolil()
    idx = np.flatnonzero(fixed)
    K[idx, :] = 0.0
    K[:, idx] = 0.0
    K[idx, idx] = 1.0
    return f, K.tocsr()
