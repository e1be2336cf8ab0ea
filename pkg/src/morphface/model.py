"""Linear morphable model: shape synthesis and scaled orthographic projection.

A face is ``S = mean + A_id @ alpha_id + A_exp @ alpha_exp`` with ``S`` stacked
as ``(x0, y0, z0, x1, ...)``. Projection to the image plane is::

    V_2d = f * Pr @ R @ S + t_2d,    Pr = [[1, 0, 0], [0, 1, 0]]

Euler convention
----------------
``R = Rz(roll) @ Ry(yaw) @ Rx(pitch)``, right-handed, angles in radians.
So ``(pitch, yaw, roll) = (0, pi/2, 0)`` sends the x axis to ``-z``.

The projection formula does not care which way image y points; callers that
work in pixel space treat outputs as (column, row) with the origin top-left.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from morphface.errors import InvalidArgumentError

# Flattened parameter layout shared by fitting, WPDC weights and params JSON.
POSE_NAMES = ("scale", "pitch", "yaw", "roll", "tx", "ty")
N_POSE = len(POSE_NAMES)


@dataclass(frozen=True, eq=False)
class MorphableBasis:
    """Mean shape plus identity/expression PCA bases and mesh topology.

    Arrays are float64 internally. ``id_basis`` and ``exp_basis`` are
    ``(3N, K)`` with one principal component per column.
    """

    mean_shape: np.ndarray
    id_basis: np.ndarray
    exp_basis: np.ndarray
    triangles: np.ndarray
    landmark_indices: np.ndarray
    uv_coords: Optional[np.ndarray] = None
    mirror_map: Optional[np.ndarray] = None

    def __post_init__(self):
        mean = np.asarray(self.mean_shape, dtype=np.float64).reshape(-1)
        if mean.size == 0 or mean.size % 3:
            raise InvalidArgumentError(
                f"mean_shape length {mean.size} is not a positive multiple of 3"
            )
        n = mean.size // 3
        id_b = _as_basis(self.id_basis, 3 * n, "id_basis")
        exp_b = _as_basis(self.exp_basis, 3 * n, "exp_basis")
        tri = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        lmk = np.asarray(self.landmark_indices, dtype=np.int64).reshape(-1)
        for name, idx in (("triangles", tri), ("landmark_indices", lmk)):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise InvalidArgumentError(f"{name} contains indices outside [0, {n})")
        uv = None
        if self.uv_coords is not None:
            uv = np.asarray(self.uv_coords, dtype=np.float64)
            if uv.shape != (n, 2):
                raise InvalidArgumentError(f"uv_coords must have shape ({n}, 2), got {uv.shape}")
        mirror = None
        if self.mirror_map is not None:
            mirror = np.asarray(self.mirror_map, dtype=np.int64).reshape(-1)
            if mirror.shape != (n,):
                raise InvalidArgumentError(f"mirror_map must have length {n}")
            if mirror.min() < 0 or mirror.max() >= n:
                raise InvalidArgumentError("mirror_map contains indices out of range")
            if not np.array_equal(mirror[mirror], np.arange(n)):
                raise InvalidArgumentError("mirror_map is not an involution")
        for arr in (mean, id_b, exp_b, tri, lmk, uv, mirror):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "mean_shape", mean)
        object.__setattr__(self, "id_basis", id_b)
        object.__setattr__(self, "exp_basis", exp_b)
        object.__setattr__(self, "triangles", tri)
        object.__setattr__(self, "landmark_indices", lmk)
        object.__setattr__(self, "uv_coords", uv)
        object.__setattr__(self, "mirror_map", mirror)

    @property
    def vertex_count(self) -> int:
        return self.mean_shape.size // 3

    @property
    def n_id(self) -> int:
        return self.id_basis.shape[1]

    @property
    def n_exp(self) -> int:
        return self.exp_basis.shape[1]

    @property
    def n_params(self) -> int:
        return N_POSE + self.n_id + self.n_exp

    @property
    def landmark_count(self) -> int:
        return self.landmark_indices.size


def _as_basis(a, rows: int, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1 and a.size == 0:
        a = a.reshape(rows, 0)
    if a.ndim != 2 or a.shape[0] != rows:
        raise InvalidArgumentError(f"{name} must have {rows} rows, got shape {a.shape}")
    return np.ascontiguousarray(a)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Pose plus shape coefficients.

    Flattened order (see :meth:`to_vector`) is
    ``[scale, pitch, yaw, roll, tx, ty, id_coeffs..., exp_coeffs...]``.
    """

    scale: float = 1.0
    rotation: tuple = (0.0, 0.0, 0.0)
    translation_2d: tuple = (0.0, 0.0)
    id_coeffs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    exp_coeffs: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidArgumentError(f"scale must be positive and finite, got {self.scale}")
        rot = tuple(float(v) for v in self.rotation)
        trans = tuple(float(v) for v in self.translation_2d)
        if len(rot) != 3 or len(trans) != 2:
            raise InvalidArgumentError("rotation needs 3 angles, translation_2d needs 2 values")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation_2d", trans)
        object.__setattr__(self, "id_coeffs", np.asarray(self.id_coeffs, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "exp_coeffs", np.asarray(self.exp_coeffs, dtype=np.float64).reshape(-1))

    @classmethod
    def zeros(cls, basis: MorphableBasis, scale: float = 1.0) -> "ModelParams":
        return cls(scale=scale, id_coeffs=np.zeros(basis.n_id), exp_coeffs=np.zeros(basis.n_exp))

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [[self.scale], self.rotation, self.translation_2d, self.id_coeffs, self.exp_coeffs]
        )

    @classmethod
    def from_vector(cls, vec, n_id: int, n_exp: int) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.size != N_POSE + n_id + n_exp:
            raise InvalidArgumentError(
                f"parameter vector has length {vec.size}, expected {N_POSE + n_id + n_exp}"
            )
        return cls(
            scale=vec[0],
            rotation=tuple(vec[1:4]),
            translation_2d=tuple(vec[4:6]),
            id_coeffs=vec[N_POSE:N_POSE + n_id].copy(),
            exp_coeffs=vec[N_POSE + n_id:].copy(),
        )

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def check_compatible(self, basis: MorphableBasis) -> None:
        _check_coeffs(basis, self.id_coeffs, self.exp_coeffs)


@dataclass(frozen=True, eq=False)
class FaceMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise InvalidArgumentError("triangle indices out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.float64)
            if c.shape != v.shape:
                raise InvalidArgumentError(f"colors must have shape {v.shape}, got {c.shape}")
            object.__setattr__(self, "colors", c)

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    def with_colors(self, colors) -> "FaceMesh":
        return FaceMesh(self.vertices, self.triangles, colors)


def _check_coeffs(basis: MorphableBasis, id_coeffs, exp_coeffs):
    if np.shape(id_coeffs) != (basis.n_id,):
        raise InvalidArgumentError(
            f"id_coeffs has length {np.size(id_coeffs)}, basis expects {basis.n_id}"
        )
    if np.shape(exp_coeffs) != (basis.n_exp,):
        raise InvalidArgumentError(
            f"exp_coeffs has length {np.size(exp_coeffs)}, basis expects {basis.n_exp}"
        )


def synthesize_shape(basis: MorphableBasis, id_coeffs, exp_coeffs) -> FaceMesh:
    id_coeffs = np.asarray(id_coeffs, dtype=np.float64).reshape(-1)
    exp_coeffs = np.asarray(exp_coeffs, dtype=np.float64).reshape(-1)
    _check_coeffs(basis, id_coeffs, exp_coeffs)
    flat = basis.mean_shape + basis.id_basis @ id_coeffs + basis.exp_basis @ exp_coeffs
    return FaceMesh(flat.reshape(-1, 3), basis.triangles)


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_euler(pitch: float, yaw: float, roll: float) -> np.ndarray:
    """``Rz(roll) @ Ry(yaw) @ Rx(pitch)`` as a 3x3 array."""
    angles = np.array([pitch, yaw, roll], dtype=np.float64)
    if not np.all(np.isfinite(angles)):
        raise InvalidArgumentError(f"Euler angles must be finite, got {tuple(angles)}")
    return _rz(roll) @ _ry(yaw) @ _rx(pitch)


def rotation_derivatives(pitch: float, yaw: float, roll: float):
    """Partial derivatives of :func:`rotation_from_euler` w.r.t. (pitch, yaw, roll)."""
    rx, ry, rz = _rx(pitch), _ry(yaw), _rz(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cr, sr = np.cos(roll), np.sin(roll)
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sp, -cp], [0.0, cp, -sp]])
    dry = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    drz = np.array([[-sr, -cr, 0.0], [cr, -sr, 0.0], [0.0, 0.0, 0.0]])
    return rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx


def euler_from_rotation(rot: np.ndarray) -> tuple:
    """Inverse of :func:`rotation_from_euler` (yaw in [-pi/2, pi/2])."""
    rot = np.asarray(rot, dtype=np.float64)
    yaw = -np.arcsin(np.clip(rot[2, 0], -1.0, 1.0))
    if abs(rot[2, 0]) < 1.0 - 1e-12:
        pitch = np.arctan2(rot[2, 1], rot[2, 2])
        roll = np.arctan2(rot[1, 0], rot[0, 0])
    else:
        # gimbal lock: fold everything into roll
        pitch = 0.0
        roll = np.arctan2(-rot[0, 1], rot[1, 1])
    return float(pitch), float(yaw), float(roll)


def project_vertices(mesh, scale: float, rotation: np.ndarray, translation_2d) -> np.ndarray:
    """Scaled orthographic projection of every vertex, returns ``(N, 2)``.

    ``mesh`` may be a :class:`FaceMesh` or an ``(N, 3)`` array.
    """
    if not scale > 0:
        raise InvalidArgumentError(f"scale must be positive, got {scale}")
    verts = mesh.vertices if isinstance(mesh, FaceMesh) else np.asarray(mesh, dtype=np.float64)
    rot = np.asarray(rotation, dtype=np.float64)
    return scale * (verts @ rot[:2].T) + np.asarray(translation_2d, dtype=np.float64)


def project_model(basis: MorphableBasis, params: ModelParams) -> np.ndarray:
    mesh = synthesize_shape(basis, params.id_coeffs, params.exp_coeffs)
    return project_vertices(mesh, params.scale, rotation_from_euler(*params.rotation), params.translation_2d)


def landmark_positions(basis: MorphableBasis, params: ModelParams) -> np.ndarray:
    if basis.landmark_count == 0:
        raise InvalidArgumentError("basis has no landmark indices")
    return project_model(basis, params)[basis.landmark_indices]


def landmark_basis(basis: MorphableBasis):
    """Rows of mean/id/exp restricted to landmark vertices, shapes (L,3), (L,3,K_id), (L,3,K_exp)."""
    rows = (3 * basis.landmark_indices[:, None] + np.arange(3)).reshape(-1)
    L = basis.landmark_count
    return (
        basis.mean_shape[rows].reshape(L, 3),
        basis.id_basis[rows].reshape(L, 3, basis.n_id),
        basis.exp_basis[rows].reshape(L, 3, basis.n_exp),
    )


def bounding_box_diagonal(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def subset_basis(basis: MorphableBasis, landmark_subset: Sequence[int]) -> MorphableBasis:
    """Same model with ``landmark_indices`` replaced by ``basis.landmark_indices[landmark_subset]``."""
    return replace(basis, landmark_indices=basis.landmark_indices[np.asarray(landmark_subset, dtype=np.int64)])
