"""Seeded synthetic bases.

Real face models (Basel, FLAME) are license-encumbered, so tests, scripts and
the CLI demo run on generated bases:

* :func:`random_basis` scatters vertices over a half-ellipsoid "face cap" and
  builds smooth random PCA columns.
* :func:`toy_head_basis` is a left/right symmetric grid cap carrying UVs and a
  mirror map, which is what the texture pipeline needs.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay

from morphface.model import MorphableBasis

HEAD_AXES = (70.0, 90.0, 60.0)


def _cap_depth(x, y, axes):
    a, b, c = axes
    r2 = np.clip(1.0 - (x / a) ** 2 - (y / b) ** 2, 0.0, None)
    return c * np.sqrt(r2)


def _smooth_columns(points, k, rng, amplitude):
    """``k`` smooth random deformation fields over ``points``, as (3N, k)."""
    n = len(points)
    scale = np.abs(points).max(axis=0) + 1e-9
    cols = np.empty((3 * n, k))
    for j in range(k):
        field = np.zeros((n, 3))
        for _ in range(3):
            freq = rng.normal(size=3) * 1.5 / scale
            phase = rng.uniform(0, 2 * np.pi)
            direction = rng.normal(size=3)
            field += np.sin(points @ freq + phase)[:, None] * direction
        field *= amplitude / np.sqrt(np.mean(field ** 2))
        cols[:, j] = field.reshape(-1)
    return cols


def random_basis(
    n_vertices: int,
    n_id: int,
    n_exp: int,
    n_landmarks: int = 0,
    seed: int = 0,
    axes=HEAD_AXES,
    amplitude: float = 6.0,
    exp_amplitude: float | None = None,
) -> MorphableBasis:
    exp_amplitude = amplitude if exp_amplitude is None else exp_amplitude
    rng = np.random.default_rng(seed)
    a, b, _ = axes
    # rejection-free uniform points in the unit disk, shrunk to stay off the rim
    r = 0.9 * np.sqrt(rng.uniform(size=n_vertices))
    th = rng.uniform(0, 2 * np.pi, size=n_vertices)
    x, y = a * r * np.cos(th), b * r * np.sin(th)
    pts = np.column_stack([x, y, _cap_depth(x, y, axes)])
    if n_vertices >= 3:
        tri = Delaunay(pts[:, :2]).simplices.astype(np.int64)
        tri = _orient_ccw(pts, tri)
    else:
        tri = np.zeros((0, 3), dtype=np.int64)
    lmk = rng.choice(n_vertices, size=n_landmarks, replace=False) if n_landmarks else []
    return MorphableBasis(
        mean_shape=pts.reshape(-1),
        id_basis=_smooth_columns(pts, n_id, rng, amplitude),
        exp_basis=_smooth_columns(pts, n_exp, rng, exp_amplitude),
        triangles=tri,
        landmark_indices=lmk,
    )


def _orient_ccw(pts, tri):
    """Flip triangles so their xy-projected winding is counter-clockwise (normal toward +z)."""
    p0, p1, p2 = pts[tri[:, 0], :2], pts[tri[:, 1], :2], pts[tri[:, 2], :2]
    cross = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    tri = tri.copy()
    flip = cross < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    return tri


def toy_head_basis(
    n_cols: int = 33,
    n_rows: int = 41,
    n_id: int = 4,
    n_exp: int = 2,
    seed: int = 0,
    axes=HEAD_AXES,
    amplitude: float = 4.0,
) -> MorphableBasis:
    """Mirror-symmetric half-ellipsoid face cap with UVs and a mirror map.

    Vertex ``(row, col)`` sits at index ``row * n_cols + col``; the mirror
    partner is ``(row, n_cols - 1 - col)``. Basis columns are symmetrized so
    every synthesized shape stays left/right symmetric.
    """
    a, b, _ = axes
    u = np.linspace(0.0, 1.0, n_cols)
    v = np.linspace(0.0, 1.0, n_rows)
    uu, vv = np.meshgrid(u, v)
    x = (2 * uu - 1) * a * 0.97
    y = (2 * vv - 1) * b * 0.97
    # squeeze the grid into the ellipse so every vertex is on the cap
    rim = np.maximum(np.sqrt((x / a) ** 2 + (y / b) ** 2), 1e-12)
    shrink = np.where(rim > 0.97, 0.97 / rim, 1.0)
    x, y = x * shrink, y * shrink
    pts = np.column_stack([x.ravel(), y.ravel(), _cap_depth(x, y, axes).ravel()])
    n = len(pts)
    idx = np.arange(n).reshape(n_rows, n_cols)
    mirror = idx[:, ::-1].ravel()

    quads = []
    for r in range(n_rows - 1):
        for c in range(n_cols - 1):
            v00, v01, v10, v11 = idx[r, c], idx[r, c + 1], idx[r + 1, c], idx[r + 1, c + 1]
            # split along the diagonal that keeps the mesh mirror-symmetric
            if c < (n_cols - 1) // 2:
                quads += [(v00, v01, v11), (v00, v11, v10)]
            else:
                quads += [(v00, v01, v10), (v01, v11, v10)]
    tri = _orient_ccw(pts, np.array(quads, dtype=np.int64))

    rng = np.random.default_rng(seed)
    sign = np.array([-1.0, 1.0, 1.0])

    def symmetric(k, amp):
        cols = _smooth_columns(pts, k, rng, amp)
        f = cols.reshape(n, 3, k)
        f = 0.5 * (f + f[mirror] * sign[None, :, None])
        return f.reshape(3 * n, k)

    lmk_rows = np.linspace(0.2, 0.8, 5)
    lmk_cols = np.array([0.2, 0.35, 0.65, 0.8])
    lmk = [idx[int(round(r * (n_rows - 1))), int(round(c * (n_cols - 1)))] for r in lmk_rows for c in lmk_cols]

    return MorphableBasis(
        mean_shape=pts.reshape(-1),
        id_basis=symmetric(n_id, amplitude),
        exp_basis=symmetric(n_exp, amplitude * 0.5),
        triangles=tri,
        landmark_indices=np.array(lmk),
        uv_coords=np.column_stack([uu.ravel(), vv.ravel()]),
        mirror_map=mirror,
    )


def random_params(basis: MorphableBasis, rng: np.random.Generator, n_nonzero=None, coeff_scale=1.0,
                  scale_range=(0.8, 1.5), yaw_deg=45.0, pitch_deg=15.0, roll_deg=15.0, translation=(256.0, 256.0)):
    """Draw pose and coefficients; ``n_nonzero`` limits how many coefficients are nonzero."""
    from morphface.model import ModelParams

    k = basis.n_id + basis.n_exp
    coeffs = np.zeros(k)
    active = np.arange(k) if n_nonzero is None else rng.choice(k, size=min(n_nonzero, k), replace=False)
    coeffs[active] = rng.uniform(0.5, 1.5, size=len(active)) * rng.choice([-1, 1], size=len(active)) * coeff_scale
    return ModelParams(
        scale=rng.uniform(*scale_range),
        rotation=np.deg2rad([
            rng.uniform(-pitch_deg, pitch_deg),
            rng.uniform(-yaw_deg, yaw_deg),
            rng.uniform(-roll_deg, roll_deg),
        ]),
        translation_2d=np.asarray(translation) + rng.uniform(-20, 20, size=2),
        id_coeffs=coeffs[:basis.n_id],
        exp_coeffs=coeffs[basis.n_id:],
    )
