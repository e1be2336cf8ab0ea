"""Texture extraction: z-buffer visibility, vertex sampling, symmetry fill, UV atlas.

Depth convention: after rotation the camera looks down ``-z``, so a larger
rotated ``z`` is closer. Triangles wind counter-clockwise seen from outside,
so a front-facing surface has a normal with positive rotated ``z``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from morphface.alignment import bilinear_sample
from morphface.errors import EmptyTextureError, InvalidArgumentError
from morphface.model import FaceMesh, ModelParams, MorphableBasis, rotation_from_euler

DEFAULT_ATLAS_RESOLUTION = 1024
DILATION_PASSES = 4
DEPTH_EPS_FRACTION = 1e-4


@dataclass
class TextureAtlas:
    image: np.ndarray  # (R, R, 3), row 0 is v = 1
    coverage_mask: np.ndarray  # (R, R) bool, texels written by rasterization

    @property
    def resolution(self) -> int:
        return self.image.shape[0]


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


# ---------------------------------------------------------------------------
# rasterization

def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def rasterize(xy: np.ndarray, triangles: np.ndarray, values: np.ndarray, size, depth=None):
    """Scan-convert triangles onto a ``size = (width, height)`` grid.

    Pixel ``(i, j)`` is sampled at its center ``(i + 0.5, j + 0.5)`` in
    ``xy`` units. With ``depth`` a z-buffer keeps the largest depth and an
    earlier triangle wins exact ties. Returns ``(out, tri_id, zbuf)`` where
    ``out`` holds barycentric interpolation of ``values`` (``(N, C)``).
    """
    w, h = size
    chans = values.shape[1]
    out = np.zeros((h, w, chans))
    tri_id = np.full((h, w), -1, dtype=np.int64)
    zbuf = np.full((h, w), -np.inf)
    for t, (i0, i1, i2) in enumerate(triangles):
        (x0, y0), (x1, y1), (x2, y2) = xy[i0], xy[i1], xy[i2]
        area = _edge(x0, y0, x1, y1, x2, y2)
        if area == 0.0:
            continue
        xmin = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        xmax = min(int(np.ceil(max(x0, x1, x2) - 0.5)), w - 1)
        ymin = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        ymax = min(int(np.ceil(max(y0, y1, y2) - 0.5)), h - 1)
        if xmin > xmax or ymin > ymax:
            continue
        py, px = np.mgrid[ymin:ymax + 1, xmin:xmax + 1] + 0.5
        b0 = _edge(x1, y1, x2, y2, px, py) / area
        b1 = _edge(x2, y2, x0, y0, px, py) / area
        b2 = 1.0 - b0 - b1
        tol = -1e-12
        inside = (b0 >= tol) & (b1 >= tol) & (b2 >= tol)
        if not inside.any():
            continue
        rows, cols = np.nonzero(inside)
        rows_g, cols_g = rows + ymin, cols + xmin
        bary = np.column_stack([b0[rows, cols], b1[rows, cols], b2[rows, cols]])
        bary = np.clip(bary, 0.0, 1.0)
        bary /= bary.sum(axis=1, keepdims=True)
        if depth is not None:
            z = bary @ depth[[i0, i1, i2]]
            win = z > zbuf[rows_g, cols_g]
            rows_g, cols_g, bary, z = rows_g[win], cols_g[win], bary[win], z[win]
            zbuf[rows_g, cols_g] = z
        # anchored at v0 so a constant triangle reproduces its value exactly
        v0 = values[i0]
        out[rows_g, cols_g] = v0 + bary[:, 1:2] * (values[i1] - v0) + bary[:, 2:3] * (values[i2] - v0)
        tri_id[rows_g, cols_g] = t
    return out, tri_id, zbuf


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals (unnormalized face normals summed per vertex)."""
    v0, v1, v2 = (vertices[triangles[:, k]] for k in range(3))
    face = np.cross(v1 - v0, v2 - v0)
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, triangles[:, k], face)
    return normals


def visibility_mask(mesh: FaceMesh, params: ModelParams, raster_size: int = 512) -> np.ndarray:
    """Per-vertex visibility under the pose in ``params`` (shape coefficients are ignored).

    A vertex is visible when its area-weighted normal faces the camera and it
    is not occluded: some pixel of the 2x2 block around its raster position
    is empty, covered by one of its own triangles, or has z-buffer depth
    within ``1e-4 * depth extent`` of the vertex.
    """
    if raster_size < 64:
        raise InvalidArgumentError(f"raster_size must be >= 64, got {raster_size}")
    if len(mesh.triangles) == 0:
        raise InvalidArgumentError("mesh has no triangles")
    rot = rotation_from_euler(*params.rotation)
    rotated = mesh.vertices @ rot.T * params.scale
    xy = rotated[:, :2]
    depth = rotated[:, 2]

    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = max(float((hi - lo).max()), 1e-12)
    fit = (raster_size - 2) / span
    pix = (xy - lo) * fit + 1.0

    _, tri_id, zbuf = rasterize(pix, mesh.triangles, np.zeros((len(xy), 1)), (raster_size, raster_size), depth)
    eps = DEPTH_EPS_FRACTION * max(float(depth.max() - depth.min()), 1e-12)

    n = len(xy)
    incident = [set() for _ in range(n)]
    for t, tri in enumerate(mesh.triangles):
        for v in tri:
            incident[v].add(t)

    # the 2x2 block of pixel centers surrounding each vertex
    base = np.floor(pix - 0.5).astype(np.int64)
    clear = np.zeros(n, dtype=bool)
    for dy in (0, 1):
        for dx in (0, 1):
            cx = np.clip(base[:, 0] + dx, 0, raster_size - 1)
            cy = np.clip(base[:, 1] + dy, 0, raster_size - 1)
            owner = tri_id[cy, cx]
            near = zbuf[cy, cx] <= depth + eps
            own = np.array([owner[i] in incident[i] for i in range(n)])
            clear |= near | own | (owner < 0)
    facing = vertex_normals(rotated, mesh.triangles)[:, 2] > 0
    return clear & facing


# ---------------------------------------------------------------------------
# colors

def extract_vertex_colors(image: np.ndarray, projected, visibility):
    """Bilinear image samples at projected vertex positions.

    Returns ``(colors (N, 3), valid (N,))``. Invisible vertices and vertices
    outside ``[0, W-1] x [0, H-1]`` are invalid and colored black.
    """
    projected = np.asarray(projected, dtype=np.float64)
    visibility = np.asarray(visibility, dtype=bool)
    if len(projected) != len(visibility):
        raise InvalidArgumentError(
            f"{len(projected)} projected points but {len(visibility)} visibility flags"
        )
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    h, w = img.shape[:2]
    x, y = projected[:, 0], projected[:, 1]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    valid = visibility & inside
    colors = np.zeros((len(projected), 3))
    if valid.any():
        for ch in range(3):
            colors[valid, ch] = bilinear_sample(img[..., ch], x[valid], y[valid])
    return colors, valid


def symmetry_fill(colors, validity, mirror_map):
    """Copy colors from valid mirror partners; fall back to the mean valid color.

    Originally valid vertices are never modified.
    """
    colors = np.array(colors, dtype=np.float64)
    valid = np.asarray(validity, dtype=bool)
    mirror = np.asarray(mirror_map, dtype=np.int64)
    if len(mirror) != len(colors) or not np.array_equal(mirror[mirror], np.arange(len(mirror))):
        raise InvalidArgumentError("mirror_map must be an involution over all vertices")
    if not valid.any():
        raise EmptyTextureError("no valid vertex colors to propagate")
    out_valid = valid.copy()
    from_mirror = ~valid & valid[mirror]
    colors[from_mirror] = colors[mirror[from_mirror]]
    out_valid[from_mirror] = True
    rest = ~out_valid
    if rest.any():
        colors[rest] = _mean_color(colors[valid])
        out_valid[rest] = True
    return colors, out_valid


def _mean_color(colors):
    # offset from the first sample so a uniform set averages to exactly that color
    base = colors[0]
    return base + (colors - base).mean(axis=0)


# ---------------------------------------------------------------------------
# atlas

def uv_to_texel(uv: np.ndarray, resolution: int) -> np.ndarray:
    """UV (v up) to continuous texel coordinates (x right, y down)."""
    uv = np.asarray(uv, dtype=np.float64)
    return np.column_stack([uv[:, 0] * resolution, (1.0 - uv[:, 1]) * resolution])


def dilate(image: np.ndarray, mask: np.ndarray, passes: int = DILATION_PASSES):
    """Grow written texels into empty neighbours, ``passes`` rings at a time.

    Each pass assigns every empty texel with written 4-neighbours the mean of
    those neighbours.
    """
    img = image.copy()
    filled = mask.copy()
    for _ in range(passes):
        acc = np.zeros_like(img)
        cnt = np.zeros(filled.shape)
        for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
            src_f = np.roll(filled, shift, axis=axis)
            src_v = np.roll(img, shift, axis=axis)
            # np.roll wraps, drop the wrapped edge
            edge = [slice(None), slice(None)]
            edge[axis] = 0 if shift == 1 else -1
            src_f[tuple(edge)] = False
            acc += np.where(src_f[..., None], src_v, 0.0)
            cnt += src_f
        grow = ~filled & (cnt > 0)
        if not grow.any():
            break
        img[grow] = acc[grow] / cnt[grow][:, None]
        filled = filled | grow
    return img, filled


def bake_uv_atlas(basis: MorphableBasis, colors, resolution: int = DEFAULT_ATLAS_RESOLUTION,
                  dilation_passes: int = DILATION_PASSES) -> TextureAtlas:
    if basis.uv_coords is None:
        raise InvalidArgumentError("basis has no uv_coords; a UV layout is required to bake an atlas")
    if not (_is_pow2(resolution) and resolution >= 64):
        raise InvalidArgumentError(f"atlas resolution must be a power of two >= 64, got {resolution}")
    colors = np.asarray(colors, dtype=np.float64)
    if colors.shape != (basis.vertex_count, 3):
        raise InvalidArgumentError(f"colors must have shape ({basis.vertex_count}, 3)")
    texel_xy = uv_to_texel(basis.uv_coords, resolution)
    image, tri_id, _ = rasterize(texel_xy, basis.triangles, colors, (resolution, resolution))
    coverage = tri_id >= 0
    if dilation_passes:
        image, _ = dilate(image, coverage, dilation_passes)
    return TextureAtlas(image=image, coverage_mask=coverage)


def texture_from_image(basis: MorphableBasis, params: ModelParams, image: np.ndarray,
                       resolution: int = DEFAULT_ATLAS_RESOLUTION, raster_size: int = 512):
    """Full pipeline: synthesize, project, visibility, sample, symmetry fill, bake.

    Returns ``(mesh_with_colors, atlas, valid_before_fill)``.
    """
    from morphface.model import project_vertices, synthesize_shape

    mesh = synthesize_shape(basis, params.id_coeffs, params.exp_coeffs)
    projected = project_vertices(mesh, params.scale, rotation_from_euler(*params.rotation), params.translation_2d)
    visible = visibility_mask(mesh, params, raster_size)
    colors, valid = extract_vertex_colors(image, projected, visible)
    if basis.mirror_map is not None:
        colors, filled = symmetry_fill(colors, valid, basis.mirror_map)
    else:
        if not valid.any():
            raise EmptyTextureError("no vertex is visible inside the image")
        colors[~valid] = _mean_color(colors[valid])
    atlas = bake_uv_atlas(basis, colors, resolution)
    return mesh.with_colors(colors), atlas, valid
