"""Eye-based pseudo rigid transform between unaligned and aligned faces.

Points are ``(x, y)`` pixels with the origin at the top-left and y pointing
down. A transform ``(r, tx, ty)`` maps a point ``p`` to::

    Rot(r) @ (p - c) + c + (tx, ty)

where ``c`` is the rotation center (the image center by default) and
``Rot(r) = [[cos r, -sin r], [sin r, cos r]]``. With y pointing down a
positive ``r`` turns the picture clockwise on screen.

"Left eye" always means the subject's left eye (viewer's right), which is
68-point indices 42-47.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from morphface.errors import DegenerateGeometryError, InvalidArgumentError

RIGHT_EYE = slice(36, 42)
LEFT_EYE = slice(42, 48)


class Scheme(str, enum.Enum):
    FULL_68 = "FULL_68"
    EYES_ONLY = "EYES_ONLY"


_EXPECTED = {Scheme.FULL_68: 68, Scheme.EYES_ONLY: 2}


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Landmark points; EYES_ONLY holds ``[left_center, right_center]``."""

    points: np.ndarray
    scheme: Scheme = Scheme.FULL_68
    image_size: Optional[Tuple[int, int]] = None  # (width, height)

    def __post_init__(self):
        scheme = Scheme(self.scheme)
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise InvalidArgumentError(f"landmark points must be (n, 2), got shape {pts.shape}")
        if len(pts) != _EXPECTED[scheme]:
            raise InvalidArgumentError(
                f"{scheme.value} needs {_EXPECTED[scheme]} points, got {len(pts)}"
            )
        object.__setattr__(self, "scheme", scheme)
        object.__setattr__(self, "points", pts)
        if self.image_size is not None:
            object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    def image_center(self) -> Optional[np.ndarray]:
        if self.image_size is None:
            return None
        return image_center(self.image_size[0], self.image_size[1])


def image_center(width: int, height: int) -> np.ndarray:
    """Center of the pixel grid, with pixel ``(i, j)`` centered on integer coordinates."""
    return np.array([(width - 1) / 2.0, (height - 1) / 2.0])


@dataclass(frozen=True)
class RigidTransform2D:
    r: float = 0.0  # degrees
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "r", normalize_degrees(self.r))

    def apply_points(self, points, center) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        c = np.asarray(center, dtype=np.float64)
        return (pts - c) @ _rot(self.r).T + c + (self.tx, self.ty)

    def invert_points(self, points, center) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        c = np.asarray(center, dtype=np.float64)
        return (pts - (self.tx, self.ty) - c) @ _rot(-self.r).T + c

    def as_dict(self) -> dict:
        return {"r": self.r, "tx": self.tx, "ty": self.ty}


def normalize_degrees(r: float) -> float:
    """Wrap to (-180, 180]."""
    r = math.fmod(float(r), 360.0)
    if r <= -180.0:
        r += 360.0
    elif r > 180.0:
        r -= 360.0
    return r + 0.0  # -0.0 -> 0.0


def _rot(deg):
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s], [s, c]])


def eye_centers(landmarks: LandmarkSet):
    """``(left, right)`` eye centers of the subject."""
    pts = landmarks.points
    if landmarks.scheme is Scheme.EYES_ONLY:
        return pts[0].copy(), pts[1].copy()
    return pts[LEFT_EYE].mean(axis=0), pts[RIGHT_EYE].mean(axis=0)


def compute_pseudo_transform(
    unaligned: LandmarkSet,
    aligned: LandmarkSet,
    center=None,
) -> RigidTransform2D:
    """Rotation and translation taking the aligned eyes onto the unaligned ones.

    ``r`` is the signed angle from the aligned eye line to the unaligned eye
    line. The aligned eyes are then rotated by ``r`` about ``center`` and the
    translation is the offset between the two left eyes.

    ``center`` defaults to the aligned set's image center, or the midpoint of
    the aligned eyes when no image size is known.
    """
    ul, ur = eye_centers(unaligned)
    al, ar = eye_centers(aligned)
    du, da = ur - ul, ar - al
    nu, na = np.hypot(*du), np.hypot(*da)
    if nu == 0.0 or na == 0.0:
        raise DegenerateGeometryError("eye centers coincide, the eye line is undefined")
    if np.array_equal(ul, al) and np.array_equal(ur, ar):
        return RigidTransform2D(0.0, 0.0, 0.0)
    cross = da[0] * du[1] - da[1] * du[0]
    dot = da[0] * du[0] + da[1] * du[1]
    r = math.degrees(math.atan2(cross, dot))
    if center is None:
        center = aligned.image_center()
    if center is None:
        center = 0.5 * (al + ar)
    rotated_left = RigidTransform2D(r).apply_points(al, center)
    t = ul - rotated_left
    return RigidTransform2D(r, float(t[0]), float(t[1]))


def apply_rigid_transform(image: np.ndarray, transform: RigidTransform2D, rotation_center=None) -> np.ndarray:
    """Warp ``image`` by ``transform`` with bilinear sampling and black fill.

    Output pixel ``q`` takes the input value at the inverse-mapped point
    ``transform.invert_points(q)``; sizes are preserved. ``rotation_center``
    defaults to the image center.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim not in (2, 3) or img.shape[0] == 0 or img.shape[1] == 0:
        raise InvalidArgumentError(f"image must be a non-empty (H, W[, C]) array, got shape {img.shape}")
    h, w = img.shape[:2]
    if rotation_center is None:
        rotation_center = image_center(w, h)
    if transform.r == 0.0 and transform.tx == 0.0 and transform.ty == 0.0:
        return img.copy()
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src = transform.invert_points(np.column_stack([xs.ravel(), ys.ravel()]), rotation_center)
    coords = [src[:, 1], src[:, 0]]
    planes = img[..., None] if img.ndim == 2 else img
    out = np.empty_like(planes)
    for ch in range(planes.shape[2]):
        out[..., ch] = bilinear_sample(planes[..., ch], coords[1], coords[0]).reshape(h, w)
    return out[..., 0] if img.ndim == 2 else out


def bilinear_sample(plane: np.ndarray, x, y, fill: float = 0.0) -> np.ndarray:
    """Bilinear lookup at ``(x, y)``; points outside ``[0, W-1] x [0, H-1]`` get ``fill``.

    Written as base value plus weighted differences, so constant regions and
    integer positions reproduce the stored values exactly.
    """
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    # snap float noise so exact-integer targets stay bit-exact
    xr, yr = np.round(x), np.round(y)
    x = np.where(np.abs(x - xr) < 1e-9, xr, x)
    y = np.where(np.abs(y - yr) < 1e-9, yr, y)
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.where(inside, x, 0.0)
    ys = np.where(inside, y, 0.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx, fy = xs - x0, ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    p00, p01 = plane[y0, x0], plane[y0, x1]
    p10, p11 = plane[y1, x0], plane[y1, x1]
    top = p00 + fx * (p01 - p00)
    bottom = p10 + fx * (p11 - p10)
    return np.where(inside, top + fy * (bottom - top), fill)
