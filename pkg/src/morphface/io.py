"""File formats: basis container, meshes (OBJ/MTL, PLY), landmark JSON, images.

Basis container layout (all little-endian)::

    b"MMB1"  u32 version  u32 N  u32 K_id  u32 K_exp  u32 T  u32 L  u32 flags
    f32 mean[3N]  f32 A_id[3N*K_id] (column-major)  f32 A_exp[3N*K_exp] (column-major)
    u32 triangles[3T]  u32 landmarks[L]
    [f32 uv[2N]   if flags & 1]
    [u32 mirror[N] if flags & 2]
    u32 crc32 of every preceding byte

Floats are stored as f32 and widened to f64 on load, so a round trip is exact
up to f32 rounding of the saved values.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import zlib
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from morphface.alignment import LandmarkSet, Scheme
from morphface.errors import (
    BadMagicError,
    ChecksumError,
    FormatError,
    InvalidArgumentError,
    SchemaError,
    TruncatedFileError,
    UnsupportedFormatError,
    VersionMismatchError,
)
from morphface.model import POSE_NAMES, FaceMesh, ModelParams, MorphableBasis

MAGIC = b"MMB1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4s7I")
FLAG_UV = 1
FLAG_MIRROR = 2


@contextmanager
def atomic_write(path, mode="wb"):
    """Write to a temp file next to ``path`` and rename on success only."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


# ---------------------------------------------------------------------------
# basis container

def encode_basis(basis: MorphableBasis) -> bytes:
    n, kid, kexp = basis.vertex_count, basis.n_id, basis.n_exp
    flags = (FLAG_UV if basis.uv_coords is not None else 0) | (FLAG_MIRROR if basis.mirror_map is not None else 0)
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, n, kid, kexp, len(basis.triangles), basis.landmark_count, flags),
        basis.mean_shape.astype("<f4").tobytes(),
        basis.id_basis.astype("<f4").tobytes(order="F"),
        basis.exp_basis.astype("<f4").tobytes(order="F"),
        basis.triangles.astype("<u4").tobytes(),
        basis.landmark_indices.astype("<u4").tobytes(),
    ]
    if basis.uv_coords is not None:
        parts.append(basis.uv_coords.astype("<f4").tobytes())
    if basis.mirror_map is not None:
        parts.append(basis.mirror_map.astype("<u4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_basis(data: bytes) -> MorphableBasis:
    if len(data) < _HEADER.size:
        raise TruncatedFileError("basis header", _HEADER.size, len(data))
    magic, version, n, kid, kexp, t, L, flags = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported basis format version {version} (expected {FORMAT_VERSION})")
    if flags & ~(FLAG_UV | FLAG_MIRROR):
        raise FormatError(f"unknown flag bits 0x{flags:x}")
    counts = [
        ("mean", "<f4", 3 * n),
        ("id", "<f4", 3 * n * kid),
        ("exp", "<f4", 3 * n * kexp),
        ("triangles", "<u4", 3 * t),
        ("landmarks", "<u4", L),
    ]
    if flags & FLAG_UV:
        counts.append(("uv", "<f4", 2 * n))
    if flags & FLAG_MIRROR:
        counts.append(("mirror", "<u4", n))
    expected = _HEADER.size + 4 * sum(c for _, _, c in counts) + 4
    if len(data) < expected:
        raise TruncatedFileError("basis file", expected, len(data))
    if len(data) > expected:
        raise FormatError(f"basis file has {len(data) - expected} trailing bytes")
    (stored_crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[:expected - 4]) != stored_crc:
        raise ChecksumError("basis CRC32 mismatch, file is corrupted")
    if n == 0:
        raise FormatError("basis has zero vertices")

    arrays = {}
    offset = _HEADER.size
    for name, dtype, count in counts:
        arrays[name] = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        offset += 4 * count
    for name in ("triangles", "landmarks", "mirror"):
        if name in arrays and arrays[name].size and int(arrays[name].max()) >= n:
            raise FormatError(f"{name} index out of range for {n} vertices")
    for name in ("mean", "id", "exp", "uv"):
        if name in arrays and not np.all(np.isfinite(arrays[name])):
            raise FormatError(f"non-finite values in {name}")
    try:
        return MorphableBasis(
            mean_shape=arrays["mean"].astype(np.float64),
            id_basis=arrays["id"].astype(np.float64).reshape(3 * n, kid, order="F"),
            exp_basis=arrays["exp"].astype(np.float64).reshape(3 * n, kexp, order="F"),
            triangles=arrays["triangles"].astype(np.int64).reshape(t, 3),
            landmark_indices=arrays["landmarks"].astype(np.int64),
            uv_coords=arrays["uv"].astype(np.float64).reshape(n, 2) if "uv" in arrays else None,
            mirror_map=arrays["mirror"].astype(np.int64) if "mirror" in arrays else None,
        )
    except InvalidArgumentError as exc:
        raise FormatError(f"invalid basis content: {exc}") from exc


def save_basis(basis: MorphableBasis, path) -> None:
    with atomic_write(path) as fh:
        fh.write(encode_basis(basis))


def load_basis(path) -> MorphableBasis:
    return decode_basis(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# meshes

def export_mesh(mesh: FaceMesh, path, fmt: str | None = None, atlas=None, uv_coords=None,
                atlas_path=None) -> list:
    """Write ``mesh`` as OBJ (+ MTL + PNG when ``atlas`` is given) or binary PLY.

    The atlas PNG goes to ``atlas_path`` (default: the OBJ path with a
    ``.png`` suffix). Returns the list of written paths.
    """
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        return _export_obj(mesh, path, atlas, uv_coords, atlas_path)
    if fmt == "ply":
        if atlas is not None:
            raise InvalidArgumentError("PLY export carries vertex colors only, not a texture atlas")
        with atomic_write(path) as fh:
            fh.write(encode_ply(mesh))
        return [path]
    raise InvalidArgumentError(f"unknown mesh format {fmt!r} (use obj or ply)")


def _export_obj(mesh, path, atlas, uv_coords, atlas_path=None):
    if atlas is not None and uv_coords is None:
        raise InvalidArgumentError("OBJ export with a texture atlas needs uv_coords")
    lines = []
    written = []
    if atlas is not None:
        mtl_path = path.with_suffix(".mtl")
        png_path = Path(atlas_path) if atlas_path is not None else path.with_suffix(".png")
        lines += [f"mtllib {mtl_path.name}", "usemtl face"]
    for v in mesh.vertices:
        lines.append("v " + " ".join(map(_exact, v)))
    if uv_coords is not None:
        for uv in np.asarray(uv_coords, dtype=np.float64):
            lines.append("vt " + " ".join(map(_exact, uv)))
    for tri in mesh.triangles + 1:
        if uv_coords is not None:
            lines.append(f"f {tri[0]}/{tri[0]} {tri[1]}/{tri[1]} {tri[2]}/{tri[2]}")
        else:
            lines.append(f"f {tri[0]} {tri[1]} {tri[2]}")
    if atlas is not None:
        save_image(atlas.image, png_path)
        with atomic_write(mtl_path, "w") as fh:
            fh.write(f"newmtl face\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\nillum 1\nmap_Kd {_relative(png_path, path.parent)}\n")
        written += [png_path, mtl_path]
    with atomic_write(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return [path] + written


def _exact(x) -> str:
    # shortest text that parses back to the same double
    return repr(float(x))


def _relative(target: Path, start: Path) -> str:
    try:
        return os.path.relpath(target, start).replace(os.sep, "/")
    except ValueError:  # different drives
        return str(target.resolve())


def encode_ply(mesh: FaceMesh) -> bytes:
    n, t = mesh.vertex_count, len(mesh.triangles)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if mesh.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    header += [f"element face {t}", "property list uchar int vertex_indices", "end_header"]
    verts = np.empty(n, dtype=fields)
    for k, name in enumerate("xyz"):
        verts[name] = mesh.vertices[:, k]
    if mesh.colors is not None:
        q = quantize(mesh.colors)
        for k, name in enumerate(("red", "green", "blue")):
            verts[name] = q[:, k]
    faces = np.empty(t, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    faces["n"] = 3
    faces["idx"] = mesh.triangles
    return ("\n".join(header) + "\n").encode("ascii") + verts.tobytes() + faces.tobytes()


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def decode_ply(data: bytes) -> FaceMesh:
    """Triangle meshes in binary little-endian or ASCII PLY."""
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY file (missing 'ply' magic or end_header)")
    body_start = data.find(b"\n", end) + 1
    if body_start == 0:
        raise TruncatedFileError("PLY header", end + len(b"end_header") + 1, len(data))
    header = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []  # [name, count, [(prop, dtype) | (prop, count_dtype, index_dtype)]]
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise FormatError(f"malformed PLY element line {line!r}")
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property" and elements:
            try:
                if tok[1] == "list":
                    elements[-1][2].append((tok[4], _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
                else:
                    elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
            except (KeyError, IndexError):
                raise FormatError(f"unsupported PLY property line {line!r}") from None
    if fmt not in ("binary_little_endian", "ascii"):
        raise UnsupportedFormatError(f"PLY format {fmt!r} not supported")
    for name, _, props in elements:
        if len({p[0] for p in props}) != len(props):
            raise FormatError(f"PLY element {name!r} repeats a property name")
        if name == "vertex" and any(len(p) == 3 for p in props):
            raise UnsupportedFormatError("PLY vertex list properties are not supported")
        if name == "face" and (len(props) != 1 or len(props[0]) != 3):
            raise UnsupportedFormatError("PLY faces must be a single vertex index list")
    out = {}
    if fmt == "ascii":
        try:
            out = _ascii_ply_elements(data[body_start:].split(), elements)
        except (IndexError, ValueError):
            raise FormatError("malformed or truncated ASCII PLY body") from None
    else:
        pos = body_start
        for name, count, props in elements:
            if any(len(p) == 3 for p in props):
                if len(props) != 1:
                    raise UnsupportedFormatError("PLY list elements with extra properties are not supported")
                _, cdt, idt = props[0]
                dt = np.dtype([("n", "<" + cdt), ("idx", "<" + idt, (3,))])
            else:
                dt = np.dtype([(p, "<" + d) for p, d in props])
            need = pos + dt.itemsize * count
            if len(data) < need:
                raise TruncatedFileError(f"PLY element {name!r}", need, len(data))
            arr = np.frombuffer(data, dtype=dt, count=count, offset=pos)
            pos = need
            out[name] = (props, arr)
    return _ply_mesh(out, fmt)


def _ascii_ply_elements(tokens, elements):
    out = {}
    pos = 0
    for name, count, props in elements:
        rows = []
        for _ in range(count):
            row = []
            for prop in props:
                if len(prop) == 3:
                    n = int(tokens[pos])
                    pos += 1
                    row.append([float(t) for t in tokens[pos:pos + n]])
                    if len(row[-1]) != n:
                        raise IndexError
                    pos += n
                else:
                    row.append(float(tokens[pos]))
                    pos += 1
            rows.append(row)
        out[name] = (props, rows)
    return out


def _ply_mesh(elements, fmt) -> FaceMesh:
    if "vertex" not in elements or "face" not in elements:
        raise FormatError("PLY needs vertex and face elements")
    vprops, vdata = elements["vertex"]
    names = [p[0] for p in vprops]
    if fmt == "ascii":
        col = {n: np.array([r[i] for r in vdata], dtype=np.float64) for i, n in enumerate(names)}
        faces = [r[0] for r in elements["face"][1]]
        if any(len(f) != 3 for f in faces):
            raise UnsupportedFormatError("only triangle faces are supported")
        tri = np.array(faces, dtype=np.int64).reshape(-1, 3)
    else:
        with np.errstate(invalid="ignore"):
            col = {n: vdata[n].astype(np.float64) for n in names}
        fdata = elements["face"][1]
        if np.any(fdata["n"] != 3):
            raise UnsupportedFormatError("only triangle faces are supported")
        tri = fdata["idx"].astype(np.int64).reshape(-1, 3)
    if not all(k in col for k in "xyz"):
        raise FormatError("PLY vertices need x, y, z")
    verts = np.column_stack([col["x"], col["y"], col["z"]])
    colors = None
    if all(k in col for k in ("red", "green", "blue")):
        colors = np.column_stack([col["red"], col["green"], col["blue"]]) / 255.0
    return _checked_mesh(verts, tri, colors)


def decode_obj(text: str) -> FaceMesh:
    verts, faces = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        tok = line.split()
        if not tok:
            continue
        try:
            if tok[0] == "v":
                if len(tok) < 4:
                    raise ValueError
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                if len(idx) != 3:
                    raise UnsupportedFormatError(f"line {lineno}: only triangle faces are supported")
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
        except ValueError:
            raise FormatError(f"line {lineno}: malformed OBJ record {line.strip()!r}") from None
    return _checked_mesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                         np.array(faces, dtype=np.int64).reshape(-1, 3), None)


def _checked_mesh(verts, tri, colors) -> FaceMesh:
    if not np.all(np.isfinite(verts)):
        raise FormatError("non-finite vertex coordinates")
    if tri.size and (tri.min() < 0 or tri.max() >= len(verts)):
        raise FormatError("face index out of range")
    try:
        return FaceMesh(verts, tri, colors)
    except InvalidArgumentError as exc:
        raise FormatError(str(exc)) from None


def load_mesh(path) -> FaceMesh:
    """Read an OBJ or PLY mesh; a basis container yields its mean shape."""
    path = Path(path)
    data = path.read_bytes()
    if data.startswith(MAGIC):
        basis = decode_basis(data)
        return FaceMesh(basis.mean_shape.reshape(-1, 3), basis.triangles)
    if data.startswith(b"ply"):
        return decode_ply(data)
    if path.suffix.lower() == ".obj":
        return decode_obj(data.decode("utf-8", errors="replace"))
    raise UnsupportedFormatError(f"{path}: unknown mesh format (expected OBJ, PLY or MMB1)")


# ---------------------------------------------------------------------------
# landmarks

def landmarks_to_json(landmarks: LandmarkSet) -> dict:
    doc = {"scheme": landmarks.scheme.value, "points": landmarks.points.tolist()}
    if landmarks.image_size is not None:
        doc["image_size"] = list(landmarks.image_size)
    return doc


def landmarks_from_json(doc) -> LandmarkSet:
    if not isinstance(doc, dict):
        raise SchemaError("landmark document must be a JSON object")
    scheme = doc.get("scheme")
    try:
        scheme = Scheme(scheme)
    except ValueError:
        raise SchemaError(f"unknown landmark scheme {scheme!r}") from None
    points = doc.get("points")
    if not isinstance(points, list):
        raise SchemaError("'points' must be a list of [x, y] pairs")
    for p in points:
        if (not isinstance(p, list) or len(p) != 2
                or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in p)
                or not all(math.isfinite(c) for c in p)):
            raise SchemaError(f"landmark entry {p!r} is not a finite [x, y] pair")
    size = doc.get("image_size")
    if size is not None and (not isinstance(size, list) or len(size) != 2
                             or not all(isinstance(c, int) and c > 0 for c in size)):
        raise SchemaError("'image_size' must be [width, height] positive integers")
    try:
        return LandmarkSet(np.array(points, dtype=np.float64).reshape(-1, 2), scheme,
                           tuple(size) if size else None)
    except InvalidArgumentError as exc:
        raise SchemaError(str(exc)) from None


def save_landmarks(landmarks: LandmarkSet, path) -> None:
    with atomic_write(path, "w") as fh:
        json.dump(landmarks_to_json(landmarks), fh)


def load_landmarks(path) -> LandmarkSet:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    return landmarks_from_json(doc)


def load_points(path) -> np.ndarray:
    """Observed 2D points for fitting: ``{"points": [[x, y], ...]}``, scheme optional."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(doc, dict) and "scheme" in doc:
        return landmarks_from_json(doc).points
    if not isinstance(doc, dict) or not isinstance(doc.get("points"), list) or not doc["points"]:
        raise SchemaError(f"{path}: expected a non-empty 'points' list")
    try:
        pts = np.array(doc["points"], dtype=np.float64)
    except (TypeError, ValueError):
        raise SchemaError(f"{path}: 'points' entries must be numeric [x, y] pairs") from None
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise SchemaError(f"{path}: 'points' must be a list of [x, y] pairs")
    return pts


def save_points(points, path) -> None:
    with atomic_write(path, "w") as fh:
        json.dump({"points": np.asarray(points, dtype=np.float64).tolist()}, fh)


# ---------------------------------------------------------------------------
# model parameters

def parameter_names(n_id: int, n_exp: int) -> list:
    """Flattened parameter order; rotations are radians."""
    return list(POSE_NAMES) + [f"id[{i}]" for i in range(n_id)] + [f"exp[{i}]" for i in range(n_exp)]


def params_to_json(params: ModelParams, **extra) -> dict:
    n_id, n_exp = len(params.id_coeffs), len(params.exp_coeffs)
    doc = {
        "parameter_order": parameter_names(n_id, n_exp),
        "n_id": n_id,
        "n_exp": n_exp,
        "params": params.to_vector().tolist(),
    }
    doc.update(extra)
    return doc


def params_from_json(doc) -> ModelParams:
    if not isinstance(doc, dict):
        raise SchemaError("params document must be a JSON object")
    try:
        n_id, n_exp = int(doc["n_id"]), int(doc["n_exp"])
        vec = np.array(doc["params"], dtype=np.float64)
    except (KeyError, TypeError, ValueError):
        raise SchemaError("params document needs integer 'n_id', 'n_exp' and a numeric 'params' list") from None
    if vec.ndim != 1 or len(vec) != len(POSE_NAMES) + n_id + n_exp or not np.all(np.isfinite(vec)):
        raise SchemaError(f"'params' must hold {len(POSE_NAMES) + n_id + n_exp} finite numbers")
    try:
        return ModelParams.from_vector(vec, n_id, n_exp)
    except InvalidArgumentError as exc:
        raise SchemaError(str(exc)) from None


def dumps_json(doc) -> str:
    """Stable JSON text: sorted keys, shortest round-trip floats."""
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def save_params(params: ModelParams, path, **extra) -> None:
    with atomic_write(path, "w") as fh:
        fh.write(dumps_json(params_to_json(params, **extra)))


def load_params(path) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    return params_from_json(doc)


# ---------------------------------------------------------------------------
# images

def quantize(values) -> np.ndarray:
    """[0, 1] floats to uint8, rounding half up."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """8-bit gray or RGB PNG/PPM/PGM as float64 in [0, 1], shape (H, W) or (H, W, 3)."""
    try:
        with Image.open(path) as im:
            mode = im.mode
            fmt = im.format
            if mode not in ("L", "RGB") or fmt not in ("PNG", "PPM"):
                raise UnsupportedFormatError(
                    f"{path}: unsupported image ({fmt}, mode {mode}); need 8-bit gray/RGB PNG or PPM/PGM"
                )
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError:
        raise UnsupportedFormatError(f"{path}: not a PNG/PPM/PGM image") from None
    except OSError as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise FormatError(f"{path}: cannot decode image ({exc})") from None
    return arr.astype(np.float64) / 255.0


def save_image(image, path) -> None:
    """Save as PNG, or PGM/PPM when the suffix is ``.pgm``/``.ppm``."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if not (arr.ndim == 2 or (arr.ndim == 3 and arr.shape[2] == 3)):
        raise InvalidArgumentError(f"cannot save image of shape {arr.shape}")
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pgm", ".pnm") else "PNG"
    with atomic_write(path) as fh:
        Image.fromarray(quantize(arr)).save(fh, format=fmt)
