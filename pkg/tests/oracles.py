"""Independent reference implementations used as test oracles.

Each one is written from the defining formula in the most direct way
available (explicit loops, sliding windows, brute-force enumeration) and
shares no code path with the package beyond the public data types.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import convolve2d


# ---------------------------------------------------------------------------
# geometry

def euler_matrix(pitch, yaw, roll):
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cr, sr = np.cos(roll), np.sin(roll)
    # Rz(roll) Ry(yaw) Rx(pitch), multiplied out by hand
    return np.array([
        [cr * cy, cr * sy * sp - sr * cp, cr * sy * cp + sr * sp],
        [sr * cy, sr * sy * sp + cr * cp, sr * sy * cp - cr * sp],
        [-sy, cy * sp, cy * cp],
    ])


def synthesize_loop(mean, A_id, A_exp, a_id, a_exp):
    out = np.array(mean, dtype=np.float64)
    for k in range(A_id.shape[1]):
        out = out + A_id[:, k] * a_id[k]
    for k in range(A_exp.shape[1]):
        out = out + A_exp[:, k] * a_exp[k]
    return out


def project_explicit(points, f, pitch, yaw, roll, tx, ty):
    R = euler_matrix(pitch, yaw, roll)
    out = np.empty((len(points), 2))
    for i, (x, y, z) in enumerate(points):
        out[i, 0] = f * (R[0, 0] * x + R[0, 1] * y + R[0, 2] * z) + tx
        out[i, 1] = f * (R[1, 0] * x + R[1, 1] * y + R[1, 2] * z) + ty
    return out


def params_projection(basis, vec):
    """Projected vertices for a flattened parameter vector, via the explicit formulas."""
    n_id = basis.n_id
    shape = synthesize_loop(basis.mean_shape, basis.id_basis, basis.exp_basis, vec[6:6 + n_id], vec[6 + n_id:])
    return project_explicit(shape.reshape(-1, 3), *vec[:6])


def central_difference_jacobian(fun, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# texture

def point_in_triangle_bary(p, a, b, c):
    """Barycentric coordinates of p in triangle abc (2D) via the area formula."""
    def area(u, v, w):
        return 0.5 * ((v[0] - u[0]) * (w[1] - u[1]) - (w[0] - u[0]) * (v[1] - u[1]))

    total = area(a, b, c)
    return np.array([area(p, b, c), area(a, p, c), area(a, b, p)]) / total


def raycast_visibility(vertices, triangles, rotation, eps_fraction=1e-4):
    """Per-vertex visibility by casting a ray from each vertex toward the camera (+z).

    A vertex is hidden when a non-incident triangle covers its (x, y) at a
    depth above it by more than ``eps``, or when its area-weighted normal
    faces away.
    """
    rv = vertices @ rotation.T
    depth_range = rv[:, 2].max() - rv[:, 2].min()
    eps = eps_fraction * depth_range
    normals = np.zeros_like(rv)
    for t in triangles:
        n = np.cross(rv[t[1]] - rv[t[0]], rv[t[2]] - rv[t[0]])
        for v in t:
            normals[v] += n
    vis = np.zeros(len(rv), dtype=bool)
    tri_xy = rv[triangles][:, :, :2]
    tri_z = rv[triangles][:, :, 2]
    for i, p in enumerate(rv):
        if normals[i, 2] <= 0:
            continue
        a, b, c = tri_xy[:, 0], tri_xy[:, 1], tri_xy[:, 2]
        d = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
        ok = np.abs(d) > 1e-15
        w0 = ((b[:, 0] - p[0]) * (c[:, 1] - p[1]) - (c[:, 0] - p[0]) * (b[:, 1] - p[1]))
        w1 = ((c[:, 0] - p[0]) * (a[:, 1] - p[1]) - (a[:, 0] - p[0]) * (c[:, 1] - p[1]))
        with np.errstate(divide="ignore", invalid="ignore"):
            w0, w1 = w0 / d, w1 / d
            w2 = 1 - w0 - w1
            z = w0 * tri_z[:, 0] + w1 * tri_z[:, 1] + w2 * tri_z[:, 2]
        inside = ok & (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        inside &= ~np.any(triangles == i, axis=1)
        vis[i] = not np.any(inside & (z > p[2] + eps))
    return vis


def symmetry_fill_two_pass(colors, valid, mirror):
    """Pass 1 copies from valid mirror partners, pass 2 fills the rest with the mean valid color."""
    out = [list(c) for c in colors]
    flags = list(valid)
    orig = list(valid)
    for i in range(len(out)):
        if not orig[i] and orig[mirror[i]]:
            out[i] = list(colors[mirror[i]])
            flags[i] = True
    valid_colors = [colors[i] for i in range(len(colors)) if orig[i]]
    mean = np.mean(valid_colors, axis=0)
    for i in range(len(out)):
        if not flags[i]:
            out[i] = list(mean)
            flags[i] = True
    return np.array(out, dtype=np.float64), np.array(flags)


# ---------------------------------------------------------------------------
# image metrics

def _gauss2d(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    yy, xx = np.meshgrid(r, r, indexing="ij")
    w = np.exp(-(xx ** 2 + yy ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def luma(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    return img


def ssim_components(x, y, data_range=1.0):
    """Luminance and contrast-structure maps from explicit weighted window sums."""
    w = _gauss2d()
    wx = sliding_window_view(x, w.shape)
    wy = sliding_window_view(y, w.shape)
    mx = np.einsum("ijkl,kl->ij", wx, w)
    my = np.einsum("ijkl,kl->ij", wy, w)
    dx = wx - mx[..., None, None]
    dy = wy - my[..., None, None]
    vx = np.einsum("ijkl,kl->ij", dx * dx, w)
    vy = np.einsum("ijkl,kl->ij", dy * dy, w)
    cxy = np.einsum("ijkl,kl->ij", dx * dy, w)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    return (2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1), (2 * cxy + c2) / (vx + vy + c2)


def ssim_reference(a, b):
    lum, cs = ssim_components(luma(a), luma(b))
    return float(np.mean(lum * cs))


def _halve(img):
    h, w = img.shape
    if h % 2:
        img = np.vstack([img, img[-1:]])
    if w % 2:
        img = np.hstack([img, img[:, -1:]])
    h, w = img.shape
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def ms_ssim_reference(a, b):
    weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333]
    x, y = luma(a), luma(b)
    sizes = [min(x.shape)]
    while len(sizes) < 5 and (sizes[-1] + 1) // 2 >= 11:
        sizes.append((sizes[-1] + 1) // 2)
    m = len(sizes)
    w = np.array(weights[:m]) / sum(weights[:m])
    score = 1.0
    for s in range(m):
        lum, cs = ssim_components(x, y)
        term = np.mean(lum * cs) if s == m - 1 else np.mean(cs)
        score *= max(term, 0.0) ** w[s]
        x, y = _halve(x), _halve(y)
    return float(score)


def phase_congruency_reference(img, bank):
    """Noise-compensated phase congruency written scale by scale from the energy formula."""
    n_orient, n_scale, rows, cols = bank.shape
    F = np.fft.fft2(img)
    pc_num = np.zeros((rows, cols))
    pc_den = np.zeros((rows, cols))
    for o in range(n_orient):
        responses = [np.fft.ifft2(F * bank[o, s]) for s in range(n_scale)]
        E = sum(r.real for r in responses)
        O = sum(r.imag for r in responses)
        A_sum = sum(np.abs(r) for r in responses)
        norm = np.hypot(E, O) + 1e-4
        ue, uo = E / norm, O / norm
        energy = np.zeros((rows, cols))
        for r in responses:
            energy += r.real * ue + r.imag * uo - np.abs(r.real * uo - r.imag * ue)
        # Rayleigh noise model fitted to the finest-scale amplitude
        mean_sq = np.median(np.abs(responses[0]) ** 2) / np.log(2.0)
        noise_power = mean_sq / np.sum(bank[o, 0] ** 2)
        taps = [np.real(np.fft.ifft2(bank[o, s])) * np.sqrt(rows * cols) for s in range(n_scale)]
        total = sum(np.sum(t ** 2) for t in taps)
        for i in range(n_scale):
            for j in range(n_scale):
                if i != j:
                    total += np.sum(taps[i] * taps[j])
        tau = np.sqrt(noise_power * total)
        mean_n = tau * np.sqrt(np.pi / 2)
        sigma_n = np.sqrt((4 - np.pi) / 2) * tau
        T = (mean_n + 2.0 * sigma_n) / 1.7
        pc_num += np.clip(energy - T, 0, None)
        pc_den += A_sum
    return np.where(pc_den > 0, pc_num / np.where(pc_den > 0, pc_den, 1), 0.0)


def fsim_reference(a, b, bank):
    """FSIM on images whose short side is at most 383 (no pre-downsampling)."""
    x, y = luma(a), luma(b)
    pc1 = phase_congruency_reference(255 * x, bank)
    pc2 = phase_congruency_reference(255 * y, bank)
    kx = np.array([[3, 0, -3], [10, 0, -10], [3, 0, -3]]) / 16.0
    g1 = np.hypot(convolve2d(x, kx, mode="same"), convolve2d(x, kx.T, mode="same"))
    g2 = np.hypot(convolve2d(y, kx, mode="same"), convolve2d(y, kx.T, mode="same"))
    T1, T2 = 0.85, 160.0 / 255 ** 2
    s = ((2 * pc1 * pc2 + T1) / (pc1 ** 2 + pc2 ** 2 + T1)) * ((2 * g1 * g2 + T2) / (g1 ** 2 + g2 ** 2 + T2))
    pcm = np.maximum(pc1, pc2)
    return float(np.sum(s * pcm) / np.sum(pcm))


# ---------------------------------------------------------------------------
# mesh statistics

def incident_area_mean(vertices, triangles, sampled):
    sampled = set(int(v) for v in sampled)
    areas = []
    for t in triangles:
        if any(int(v) in sampled for v in t):
            a, b, c = (np.asarray(vertices[v], dtype=np.float64) for v in t)
            ab, ac = b - a, c - a
            cross = np.array([ab[1] * ac[2] - ab[2] * ac[1], ab[2] * ac[0] - ab[0] * ac[2], ab[0] * ac[1] - ab[1] * ac[0]])
            areas.append(0.5 * np.sqrt(cross @ cross))
    return float(np.mean(areas))


# ---------------------------------------------------------------------------
# file parsing

def parse_obj(text):
    verts, uvs, faces = [], [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append(tuple(float(p) for p in parts[1:4]))
        elif parts[0] == "vt":
            uvs.append(tuple(float(p) for p in parts[1:3]))
        elif parts[0] == "f":
            faces.append(tuple(int(p.split("/")[0]) - 1 for p in parts[1:]))
    return np.array(verts), np.array(uvs), np.array(faces)


def parse_binary_ply(data):
    """Minimal reader for the PLY layout written by the exporter, via struct."""
    import struct

    head, body = data.split(b"end_header\n", 1)
    lines = head.decode().splitlines()
    n_v = int(next(l for l in lines if l.startswith("element vertex")).split()[-1])
    n_f = int(next(l for l in lines if l.startswith("element face")).split()[-1])
    has_rgb = any("red" in l for l in lines)
    rec = "<fffBBB" if has_rgb else "<fff"
    size = struct.calcsize(rec)
    verts, colors = [], []
    for i in range(n_v):
        vals = struct.unpack_from(rec, body, i * size)
        verts.append(vals[:3])
        if has_rgb:
            colors.append(vals[3:])
    off = n_v * size
    faces = []
    for i in range(n_f):
        n = body[off]
        faces.append(struct.unpack_from("<%di" % n, body, off + 1))
        off += 1 + 4 * n
    return np.array(verts), (np.array(colors) if has_rgb else None), np.array(faces), len(body) - off
