"""Full-reference image quality (SSIM, MS-SSIM, FSIM) and mesh statistics.

Images are float arrays in [0, 1], either ``(H, W)`` or ``(H, W, 3)``. RGB is
reduced to luma with BT.601 weights before any metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from morphface.errors import InvalidArgumentError
from morphface.model import FaceMesh

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

# FSIM: T2 = 160 on the 0-255 scale, rescaled for [0, 1] gradients
FSIM_T1 = 0.85
FSIM_T2 = 160.0 / 255.0 ** 2


def to_luma(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ np.array(LUMA_WEIGHTS)
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    if img.ndim != 2:
        raise InvalidArgumentError(f"expected (H, W) or (H, W, 3) image, got shape {img.shape}")
    return img


def _pair(a, b, min_side=SSIM_WINDOW):
    x, y = to_luma(a), to_luma(b)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"image sizes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < min_side:
        raise InvalidArgumentError(f"images must be at least {min_side}x{min_side}, got {x.shape}")
    return x, y


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian; the 2-D window is its outer product."""
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, win):
    half = len(win) // 2
    out = ndimage.correlate1d(img, win, axis=0, mode="constant")
    out = ndimage.correlate1d(out, win, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def _ssim_terms(x, y, data_range=1.0):
    """Per-pixel (luminance, contrast-structure) maps over valid window positions."""
    win = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return lum, cs


def ssim(a, b, data_range: float = 1.0, return_map: bool = False):
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03.

    Only window positions fully inside the image are scored. With
    ``return_map`` the per-position map is returned as well.
    """
    x, y = _pair(a, b)
    lum, cs = _ssim_terms(x, y, data_range)
    smap = lum * cs
    score = float(smap.mean())
    return (score, smap) if return_map else score


def downsample2(img: np.ndarray) -> np.ndarray:
    """2x2 box low-pass, then keep every second pixel (edge pixels replicated)."""
    padded = np.pad(img, ((0, img.shape[0] % 2), (0, img.shape[1] % 2)), mode="symmetric")
    return 0.25 * (padded[0::2, 0::2] + padded[1::2, 0::2] + padded[0::2, 1::2] + padded[1::2, 1::2])


def ms_ssim_scales(shape) -> int:
    """How many dyadic scales fit with the coarsest side still >= the window size."""
    side = min(shape)
    m = 0
    while m < len(MS_SSIM_WEIGHTS) and side >= SSIM_WINDOW:
        m += 1
        side = (side + 1) // 2
    return m


def ms_ssim(a, b, data_range: float = 1.0, return_details: bool = False):
    """Multi-scale SSIM.

    Contrast-structure terms at every scale, luminance too at the coarsest,
    combined with the canonical 5-scale exponents. Smaller images use fewer
    scales with the leading exponents renormalized to sum to 1. Negative
    terms are clipped to 0 before exponentiation.
    """
    x, y = _pair(a, b)
    n_scales = ms_ssim_scales(x.shape)
    weights = np.array(MS_SSIM_WEIGHTS[:n_scales])
    weights = weights / weights.sum()
    values = []
    for s in range(n_scales):
        lum, cs = _ssim_terms(x, y, data_range)
        if s == n_scales - 1:
            values.append(float(np.mean(lum * cs)))
        else:
            values.append(float(np.mean(cs)))
            x, y = downsample2(x), downsample2(y)
    score = float(np.prod(np.maximum(values, 0.0) ** weights))
    if return_details:
        return score, {"scales": n_scales, "weights": weights.tolist(), "terms": values}
    return score


# ---------------------------------------------------------------------------
# phase congruency

PC_SCALES = 4
PC_ORIENTATIONS = 4
PC_MIN_WAVELENGTH = 6
PC_MULT = 2.0
PC_SIGMA_ON_F = 0.55
PC_D_THETA_ON_SIGMA = 1.2
PC_K = 2.0
PC_EPSILON = 1e-4


def _freq_grid(rows, cols):
    def axis(n):
        if n % 2:
            return np.arange(-(n - 1) / 2, (n - 1) / 2 + 1) / (n - 1)
        return np.arange(-n / 2, n / 2) / n

    x, y = np.meshgrid(axis(cols), axis(rows))
    return x, y


def lowpass_filter(rows, cols, cutoff=0.45, order=15):
    """Butterworth low-pass in the (unshifted) FFT layout."""
    x, y = _freq_grid(rows, cols)
    radius = np.sqrt(x ** 2 + y ** 2)
    return np.fft.ifftshift(1.0 / (1.0 + (radius / cutoff) ** (2 * order)))


def log_gabor_bank(rows: int, cols: int):
    """Frequency-domain log-Gabor filters, shape ``(orientations, scales, rows, cols)``.

    4 scales (wavelengths 6, 12, 24, 48) by 4 orientations, Gaussian angular
    spread with ``dtheta / sigma = 1.2``.
    """
    x, y = _freq_grid(rows, cols)
    radius = np.fft.ifftshift(np.sqrt(x ** 2 + y ** 2))
    theta = np.fft.ifftshift(np.arctan2(-y, x))
    radius[0, 0] = 1.0
    lp = lowpass_filter(rows, cols)
    radial = []
    for s in range(PC_SCALES):
        fo = 1.0 / (PC_MIN_WAVELENGTH * PC_MULT ** s)
        g = np.exp(-(np.log(radius / fo)) ** 2 / (2 * np.log(PC_SIGMA_ON_F) ** 2)) * lp
        g[0, 0] = 0.0
        radial.append(g)
    theta_sigma = np.pi / PC_ORIENTATIONS / PC_D_THETA_ON_SIGMA
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    bank = np.empty((PC_ORIENTATIONS, PC_SCALES, rows, cols))
    for o in range(PC_ORIENTATIONS):
        ang = o * np.pi / PC_ORIENTATIONS
        ds = sin_t * np.cos(ang) - cos_t * np.sin(ang)
        dc = cos_t * np.cos(ang) + sin_t * np.sin(ang)
        spread = np.exp(-np.arctan2(ds, dc) ** 2 / (2 * theta_sigma ** 2))
        for s in range(PC_SCALES):
            bank[o, s] = radial[s] * spread
    return bank


def phase_congruency(image: np.ndarray, bank=None) -> np.ndarray:
    """Kovesi-style phase congruency summed over orientations, with noise compensation."""
    img = np.asarray(image, dtype=np.float64)
    rows, cols = img.shape
    if bank is None:
        bank = log_gabor_bank(rows, cols)
    spectrum = np.fft.fft2(img)
    energy_all = np.zeros((rows, cols))
    an_all = np.zeros((rows, cols))
    spatial = np.real(np.fft.ifft2(bank, axes=(-2, -1))) * np.sqrt(rows * cols)
    for o in range(bank.shape[0]):
        eo = np.fft.ifft2(spectrum[None] * bank[o], axes=(-2, -1))
        even, odd = eo.real, eo.imag
        amp = np.abs(eo)
        sum_e, sum_o = even.sum(axis=0), odd.sum(axis=0)
        x_energy = np.sqrt(sum_e ** 2 + sum_o ** 2) + PC_EPSILON
        mean_e, mean_o = sum_e / x_energy, sum_o / x_energy
        energy = np.sum(even * mean_e + odd * mean_o - np.abs(even * mean_o - odd * mean_e), axis=0)

        # noise estimate from the smallest scale
        em_n = np.sum(bank[o, 0] ** 2)
        mean_e2n = -np.median(amp[0] ** 2) / np.log(0.5)
        noise_power = mean_e2n / em_n
        filt = spatial[o]
        sum_an2 = np.sum(filt ** 2)
        sum_aiaj = 0.0
        for si in range(bank.shape[1] - 1):
            for sj in range(si + 1, bank.shape[1]):
                sum_aiaj += np.sum(filt[si] * filt[sj])
        noise_energy2 = 2 * noise_power * sum_an2 + 4 * noise_power * sum_aiaj
        tau = np.sqrt(noise_energy2 / 2)
        threshold = (tau * np.sqrt(np.pi / 2) + PC_K * np.sqrt((2 - np.pi / 2) * tau ** 2)) / 1.7
        energy_all += np.maximum(energy - threshold, 0.0)
        an_all += amp.sum(axis=0)
    return np.divide(energy_all, an_all, out=np.zeros_like(energy_all), where=an_all > 0)


SCHARR_X = np.array([[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]]) / 16.0
SCHARR_Y = SCHARR_X.T


def gradient_magnitude(image: np.ndarray) -> np.ndarray:
    """Scharr gradient magnitude, zero padding, same size as input."""
    # convolution (kernel flipped), matching conv2(..., 'same')
    gx = ndimage.convolve(image, SCHARR_X, mode="constant")
    gy = ndimage.convolve(image, SCHARR_Y, mode="constant")
    return np.sqrt(gx ** 2 + gy ** 2)


def fsim_prepare(image: np.ndarray) -> np.ndarray:
    """Box-average and subsample by ``F = max(1, round(min(H, W) / 256))``."""
    rows, cols = image.shape
    f = max(1, int(np.floor(min(rows, cols) / 256.0 + 0.5)))
    if f == 1:
        return image
    kernel = np.full((f, f), 1.0 / (f * f))
    avg = ndimage.convolve(image, kernel, mode="constant")
    return avg[::f, ::f]


def fsim(a, b, return_details: bool = False):
    """Feature similarity: phase congruency and gradient similarity, weighted by max PC.

    Phase congruency is computed on the 0-255 scale like the reference
    implementation; gradients stay in [0, 1] with ``T2`` rescaled.
    """
    x, y = _pair(a, b, min_side=3)
    x, y = fsim_prepare(x), fsim_prepare(y)
    bank = log_gabor_bank(*x.shape)
    pc1 = phase_congruency(255.0 * x, bank)
    pc2 = phase_congruency(255.0 * y, bank)
    g1, g2 = gradient_magnitude(x), gradient_magnitude(y)
    s_pc = (2 * pc1 * pc2 + FSIM_T1) / (pc1 ** 2 + pc2 ** 2 + FSIM_T1)
    s_g = (2 * g1 * g2 + FSIM_T2) / (g1 ** 2 + g2 ** 2 + FSIM_T2)
    pcm = np.maximum(pc1, pc2)
    total = pcm.sum()
    if total > 0:
        score = float(np.sum(s_pc * s_g * pcm) / total)
    else:
        score = float(np.mean(s_pc * s_g))
    if return_details:
        return score, {"pc": (pc1, pc2), "gradient": (g1, g2)}
    return score


@dataclass
class MetricReport:
    ssim: float
    ms_ssim: float
    fsim: float
    parameters: dict = field(default_factory=dict)


def metric_report(a, b) -> MetricReport:
    ms, details = ms_ssim(a, b, return_details=True)
    return MetricReport(
        ssim=ssim(a, b),
        ms_ssim=ms,
        fsim=fsim(a, b),
        parameters={
            "ssim": {"window": SSIM_WINDOW, "sigma": SSIM_SIGMA, "K1": SSIM_K1, "K2": SSIM_K2, "data_range": 1.0},
            "ms_ssim": {"scales": details["scales"], "weights": details["weights"], "downsample": "2x2 box"},
            "fsim": {
                "scales": PC_SCALES, "orientations": PC_ORIENTATIONS, "min_wavelength": PC_MIN_WAVELENGTH,
                "mult": PC_MULT, "sigma_on_f": PC_SIGMA_ON_F, "T1": FSIM_T1, "T2": FSIM_T2,
                "gradient": "Scharr",
            },
            "luma": "BT.601",
        },
    )


# ---------------------------------------------------------------------------
# mesh

@dataclass(frozen=True)
class MeshStats:
    triangle_count: int
    avg_triangle_area: float
    sample_seed: int
    sampled_vertex_count: int = 50


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v0, v1, v2 = (vertices[triangles[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)


def mesh_stats(mesh: FaceMesh, sample_count: int = 50, seed: int = 0) -> MeshStats:
    """Triangle count plus mean area of triangles touching ``sample_count`` random vertices.

    Vertices are drawn without replacement from ``numpy.random.default_rng(seed)``.
    """
    if len(mesh.triangles) == 0:
        raise InvalidArgumentError("mesh has no triangles")
    if sample_count < 1:
        raise InvalidArgumentError(f"sample_count must be >= 1, got {sample_count}")
    if sample_count > mesh.vertex_count:
        raise InvalidArgumentError(
            f"sample_count {sample_count} exceeds vertex count {mesh.vertex_count}"
        )
    picked = np.random.default_rng(seed).choice(mesh.vertex_count, size=sample_count, replace=False)
    hit = np.zeros(mesh.vertex_count, dtype=bool)
    hit[picked] = True
    incident = hit[mesh.triangles].any(axis=1)
    areas = triangle_areas(mesh.vertices, mesh.triangles[incident])
    avg = float(areas.mean()) if areas.size else float("nan")
    return MeshStats(len(mesh.triangles), avg, seed, sample_count)
