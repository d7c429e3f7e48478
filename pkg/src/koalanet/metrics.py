"""Image and kernel quality metrics.

PSNR/SSIM are computed on the luma channel of 8-bit RGB images using the
studio-range BT.601 conversion common in SR evaluation::

    Y = 16 + 65.481 R + 128.553 G + 24.966 B,   R, G, B in [0, 1]

with ``border`` pixels cropped from every side first.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .degrade import KERNEL_SIZE

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 255.0
DEFAULT_MAX_SHIFT = 5


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) RGB -> float64 luma in [16, 235]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    rgb = img.astype(np.float64) / 255.0
    return 16.0 + rgb @ np.array([65.481, 128.553, 24.966])


def _crop(y: np.ndarray, border: int) -> np.ndarray:
    if border < 0:
        raise ValueError("border must be >= 0")
    if border == 0:
        return y
    if 2 * border >= min(y.shape[:2]):
        raise ValueError(f"border {border} leaves nothing of a {y.shape[:2]} image")
    return y[border:-border, border:-border]


def _luma_pair(a, b, border):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    return _crop(rgb_to_y(a), border), _crop(rgb_to_y(b), border)


def psnr(x: np.ndarray, y: np.ndarray, data_range: float = DATA_RANGE) -> float:
    """PSNR of two float arrays; ``inf`` when they are equal."""
    mse = np.mean((np.asarray(x, np.float64) - np.asarray(y, np.float64)) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(data_range ** 2 / mse))


def psnr_y(a: np.ndarray, b: np.ndarray, border: int = 0) -> float:
    """Luma PSNR in dB; ``inf`` for identical images."""
    return psnr(*_luma_pair(a, b, border))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation keeping only windows fully inside the image
    rows = sliding_window_view(img, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def ssim_y(a: np.ndarray, b: np.ndarray, border: int = 0) -> float:
    ya, yb = _luma_pair(a, b, border)
    if min(ya.shape) < SSIM_WINDOW:
        raise ValueError(f"image {ya.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    mu_a = _filter_valid(ya, g)
    mu_b = _filter_valid(yb, g)
    var_a = _filter_valid(ya * ya, g) - mu_a ** 2
    var_b = _filter_valid(yb * yb, g) - mu_b ** 2
    cov = _filter_valid(ya * yb, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _shifted(k: np.ndarray, dh: int, dw: int) -> np.ndarray:
    """out[h, w] = k[h + dh, w + dw], zero outside the grid."""
    H, W = k.shape
    out = np.zeros_like(k)
    h0, h1 = max(0, -dh), min(H, H - dh)
    w0, w1 = max(0, -dw), min(W, W - dw)
    if h0 < h1 and w0 < w1:
        out[h0:h1, w0:w1] = k[h0 + dh:h1 + dh, w0 + dw:w1 + dw]
    return out


def kernel_l2_shifted(k_est: np.ndarray, k_gt: np.ndarray,
                      max_shift: int = DEFAULT_MAX_SHIFT) -> float:
    """min over integer shifts |dh|, |dw| <= max_shift of sum (k_gt - shift(k_est))^2."""
    k_est = np.asarray(k_est, dtype=np.float64)
    k_gt = np.asarray(k_gt, dtype=np.float64)
    if k_est.shape != k_gt.shape or k_est.ndim != 2:
        raise ValueError(f"kernel grids differ: {k_est.shape} vs {k_gt.shape}")
    best = math.inf
    for dh in range(-max_shift, max_shift + 1):
        for dw in range(-max_shift, max_shift + 1):
            best = min(best, float(np.sum((k_gt - _shifted(k_est, dh, dw)) ** 2)))
    return best


def _field3(F_d) -> np.ndarray:
    F = np.asarray(getattr(F_d, "data", F_d))
    if F.ndim == 4:
        if F.shape[0] != 1:
            raise ValueError("pass one kernel field at a time")
        F = F[0]
    if F.ndim != 3 or F.shape[0] != KERNEL_SIZE * KERNEL_SIZE:
        raise ValueError(f"expected a (400, H, W) kernel field, got {F.shape}")
    return F


def mean_kernel(F_d) -> np.ndarray:
    """Spatial mean of a (400, H, W) or (1, 400, H, W) field as a 20x20 kernel."""
    F = _field3(F_d).astype(np.float64)
    return F.mean(axis=(1, 2)).reshape(KERNEL_SIZE, KERNEL_SIZE)


def cosine_similarity_map(F_d, k_gt: np.ndarray) -> np.ndarray:
    """Per-pixel cosine between the predicted 400-vector and flattened k_gt.

    Pixels where either vector has zero norm get 0.
    """
    F = _field3(F_d).astype(np.float64)
    g = np.asarray(k_gt, dtype=np.float64).reshape(-1)
    if g.size != F.shape[0]:
        raise ValueError(f"ground-truth kernel has {g.size} taps, field has {F.shape[0]}")
    dots = np.tensordot(g, F, axes=(0, 0))
    norms = np.linalg.norm(F, axis=0) * np.linalg.norm(g)
    out = np.zeros_like(dots)
    ok = norms > 0
    out[ok] = dots[ok] / norms[ok]
    return np.clip(out, -1.0, 1.0)


def render_similarity_map(sim: np.ndarray) -> np.ndarray:
    """Linear gray ramp: -1 -> black, 0 -> mid gray (128), +1 -> white."""
    sim = np.clip(np.asarray(sim, dtype=np.float64), -1.0, 1.0)
    return np.round((sim + 1.0) * 127.5).astype(np.uint8)


def render_kernel(k: np.ndarray, zoom: int = 8) -> np.ndarray:
    """Min-max scaled grayscale picture of a kernel, nearest-zoomed."""
    k = np.asarray(k, dtype=np.float64)
    lo, hi = k.min(), k.max()
    scaled = np.zeros_like(k) if hi == lo else (k - lo) / (hi - lo)
    img = np.round(scaled * 255).astype(np.uint8)
    return np.kron(img, np.ones((zoom, zoom), dtype=np.uint8))


def bicubic_upsample(img: np.ndarray, s: int) -> np.ndarray:
    """Plain bicubic s-times enlargement of an 8-bit RGB image."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    out = Image.fromarray(img).resize((w * s, h * s), Image.Resampling.BICUBIC)
    return np.asarray(out, dtype=np.uint8)


# headline numbers from the paper-scale runs; shown for context only
_REFERENCE = {
    ("KOALAnet", "x4", "DIV2K-val", "psnr"): 29.44,
    ("KOALAnet", "x4", "DIV2K-val", "ssim"): 0.8156,
    ("KOALAnet", "x2", "DIV2KRK", "psnr"): 31.89,
    ("KOALAnet", "x2", "DIV2KRK", "ssim"): 0.8852,
    ("KOALAnet", "x4", "DIV2K-val", "kernel_l2"): 0.0010,
    ("KOALAnet", "x4", "DIV2KRK", "kernel_l2"): 0.0044,
    ("Baseline", "x4", "DIV2K-val", "psnr"): 29.20,
}
REFERENCE_LABEL = "paper-scale reference, not reproduced here"


def reference_numbers() -> dict:
    return dict(_REFERENCE)


def format_reference() -> str:
    lines = [f"# {REFERENCE_LABEL}"]
    for (model, scale, data, metric), v in _REFERENCE.items():
        lines.append(f"{model:9s} {scale:3s} {data:10s} {metric:10s} {v}")
    return "\n".join(lines)


@dataclass
class MetricRow:
    name: str
    psnr: float
    ssim: float
    kernel_l2: Optional[float] = None
    runtime: float = 0.0


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    def add(self, row: MetricRow) -> None:
        self.rows.append(row)

    @property
    def has_kernels(self) -> bool:
        return any(r.kernel_l2 is not None for r in self.rows)

    def aggregate(self) -> MetricRow:
        if not self.rows:
            raise ValueError("empty report")

        def avg(vals):
            return float(np.mean(vals))

        kl = None
        if self.has_kernels:
            kl = avg([r.kernel_l2 for r in self.rows])
        return MetricRow("mean", avg([r.psnr for r in self.rows]), avg([r.ssim for r in self.rows]),
                         kl, avg([r.runtime for r in self.rows]))

    def write_csv(self, path) -> None:
        header = ["name", "psnr_y", "ssim_y"]
        if self.has_kernels:
            header.append("kernel_l2")
        header.append("runtime_s")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in self.rows + [self.aggregate()]:
                vals = [r.name, _fmt(r.psnr), _fmt(r.ssim)]
                if self.has_kernels:
                    vals.append(_fmt(r.kernel_l2))
                vals.append(f"{r.runtime:.4f}")
                w.writerow(vals)


def _fmt(v) -> str:
    if v is None:
        return ""
    if math.isinf(v):
        return "inf"
    return f"{v:.6f}"


def read_report(path) -> list[dict]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
