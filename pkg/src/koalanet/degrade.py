"""Random anisotropic degradation kernels and LR synthesis.

An LR image is produced as ``X = (Y * k_d) strided by s`` where
``k_d = k_g * k_b`` combines a rotated bivariate Gaussian ``k_g`` (15x15)
with the 4x4 cubic-convolution downscaling kernel ``k_b``, embedded in a
20x20 grid.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor

log = logging.getLogger(__name__)

KERNEL_SIZE = 20
GAUSSIAN_SIZE = 15
SIGMA_RANGE = (0.2, 4.0)
THETA_RANGE = (0.0, math.pi / 2)
SUPPORTED_SCALES = (2, 4)
CUBIC_A = -0.5
# top-left of the 4x4 bicubic block in the 20x20 grid: centroid (9.5, 9.5)
_BICUBIC_OFFSET = KERNEL_SIZE // 2 - 2


class InvalidSpecError(ValueError):
    pass


@dataclass(frozen=True)
class DegradationSpec:
    sigma1: float
    sigma2: float
    theta: float
    seed: int = 0

    def validate(self) -> None:
        lo, hi = SIGMA_RANGE
        for name, v in (("sigma1", self.sigma1), ("sigma2", self.sigma2)):
            if not lo <= v <= hi:
                raise InvalidSpecError(f"{name}={v} outside [{lo}, {hi}]")
        if not THETA_RANGE[0] <= self.theta <= THETA_RANGE[1]:
            raise InvalidSpecError(f"theta={self.theta} outside [0, pi/2]")


@dataclass
class Kernel2D:
    values: np.ndarray
    provenance: str = "external"  # gaussian-bicubic | bicubic-only | external

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def centroid(self) -> tuple[float, float]:
        v = self.values
        total = v.sum()
        rows = np.arange(v.shape[0])[:, None]
        cols = np.arange(v.shape[1])[None, :]
        return float((v * rows).sum() / total), float((v * cols).sum() / total)


def _as_kernel_array(k) -> np.ndarray:
    return k.values if isinstance(k, Kernel2D) else np.asarray(k, dtype=np.float64)


def make_gaussian_kernel(spec: DegradationSpec, size: int = GAUSSIAN_SIZE) -> np.ndarray:
    """Rotated bivariate Gaussian sampled at integer offsets, unit sum.

    ``sigma1``/``sigma2`` are standard deviations along the principal axes,
    so the covariance is ``R(theta) diag(sigma1^2, sigma2^2) R(theta)^T``.
    """
    if size % 2 == 0:
        raise ValueError("Gaussian kernel size must be odd")
    if spec.sigma1 <= 0 or spec.sigma2 <= 0:
        raise InvalidSpecError("sigma must be positive")
    c, s = math.cos(spec.theta), math.sin(spec.theta)
    rot = np.array([[c, -s], [s, c]])
    cov = rot @ np.diag([spec.sigma1 ** 2, spec.sigma2 ** 2]) @ rot.T
    inv = np.linalg.inv(cov)
    r = np.arange(size) - size // 2
    # d = (x, y): x along columns, y along rows
    xx, yy = np.meshgrid(r, r)
    q = inv[0, 0] * xx * xx + 2 * inv[0, 1] * xx * yy + inv[1, 1] * yy * yy
    k = np.exp(-0.5 * q)
    return k / k.sum()


def cubic_weight(x: float, a: float = CUBIC_A) -> float:
    """Keys cubic convolution kernel."""
    x = abs(x)
    if x <= 1:
        return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
    if x < 2:
        return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
    return 0.0


def make_bicubic_kernel(s: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (1-D taps, 4x4 kernel) for center-aligned s-fold downscaling.

    Without anti-aliasing the kernel is not stretched by ``s``; an output
    sample sits halfway between two input pixels for even ``s``, so the taps
    are evaluated at distances 1.5, 0.5, 0.5, 1.5.
    """
    if s not in SUPPORTED_SCALES:
        raise InvalidSpecError(f"unsupported scale {s}")
    taps = np.array([cubic_weight(d) for d in (1.5, 0.5, 0.5, 1.5)])
    return taps, np.outer(taps, taps)


def pad_bicubic(kb: np.ndarray) -> Kernel2D:
    """Embed a 4x4 kernel in the 20x20 grid with centroid (9.5, 9.5)."""
    out = np.zeros((KERNEL_SIZE, KERNEL_SIZE))
    o = _BICUBIC_OFFSET
    out[o:o + 4, o:o + 4] = kb
    return Kernel2D(out, "bicubic-only")


def compose_kd(kg: np.ndarray, kb: np.ndarray) -> Kernel2D:
    """Full 2-D convolution of ``kg`` (15x15) and ``kb`` (4x4) in a 20x20 grid."""
    kg = _as_kernel_array(kg)
    kb = _as_kernel_array(kb)
    fh, fw = kg.shape[0] + kb.shape[0] - 1, kg.shape[1] + kb.shape[1] - 1
    full = np.zeros((fh, fw))
    for i in range(kb.shape[0]):
        for j in range(kb.shape[1]):
            full[i:i + kg.shape[0], j:j + kg.shape[1]] += kb[i, j] * kg
    # a delta Gaussian must reproduce pad_bicubic exactly
    oh = _BICUBIC_OFFSET - kg.shape[0] // 2
    ow = _BICUBIC_OFFSET - kg.shape[1] // 2
    if oh < 0 or ow < 0 or oh + fh > KERNEL_SIZE or ow + fw > KERNEL_SIZE:
        raise ValueError(f"composed kernel {full.shape} does not fit the 20x20 grid")
    out = np.zeros((KERNEL_SIZE, KERNEL_SIZE))
    out[oh:oh + fh, ow:ow + fw] = full
    return Kernel2D(out, "gaussian-bicubic")


def build_kd(spec: DegradationSpec, s: int) -> Kernel2D:
    _, kb = make_bicubic_kernel(s)
    return compose_kd(make_gaussian_kernel(spec), kb)


def sample_spec(seed: int) -> DegradationSpec:
    rng = np.random.default_rng(seed)
    s1, s2 = rng.uniform(*SIGMA_RANGE, size=2)
    theta = rng.uniform(*THETA_RANGE)
    return DegradationSpec(float(s1), float(s2), float(theta), int(seed))


def degrade_image(Y, kd, s: int, padding: str = "replicate") -> np.ndarray:
    """Stride-``s`` correlation of every channel of ``Y`` with ``kd``.

    ``Y`` is any array (or Tensor) shaped (..., H, W) with H, W divisible by
    ``s``. Output pixel ``i`` reads input rows from
    ``s*i - (k - s)//2``, matching the local-filter geometry.
    """
    arr = Y.data if isinstance(Y, Tensor) else np.asarray(Y)
    k = _as_kernel_array(kd)
    H, W = arr.shape[-2:]
    if s < 1 or H % s or W % s:
        raise ValueError(f"image size {(H, W)} not divisible by scale {s}")
    kh, kw = k.shape
    ph = (kh - s) // 2, kh - s - (kh - s) // 2
    pw = (kw - s) // 2, kw - s - (kw - s) // 2
    lead = arr.shape[:-2]
    flat = arr.reshape((-1, H, W)).astype(np.float64)
    if padding == "replicate":
        xp = np.pad(flat, ((0, 0), ph, pw), mode="edge")
    elif padding == "zero":
        xp = np.pad(flat, ((0, 0), ph, pw))
    else:
        raise ValueError(f"unknown padding mode {padding!r}")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    out = np.tensordot(win, k, axes=([3, 4], [0, 1]))
    return out.reshape(lead + out.shape[1:])


def crop_to_multiple(img: np.ndarray, s: int) -> np.ndarray:
    """Crop an (H, W, C) image so H and W are multiples of ``s``."""
    H, W = img.shape[:2]
    return img[: H - H % s, : W - W % s]


# ---------------------------------------------------------------------------
# dataset generation


def _degrade_one(job) -> tuple[str, np.ndarray]:
    from .imageio import read_png

    path, kd, s, padding = job
    hr = crop_to_multiple(read_png(path), s).astype(np.float64)
    lr = degrade_image(hr.transpose(2, 0, 1), kd, s, padding).transpose(1, 2, 0)
    return path.name, np.clip(np.round(lr), 0, 255).astype(np.uint8)


def generate_dataset(hr_dir, out_dir, s: int, base_seed: int, *, force: bool = False,
                     fixed: Optional[DegradationSpec] = None, padding: str = "replicate",
                     workers: int = 1) -> list[dict]:
    """Degrade every PNG in ``hr_dir``; write LR images, kernels and a manifest.

    Image ``i`` (sorted by name) uses seed ``base_seed + i``. With ``fixed``
    every image gets that spec instead (its seed is still recorded per image).
    """
    from .formats import save_kernel
    from .imageio import write_png

    make_bicubic_kernel(s)
    hr_dir, out_dir = Path(hr_dir), Path(out_dir)
    if fixed is not None:
        fixed.validate()
    files = sorted(hr_dir.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG images in {hr_dir}")
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise FileExistsError(f"{out_dir} is not empty (use force)")
    (out_dir / "lr").mkdir(parents=True, exist_ok=True)
    (out_dir / "kernels").mkdir(exist_ok=True)

    specs, jobs = [], []
    for i, path in enumerate(files):
        seed = base_seed + i
        spec = sample_spec(seed) if fixed is None else DegradationSpec(
            fixed.sigma1, fixed.sigma2, fixed.theta, seed)
        kd = build_kd(spec, s)
        specs.append((spec, kd))
        jobs.append((path, kd, s, padding))

    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_degrade_one, jobs))
    else:
        results = [_degrade_one(j) for j in jobs]

    rows = []
    for (name, lr), (spec, kd) in zip(results, specs):
        write_png(out_dir / "lr" / name, lr)
        kpath = Path("kernels") / (Path(name).stem + ".kernel")
        save_kernel(out_dir / kpath, kd.values)
        rows.append({"filename": name, "sigma1": repr(spec.sigma1), "sigma2": repr(spec.sigma2),
                     "theta": repr(spec.theta), "seed": spec.seed, "kernel_path": kpath.as_posix()})
        log.info("degraded %s with seed %d", name, spec.seed)

    with open(out_dir / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows
