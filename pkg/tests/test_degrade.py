import csv
import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from koalanet import ops
from koalanet.degrade import (KERNEL_SIZE, DegradationSpec, InvalidSpecError, build_kd, compose_kd,
                              crop_to_multiple, degrade_image, generate_dataset, make_bicubic_kernel,
                              make_gaussian_kernel, pad_bicubic, sample_spec)
from koalanet.formats import load_kernel
from koalanet.imageio import write_png
from koalanet.tensor import Tensor


def keys_cubic(x, a=-0.5):
    # written out independently of the library helper
    x = abs(x)
    if x <= 1:
        return 1 - (a + 3) * x ** 2 + (a + 2) * x ** 3
    if x < 2:
        return -4 * a + 8 * a * x - 5 * a * x ** 2 + a * x ** 3
    return 0.0


def gaussian_oracle(s1, s2, theta, size=15):
    """Evaluate the density by projecting each offset onto the rotated axes."""
    c = size // 2
    out = np.zeros((size, size))
    for row in range(size):
        for col in range(size):
            x, y = col - c, row - c
            u = x * math.cos(theta) + y * math.sin(theta)
            v = -x * math.sin(theta) + y * math.cos(theta)
            out[row, col] = math.exp(-0.5 * (u * u / s1 ** 2 + v * v / s2 ** 2))
    return out / out.sum()


# ---------------------------------------------------------------------------
# Gaussian


def test_gaussian_isotropic_is_rotation_invariant():
    a = make_gaussian_kernel(DegradationSpec(1.7, 1.7, 0.0))
    b = make_gaussian_kernel(DegradationSpec(1.7, 1.7, math.pi / 4))
    assert np.abs(a - b).max() < 1e-9


def test_gaussian_narrow_is_delta():
    k = make_gaussian_kernel(DegradationSpec(0.2, 0.2, 0.3))
    assert k[7, 7] > 0.99


def test_gaussian_axis_aligned_is_separable():
    k = make_gaussian_kernel(DegradationSpec(0.8, 3.1, 0.0))
    outer = np.outer(k.sum(axis=1), k.sum(axis=0))
    assert np.abs(k - outer).max() < 1e-9


@pytest.mark.parametrize("s1,s2,theta", [(0.5, 2.0, 0.3), (3.9, 0.7, 1.2), (2.2, 2.9, math.pi / 2)])
def test_gaussian_matches_direct_formula(s1, s2, theta):
    k = make_gaussian_kernel(DegradationSpec(s1, s2, theta))
    assert np.abs(k - gaussian_oracle(s1, s2, theta)).max() < 1e-12


def test_gaussian_rejects_bad_input():
    with pytest.raises(InvalidSpecError):
        make_gaussian_kernel(DegradationSpec(0.0, 1.0, 0.0))
    with pytest.raises(ValueError):
        make_gaussian_kernel(DegradationSpec(1.0, 1.0, 0.0), size=14)


@given(st.floats(0.2, 4.0), st.lists(st.floats(0, math.pi / 2), min_size=2, max_size=6))
@settings(max_examples=30, deadline=None)
def test_isotropic_theta_grid(sigma, thetas):
    ks = [make_gaussian_kernel(DegradationSpec(sigma, sigma, t)) for t in thetas]
    for k in ks[1:]:
        assert np.abs(k - ks[0]).max() < 1e-9


@given(st.integers(0, 2 ** 32))
@settings(max_examples=40, deadline=None)
def test_random_kernels_nonnegative_unit_sum(seed):
    spec = sample_spec(seed)
    assert (make_gaussian_kernel(spec) >= 0).all()
    kd = build_kd(spec, 4)
    assert kd.values.shape == (KERNEL_SIZE, KERNEL_SIZE)
    assert abs(kd.values.sum() - 1) < 1e-6


# ---------------------------------------------------------------------------
# bicubic


@pytest.mark.parametrize("s", [2, 4])
def test_bicubic_taps(s):
    taps, k2 = make_bicubic_kernel(s)
    expected = [keys_cubic(d) for d in (1.5, 0.5, 0.5, 1.5)]
    assert np.abs(taps - expected).max() < 1e-15
    assert np.abs(taps - [-0.0625, 0.5625, 0.5625, -0.0625]).max() < 1e-15
    np.testing.assert_array_equal(k2, np.outer(taps, taps))
    assert k2.sum() == 1.0


def test_bicubic_rejects_other_scales():
    with pytest.raises(ValueError):
        make_bicubic_kernel(3)


def test_padded_bicubic_centroid():
    k = pad_bicubic(make_bicubic_kernel(4)[1])
    assert k.centroid() == pytest.approx((9.5, 9.5), abs=1e-12)
    assert k.provenance == "bicubic-only"


# ---------------------------------------------------------------------------
# composition


def test_compose_with_delta_is_padded_bicubic():
    delta = np.zeros((15, 15))
    delta[7, 7] = 1
    kb = make_bicubic_kernel(4)[1]
    np.testing.assert_array_equal(compose_kd(delta, kb).values, pad_bicubic(kb).values)


@pytest.mark.parametrize("seed", range(5))
def test_compose_sums_to_one(seed):
    kd = build_kd(sample_spec(seed), 2)
    assert abs(kd.values.sum() - 1) < 1e-6
    assert kd.provenance == "gaussian-bicubic"


@pytest.mark.parametrize("s", [2, 4])
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_compose_equals_sequential_filtering(rng, s, seed):
    spec = sample_spec(seed)
    kg = make_gaussian_kernel(spec)
    kb = make_bicubic_kernel(s)[1]
    Y = rng.uniform(0, 1, (3, 96, 96))
    once = degrade_image(Y, compose_kd(kg, kb), s, "zero")
    Z = np.stack([ndimage.correlate(c, kg, mode="constant") for c in Y])
    twice = degrade_image(Z, pad_bicubic(kb), s, "zero")
    m = 24 // s  # stay clear of the zero-padded border
    assert np.abs(once[:, m:-m, m:-m] - twice[:, m:-m, m:-m]).max() < 1e-5


# ---------------------------------------------------------------------------
# degradation


def test_delta_identity_at_unit_stride(rng):
    Y = rng.uniform(-1, 1, (3, 16, 16))
    k = np.zeros((KERNEL_SIZE, KERNEL_SIZE))
    k[9, 9] = 1
    np.testing.assert_array_equal(degrade_image(Y, k, 1), Y)


def bicubic_resample_oracle(Y, s):
    """Center-aligned s-fold bicubic decimation, edge-clamped, loop form."""
    C, H, W = Y.shape
    out = np.zeros((C, H // s, W // s))
    for i in range(H // s):
        ci = s * i + (s - 1) / 2
        rows = [(r, keys_cubic(ci - r)) for r in range(math.floor(ci) - 1, math.floor(ci) + 3)]
        for j in range(W // s):
            cj = s * j + (s - 1) / 2
            cols = [(q, keys_cubic(cj - q)) for q in range(math.floor(cj) - 1, math.floor(cj) + 3)]
            acc = np.zeros(C)
            for r, wr in rows:
                for q, wq in cols:
                    acc += wr * wq * Y[:, min(max(r, 0), H - 1), min(max(q, 0), W - 1)]
            out[:, i, j] = acc
    return out


@pytest.mark.parametrize("s", [2, 4])
def test_bicubic_only_matches_resample(rng, s):
    Y = rng.uniform(0, 255, (3, 32, 24))
    X = degrade_image(Y, pad_bicubic(make_bicubic_kernel(s)[1]), s, "replicate")
    assert np.abs(X - bicubic_resample_oracle(Y, s)).max() < 1e-5 * 255


@pytest.mark.parametrize("case", range(4))
@pytest.mark.parametrize("padding", ["replicate", "zero"])
def test_degrade_equals_constant_local_filter(rng, case, padding):
    s = (2, 4)[case % 2]
    kd = build_kd(sample_spec(100 + case), s).values
    Y = rng.uniform(-1, 1, (2, 3, 8 * s, 8 * s))
    X = degrade_image(Y, kd, s, padding)
    field = np.broadcast_to(kd.reshape(1, -1, 1, 1), (2, 400, 8, 8)).copy()
    Xf = ops.local_filter(Tensor(Y), Tensor(field), KERNEL_SIZE, s, padding).data
    assert np.abs(X - Xf).max() < 1e-6


def test_degrade_rejects_indivisible(rng):
    with pytest.raises(ValueError):
        degrade_image(rng.uniform(size=(3, 10, 12)), build_kd(sample_spec(0), 4), 4)


def test_degrade_padding_modes_differ_only_near_border(rng):
    Y = rng.uniform(size=(3, 64, 64))
    kd = build_kd(sample_spec(9), 4)
    a = degrade_image(Y, kd, 4, "replicate")
    b = degrade_image(Y, kd, 4, "zero")
    assert np.abs(a[:, 3:-3, 3:-3] - b[:, 3:-3, 3:-3]).max() < 1e-12
    assert np.abs(a - b).max() > 1e-3
    with pytest.raises(ValueError):
        degrade_image(Y, kd, 4, "reflect")


def test_crop_to_multiple():
    img = np.zeros((13, 10, 3))
    assert crop_to_multiple(img, 4).shape == (12, 8, 3)


# ---------------------------------------------------------------------------
# specs


def test_sample_spec_reproducible():
    assert sample_spec(42) == sample_spec(42)
    assert sample_spec(42) != sample_spec(43)


def test_sample_spec_statistics():
    specs = [sample_spec(i) for i in range(10_000)]
    sig = np.array([[p.sigma1, p.sigma2] for p in specs])
    th = np.array([p.theta for p in specs])
    assert sig.min() >= 0.2 and sig.max() <= 4.0
    assert abs(sig.mean() - 2.1) < 0.1
    assert th.min() >= 0 and th.max() <= math.pi / 2


def test_spec_validation():
    DegradationSpec(0.2, 4.0, math.pi / 2).validate()
    for bad in (DegradationSpec(0.1, 1, 0), DegradationSpec(1, 4.5, 0), DegradationSpec(1, 1, 2.0)):
        with pytest.raises(InvalidSpecError):
            bad.validate()


# ---------------------------------------------------------------------------
# datasets


@pytest.fixture
def hr_dir(tmp_path, rng):
    d = tmp_path / "hr"
    d.mkdir()
    for i in range(3):
        write_png(d / f"img{i}.png", rng.integers(0, 256, (34 + 4 * i, 41, 3), dtype=np.uint8))
    return d


def _digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_generate_dataset_deterministic(tmp_path, hr_dir):
    generate_dataset(hr_dir, tmp_path / "a", 4, 7)
    generate_dataset(hr_dir, tmp_path / "b", 4, 7)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_generate_dataset_outputs(tmp_path, hr_dir):
    rows = generate_dataset(hr_dir, tmp_path / "out", 4, 100)
    assert [r["seed"] for r in rows] == [100, 101, 102]
    specs = {(r["sigma1"], r["sigma2"], r["theta"]) for r in rows}
    assert len(specs) == 3
    with open(tmp_path / "out" / "manifest.csv", newline="") as fh:
        manifest = list(csv.DictReader(fh))
    assert list(manifest[0]) == ["filename", "sigma1", "sigma2", "theta", "seed", "kernel_path"]
    for row in manifest:
        k = load_kernel(tmp_path / "out" / row["kernel_path"])
        assert abs(k.astype(np.float64).sum() - 1) < 1e-6
        spec = DegradationSpec(float(row["sigma1"]), float(row["sigma2"]), float(row["theta"]))
        np.testing.assert_allclose(k, build_kd(spec, 4).values.astype(np.float32))


def test_generate_dataset_lr_matches_degrade(tmp_path, hr_dir):
    from koalanet.imageio import read_png

    rows = generate_dataset(hr_dir, tmp_path / "out", 2, 3)
    hr = crop_to_multiple(read_png(hr_dir / "img1.png"), 2).astype(np.float64)
    spec = sample_spec(rows[1]["seed"])
    X = degrade_image(hr.transpose(2, 0, 1), build_kd(spec, 2), 2).transpose(1, 2, 0)
    lr = read_png(tmp_path / "out" / "lr" / "img1.png")
    assert lr.shape == (hr.shape[0] // 2, hr.shape[1] // 2, 3)
    np.testing.assert_array_equal(lr, np.clip(np.round(X), 0, 255).astype(np.uint8))


def test_generate_dataset_parallel_matches_serial(tmp_path, hr_dir):
    generate_dataset(hr_dir, tmp_path / "a", 4, 7)
    generate_dataset(hr_dir, tmp_path / "b", 4, 7, workers=2)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_generate_dataset_refuses_nonempty_out(tmp_path, hr_dir):
    generate_dataset(hr_dir, tmp_path / "out", 4, 7)
    with pytest.raises(FileExistsError):
        generate_dataset(hr_dir, tmp_path / "out", 4, 7)
    generate_dataset(hr_dir, tmp_path / "out", 4, 7, force=True)


def test_generate_dataset_fixed_spec(tmp_path, hr_dir):
    fixed = DegradationSpec(0.2, 0.2, 0.0)
    rows = generate_dataset(hr_dir, tmp_path / "out", 4, 0, fixed=fixed)
    for r in rows:
        k = load_kernel(tmp_path / "out" / r["kernel_path"])
        assert np.sum((k - pad_bicubic(make_bicubic_kernel(4)[1]).values) ** 2) < 1e-3


def test_generate_dataset_unreadable_image(tmp_path, hr_dir):
    (hr_dir / "broken.png").write_bytes(b"not a png")
    with pytest.raises(OSError):
        generate_dataset(hr_dir, tmp_path / "out", 4, 0)
