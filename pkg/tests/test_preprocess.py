import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepcap.errors import DimensionError
from deepcap.preprocess import (AUGMENTATIONS, Pullback, Sample, assemble_input, augment,
                                axial_difference, center_crop, gaussian_derivative, load_dataset,
                                polar_to_cartesian, read_gray, read_manifest, sample_rng,
                                write_gray, ManifestRecord, write_manifest)

SIDE = 360


def cart_grid(side=SIDE):
    c = np.arange(side) + 0.5 - side / 2
    dy, dx = np.meshgrid(c, c, indexing="ij")
    return np.hypot(dx, dy), np.arctan2(dy, dx)


def test_polar_constant_is_disk():
    out = polar_to_cartesian(np.full((360, 720), 0.4), SIDE)
    r, _ = cart_grid()
    assert np.allclose(out[r <= SIDE / 2], 0.4)
    assert np.all(out[r > SIDE / 2] == 0.0)


def test_polar_row_is_ray():
    pol = np.zeros((360, 720))
    pol[60] = 1.0                      # 60 degrees
    out = polar_to_cartesian(pol, SIDE)
    r, theta = cart_grid()
    bright = out > 0.5
    assert bright.sum() > 100
    diff = np.abs(np.angle(np.exp(1j * (theta[bright] - math.radians(60)))))
    assert diff.max() < math.radians(0.5) + 1e-12


def test_polar_column_is_circle():
    pol = np.zeros((360, 720))
    d = 400
    pol[:, d] = 1.0
    out = polar_to_cartesian(pol, SIDE)
    r, _ = cart_grid()
    radius = d * (SIDE / 2) / 720
    bright = out > 0.5
    assert bright.sum() > 100
    assert np.abs(r[bright] - radius).max() < 0.5 * (SIDE / 2) / 720 + 1e-9


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_polar_area_weighted_mean(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, 6)
    th = np.arange(360)[:, None] * 2 * np.pi / 360
    d = np.arange(720)[None, :] / 720
    pol = (0.6 + 0.1 * (a[0] * np.cos(th + 3 * a[1]) + a[2] * np.cos(2 * th + 3 * a[3]))
           + 0.1 * a[4] * np.cos(np.pi * d * (1 + a[5])))
    out = polar_to_cartesian(pol, SIDE)
    r, _ = cart_grid()
    weights = np.broadcast_to(np.arange(720) + 0.5, pol.shape)
    polar_mean = (pol * weights).sum() / weights.sum()
    assert abs(out[r <= SIDE / 2].mean() / polar_mean - 1) < 0.02


def test_center_crop_cases():
    ramp = np.arange(16).reshape(4, 4)
    assert np.array_equal(center_crop(ramp, 2), [[5, 6], [9, 10]])
    x = np.random.default_rng(0).random((7, 7))
    assert np.array_equal(center_crop(x, 7), x)
    with pytest.raises(DimensionError):
        center_crop(x, 8)


@given(st.integers(2, 40), st.integers(1, 40), st.integers(1, 40))
def test_crop_composition(side, a, b):
    a, b = min(a, side), min(a, b, side)
    x = np.arange(side * side).reshape(side, side)
    twice = center_crop(center_crop(x, a), b)
    once = center_crop(x, b)
    # floor-biased offsets compose exactly unless both steps round down
    if ((side - a) % 2 == 0) or ((a - b) % 2 == 0):
        assert np.array_equal(twice, once)


def test_derivative_constant_and_ramp():
    assert np.allclose(gaussian_derivative(np.full((20, 20), 0.3)), 0.0)
    _, xx = np.mgrid[0:40, 0:40]
    for a in (0.01, -0.02):
        out = gaussian_derivative(a * xx, rescale=False)
        assert np.allclose(out[8:32, 8:32], abs(a), rtol=1e-3)


def test_derivative_step_edge():
    img = np.zeros((20, 30))
    img[:, 15:] = 1.0
    out = gaussian_derivative(img)
    assert set(out.argmax(axis=1).tolist()) <= {14, 15}
    assert 0.85 < out.max() <= 1.0      # edge falls between samples


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_derivative_translation_equivariant(seed):
    from scipy import ndimage
    img = ndimage.gaussian_filter(np.random.default_rng(seed).random((48, 48)), 2.0)
    out = gaussian_derivative(img)
    shifted = gaussian_derivative(np.roll(img, 3, axis=1))
    assert np.abs(shifted[8:-8, 11:-8] - out[8:-8, 8:-11]).max() < 1e-10


def test_axial_difference_cases():
    x = np.random.default_rng(1).random((6, 6))
    assert np.array_equal(axial_difference(x, x), np.zeros((6, 6)))
    frames = [0.1 + 0.05 * z + np.zeros((4, 4)) for z in range(5)]
    pb = Pullback("p", 200.0, frames, [np.zeros((4, 4), np.uint8)] * 5)
    mid = pb.sample(2)
    assert np.allclose(axial_difference(mid.prev_frame, mid.next_frame), 0.1)
    first = pb.sample(0)
    assert np.array_equal(axial_difference(first.prev_frame, first.next_frame), frames[1] - frames[0])
    with pytest.raises(DimensionError):
        axial_difference(np.zeros((2, 2)), np.zeros((3, 3)))


@given(st.integers(0, 10**6))
def test_axial_difference_antisymmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((5, 5)), rng.random((5, 5))
    assert np.array_equal(axial_difference(a, b), -axial_difference(b, a))


def disk_sample(seed=0, value=1.0):
    yy, xx = np.mgrid[0:300, 0:300]
    rng = np.random.default_rng(seed)
    cy, cx = rng.uniform(110, 190, 2)
    mask = (np.hypot(yy - cy, xx - cx) < rng.uniform(30, 70)).astype(np.uint8)
    img = mask * value
    return Sample(img, mask, img * 0.9, img * 0.8, 3, 200.0, "disk")


def test_augment_deterministic_and_shaped():
    s = disk_sample()
    a = augment(s, sample_rng(5, "disk", 3, 1))
    b = augment(s, sample_rng(5, "disk", 3, 1))
    for x, y in ((a.frame, b.frame), (a.mask, b.mask), (a.next_frame, b.next_frame)):
        assert x.shape == (256, 256) and np.array_equal(x, y)
    assert a.applied == b.applied


def test_augment_all_off_is_pure_crop():
    s = disk_sample(1)
    out = augment(s, sample_rng(0, "disk", 3, 0), enabled=())
    top, left = out.applied["crop"]
    assert np.array_equal(out.frame, s.frame[top:top + 256, left:left + 256])
    assert np.array_equal(out.mask, s.mask[top:top + 256, left:left + 256])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 50))
def test_geometric_augment_keeps_mask_on_image(seed, epoch):
    s = disk_sample(seed)
    out = augment(s, sample_rng(seed, "disk", 3, epoch), enabled=("hflip", "vflip", "rotate"))
    disk = (out.frame > 0.5).astype(np.uint8)
    inter = int((disk & out.mask).sum())
    total = int(disk.sum() + out.mask.sum())
    assert total == 0 or 2 * inter == total        # Dice exactly 1


def test_augment_draws_each_transform():
    seen = {name: False for name in AUGMENTATIONS}
    s = disk_sample(2)
    for epoch in range(20):
        out = augment(s, sample_rng(0, "disk", 3, epoch))
        for name in AUGMENTATIONS:
            seen[name] |= out.applied[name]
    assert all(seen.values())


def test_photometric_touches_current_frame_only():
    s = disk_sample(3)
    for epoch in range(30):
        out = augment(s, sample_rng(1, "disk", 3, epoch))
        ref = augment(s, sample_rng(1, "disk", 3, epoch), enabled=("hflip", "vflip", "rotate"))
        assert np.array_equal(out.prev_frame, ref.prev_frame)
        assert np.array_equal(out.mask, ref.mask)


def test_assemble_input_variants():
    s = disk_sample(4, value=0.8)
    for variant, n in (("IM", 1), ("2DG", 2), ("ADM", 2), ("ALL", 3)):
        st_ = assemble_input(s, variant, seed=3, epoch=1)
        assert st_.channels.shape == (n, 256, 256)
        assert st_.channels[0].min() >= 0 and st_.channels[0].max() <= 1
        assert np.array_equal(st_.channels, assemble_input(s, variant, seed=3, epoch=1).channels)
    full = assemble_input(s, "ALL", seed=3)
    assert full.channels[2].min() >= -1 and full.channels[2].max() <= 1
    assert 0 <= full.channels[1].min() and full.channels[1].max() <= 1
    centre = assemble_input(s, "IM")
    assert np.array_equal(centre.channels[0], center_crop(s.frame, 256).astype(np.float32))


@pytest.mark.parametrize("ext", ["png", "pgm"])
def test_gray_io_round_trip(tmp_path, ext):
    pix = np.random.default_rng(0).integers(0, 256, (17, 23), dtype=np.uint8)
    path = tmp_path / f"x.{ext}"
    write_gray(path, pix)
    assert np.array_equal(read_gray(path), pix)
    if ext == "pgm":
        assert path.read_bytes()[:2] == b"P5"


def test_polar_frames_are_converted(tmp_path):
    pol = np.full((360, 720), 200, np.uint8)
    write_gray(tmp_path / "f.png", pol)
    write_gray(tmp_path / "m.png", np.full((360, 720), 255, np.uint8))
    write_manifest(tmp_path / "m.tsv", [ManifestRecord("p", 0, str(tmp_path / "f.png"),
                                                       str(tmp_path / "m.png"), 200.0)])
    (pb,) = load_dataset(tmp_path / "m.tsv")
    assert pb.frames[0].shape == (300, 300)
    r, _ = cart_grid(300)
    assert np.allclose(pb.frames[0][r < 175], 200 / 255)
    assert np.all(pb.frames[0][r > 181] == 0)              # corners lie outside the imaged disk
    assert set(np.unique(pb.masks[0][r < 175])) == {1}
    assert read_manifest(tmp_path / "m.tsv")[0].frame_spacing_um == 200.0
