import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from adunet.errors import ConfigError, GeometryError
from adunet.preprocess import (BoundingBox, apply_mask, bounding_box, crop, from_canvas,
                               normalize_intensity, prepare, reinsert_slices,
                               resample_to_reference, to_canvas)
from adunet.volume import Volume


def scan_box(mask):
    """Per-axis extremes of nonzero indices by walking every voxel."""
    lo = [None] * 3
    hi = [None] * 3
    for idx in np.ndindex(*mask.shape):
        if mask[idx] > 0:
            for a in range(3):
                lo[a] = idx[a] if lo[a] is None else min(lo[a], idx[a])
                hi[a] = idx[a] if hi[a] is None else max(hi[a], idx[a])
    return tuple(lo), tuple(hi)


def ellipsoid(dims, center, radii):
    g = np.indices(dims, dtype=float)
    r = sum(((g[a] - center[a]) / radii[a]) ** 2 for a in range(3))
    return (r <= 1).astype(np.float32)


def test_empty_mask_raises():
    with pytest.raises(ConfigError, match="empty mask"):
        bounding_box(Volume(np.zeros((3, 4, 5), np.float32)), (0, 0, 0))


def test_single_voxel_box():
    m = np.zeros((5, 6, 7), np.float32)
    m[2, 3, 4] = 1
    box = bounding_box(Volume(m), (0, 0, 0))
    assert box == BoundingBox((2, 3, 4), (2, 3, 4))


def test_ellipsoid_box_matches_scan():
    m = ellipsoid((12, 20, 22), (5.3, 9.0, 12.2), (3.1, 6.4, 5.5))
    lo, hi = scan_box(m)
    assert bounding_box(Volume(m), (0, 0, 0)) == BoundingBox(lo, hi)


def test_margin_is_clamped():
    m = np.zeros((4, 4, 4), np.float32)
    m[0, 3, 1] = 1
    box = bounding_box(Volume(m), (1, 2, 2))
    assert box == BoundingBox((0, 1, 0), (1, 3, 3))


@given(arrays(np.float32, (5, 6, 7), elements=st.sampled_from([0.0, 0.0, 0.0, 1.0, 2.0])))
def test_tight_box_property(m):
    if not (m > 0).any():
        return
    box = bounding_box(Volume(m), (0, 0, 0))
    inside = np.zeros(m.shape, bool)
    inside[box.slices] = True
    assert not (m[~inside] > 0).any()
    for a in range(3):
        lo_face = np.take(m, box.min_corner[a], axis=a)
        hi_face = np.take(m, box.max_corner[a], axis=a)
        assert (lo_face > 0).any() and (hi_face > 0).any()


def test_crop_full_box_is_identity(rng):
    v = Volume(rng.normal(size=(3, 4, 5)), spacing=(3, 0.5, 0.5), origin=(1, 2, 3))
    assert crop(v, BoundingBox.full(v.dims)) == v


def test_crop_single_voxel(rng):
    v = Volume(rng.normal(size=(3, 4, 5)))
    c = crop(v, BoundingBox((1, 2, 3), (1, 2, 3)))
    assert c.dims == (1, 1, 1) and c.data[0, 0, 0] == v.data[1, 2, 3]


def test_crop_matches_index_shift_and_origin(rng):
    theta = 0.3
    d = np.array([[np.cos(theta), -np.sin(theta), 0], [np.sin(theta), np.cos(theta), 0], [0, 0, 1]])
    v = Volume(rng.normal(size=(6, 7, 8)), spacing=(3, 0.5, 0.75), origin=(10, -4, 2), direction=d)
    box = BoundingBox((1, 2, 3), (4, 6, 5))
    c = crop(v, box)
    assert c.dims == box.shape
    for idx in np.ndindex(*c.dims):
        src = tuple(i + o for i, o in zip(idx, box.min_corner))
        assert c.data[idx] == v.data[src]
    np.testing.assert_allclose(c.index_to_world([0, 0, 0]), v.index_to_world(box.min_corner), atol=1e-5)
    np.testing.assert_array_equal(c.spacing, v.spacing)
    np.testing.assert_array_equal(c.direction, v.direction)


def test_crop_out_of_range():
    with pytest.raises(ConfigError):
        crop(Volume(np.zeros((2, 2, 2))), BoundingBox((0, 0, 0), (2, 1, 1)))


def test_apply_mask_cases(rng):
    v = Volume(rng.normal(size=(3, 4, 5)))
    assert apply_mask(v, v.like(np.ones(v.dims))) == v
    assert not apply_mask(v, v.like(np.zeros(v.dims))).data.any()
    m = (rng.random(v.dims) > 0.5).astype(np.float32)
    out = apply_mask(v, v.like(m))
    for idx in np.ndindex(*v.dims):
        assert out.data[idx] == (v.data[idx] if m[idx] > 0 else 0.0)
    assert apply_mask(out, v.like(m)) == out


def test_apply_mask_geometry_mismatch():
    v = Volume(np.ones((2, 2, 2)))
    with pytest.raises(GeometryError):
        apply_mask(v, Volume(np.ones((2, 2, 2)), spacing=(2, 1, 1)))


def test_resample_identity_nearest_and_trilinear(rng):
    v = Volume(rng.normal(size=(4, 5, 6)), spacing=(3, 0.5, 0.5), origin=(1, 2, 3))
    for mode in ("nearest", "trilinear"):
        assert resample_to_reference(v, v, mode) == v


def test_resample_outside_support_is_zero(rng):
    v = Volume(rng.normal(size=(4, 5, 6)) + 5)
    far = Volume(np.zeros((3, 3, 3)), origin=(100, 100, 100))
    for mode in ("nearest", "trilinear"):
        assert not resample_to_reference(v, far, mode).data.any()


def test_resample_constant_upsample():
    v = Volume(np.full((4, 4, 4), 2.5, np.float32), spacing=(2, 2, 2))
    ref = Volume(np.zeros((7, 7, 7)), spacing=(1, 1, 1))
    out = resample_to_reference(v, ref, "trilinear")
    np.testing.assert_allclose(out.data, 2.5, rtol=0, atol=1e-6)
    assert out.same_geometry(ref)


def test_resample_linear_ramp_is_exact():
    # trilinear reproduces affine functions at interior sample points
    g = np.indices((4, 5, 6), dtype=np.float32)
    v = Volume(g[0] + 2 * g[1] - g[2], spacing=(1, 1, 1))
    ref = Volume(np.zeros((3, 4, 5)), spacing=(1, 1, 1), origin=(0.5, 0.25, 0.75))
    out = resample_to_reference(v, ref, "trilinear")
    gi = np.indices((3, 4, 5), dtype=np.float64)
    expected = (gi[0] + 0.5) + 2 * (gi[1] + 0.25) - (gi[2] + 0.75)
    np.testing.assert_allclose(out.data, expected, atol=1e-5)


def test_resample_nearest_on_shifted_grid():
    data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    v = Volume(data)
    ref = Volume(np.zeros((2, 3, 4)), origin=(0.0, 0.0, 1.2))
    out = resample_to_reference(v, ref, "nearest")
    np.testing.assert_array_equal(out.data[..., :3], data[..., 1:])
    assert not out.data[..., 3].any()


def test_reinsert_cases(rng):
    v = Volume(rng.normal(size=(5, 6, 7)))
    full = BoundingBox.full(v.dims)
    assert reinsert_slices(v, v, full) == v
    box = BoundingBox((1, 1, 2), (3, 4, 5))
    c = crop(v, box)
    out = reinsert_slices(c, v, box)
    np.testing.assert_allclose(out.data.sum(), c.data.sum(), rtol=1e-6)
    inside = np.zeros(v.dims, bool)
    inside[box.slices] = True
    for idx in np.ndindex(*v.dims):
        assert out.data[idx] == (v.data[idx] if inside[idx] else 0.0)
    with pytest.raises(GeometryError):
        reinsert_slices(crop(v, BoundingBox((0, 0, 0), (1, 1, 1))), v, box)


def test_normalize_two_points():
    v = Volume(np.array([[[1.0, 3.0, 9.0]]], np.float32))
    m = v.like(np.array([[[1, 1, 0]]], np.float32))
    np.testing.assert_array_equal(normalize_intensity(v, m).data, [[[-1.0, 1.0, 0.0]]])


def test_normalize_zero_variance():
    v = Volume(np.ones((2, 2, 2), np.float32))
    with pytest.raises(ConfigError, match="zero variance"):
        normalize_intensity(v, v)


def test_normalize_against_summation_oracle(rng):
    v = Volume(rng.normal(3.0, 2.0, size=(4, 6, 6)))
    m = v.like((rng.random(v.dims) > 0.3).astype(np.float32))
    out = normalize_intensity(v, m)
    fg = [out.data[i] for i in np.ndindex(*v.dims) if m.data[i] > 0]
    n = len(fg)
    mean = sum(float(x) for x in fg) / n
    var = sum((float(x) - mean) ** 2 for x in fg) / n
    assert abs(mean) < 1e-5 and abs(var ** 0.5 - 1) < 1e-5
    assert not out.data[m.data == 0].any()
    again = normalize_intensity(out, m)
    np.testing.assert_allclose(again.data, out.data, atol=1e-5)


def test_prepare_chain(healthy_case):
    prep = prepare(healthy_case.modalities["T2W"], healthy_case.zone_mask)
    assert prep.image.dims == prep.box.shape == prep.mask.dims
    fg = prep.mask.data > 0
    assert abs(prep.image.data[fg].mean()) < 1e-5
    assert not prep.image.data[~fg].any()


@given(st.integers(1, 10), st.integers(1, 10), st.integers(10, 14), st.integers(10, 16))
def test_canvas_round_trip(h, w, ch, cw):
    x = np.arange(2 * h * w, dtype=np.float32).reshape(2, h, w)
    c = to_canvas(x, (ch, cw))
    assert c.shape == (2, ch, cw) and c.sum() == x.sum()
    np.testing.assert_array_equal(from_canvas(c, (h, w)), x)


def test_canvas_too_small():
    with pytest.raises(GeometryError):
        to_canvas(np.zeros((1, 5, 5)), (4, 8))
