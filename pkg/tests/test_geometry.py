import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import blob_volume
from kv2ct import io
from kv2ct.errors import ConfigError, InvalidInputError, ShapeError
from kv2ct.geometry import (MU_WATER, GeometrySpec, KvImagePair, Volume3D, hu_to_mu, project,
                            project_mu, shift_image, shift_volume)


def centroid(profile):
    """First moment of a 1-D profile in pixel units."""
    return float((profile * np.arange(profile.size)).sum() / profile.sum())


# -- GeometrySpec ---------------------------------------------------------------

def test_default_magnification_is_one_point_five():
    g = GeometrySpec()
    assert g.magnification == 1.5
    assert g.sdd_mm > g.sad_mm > 0


@pytest.mark.parametrize("kw", [
    {"sad_mm": 1500.0, "sdd_mm": 1000.0},
    {"sad_mm": 0.0, "sdd_mm": 10.0},
    {"detector_pitch_mm": 0.0},
    {"view_axes": ((1.0, 0.0, 0.0), (1.0, 0.0, 0.0))},
    {"view_axes": ((1.0, 0.0, 0.0), (0.0, 0.6, 0.8))},
    {"view_axes": ((2.0, 0.0, 0.0), (0.0, 1.0, 0.0))},
])
def test_geometry_invariants_rejected(kw):
    with pytest.raises(ConfigError):
        GeometrySpec(**kw)


def test_detector_frame_is_orthonormal():
    g = GeometrySpec()
    for view in range(2):
        src, centre, u, v = g.detector_frame(view)
        a = np.asarray(g.view_axes[view])
        assert np.isclose(np.linalg.norm(centre - src), g.sdd_mm)
        assert abs(u @ v) < 1e-12 and abs(u @ a) < 1e-12 and abs(v @ a) < 1e-12


def test_geometry_dict_round_trip():
    g = GeometrySpec(detector_pixels=(100, 90))
    assert GeometrySpec.from_dict(g.to_dict()) == g


# -- Volume3D / KvImagePair -----------------------------------------------------

def test_volume_rejects_bad_shape_and_spacing():
    with pytest.raises(ShapeError):
        Volume3D(np.zeros((4, 4)))
    with pytest.raises(ShapeError):
        Volume3D(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))


def test_volume_is_immutable_copy():
    a = np.zeros((2, 3, 4))
    v = Volume3D(a)
    a[0, 0, 0] = 5
    assert v.data[0, 0, 0] == 0
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1


def test_kv_pair_rejects_negative_and_nonfinite():
    with pytest.raises(InvalidInputError):
        KvImagePair(-np.ones((2, 3, 3)), 1.0)
    bad = np.zeros((2, 3, 3))
    bad[1, 1, 1] = np.nan
    with pytest.raises(InvalidInputError):
        KvImagePair(bad, 1.0)
    with pytest.raises(ShapeError):
        KvImagePair(np.zeros((3, 3, 3)), 1.0)


def test_hu_to_mu_clamps_at_zero():
    assert hu_to_mu(0.0) == MU_WATER
    assert hu_to_mu(-1000.0) == 0.0
    assert hu_to_mu(-1024.0) == 0.0
    assert np.isclose(hu_to_mu(1000.0), 2 * MU_WATER)


# -- project ---------------------------------------------------------------------

def test_water_cube_central_ray(small_geom):
    # 20-voxel cube of water at 2 mm: L = 40 mm, centred on the isocenter
    hu = np.full((32, 32, 32), -1000.0)
    hu[6:26, 6:26, 6:26] = 0.0
    kv = project(Volume3D.centered(hu, (2.0, 2.0, 2.0)), small_geom)
    c = small_geom.detector_pixels[0] // 2
    for view in range(2):
        assert kv.images[view, c, c] == pytest.approx(MU_WATER * 40.0, rel=2e-3)


def test_all_air_projects_to_zero(small_geom):
    kv = project(Volume3D.centered(np.full((10, 10, 10), -1000.0), (3.0,) * 3), small_geom)
    assert np.all(kv.images == 0.0)


def test_ray_missing_volume_is_zero():
    g = GeometrySpec(detector_pixels=(65, 65), detector_pitch_mm=4.0)
    kv = project(Volume3D.centered(np.zeros((8, 8, 8)), (1.0,) * 3), g)
    assert kv.images[0, 0, 0] == 0.0 and kv.images[1, -1, -1] == 0.0
    assert kv.images[0, 32, 32] > 0


def test_single_voxel_footprint_moves_by_magnification():
    g = GeometrySpec(detector_pixels=(41, 41), detector_pitch_mm=0.5)
    hu = np.full((21, 21, 21), -1000.0)
    hu[10, 10, 10] = 3000.0
    vol = Volume3D.centered(hu, (1.0,) * 3)
    a = project(vol, g, 0.0)
    b = project(vol, g, 2.0)
    for view in range(2):
        moved = centroid(b.images[view].sum(axis=0)) - centroid(a.images[view].sum(axis=0))
        assert abs(moved * g.detector_pitch_mm - 3.0) <= g.detector_pitch_mm


def test_project_rejects_nonfinite_and_large_shift(small_geom):
    hu = np.zeros((4, 4, 4))
    hu[0, 0, 0] = np.inf
    with pytest.raises(InvalidInputError):
        project(Volume3D(hu), small_geom)
    with pytest.raises(InvalidInputError):
        project(Volume3D(np.zeros((4, 4, 4))), small_geom, couch_shift_mm=20.5)


def test_noise_is_seeded_and_nonnegative(small_geom):
    vol = blob_volume(12, 3.0)
    a = project(vol, small_geom, noise_sigma=0.05, seed=3)
    b = project(vol, small_geom, noise_sigma=0.05, seed=3)
    assert np.array_equal(a.images, b.images)
    assert a.images.min() >= 0.0


def test_projection_is_linear_in_mu(small_geom):
    vol = blob_volume(16, 2.0, seed=4)
    mu = hu_to_mu(vol.data)
    p1 = project_mu(mu, vol.spacing_mm, vol.origin_mm, small_geom)
    for a in (0.0, 0.5, 3.0):
        pa = project_mu(a * mu, vol.spacing_mm, vol.origin_mm, small_geom)
        np.testing.assert_allclose(pa, a * p1, rtol=1e-12, atol=1e-15)


@settings(max_examples=8, deadline=None)
@given(delta=st.floats(-5.0, 5.0))
def test_magnification_law_property(delta):
    g = GeometrySpec(detector_pixels=(48, 72), detector_pitch_mm=1.0)
    vol = blob_volume(24, 2.0, seed=7)
    a = project(vol, g, 0.0)
    b = project(vol, g, delta)
    for view in range(2):
        moved = centroid(b.images[view].sum(axis=0)) - centroid(a.images[view].sum(axis=0))
        assert abs(moved * g.detector_pitch_mm - 1.5 * delta) <= g.detector_pitch_mm


def test_views_respond_to_their_own_axes():
    g = GeometrySpec(detector_pixels=(72, 48), detector_pitch_mm=1.0)
    vol = blob_volume(24, 2.0, seed=11)
    a = project(vol, g)
    for ax, own in ((0, 0), (1, 1)):
        moved = project(shift_volume(vol, 5.0, ax), g)
        # along its own view axis the image only rescales slightly
        assert abs(centroid(moved.images[own].sum(axis=1)) - centroid(a.images[own].sum(axis=1))) < 1.0
        other = 1 - own
        lag = centroid(moved.images[other].sum(axis=1)) - centroid(a.images[other].sum(axis=1))
        assert abs(abs(lag) - 7.5) <= 1.0


# -- shift_volume / shift_image ---------------------------------------------------

def test_zero_shift_is_bitwise_identity(desk_phantom):
    vol, _ = desk_phantom
    out = shift_volume(vol, 0.0)
    assert np.array_equal(out.data, vol.data) and out.data is not vol.data


def test_one_voxel_shift_is_roll_with_air(desk_phantom):
    vol, _ = desk_phantom
    out = shift_volume(vol, vol.spacing_mm[2], "S-I")
    expect = np.roll(vol.data, 1, axis=2)
    expect[:, :, 0] = -1000.0
    assert np.array_equal(out.data, expect)


def test_shift_round_trip_loses_little(desk_phantom):
    vol, _ = desk_phantom
    back = shift_volume(shift_volume(vol, 0.3), -0.3)
    inner = (slice(None), slice(None), slice(2, -2))
    assert np.mean(np.abs(back.data[inner] - vol.data[inner])) < 5.0


def test_shift_errors():
    vol = Volume3D(np.zeros((4, 4, 4)), (1.0,) * 3)
    with pytest.raises(InvalidInputError):
        shift_volume(vol, 0.5, "L-R")
    with pytest.raises(InvalidInputError):
        shift_volume(vol, 2.5, "S-I")


def test_shift_image_fill_and_identity():
    img = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(shift_image(img, 0.0, 1), img)
    out = shift_image(img, 1.0, 1)
    assert np.array_equal(out[:, 1:], img[:, :-1]) and np.all(out[:, 0] == 0.0)


# -- file formats ------------------------------------------------------------------

def test_volume_file_round_trip_x_fastest(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    vol = Volume3D(data, (1.0, 2.0, 3.0), (-1.0, 0.5, 2.0))
    hdr = io.save_volume(vol, tmp_path / "v")
    raw = np.fromfile(tmp_path / "v.raw", dtype="<f4")
    # x varies fastest: the second stored value is data[1, 0, 0]
    assert raw[1] == data[1, 0, 0] and raw[2] == data[0, 1, 0]
    back = io.load_volume(hdr)
    assert np.array_equal(back.data, vol.data)
    assert back.spacing_mm == vol.spacing_mm and back.origin_mm == vol.origin_mm


def test_kv_pair_file_round_trip(tmp_path, small_geom):
    kv = project(blob_volume(12, 3.0), small_geom, couch_shift_mm=1.5)
    back = io.load_kv_pair(io.save_kv_pair(kv, tmp_path / "kv"))
    assert np.array_equal(back.images, kv.images)
    assert back.couch_shift_mm == 1.5 and back.geometry == small_geom


def test_volume_file_rejects_wrong_payload(tmp_path):
    vol = Volume3D(np.zeros((2, 2, 2)))
    io.save_volume(vol, tmp_path / "v")
    np.zeros(3, "<f4").tofile(tmp_path / "v.raw")
    with pytest.raises(ShapeError):
        io.load_volume(tmp_path / "v.json")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 1.0))
def test_mask_rle_round_trip(seed, p):
    m = np.random.default_rng(seed).random((5, 6, 7)) < p
    assert np.array_equal(io.rle_decode(io.rle_encode(m), m.shape), m)
