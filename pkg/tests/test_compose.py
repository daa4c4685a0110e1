import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kv2ct.compose import CompositionSpec, compose, feather_weights, upsample
from kv2ct.errors import ConfigError, ShapeError
from kv2ct.geometry import Volume3D
from kv2ct.grss import downsample_volume
from kv2ct.phantom import Box

FULL = (16, 16, 12)
BOX = Box((4, 4, 2), (11, 11, 9))


def const(value, dims, spacing=(2.0, 2.0, 2.0)):
    return Volume3D(np.full(dims, float(value)), spacing)


def test_equal_overlay_is_plain_primary():
    rng = np.random.default_rng(0)
    prim = Volume3D(rng.normal(0, 100, (8, 8, 6)), (2.0, 2.0, 2.0))
    up = upsample(prim.data, FULL)
    sec = Volume3D(up[BOX.slices], (1.0, 1.0, 1.0))
    for feather in (0, 2):
        out = compose(prim, sec, CompositionSpec(BOX, feather_voxels=feather), FULL)
        np.testing.assert_allclose(out.data, up, atol=1e-3)


def test_feather_zero_is_a_step():
    out = compose(const(0, (8, 8, 6)), const(100, (4, 4, 4)), CompositionSpec(BOX, feather_voxels=0), FULL)
    inside = np.zeros(FULL, bool)
    inside[BOX.slices] = True
    assert np.all(out.data[inside] == 100.0) and np.all(out.data[~inside] == 0.0)


def test_feather_two_ramps_monotonically():
    out = compose(const(0, (8, 8, 6)), const(100, (4, 4, 4)), CompositionSpec(BOX, feather_voxels=2), FULL)
    line = out.data[4:12, 7, 5]  # along R-L through the box centre
    assert 0.0 < line[0] < line[1] < 100.0 and line[2] == pytest.approx(100.0)
    assert 0.0 < line[-1] < line[-2] < 100.0
    assert np.all(np.diff(line[:3]) > 0)
    assert out.data[3, 7, 5] == 0.0


def test_outside_box_depends_only_on_primary():
    prim = Volume3D(np.random.default_rng(1).normal(size=(8, 8, 6)), (2.0,) * 3)
    a = compose(prim, const(0, (4, 4, 4)), CompositionSpec(BOX), FULL)
    b = compose(prim, const(500, (8, 8, 8)), CompositionSpec(BOX), FULL)
    outside = np.ones(FULL, bool)
    outside[BOX.slices] = False
    assert np.array_equal(a.data[outside], b.data[outside])


def test_output_geometry():
    out = compose(const(0, (8, 8, 6)), const(1, (4, 4, 4)), CompositionSpec(BOX), FULL)
    assert out.dims == FULL and out.spacing_mm == (1.0, 1.0, 1.0)
    assert out.origin_mm == (-7.5, -7.5, -5.5)


def test_primary_box_fills_air_outside():
    spec = CompositionSpec(BOX, primary_box=Box((0, 2, 0), (15, 13, 11)))
    out = compose(const(5, (8, 6, 6)), const(5, (4, 4, 4)), spec, FULL)
    assert np.all(out.data[:, :2] == -1000.0) and np.all(out.data[:, 2:14] == 5.0)


@pytest.mark.parametrize("spec,err", [
    (CompositionSpec(Box((0, 0, 0), (16, 3, 3))), ShapeError),
    (CompositionSpec(BOX, feather_voxels=4), ConfigError),
    (CompositionSpec(BOX, feather_voxels=-1), ConfigError),
    (CompositionSpec(BOX, upsample_mode="nearest"), ConfigError),
])
def test_spec_validation(spec, err):
    with pytest.raises(err):
        compose(const(0, (8, 8, 6)), const(0, (4, 4, 4)), spec, FULL)


def test_output_must_tile_box():
    with pytest.raises(ShapeError):
        compose(const(0, (8, 8, 6)), const(0, (3, 4, 4)), CompositionSpec(BOX), FULL)


def test_feather_weights_profile():
    w = feather_weights((8,), 2)
    assert np.allclose(w, [1 / 3, 2 / 3, 1, 1, 1, 1, 2 / 3, 1 / 3])
    assert np.all(feather_weights((3, 4, 5), 0) == 1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1000, 3000), st.sampled_from([(1, 1, 1), (2, 2, 2), (4, 3, 3), (1, 2, 2)]))
def test_upsample_of_downsampled_constant_is_identity(value, f):
    dims = (12, 12, 12)
    small = downsample_volume(const(value, dims, (1.0, 1.0, 1.0)), f)
    np.testing.assert_allclose(upsample(small.data, dims), value, rtol=1e-6, atol=1e-4)


def test_upsample_is_linear_between_cell_centres():
    out = upsample(np.array([0.0, 10.0]).reshape(2, 1, 1), (4, 1, 1)).ravel()
    assert np.allclose(out, [0.0, 2.5, 7.5, 10.0])
