import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from risamodal.datagen import (FAMILIES, ShapeSpec, generate_shape, iou, make_pair, occluder_slab,
                               random_shape_spec, read_manifest, reconstruction_error, write_manifest)
from risamodal.geometry import OcclusionParams, Scene, voxelize


def test_box_and_families():
    chi = generate_shape(ShapeSpec("box", (2, 3, 1), offset=(1, 0, 2)), (4, 4, 4))
    assert chi.sum() == 6
    arr = chi.reshape((4, 4, 4), order="F")
    assert arr[1:3, 0:3, 2].all()
    assert generate_shape(ShapeSpec("lshape", (3, 3, 1, 1)), (4, 4, 4)).sum() == 5
    assert generate_shape(ShapeSpec("plus", (3, 3, 1, 1)), (4, 4, 4)).sum() == 5
    assert generate_shape(ShapeSpec("pyramid", (3, 2)), (4, 4, 4)).sum() == 10
    two = ShapeSpec("twobox", (1, 1, 1, 1, 1, 1, 2, 0, 0))
    assert generate_shape(two, (4, 4, 4)).sum() == 2


def test_rotation_preserves_count():
    spec = ShapeSpec("tshape", (4, 3, 1, 2), rot=(1, 2, 3))
    assert generate_shape(spec, (6, 6, 6)).sum() == generate_shape(ShapeSpec("tshape", (4, 3, 1, 2)),
                                                                    (6, 6, 6)).sum()


def test_invalid_specs():
    with pytest.raises(ValueError):
        ShapeSpec("sphere", (2,))
    with pytest.raises(ValueError):
        generate_shape(ShapeSpec("box", (3, 3, 3), offset=(2, 0, 0)), (4, 4, 4))
    with pytest.raises(ValueError):
        generate_shape(ShapeSpec("lshape", (2, 2, 3, 1)), (4, 4, 4))
    with pytest.raises(ValueError):
        generate_shape(ShapeSpec("pyramid", (2, 3)), (4, 4, 4))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(FAMILIES))
def test_random_specs_fit(seed, family):
    spec = random_shape_spec(seed, (8, 8, 8), family)
    chi = generate_shape(spec, (8, 8, 8))
    assert chi.shape == (512,) and chi.any()
    assert set(np.unique(chi)) <= {0, 1}


def test_metrics():
    a, b = np.array([1, 1, 0, 0]), np.array([1, 0, 0, 1])
    assert reconstruction_error(a, b) == 0.5
    assert iou(a, b) == pytest.approx(1 / 3)
    assert iou(np.zeros(3), np.zeros(3)) == 1.0
    with pytest.raises(ValueError):
        reconstruction_error(a, b[:3])


def test_make_pair_with_occluder():
    g = voxelize([0, 0, 2.5], [3, 3, 3], 5, 5, 5)
    sc, params = Scene(), OcclusionParams(0.3)
    chi = g.from_array(np.pad(np.ones((1, 1, 1), np.int8), ((2, 2), (2, 2), (3, 1))))
    wall = occluder_slab(g, 1, (0, 5), (0, 5))
    cv, full = make_pair(chi, sc, g, params, occluder=wall)
    assert full.sum() == 1 and cv.sum() == 0
    cv, _ = make_pair(chi, sc, g, params)
    assert cv.sum() == 1
    assert np.all(cv <= full)


def test_manifest_roundtrip(tmp_path):
    rows = [{"shape_id": "s0", "spec": ShapeSpec("box", (1, 2, 3), (1, 0, 0), (0, 1, 0), 5),
             "split": "test", "path": "x.txt"}]
    write_manifest(rows, tmp_path / "m.csv")
    back = read_manifest(tmp_path / "m.csv")
    assert back[0]["spec"] == rows[0]["spec"]
    assert back[0]["split"] == "test"
