import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardrefine.volgrid import (
    GridFormatError,
    GridSizeError,
    LabelGrid,
    LandmarkSet,
    LANDMARK_NAMES,
    ProbGrid,
    VolumeGrid,
    argmax_labels,
    one_hot,
    read_grid,
    read_landmarks,
    resample_trilinear,
    voxel_to_world,
    world_to_voxel,
    write_grid,
    write_landmarks,
)
from conftest import random_labels, random_volume


class TestTypes:
    def test_volume_invariants(self):
        with pytest.raises(ValueError):
            VolumeGrid(np.zeros((2, 2), np.float32), (1, 1, 1))
        with pytest.raises(ValueError):
            VolumeGrid(np.zeros((2, 2, 2), np.float32), (1, 0, 1))

    def test_label_range_checked(self):
        with pytest.raises(ValueError):
            LabelGrid(np.full((2, 2, 2), 7, np.uint8), (1, 1, 1), class_count=5)

    def test_prob_grid_shape(self):
        with pytest.raises(ValueError):
            ProbGrid(np.zeros((2, 2, 2), np.float32), (1, 1, 1))

    def test_landmark_names_fixed(self):
        pts = {name: (0.0, 0.0, float(i)) for i, name in enumerate(LANDMARK_NAMES)}
        lm = LandmarkSet(pts)
        assert list(lm.points) == list(LANDMARK_NAMES)
        bad = dict(pts)
        bad["extra"] = (0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            LandmarkSet(bad)
        with pytest.raises(ValueError):
            LandmarkSet({**pts, "apex": (np.nan, 0.0, 0.0)})


class TestCoordinates:
    def test_round_trip_random(self, rng):
        g = random_volume(rng, origin=(3.0, -2.0, 10.0))
        ijk = rng.random((10, 3)) * 4
        world = voxel_to_world(g, ijk)
        back = world_to_voxel(g, world)
        np.testing.assert_allclose(back, ijk, atol=1e-12)

    def test_physical_positions(self):
        g = VolumeGrid(np.zeros((4, 4, 4), np.float32), (1.25, 1.25, 2.0), (5.0, 6.0, 7.0))
        np.testing.assert_allclose(voxel_to_world(g, (2, 1, 3)), [7.5, 7.25, 13.0])


class TestMgrid:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        vol = random_volume(rng, dims=(7, 3, 5), origin=(1.5, -4.25, 0.5))
        path = tmp_path / "v.mgrid"
        write_grid(vol, path)
        back = read_grid(path)
        assert isinstance(back, VolumeGrid)
        assert back.voxels.tobytes() == vol.voxels.tobytes()
        assert back.spacing == vol.spacing and back.origin == vol.origin

    def test_label_round_trip(self, rng, tmp_path):
        lab = random_labels(rng, dims=(4, 6, 3))
        path = tmp_path / "l.mgrid"
        write_grid(lab, path)
        back = read_grid(path)
        assert isinstance(back, LabelGrid)
        assert back.class_count == lab.class_count
        assert np.array_equal(back.labels, lab.labels)

    def test_write_is_deterministic(self, rng, tmp_path):
        vol = random_volume(rng)
        write_grid(vol, tmp_path / "a.mgrid")
        write_grid(vol, tmp_path / "b.mgrid")
        assert (tmp_path / "a.mgrid").read_bytes() == (tmp_path / "b.mgrid").read_bytes()

    def test_truncated_payload(self, tmp_path):
        header = {"magic": "MGRID", "version": 1, "kind": "f32",
                  "dims": [2, 2, 2], "spacing": [1, 1, 1], "origin": [0, 0, 0]}
        path = tmp_path / "bad.mgrid"
        payload = np.zeros(7, "<f4").tobytes()  # one float short
        path.write_bytes(json.dumps(header).encode() + b"\n" + payload)
        with pytest.raises(GridSizeError, match="28"):
            read_grid(path)

    def test_zero_spacing_names_field(self, tmp_path):
        header = {"magic": "MGRID", "version": 1, "kind": "f32",
                  "dims": [1, 1, 1], "spacing": [0, 1, 1], "origin": [0, 0, 0]}
        path = tmp_path / "bad.mgrid"
        path.write_bytes(json.dumps(header).encode() + b"\n" + np.zeros(1, "<f4").tobytes())
        with pytest.raises(GridFormatError, match="spacing"):
            read_grid(path)

    @pytest.mark.parametrize("field,value", [("magic", "NOPE"), ("kind", "f64"), ("version", 9)])
    def test_bad_header_fields(self, tmp_path, field, value):
        header = {"magic": "MGRID", "version": 1, "kind": "f32",
                  "dims": [1, 1, 1], "spacing": [1, 1, 1], "origin": [0, 0, 0]}
        header[field] = value
        path = tmp_path / "bad.mgrid"
        path.write_bytes(json.dumps(header).encode() + b"\n" + np.zeros(1, "<f4").tobytes())
        with pytest.raises(GridFormatError, match=field):
            read_grid(path)

    def test_not_json(self, tmp_path):
        path = tmp_path / "bad.mgrid"
        path.write_bytes(b"not json at all\n" + b"\x00" * 4)
        with pytest.raises(GridFormatError):
            read_grid(path)

    def test_landmark_json_round_trip(self, tmp_path):
        lm = LandmarkSet.from_positions(np.arange(18, dtype=float).reshape(6, 3))
        path = tmp_path / "lm.json"
        write_landmarks(lm, path)
        back = read_landmarks(path)
        assert back.points == lm.points


class TestResample:
    def test_identity_spacing(self, rng):
        vol = random_volume(rng, dims=(8, 7, 6))
        out = resample_trilinear(vol, vol.spacing)
        assert out.dims == vol.dims
        np.testing.assert_allclose(out.voxels, vol.voxels, atol=1e-6)

    def test_constant_field(self, rng):
        vol = VolumeGrid(np.full((6, 6, 6), 0.73, np.float32), (2.0, 2.0, 2.0))
        for spacing in [(1.0, 1.0, 1.0), (3.0, 2.5, 0.7), (2.0, 2.0, 5.0)]:
            out = resample_trilinear(vol, spacing)
            np.testing.assert_allclose(out.voxels, 0.73, atol=1e-6)

    def test_linear_ramp_halved_spacing(self):
        # expected values computed analytically: f(x) = x in mm along axis 0
        nx = 9
        ramp = np.tile(np.arange(nx, dtype=np.float32)[:, None, None] * 2.0, (1, 4, 4))
        vol = VolumeGrid(ramp, (2.0, 1.0, 1.0))
        out = resample_trilinear(vol, (1.0, 1.0, 1.0))
        assert out.dims[0] == 2 * (nx - 1) + 1
        expected = np.arange(out.dims[0], dtype=np.float64) * 1.0
        got = out.voxels[:, 1, 1]
        np.testing.assert_allclose(got, expected, atol=1e-5)

    def test_bad_spacing_rejected(self, rng):
        with pytest.raises(ValueError):
            resample_trilinear(random_volume(rng), (0.0, 1.0, 1.0))


class TestOneHotArgmax:
    def test_all_background(self):
        lab = LabelGrid(np.zeros((3, 3, 3), np.uint8), (1, 1, 1), class_count=5)
        p = one_hot(lab)
        assert p.channels == 5
        np.testing.assert_array_equal(p.probs[0], 1.0)
        np.testing.assert_array_equal(p.probs[1:], 0.0)

    def test_partition_of_unity(self, rng):
        lab = random_labels(rng, dims=(5, 4, 6))
        np.testing.assert_array_equal(one_hot(lab).probs.sum(axis=0), 1.0)

    def test_argmax_picks_max(self):
        probs = np.zeros((3, 1, 1, 1), np.float32)
        probs[:, 0, 0, 0] = [0.1, 0.7, 0.2]
        assert argmax_labels(ProbGrid(probs, (1, 1, 1))).labels[0, 0, 0] == 1

    def test_tie_breaks_low(self):
        probs = np.full((2, 1, 1, 1), 0.5, np.float32)
        assert argmax_labels(ProbGrid(probs, (1, 1, 1))).labels[0, 0, 0] == 0

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_inverse_pair(self, seed):
        rng = np.random.default_rng(seed)
        lab = random_labels(rng, dims=(4, 3, 5))
        back = argmax_labels(one_hot(lab))
        assert np.array_equal(back.labels, lab.labels)

    def test_needs_two_channels(self):
        with pytest.raises(ValueError):
            argmax_labels(ProbGrid(np.ones((1, 2, 2, 2), np.float32), (1, 1, 1)))
