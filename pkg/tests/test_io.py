"""PNG sequences, trimap codes, motion files and manifests."""

import json

import cv2
import numpy as np
import pytest

from vmatte.errors import FormatError, InvalidInputError
from vmatte.io import (TRIMAP_CODES, read_alpha_frames, read_frames, read_manifest, read_motion, read_trimap,
                       read_trimaps, validate_manifest, write_alpha_frames, write_frames, write_motion,
                       write_trimap, write_trimaps)
from vmatte.types import MotionField, Trimap


class TestFrames:

    def test_round_trip_on_grid_is_exact(self, sample, tmp_path):
        write_frames(tmp_path, sample.bg.frames)
        np.testing.assert_array_equal(read_frames(tmp_path).frames, sample.bg.frames)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(InvalidInputError):
            read_frames(tmp_path / "nope")

    def test_empty_directory(self, tmp_path):
        with pytest.raises(InvalidInputError):
            read_frames(tmp_path)


class TestAlpha:

    def test_sixteen_bit_precision(self, rng, tmp_path):
        alpha = rng.uniform(0.0, 1.0, size=(2, 6, 7)).astype(np.float32)
        paths = write_alpha_frames(tmp_path, alpha, bits=16)
        assert cv2.imread(str(paths[0]), cv2.IMREAD_UNCHANGED).dtype == np.uint16
        back = read_alpha_frames(tmp_path).frames
        assert np.abs(back - alpha).max() <= 0.5 / 65535.0 + 1e-7

    def test_eight_bit(self, sample, tmp_path):
        write_alpha_frames(tmp_path, sample.alpha.frames, bits=8)
        np.testing.assert_array_equal(read_alpha_frames(tmp_path).frames, sample.alpha.frames)

    def test_bad_depth(self, tmp_path):
        with pytest.raises(InvalidInputError):
            write_alpha_frames(tmp_path, np.zeros((1, 2, 2)), bits=12)


class TestTrimapFiles:

    def test_codes(self, tmp_path):
        trimap = Trimap(np.array([[0, 1, 2]]))
        path = write_trimap(tmp_path / "t.png", trimap)
        np.testing.assert_array_equal(cv2.imread(str(path), cv2.IMREAD_UNCHANGED), [[0, 128, 255]])
        np.testing.assert_array_equal(read_trimap(path).map, trimap.map)
        assert list(TRIMAP_CODES) == [0, 128, 255]

    def test_foreign_value_rejected(self, tmp_path):
        cv2.imwrite(str(tmp_path / "frame_00000.png"), np.full((3, 3), 7, np.uint8))
        with pytest.raises(FormatError):
            read_trimap(tmp_path / "frame_00000.png")

    def test_indexed_by_file_name(self, trimaps, tmp_path):
        write_trimaps(tmp_path, trimaps[:2], indices=[0, 4])
        found = read_trimaps(tmp_path)
        assert sorted(found) == [0, 4]
        np.testing.assert_array_equal(found[4].map, trimaps[1].map)


class TestMotion:

    def test_round_trip_is_bitwise(self, sample, tmp_path):
        path = write_motion(tmp_path / "motion.bin", sample.motion)
        np.testing.assert_array_equal(read_motion(path).vectors, sample.motion.vectors)
        pairs, height, width = sample.motion.vectors.shape[:3]
        assert path.stat().st_size == pairs * (8 + height * width * 2 * 4)

    def test_truncated_file(self, sample, tmp_path):
        path = write_motion(tmp_path / "motion.bin", sample.motion)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            read_motion(path)

    def test_empty_file_means_single_frame(self, tmp_path):
        path = write_motion(tmp_path / "motion.bin", MotionField(np.zeros((0, 2, 2, 2))))
        assert len(read_motion(path)) == 0


class TestManifest:

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(InvalidInputError):
            read_manifest(tmp_path)

    def test_invalid_json(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(FormatError):
            read_manifest(tmp_path)

    @pytest.mark.parametrize("manifest", [
        [],
        {"version": 1, "seed": 0, "config": {}},
        {"version": 2, "seed": 0, "config": {}, "samples": []},
        {"version": 1, "seed": 0, "config": {}, "samples": [{"name": "x"}]},
    ])
    def test_structure_checked(self, manifest):
        with pytest.raises(FormatError):
            validate_manifest(json.loads(json.dumps(manifest)))
