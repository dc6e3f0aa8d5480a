"""Compositing, tracks, motion, trimaps and training cubes."""

import numpy as np
import pytest

from vmatte.compositor import (VelocityCaps, composite, crop_cube, derive_seed, generate_sample, generate_track,
                               make_trimap, motion_from_track, quantize_8bit, sample_trimaps, synthesize,
                               window_indices)
from vmatte.config import SynthConfig
from vmatte.errors import InvalidInputError, SkipSample
from vmatte.io import read_frames, write_frames
from vmatte.types import BACKGROUND, FOREGROUND, UNKNOWN, AffineTrack, Clip, Trimap


class TestCompositingEquation:

    def test_samples_satisfy_equation_exactly(self):
        config = SynthConfig(frames=3, size=24)
        for index in range(100):
            s = generate_sample(index, config, seed=3)
            a = s.alpha.frames[..., None]
            expected = np.clip(a * s.fg.frames + (1.0 - a) * s.bg.frames, 0.0, 1.0)
            assert np.abs(s.composite.frames - expected).max() == 0.0

    def test_eight_bit_round_trip(self, sample, tmp_path):
        write_frames(tmp_path / "composite", sample.composite.frames)
        back = read_frames(tmp_path / "composite")
        assert np.abs(back.frames - sample.composite.frames).max() <= 1.0 / 255.0 + 1e-6

    def test_quantized_components_on_grid(self, sample):
        for frames in (sample.fg.frames, sample.bg.frames, sample.alpha.frames):
            np.testing.assert_array_equal(quantize_8bit(frames), frames)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            composite(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), np.zeros((4, 4)))

    def test_alpha_out_of_range_rejected(self):
        with pytest.raises(InvalidInputError):
            composite(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.full((2, 2), 1.5))


class TestTracksAndMotion:

    def test_velocity_caps_and_scale_range(self):
        config = SynthConfig()
        caps = VelocityCaps(2.0, 0.02, 0.01)
        track = generate_track(40, caps, 11, config)
        assert len(track) == 40
        assert np.abs(np.diff(track.translation, axis=0)).max() <= caps.translation + 1e-9
        assert np.abs(np.diff(track.rotation)).max() <= caps.rotation + 1e-9
        assert np.abs(np.diff(track.scale)).max() <= caps.scale + 1e-9
        assert track.scale.min() >= config.scale_min and track.scale.max() <= config.scale_max

    def test_motion_follows_foreground_points(self):
        track = generate_track(4, VelocityCaps(2.0, 0.02, 0.01), 5, SynthConfig())
        height, width = 20, 30
        motion = motion_from_track(track, height, width)
        assert motion.vectors.shape == (3, height, width, 2)
        center = ((width - 1) / 2.0, (height - 1) / 2.0)
        q = np.array([12.0, 7.0, 1.0])
        for t in range(3):
            p = track.matrix(t, center) @ q
            p_next = track.matrix(t + 1, center) @ q
            # vectors live on the integer pixel grid
            x, y = int(round(p[0])), int(round(p[1]))
            step = track.matrix(t + 1, center) @ np.linalg.inv(track.matrix(t, center))
            moved = step @ np.array([x, y, 1.0])
            np.testing.assert_allclose(motion.vectors[t, y, x], moved[:2] - [x, y], atol=1e-4)
            np.testing.assert_allclose(step @ p, p_next, atol=1e-9)

    def test_single_frame_has_no_motion(self):
        track = AffineTrack([[0.0, 0.0]], [0.0], [1.0])
        assert len(motion_from_track(track, 4, 4)) == 0

    def test_bad_scale_rejected(self):
        with pytest.raises(InvalidInputError):
            AffineTrack([[0.0, 0.0]], [0.0], [0.0])

    def test_same_seed_same_track(self):
        caps = VelocityCaps(2.0, 0.02, 0.01)
        a = generate_track(12, caps, 4, SynthConfig())
        b = generate_track(12, caps, 4, SynthConfig())
        np.testing.assert_array_equal(a.translation, b.translation)
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.scale, b.scale)

    def test_zero_caps_hold_the_pose(self):
        track = generate_track(10, VelocityCaps(0.0, 0.0, 0.0), 8, SynthConfig())
        assert (track.translation == track.translation[0]).all()
        assert (track.rotation == track.rotation[0]).all()
        assert (track.scale == track.scale[0]).all()

    def test_single_frame_track(self):
        track = generate_track(1, VelocityCaps(2.0, 0.02, 0.01), 3, SynthConfig())
        assert len(track) == 1
        assert len(motion_from_track(track, 8, 8)) == 0

    def test_translation_gives_constant_motion(self):
        track = AffineTrack([[0.0, 0.0], [2.0, -1.0], [2.5, 3.0]], [0.3, 0.3, 0.3], [1.2, 1.2, 1.2])
        motion = motion_from_track(track, 12, 15)
        np.testing.assert_allclose(motion.vectors[0], np.broadcast_to([2.0, -1.0], (12, 15, 2)), atol=1e-5)
        np.testing.assert_allclose(motion.vectors[1], np.broadcast_to([0.5, 4.0], (12, 15, 2)), atol=1e-5)

    def test_transparent_foreground_leaves_background(self, rng):
        bg = Clip(quantize_8bit(rng.random((3, 10, 12, 3)).astype(np.float32)))
        fg = rng.random((10, 12, 3)).astype(np.float32)
        identity = AffineTrack(np.zeros((3, 2)), np.zeros(3), np.ones(3))
        result = synthesize(fg, np.zeros((10, 12), np.float32), bg, identity)
        np.testing.assert_array_equal(result.composite.frames, bg.frames)
        assert (result.motion.vectors == 0).all()


class TestTrimaps:

    def test_soft_pixels_always_unknown(self, sample):
        alpha = sample.alpha.frames[0]
        for kernel, iterations in ((1, 0), (2, 1), (3, 4)):
            trimap = make_trimap(alpha, kernel, iterations)
            soft = (alpha > 0) & (alpha < 1)
            assert (trimap.map[soft] == UNKNOWN).all()

    def test_identity_kernel_keeps_hard_pixels(self):
        alpha = np.zeros((8, 8), np.float32)
        alpha[2:6, 2:6] = 1.0
        alpha[2, 2] = 0.5
        trimap = make_trimap(alpha, 1, 5)
        assert trimap.map[4, 4] == FOREGROUND
        assert trimap.map[0, 0] == BACKGROUND
        assert trimap.map[2, 2] == UNKNOWN
        assert (trimap.map == UNKNOWN).sum() == 1

    def test_band_grows_with_iterations(self, sample):
        alpha = sample.alpha.frames[0]
        widths = [make_trimap(alpha, 2, it).unknown.sum() for it in (0, 1, 3, 6)]
        assert widths == sorted(widths)
        assert widths[-1] > widths[0]

    def test_empty_alpha_is_background(self):
        trimap = make_trimap(np.zeros((6, 6)), 3, 4)
        assert (trimap.map == BACKGROUND).all()

    def test_bad_parameters_rejected(self):
        with pytest.raises(InvalidInputError):
            make_trimap(np.zeros((4, 4)), 0, 1)

    def test_invalid_class_rejected(self):
        with pytest.raises(InvalidInputError):
            Trimap(np.full((2, 2), 3))

    @staticmethod
    def _morphology(mask, reach, iterations, op):
        # square neighbourhood of half-width `reach`, out-of-frame pixels ignored
        out = mask.astype(bool)
        height, width = out.shape
        for _ in range(iterations):
            prev = out.copy()
            for y in range(height):
                for x in range(width):
                    window = prev[max(y - reach, 0):y + reach + 1, max(x - reach, 0):x + reach + 1]
                    out[y, x] = op(window)
        return out

    def _oracle(self, alpha, kernel, iterations):
        support = self._morphology(alpha > 0, kernel - 1, iterations, np.any)
        fg = self._morphology(alpha >= 1, kernel - 1, iterations, np.all)
        expected = np.full(alpha.shape, UNKNOWN, np.uint8)
        expected[~support] = BACKGROUND
        expected[fg] = FOREGROUND
        return expected

    def test_single_soft_pixel_block(self):
        alpha = np.zeros((21, 21), np.float32)
        alpha[10, 10] = 0.5
        trimap = make_trimap(alpha, 3, 2)
        assert trimap.unknown.sum() == 81
        assert trimap.unknown[6:15, 6:15].all()
        np.testing.assert_array_equal(trimap.map, self._oracle(alpha, 3, 2))

    @pytest.mark.parametrize("kernel,iterations", [(1, 3), (2, 1), (2, 3), (3, 2), (4, 1)])
    def test_matches_brute_force_morphology(self, rng, kernel, iterations):
        alpha = rng.choice(np.array([0.0, 0.5, 1.0], np.float32), size=(14, 17), p=[0.45, 0.1, 0.45])
        trimap = make_trimap(alpha, kernel, iterations)
        np.testing.assert_array_equal(trimap.map, self._oracle(alpha, kernel, iterations))

    def test_hard_pixels_never_flip_class(self, rng):
        for _ in range(50):
            alpha = rng.choice(np.array([0.0, 0.3, 1.0], np.float32), size=(16, 16))
            trimap = make_trimap(alpha, int(rng.integers(1, 6)), int(rng.integers(0, 5)))
            assert not (trimap.map[alpha == 0] == FOREGROUND).any()
            assert not (trimap.map[alpha == 1] == BACKGROUND).any()


class TestCubes:

    def test_window_replicates_ends(self):
        assert window_indices(0, 2, 5) == (0, 0, 0, 1, 2)
        assert window_indices(4, 2, 5) == (2, 3, 4, 4, 4)
        assert window_indices(0, 2, 1) == (0, 0, 0, 0, 0)

    def test_cube_shapes_and_consistency(self, sample, trimaps):
        cube = crop_cube(sample, trimaps, 2, 1, 16, 3, scales=(16, 24), targets=2)
        assert cube.composite.shape == (4, 16, 16, 3)
        assert cube.alpha.shape == (4, 16, 16)
        assert cube.trimap.shape == (4, 16, 16)
        assert cube.n == 1 and cube.target_slice == slice(1, 3)
        assert cube.frame_indices == (1, 2, 3, 4)
        np.testing.assert_array_equal(cube.composite, composite(cube.fg, cube.bg, cube.alpha))
        assert set(np.unique(cube.trimap)) <= {0, 1, 2}

    def test_cube_centred_on_unknown_pixel(self, sample, trimaps):
        cube = crop_cube(sample, trimaps, 1, 1, 24, 9, scales=(24,))
        cy, cx = cube.center
        assert trimaps[1].map[cy, cx] == UNKNOWN

    def test_cube_is_seeded(self, sample, trimaps):
        a = crop_cube(sample, trimaps, 2, 1, 16, 21, scales=(16, 24))
        b = crop_cube(sample, trimaps, 2, 1, 16, 21, scales=(16, 24))
        np.testing.assert_array_equal(a.composite, b.composite)
        assert a.center == b.center and a.flipped == b.flipped

    def test_flip_mirrors_every_frame(self, sample, trimaps):
        plain = crop_cube(sample, trimaps, 2, 1, 24, 5, scales=(24,), flip_prob=0.0)
        flipped = crop_cube(sample, trimaps, 2, 1, 24, 5, scales=(24,), flip_prob=1.0)
        assert flipped.flipped and not plain.flipped
        np.testing.assert_array_equal(flipped.alpha, plain.alpha[:, :, ::-1])

    def test_no_unknown_pixel_skips(self, sample):
        blank = [Trimap(np.zeros(sample.composite.size, np.uint8)) for _ in range(len(sample))]
        with pytest.raises(SkipSample):
            crop_cube(sample, blank, 2, 1, 16, 0)

    def test_short_clip_rejected(self, sample, trimaps):
        with pytest.raises(InvalidInputError):
            crop_cube(sample, trimaps, 0, 3, 16, 0)

    def test_crop_scales_drawn_uniformly(self, sample, trimaps):
        rng = np.random.default_rng(42)
        scales = (8, 16, 24)
        sides = [crop_cube(sample, trimaps, 2, 0, 8, rng, scales=scales).crop_side for _ in range(10_000)]
        for side in scales:
            assert abs(sides.count(side) / len(sides) - 1 / 3) < 0.05

    def test_targets_checked_before_drawing(self, sample, trimaps):
        rng = np.random.default_rng(5)
        with pytest.raises(InvalidInputError):
            crop_cube(sample, trimaps, 2, 1, 16, rng, targets=0)
        assert rng.random() == np.random.default_rng(5).random()


class TestSeeding:

    def test_derive_seed_is_stable(self):
        assert derive_seed(1, 2) == derive_seed(1, 2)
        assert derive_seed(1, 2) != derive_seed(2, 1)

    def test_sample_depends_only_on_seed_and_index(self, synth_config):
        a = generate_sample(3, synth_config, seed=1)
        b = generate_sample(3, synth_config, seed=1)
        c = generate_sample(4, synth_config, seed=1)
        np.testing.assert_array_equal(a.composite.frames, b.composite.frames)
        np.testing.assert_array_equal(a.motion.vectors, b.motion.vectors)
        assert not np.array_equal(a.composite.frames, c.composite.frames)

    def test_sample_trimaps_one_per_frame(self, sample):
        assert len(sample_trimaps(sample, 2, 2)) == len(sample)
