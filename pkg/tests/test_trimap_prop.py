"""Encoder geometry, the correlation layer and trimap propagation."""

import numpy as np
import pytest
import torch

from conftest import tiny_encoder, tiny_trimap
from vmatte.config import EncoderConfig, TrimapNetConfig
from vmatte.encoder import ResidualEncoder, pad_to_multiple, skip_plan, trimap_channel
from vmatte.errors import InvalidInputError
from vmatte.trimap_prop import CorrelationLayer, TrimapPropagationNet, labeled_frames, pick_reference, propagate_clip
from vmatte.types import Trimap


class TestEncoder:

    @pytest.mark.parametrize("config", [EncoderConfig.matting("toy"), EncoderConfig.matting("paper"),
                                        EncoderConfig.trimap("paper")])
    @pytest.mark.parametrize("size", [64, 96])
    def test_stage_shapes(self, config, size):
        encoder = ResidualEncoder(4, config).eval()
        with torch.no_grad():
            features = encoder(torch.rand(1, 4, size, size))
        assert [f.shape[1] for f in features] == list(config.widths)
        assert [f.shape[-1] for f in features] == [size // s for s in config.stage_strides]

    def test_zeroed_stem_channel(self):
        encoder = ResidualEncoder(4, tiny_encoder(), zero_channels=(3,))
        assert torch.count_nonzero(encoder.stem[0].weight[:, 3]) == 0
        assert torch.count_nonzero(encoder.stem[0].weight[:, :3]) > 0

    def test_receptive_window_grows_with_depth(self):
        encoder = ResidualEncoder(3, tiny_encoder())
        shallow = encoder.receptive_window(0, stage=0)
        deep = encoder.receptive_window(0, stage=1)
        assert deep[1] - deep[0] > shallow[1] - shallow[0]
        lo, hi = encoder.receptive_window(3, stage=1)
        assert lo <= 3 * 4 <= hi

    def test_skip_plan(self):
        assert skip_plan(tiny_encoder()) == [0, None]
        assert skip_plan(EncoderConfig.matting("paper")) == [2, 1, 0, None, None]
        assert skip_plan(EncoderConfig.trimap("paper")) == [1, 0, None, None]

    def test_pad_to_multiple(self):
        x = torch.arange(2 * 5 * 6, dtype=torch.float32).reshape(1, 2, 1, 5, 6)
        padded, size = pad_to_multiple(x, 4)
        assert size == (5, 6)
        assert padded.shape == (1, 2, 1, 8, 8)
        assert torch.equal(padded[..., :5, :6], x)
        assert torch.equal(padded[..., 7, :6], x[..., 4, :])

    def test_trimap_channel(self):
        channel = trimap_channel(torch.tensor([[0, 1, 2]]))
        assert channel.shape == (1, 1, 3)
        assert channel.tolist() == [[[0.0, 0.5, 1.0]]]

    @pytest.mark.parametrize("stage", [0, 1])
    @pytest.mark.parametrize("in_channels", [3, 4])
    def test_change_stays_inside_receptive_window(self, stage, in_channels):
        encoder = ResidualEncoder(in_channels, tiny_encoder()).eval()
        x = torch.rand(1, in_channels, 32, 32)
        bumped = x.clone()
        py, px = 13, 20
        bumped[0, :, py, px] += 1.0
        with torch.no_grad():
            before, after = encoder(x)[stage], encoder(bumped)[stage]
        diff = (after - before).abs().amax(dim=1)[0]
        size = diff.shape[-1]

        def covers(pixel):
            return torch.tensor([lo <= pixel <= hi for lo, hi in (encoder.receptive_window(i, stage)
                                                                  for i in range(size))])

        inside = covers(py)[:, None] & covers(px)[None, :]
        assert not inside.all()
        assert diff[~inside].max() <= 1e-5
        assert diff[inside].max() > 1e-3

    def test_eval_mode_is_deterministic(self):
        encoder = ResidualEncoder(4, tiny_encoder()).eval()
        x = torch.rand(1, 4, 16, 16)
        with torch.no_grad():
            first, second = encoder(x), encoder(x)
        for a, b in zip(first, second):
            assert torch.equal(a, b)


class TestCorrelationLayer:

    def test_rows_are_stochastic(self):
        layer = CorrelationLayer(8, 4)
        target, reference = torch.rand(2, 8, 5, 6), torch.rand(2, 8, 3, 4)
        sim = layer.similarity(target, reference)
        assert sim.shape == (2, 30, 12)
        torch.testing.assert_close(sim.sum(-1), torch.ones(2, 30), atol=1e-5, rtol=0)

    def test_self_correlation_matches_identity(self):
        channels = side = 4
        layer = CorrelationLayer(channels * channels)
        with torch.no_grad():
            eye = torch.eye(channels * channels)[..., None, None]
            for conv in (layer.query, layer.key):
                conv.weight.copy_(eye)
                conv.bias.zero_()
        gen = torch.Generator().manual_seed(0)
        for _ in range(20):
            # one-hot codes at a random permutation of positions plus small noise
            perm = torch.randperm(side * side, generator=gen)
            codes = torch.eye(side * side)[perm].T.reshape(1, side * side, side, side) * 10.0
            codes = codes + 0.1 * torch.rand(codes.shape, generator=gen)
            sim = layer.similarity(codes, codes)
            assert torch.equal(sim[0].argmax(-1), torch.arange(side * side))

    def test_output_is_residual(self):
        layer = CorrelationLayer(6)
        target, reference, memory = torch.rand(1, 6, 4, 4), torch.rand(1, 6, 4, 4), torch.rand(1, 6, 4, 4)
        out, _ = layer(target, reference, memory)
        read, _ = layer.attend(target, reference, memory)
        torch.testing.assert_close(out, target + read)

    def test_shape_mismatch(self):
        layer = CorrelationLayer(6)
        with pytest.raises(InvalidInputError):
            layer(torch.rand(1, 6, 4, 4), torch.rand(1, 5, 4, 4), torch.rand(1, 6, 4, 4))

    def test_permutation_equivariance(self):
        layer = CorrelationLayer(6, 4).double()
        gen = torch.Generator().manual_seed(1)
        target, reference, memory = (torch.randn(1, 6, 3, 4, dtype=torch.float64, generator=gen) for _ in range(3))
        perm = torch.randperm(12, generator=gen)

        def shuffle(x):
            return x.flatten(2)[..., perm].reshape(x.shape)

        with torch.no_grad():
            out, sim = layer(target, reference, memory)
            # permuting reference locations permutes the columns of S and leaves the read-out unchanged
            moved_out, moved_sim = layer(target, shuffle(reference), shuffle(memory))
            torch.testing.assert_close(moved_sim, sim[..., perm])
            torch.testing.assert_close(moved_out, out)
            # permuting target locations permutes the rows and the output
            rows_out, rows_sim = layer(shuffle(target), reference, memory)
            torch.testing.assert_close(rows_sim, sim[:, perm])
            torch.testing.assert_close(rows_out, shuffle(out))

    def test_zero_value_projection_returns_target(self):
        layer = CorrelationLayer(6)
        with torch.no_grad():
            layer.value.weight.zero_()
            layer.value.bias.zero_()
        target = torch.rand(1, 6, 4, 4)
        out, _ = layer(target, torch.rand(1, 6, 4, 4), torch.rand(1, 6, 4, 4))
        assert torch.equal(out, target)


class TestPropagationNet:

    @pytest.mark.parametrize("size", [(32, 32), (30, 45)])
    def test_logit_shape(self, size):
        net = TrimapPropagationNet(tiny_trimap()).eval()
        image = torch.rand(2, 3, *size)
        trimap = torch.randint(0, 3, (2, *size))
        with torch.no_grad():
            logits = net(image, trimap, torch.rand(2, 3, *size))
        assert logits.shape == (2, 3, *size)

    def test_paper_preset_shape(self):
        net = TrimapPropagationNet(TrimapNetConfig.preset("paper")).eval()
        with torch.no_grad():
            logits = net(torch.rand(1, 3, 64, 64), torch.randint(0, 3, (1, 64, 64)), torch.rand(1, 3, 64, 64))
        assert logits.shape == (1, 3, 64, 64)

    def test_size_mismatch(self):
        net = TrimapPropagationNet(tiny_trimap())
        with pytest.raises(InvalidInputError):
            net(torch.rand(1, 3, 16, 16), torch.zeros(1, 16, 16), torch.rand(1, 3, 24, 24))

    def test_gradient_reaches_both_encoders(self):
        net = TrimapPropagationNet(tiny_trimap()).train()
        image, target = torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
        trimap = torch.randint(0, 3, (2, 32, 32))
        logits = net(image, trimap, target)
        torch.nn.functional.cross_entropy(logits, torch.randint(0, 3, (2, 32, 32))).backward()
        for encoder in (net.reference_encoder, net.target_encoder):
            norm = sum(p.grad.norm() for p in encoder.parameters() if p.grad is not None)
            assert norm > 0
            assert encoder.stem[0].weight.grad.abs().sum() > 0

    def test_eval_mode_is_deterministic(self):
        net = TrimapPropagationNet(tiny_trimap()).eval()
        image, trimap = torch.rand(1, 3, 32, 32), torch.randint(0, 3, (1, 32, 32))
        with torch.no_grad():
            assert torch.equal(net(image, trimap, image), net(image, trimap, image))

    def test_full_setting_copies_inputs(self, sample, trimaps):
        net = TrimapPropagationNet(tiny_trimap())
        out = propagate_clip(net, sample.composite, dict(enumerate(trimaps)))
        for got, expected in zip(out, trimaps):
            np.testing.assert_array_equal(got.map, expected.map)

    def test_one_trimap_propagates_the_rest(self, sample, trimaps):
        net = TrimapPropagationNet(tiny_trimap())
        out = propagate_clip(net, sample.composite, {0: trimaps[0]})
        assert len(out) == len(sample)
        for trimap in out:
            assert trimap.shape == sample.composite.size
            assert set(np.unique(trimap.map)) <= {0, 1, 2}

    def test_labeled_frame_outside_clip(self, sample, trimaps):
        with pytest.raises(InvalidInputError):
            propagate_clip(TrimapPropagationNet(tiny_trimap()), sample.composite, {9: trimaps[0]})

    def test_mismatched_trimap(self, sample):
        with pytest.raises(InvalidInputError):
            propagate_clip(TrimapPropagationNet(tiny_trimap()), sample.composite, {0: Trimap(np.zeros((4, 4)))})


class TestReferenceSelection:

    def test_nearest_and_ties(self):
        assert pick_reference(5, {0, 8}) == 8
        assert pick_reference(4, {0, 8}) == 0
        assert pick_reference(3, [3]) == 3
        assert pick_reference(9, {0, 20}) == 0

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            pick_reference(1, set())

    def test_settings(self):
        assert labeled_frames("full", 4) == {0, 1, 2, 3}
        assert labeled_frames("1-trimap", 9) == {0}
        assert labeled_frames("20-frame", 45) == {0, 20, 40}
        assert labeled_frames("N-frame", 7, every=3) == {0, 3, 6}
        assert len(labeled_frames("1-trimap", 9)) == 1

    @pytest.mark.parametrize("setting", ["sometimes", "N-frame", "0-frame"])
    def test_bad_settings(self, setting):
        with pytest.raises(InvalidInputError):
            labeled_frames(setting, 5)
