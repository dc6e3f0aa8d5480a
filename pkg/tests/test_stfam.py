"""Deformable alignment, temporal fusion and the assembled aggregation module."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from vmatte.errors import InvalidInputError
from vmatte.stfam import STFAM, DeformableConv, GlobalConv, TemporalAlignment, TemporalFusion, check_stack, deform_conv


def _bilinear_zero(feature: np.ndarray, y: float, x: float) -> float:
    """Bilinear sample of a (H, W) map, zero outside"""
    height, width = feature.shape
    y0, x0 = math.floor(y), math.floor(x)
    value = 0.0
    for yy, wy in ((y0, 1.0 - (y - y0)), (y0 + 1, y - y0)):
        for xx, wx in ((x0, 1.0 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= yy < height and 0 <= xx < width:
                value += wy * wx * feature[yy, xx]
    return value


def _deform_loop(feature, offsets, weight, bias):
    """Scalar reference: out[o, y, x] = b[o] + sum w[o, c, i, j] F[c](y - p + i + dy, x - p + j + dx)"""
    out_ch, in_ch, k, _ = weight.shape
    _, height, width = feature.shape
    pad = k // 2
    out = np.zeros((out_ch, height, width))
    for o in range(out_ch):
        for y in range(height):
            for x in range(width):
                total = bias[o]
                for c in range(in_ch):
                    for i in range(k):
                        for j in range(k):
                            loc = i * k + j
                            dy, dx = offsets[2 * loc, y, x], offsets[2 * loc + 1, y, x]
                            total += weight[o, c, i, j] * _bilinear_zero(feature[c], y - pad + i + dy,
                                                                         x - pad + j + dx)
                out[o, y, x] = total
    return out


class TestDeformConv:

    def test_matches_scalar_loop(self, rng):
        for _ in range(5):
            k = int(rng.choice([1, 3]))
            feature = rng.standard_normal((2, 5, 6))
            offsets = rng.uniform(-2.0, 2.0, (2 * k * k, 5, 6))
            weight = rng.standard_normal((3, 2, k, k))
            bias = rng.standard_normal(3)
            got = deform_conv(*(torch.from_numpy(a) for a in (feature, offsets, weight, bias)))
            np.testing.assert_allclose(got.numpy(), _deform_loop(feature, offsets, weight, bias),
                                       rtol=1e-9, atol=1e-9)

    @pytest.mark.parametrize("k", [1, 3])
    def test_zero_offsets_is_plain_convolution(self, k):
        feature = torch.randn(2, 4, 7, 9, dtype=torch.float64)
        weight = torch.randn(5, 4, k, k, dtype=torch.float64)
        bias = torch.randn(5, dtype=torch.float64)
        offsets = torch.zeros(2, 2 * k * k, 7, 9, dtype=torch.float64)
        torch.testing.assert_close(deform_conv(feature, offsets, weight, bias),
                                   F.conv2d(feature, weight, bias, padding=k // 2))

    def test_gradcheck(self):
        gen = torch.Generator().manual_seed(3)
        feature = torch.randn(1, 2, 5, 5, dtype=torch.float64, generator=gen, requires_grad=True)
        offsets = (torch.rand(1, 18, 5, 5, dtype=torch.float64, generator=gen) * 2.0 - 1.0).requires_grad_()
        weight = torch.randn(2, 2, 3, 3, dtype=torch.float64, generator=gen, requires_grad=True)
        assert torch.autograd.gradcheck(lambda f, o, w: deform_conv(f, o, w), (feature, offsets, weight))

    def test_unbatched(self):
        feature = torch.randn(2, 4, 4)
        out = deform_conv(feature, torch.zeros(18, 4, 4), torch.randn(3, 2, 3, 3))
        assert out.shape == (3, 4, 4)

    def test_rejects_bad_inputs(self):
        feature = torch.randn(1, 2, 4, 4)
        with pytest.raises(InvalidInputError):
            deform_conv(feature, torch.zeros(1, 18, 4, 4), torch.randn(2, 2, 2, 2))
        with pytest.raises(InvalidInputError):
            deform_conv(feature, torch.zeros(1, 8, 4, 4), torch.randn(2, 2, 3, 3))
        nan_offsets = torch.zeros(1, 18, 4, 4)
        nan_offsets[0, 3, 1, 1] = float("nan")
        with pytest.raises(InvalidInputError):
            deform_conv(feature, nan_offsets, torch.randn(2, 2, 3, 3))
        with pytest.raises(InvalidInputError):
            DeformableConv(2, 2)(feature, nan_offsets)


class TestTemporalAlignment:

    @pytest.mark.parametrize("n", [0, 1, 2])
    def test_starts_as_plain_convolution(self, n):
        align = TemporalAlignment(4, n)
        stack = torch.randn(2, 2 * n + 1, 4, 6, 6)
        with torch.no_grad():
            aligned = align(stack)
            for i in range(2 * n + 1):
                expected = F.conv2d(stack[:, i], align.deform.weight, align.deform.bias, padding=1)
                torch.testing.assert_close(aligned[:, i], expected, atol=1e-5, rtol=1e-5)

    def test_offsets_start_at_zero(self):
        align = TemporalAlignment(4, 1)
        with torch.no_grad():
            for off in align.offsets(torch.randn(1, 3, 4, 5, 5)):
                assert off.shape == (1, 18, 5, 5)
                assert torch.count_nonzero(off) == 0

    def test_offsets_receive_gradient(self):
        align = TemporalAlignment(4, 1)
        with torch.no_grad():
            align.offset_heads[0][-1].bias.fill_(0.3)
        align(torch.randn(1, 3, 4, 5, 5)).square().sum().backward()
        assert torch.count_nonzero(align.offset_heads[0][-1].weight.grad) > 0

    def test_identical_frames_align_identically(self):
        align = TemporalAlignment(4, 2)
        frame = torch.randn(1, 4, 6, 6)
        with torch.no_grad():
            aligned = align(frame.unsqueeze(1).expand(-1, 5, -1, -1, -1).contiguous())
        for i in range(5):
            torch.testing.assert_close(aligned[:, i], aligned[:, 2], atol=0, rtol=0)

    def test_every_frame_receives_gradient(self):
        align = TemporalAlignment(2, 1).double()
        gen = torch.Generator().manual_seed(3)
        with torch.no_grad():
            for head in align.offset_heads:
                head[-1].weight.copy_(0.3 * torch.randn(head[-1].weight.shape, generator=gen))
                head[-1].bias.copy_(0.4 * torch.rand(head[-1].bias.shape, generator=gen) + 0.05)
        stack = torch.randn(1, 3, 2, 4, 4, dtype=torch.float64, generator=gen, requires_grad=True)
        # neighbour output 0 sees the target frame only through its offsets
        align(stack)[:, 0].sum().backward()
        assert stack.grad[:, 0].abs().sum() > 0
        assert stack.grad[:, 1].abs().sum() > 0
        assert torch.autograd.gradcheck(align, (stack.detach().requires_grad_(),), eps=1e-6, atol=1e-4)


class TestTemporalFusion:

    @pytest.mark.parametrize("mode", ["feature", "parameter"])
    def test_saturated_attention_reduces_to_projection(self, mode):
        fusion = TemporalFusion(3, 3, 5, gc_kernel=3, spatial=mode).double()
        with torch.no_grad():
            fusion.fc.weight.zero_()
            fusion.fc.bias.fill_(100.0)
            if mode == "feature":
                fusion.spatial.weight.zero_()
                fusion.spatial.bias.fill_(100.0)
            else:
                fusion.spatial_map.fill_(100.0)
            aligned = torch.randn(2, 3, 3, 6, 7, dtype=torch.float64)
            torch.testing.assert_close(fusion(aligned), fusion.project(aligned.flatten(1, 2)))

    def test_attention_ranges(self):
        fusion = TemporalFusion(2, 3, 4)
        x = torch.randn(2, 6, 5, 5)
        channel = fusion.channel_attention(x)
        spatial = fusion.spatial_attention(x)
        assert channel.shape == (2, 6, 1, 1) and spatial.shape == (2, 1, 5, 5)
        for att in (channel, spatial):
            assert ((att > 0) & (att < 1)).all()

    def test_unknown_spatial_mode(self):
        with pytest.raises(InvalidInputError):
            TemporalFusion(2, 3, 4, spatial="pooled")

    def test_global_conv_keeps_size(self):
        assert GlobalConv(3, 4, 7)(torch.randn(1, 3, 9, 11)).shape == (1, 4, 9, 11)


class TestSTFAM:

    @pytest.mark.parametrize("n", [0, 1, 2])
    @pytest.mark.parametrize("use_tfa,use_tff", [(False, False), (True, False), (True, True)])
    def test_output_shape(self, n, use_tfa, use_tff):
        module = STFAM(6, 4, n, use_tfa=use_tfa, use_tff=use_tff, gc_kernel=3)
        out = module(torch.randn(2, 2 * n + 1, 6, 8, 10))
        assert out.shape == (2, 4, 8, 10)

    def test_parameter_spatial_mode(self):
        module = STFAM(6, 4, 1, gc_kernel=3, spatial_attention="parameter")
        assert module(torch.randn(1, 3, 6, 12, 9)).shape == (1, 4, 12, 9)

    def test_finite_on_large_inputs(self):
        module = STFAM(6, 4, 2, gc_kernel=3)
        stack = torch.empty(2, 5, 6, 8, 8).uniform_(-10.0, 10.0)
        with torch.no_grad():
            assert torch.isfinite(module(stack)).all()

    def test_stack_checks(self):
        module = STFAM(6, 4, 1)
        with pytest.raises(InvalidInputError):
            module(torch.randn(1, 4, 6, 8, 8))
        with pytest.raises(InvalidInputError):
            module(torch.randn(1, 5, 6, 8, 8))
        with pytest.raises(InvalidInputError):
            module(torch.randn(6, 8, 8))
        assert check_stack(torch.randn(1, 5, 2, 3, 3)) == 2
