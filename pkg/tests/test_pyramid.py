"""Feature pyramid: path structure, literal weight sharing, fusion-by-sum."""

import numpy as np
import pytest

from cloudseg.pyramid import FeaturePyramid, PointwiseNeck
from cloudseg.tensor import ShapeError, Tensor


def make_pyramid(cin=8, inner=4, out=6, rates=(6, 12, 18), seed=0):
    return FeaturePyramid(cin, inner, out, rates, rng=np.random.default_rng(seed))


class TestSharedDilatedBlock:
    def test_spatial_size_preserved_for_every_rate(self):
        fpm = make_pyramid().train(False)
        x = Tensor(np.random.default_rng(0).standard_normal((1, 8, 12, 12)).astype(np.float32))
        for blk in fpm.sd_blocks:
            assert blk(x).shape == (1, 4, 12, 12)

    def test_zero_dilated_conv_leaves_shared_plus_residual(self):
        fpm = make_pyramid(seed=1).train(False)
        blk = fpm.sd_blocks[1]
        blk.dilated.conv.weight.data[:] = 0.0
        x = Tensor(np.random.default_rng(2).standard_normal((1, 8, 10, 10)).astype(np.float32))
        t = blk.reduce(x)
        u = fpm.shared_conv(t)
        out = blk(x)
        np.testing.assert_allclose(out.data, (u + t).data, atol=1e-6)

    def test_shared_conv_weights_counted_once(self):
        inner, cin = 4, 8
        fpm = make_pyramid(cin=cin, inner=inner)
        pw = cin * inner + 2 * inner            # reduce conv + its bn affine
        dc = 9 * inner * inner + 2 * inner      # dilated conv + bn
        sc = 9 * inner * inner + 2 * inner      # the one shared conv + bn
        gap = cin * inner + inner               # biased pointwise, no bn
        pointwise = cin * inner + 2 * inner
        fuse = 5 * inner * fpm.out_channels + 2 * fpm.out_channels
        expected = gap + pointwise + 3 * (pw + dc) + sc + fuse
        assert fpm.param_count() == expected
        independent = gap + pointwise + 3 * (pw + dc + sc) + fuse
        assert fpm.param_count() < independent

    def test_mutating_shared_conv_changes_all_three_outputs(self):
        fpm = make_pyramid(seed=3).train(False)
        x = Tensor(np.random.default_rng(4).standard_normal((1, 8, 10, 10)).astype(np.float32))
        before = [blk(x).data.copy() for blk in fpm.sd_blocks]
        fpm.shared_conv.conv.weight.data += 0.5
        after = [blk(x).data for blk in fpm.sd_blocks]
        for b, a in zip(before, after):
            assert np.abs(a - b).max() > 1e-4


class TestFeaturePyramid:
    def test_fuse_input_channels(self):
        fpm = make_pyramid(inner=4)
        assert fpm.fuse.conv.in_channels == 5 * 4

    def test_constant_input_constant_interior(self):
        # zero padding makes a ring of width max(rates) non-constant; inside
        # it every path sees identical windows
        fpm = make_pyramid(seed=5).train(False)
        x = Tensor(np.full((1, 8, 48, 48), 0.3, dtype=np.float32))
        # ring width: dilated reach (18) + the shared 3x3 conv's own ring (1)
        out = fpm(x).data[:, :, 19:-19, 19:-19]
        spread = out.max(axis=(0, 2, 3)) - out.min(axis=(0, 2, 3))
        np.testing.assert_allclose(spread, 0.0, atol=1e-5)

    def test_output_shape_keeps_stride(self):
        fpm = make_pyramid(out=6).train(False)
        x = Tensor(np.random.default_rng(6).standard_normal((2, 8, 12, 12)).astype(np.float32))
        assert fpm(x).shape == (2, 6, 12, 12)

    def test_progressive_fusion_adds_no_parameters(self):
        """Fusing by running sums must cost nothing over plain concatenation."""
        class PlainConcat(FeaturePyramid):
            def forward(self, x):
                from cloudseg.tensor import concat, global_avg_pool, relu6
                pooled = relu6(self.gap_proj(global_avg_pool(x)))
                ones = Tensor(np.ones((1, 1, x.shape[2], x.shape[3]), dtype=np.float32))
                paths = [pooled * ones, self.pointwise(x)] + [b(x) for b in self.sd_blocks]
                return self.fuse(concat(paths, axis=1))

        fused = make_pyramid(seed=7)
        plain = PlainConcat(8, 4, 6, (6, 12, 18), rng=np.random.default_rng(7))
        assert fused.param_count() == plain.param_count()

    def test_rates_must_increase(self):
        with pytest.raises(ShapeError, match="increasing"):
            make_pyramid(rates=(6, 6, 12))

    def test_pointwise_neck_shape(self):
        neck = PointwiseNeck(8, 6).train(False)
        x = Tensor(np.zeros((1, 8, 5, 5), dtype=np.float32))
        assert neck(x).shape == (1, 6, 5, 5)
