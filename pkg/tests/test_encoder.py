"""Encoder construction, scale geometry, dense equivalence and leakage."""

import numpy as np
import pytest

from spmim.encoder import EncoderConfig, StageSpec, build_encoder
from spmim.errors import ConfigError, GeometryError
from spmim.masking import build_mask_pyramid, sample_mask, stack_pyramids
from spmim.tensor import Tensor, no_grad


def tiny_config(stem=8, widths=(16, 24, 32, 48), expansion=2.0):
    """Five total reductions: stride-2 stem plus four stride-2 stages."""
    return EncoderConfig(
        stem_channels=stem,
        stem_stride=2,
        stages=tuple(StageSpec(w, stride=2, expansion=expansion) for w in widths),
    )


def toy_pyramid(h, w, ratio, seed, depth=5):
    grid = sample_mask(h // 2 ** depth, w // 2 ** depth, ratio, seed)
    return build_mask_pyramid(grid, h, w, depth=depth)


class TestConfig:
    def test_default_ratio_is_32(self):
        cfg = EncoderConfig()
        assert cfg.downsample_ratio == 32
        assert cfg.depth == 5

    def test_spec_style_stem1_five_stages(self):
        cfg = EncoderConfig(
            stem_channels=8,
            stem_stride=1,
            stages=tuple(
                StageSpec(w, stride=2, expansion=2.0) for w in (16, 24, 32, 48, 64)
            ),
        )
        assert cfg.downsample_ratio == 32

    def test_wrong_ratio_rejected(self):
        cfg = EncoderConfig(
            stem_channels=8, stem_stride=2,
            stages=(StageSpec(16, stride=2),),
        )
        with pytest.raises(ConfigError):
            build_encoder(cfg, seed=0)
        # explicit override for toy geometries
        enc = build_encoder(cfg, seed=0, downsample_ratio=4)
        assert enc.depth == 2

    def test_default_channels_non_decreasing(self):
        cfg = EncoderConfig()
        widths = [s.out_channels for s in cfg.stages]
        assert widths == sorted(widths)

    def test_invalid_expansion(self):
        with pytest.raises(ConfigError):
            EncoderConfig(stages=(StageSpec(16, expansion=0.5),))

    def test_channel_order_permutation(self):
        cfg = EncoderConfig(
            stem_channels=8,
            stages=(StageSpec(16, stride=2), StageSpec(24, stride=2),
                    StageSpec(32, stride=2), StageSpec(48, stride=2)),
            channel_order=(3, 2, 1, 0),
        )
        widths = [s.out_channels for s in cfg.effective_stages()]
        assert widths == [48, 32, 24, 16]
        with pytest.raises(ConfigError):
            EncoderConfig(
                stages=(StageSpec(16, stride=2),), channel_order=(1,)
            )

    def test_scale_channels(self):
        cfg = tiny_config()
        assert cfg.scale_channels() == [8, 16, 24, 32, 48]


class TestBuild:
    def test_deterministic_parameters(self):
        a = build_encoder(tiny_config(), seed=7)
        b = build_encoder(tiny_config(), seed=7)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)
        c = build_encoder(tiny_config(), seed=8)
        diffs = [
            not np.array_equal(pa.data, pc.data)
            for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters())
        ]
        assert any(diffs)

    def test_parameter_count_closed_form(self):
        """Hand count for a 1-stage config (stem s2 + one s2 stage)."""
        cfg = EncoderConfig(
            stem_channels=4, stem_stride=2,
            stages=(StageSpec(6, stride=2, expansion=2.0, repeats=1),),
        )
        enc = build_encoder(cfg, seed=0, downsample_ratio=4)
        stem = 4 * 3 * 4 * 4 + 2 * 4          # conv + bn affine
        hidden = 8
        expand = hidden * 4 * 1 * 1 + 2 * hidden
        depthwise = hidden * 1 * 4 * 4 + 2 * hidden
        project = 6 * hidden * 1 * 1 + 2 * 6
        assert enc.parameter_count() == stem + expand + depthwise + project

    def test_residual_rule_structural(self):
        cfg = EncoderConfig(
            stem_channels=8, stem_stride=2,
            stages=(
                StageSpec(8, stride=1, expansion=2.0, repeats=2),
                StageSpec(16, stride=2, expansion=2.0, repeats=2),
                StageSpec(16, stride=2, expansion=2.0, repeats=1),
                StageSpec(24, stride=2, expansion=2.0, repeats=1),
                StageSpec(32, stride=2, expansion=2.0, repeats=1),
            ),
        )
        enc = build_encoder(cfg, seed=0)
        flags = [b.use_residual for b in enc.blocks]
        # stride-2 blocks and channel-changing blocks must not carry residuals
        assert flags == [True, True, False, True, False, False, False]


class TestForward:
    def test_scale_sizes_224(self):
        enc = build_encoder(tiny_config(), seed=1)
        pyr = toy_pyramid(224, 224, 0.6, seed=2)
        with no_grad():
            scales = enc.forward(Tensor(np.random.default_rng(0).random((1, 3, 224, 224))),
                                 pyramid=pyr, training=False)
        assert [s.shape[-1] for s in scales] == [112, 56, 28, 14, 7]
        assert [s.shape[1] for s in scales] == [8, 16, 24, 32, 48]

    def test_scale_sizes_64(self):
        enc = build_encoder(tiny_config(), seed=1)
        pyr = toy_pyramid(64, 64, 0.5, seed=3)
        with no_grad():
            scales = enc.forward(Tensor(np.zeros((1, 3, 64, 64))), pyramid=pyr)
        assert [s.shape[-1] for s in scales] == [32, 16, 8, 4, 2]

    def test_all_visible_equals_dense(self):
        """Sparse forward under an all-visible mask matches a dense pass."""
        rng = np.random.default_rng(4)
        enc = build_encoder(tiny_config(), seed=5)
        img = Tensor(rng.random((2, 3, 64, 64)))
        pyr = toy_pyramid(64, 64, 0.0, seed=6)
        with no_grad():
            sparse_scales = enc.forward(img, pyramid=pyr, training=False)
            dense_scales = enc.forward(img, pyramid=None, training=False)
        for a, b in zip(sparse_scales, dense_scales):
            assert np.max(np.abs(a.data - b.data)) <= 1e-12

    def test_masked_positions_zero_at_every_scale(self):
        rng = np.random.default_rng(7)
        enc = build_encoder(tiny_config(), seed=8)
        img = Tensor(rng.random((1, 3, 64, 64)))
        pyr = toy_pyramid(64, 64, 0.5, seed=9)
        with no_grad():
            scales = enc.forward(img, pyramid=pyr, training=False)
        for i, s in enumerate(scales, start=1):
            hidden = ~pyr.level(i)
            assert not s.data[:, :, hidden].any()

    def test_leakage_invariance_bitwise(self):
        """Randomizing masked input patches leaves every visible activation
        bitwise unchanged."""
        rng = np.random.default_rng(10)
        enc = build_encoder(tiny_config(), seed=11)
        pyr = toy_pyramid(64, 64, 0.5, seed=12)
        img = rng.random((1, 3, 64, 64))
        tampered = img.copy()
        hidden_full = ~pyr.input_mask()
        tampered[:, :, hidden_full] = rng.random((1, 3, int(hidden_full.sum())))
        with no_grad():
            base = enc.forward(Tensor(img), pyramid=pyr, training=False)
            poked = enc.forward(Tensor(tampered), pyramid=pyr, training=False)
        for a, b in zip(base, poked):
            np.testing.assert_array_equal(a.data, b.data)

    def test_eval_forward_is_pure(self):
        rng = np.random.default_rng(13)
        enc = build_encoder(tiny_config(), seed=14)
        img = Tensor(rng.random((1, 3, 64, 64)))
        pyr = toy_pyramid(64, 64, 0.4, seed=15)
        with no_grad():
            a = enc.forward(img, pyramid=pyr, training=False)
            before = [x.copy() for x in (enc.stem.bn.running_mean,)]
            b = enc.forward(img, pyramid=pyr, training=False)
        np.testing.assert_array_equal(a[-1].data, b[-1].data)
        np.testing.assert_array_equal(enc.stem.bn.running_mean, before[0])

    def test_geometry_errors(self):
        enc = build_encoder(tiny_config(), seed=16)
        with pytest.raises(GeometryError):
            enc.forward(Tensor(np.zeros((1, 3, 60, 64))))
        pyr = toy_pyramid(64, 64, 0.5, seed=17)
        with pytest.raises(GeometryError):
            enc.forward(Tensor(np.zeros((1, 3, 128, 128))), pyramid=pyr)

    def test_per_sample_mask_stack(self):
        rng = np.random.default_rng(18)
        enc = build_encoder(tiny_config(), seed=19)
        pyrs = [toy_pyramid(64, 64, 0.5, seed=s) for s in (20, 21)]
        stack = stack_pyramids(pyrs)
        img = rng.random((2, 3, 64, 64))
        with no_grad():
            batched = enc.forward(Tensor(img), pyramid=stack, training=False)
            singles = [
                enc.forward(Tensor(img[n : n + 1]), pyramid=pyrs[n], training=False)
                for n in range(2)
            ]
        for i in range(5):
            for n in range(2):
                np.testing.assert_allclose(
                    batched[i].data[n], singles[n][i].data[0], atol=1e-10
                )


class TestArrayPaths:
    def test_dense_arrays_match_tensor_path(self):
        rng = np.random.default_rng(22)
        enc = build_encoder(tiny_config(), seed=23)
        img = rng.random((1, 3, 64, 64))
        with no_grad():
            tensor_out = enc.forward(Tensor(img), training=False)
        array_out = enc.forward_arrays(img)
        for a, b in zip(tensor_out, array_out):
            np.testing.assert_array_equal(a.data, b)

    def test_emulation_arrays_match_tensor_path(self):
        rng = np.random.default_rng(24)
        enc = build_encoder(tiny_config(), seed=25)
        img = rng.random((1, 3, 64, 64))
        pyr = toy_pyramid(64, 64, 0.6, seed=26)
        with no_grad():
            tensor_out = enc.forward(Tensor(img), pyramid=pyr, training=False)
        array_out = enc.forward_arrays(img, pyramid=pyr)
        for a, b in zip(tensor_out, array_out):
            np.testing.assert_array_equal(a.data, b)

    def test_compact_matches_emulation(self):
        rng = np.random.default_rng(27)
        enc = build_encoder(tiny_config(), seed=28)
        img = rng.random((1, 3, 64, 64))
        for ratio, seed in [(0.0, 29), (0.6, 30), (0.9, 31)]:
            pyr = toy_pyramid(64, 64, ratio, seed=seed)
            emu = enc.forward_arrays(img, pyramid=pyr, compact=False)
            cmp_ = enc.forward_arrays(img, pyramid=pyr, compact=True)
            for i, (a, b) in enumerate(zip(emu, cmp_), start=1):
                if ratio == 0.0:
                    np.testing.assert_array_equal(a, b)
                else:
                    assert np.max(np.abs(a - b)) < 1e-10
                    hidden = ~pyr.level(i)
                    assert not b[:, :, hidden].any()
