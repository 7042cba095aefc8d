"""Loss, optimizer, checkpoint format, and the two training loops."""

import math

import numpy as np
import pytest

from spmim.decoder import DecoderConfig
from spmim.encoder import EncoderConfig, StageSpec
from spmim.errors import (
    ArgumentError,
    CheckpointCorruptionError,
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigError,
    DegenerateLossError,
    DimensionError,
)
from spmim.masking import MaskGrid, sample_mask
from spmim.tensor import Tensor, finite_difference_grad
from spmim import training as tr


def toy_encoder_config(stem=6, widths=(8,), expansion=2.0, dropout=0.0):
    """Depth-2 toy: stride-2 stem plus one stride-2 stage."""
    return EncoderConfig(
        stem_channels=stem,
        stem_stride=2,
        stages=tuple(
            StageSpec(w, stride=2, expansion=expansion, dropout_p=dropout)
            for w in widths
        ),
    )


def toy_model(seed=0, stem=6, widths=(8,), dec=8):
    cfg = toy_encoder_config(stem, widths)
    return tr.build_pretrain_model(
        cfg, DecoderConfig((dec,) * cfg.depth), seed, downsample_ratio=4
    )


class TestMaskedMseLoss:
    def test_perfect_reconstruction_is_zero(self):
        rng = np.random.default_rng(0)
        img = rng.random((2, 3, 16, 16))
        grid = sample_mask(4, 4, 0.5, seed=1)
        loss = tr.masked_mse_loss(Tensor(img), Tensor(img.copy()), grid)
        assert loss.item() == 0.0

    def test_visible_pixels_excluded(self):
        rng = np.random.default_rng(2)
        target = rng.random((1, 3, 16, 16))
        grid = sample_mask(4, 4, 0.5, seed=3)
        recon = target.copy()
        base = tr.masked_mse_loss(Tensor(recon), Tensor(target), grid).item()
        visible_px = np.repeat(np.repeat(grid.visible, 4, 0), 4, 1)
        recon2 = recon.copy()
        recon2[:, :, visible_px] += rng.random((1, 3, int(visible_px.sum())))
        after = tr.masked_mse_loss(Tensor(recon2), Tensor(target), grid).item()
        assert base == after == 0.0

    def test_constant_error_on_one_masked_patch(self):
        """One hidden patch with recon-target = 2 everywhere gives MSE 4."""
        visible = np.ones((2, 2), dtype=bool)
        visible[0, 0] = False
        grid = MaskGrid(2, 2, visible, seed=0)
        target = np.zeros((1, 3, 64, 64))
        recon = np.zeros((1, 3, 64, 64))
        recon[:, :, :32, :32] = 2.0
        loss = tr.masked_mse_loss(Tensor(recon), Tensor(target), grid)
        assert abs(loss.item() - 4.0) < 1e-15

    def test_zero_masked_pixels_rejected(self):
        grid = sample_mask(4, 4, 0.0, seed=4)
        x = Tensor(np.zeros((1, 3, 16, 16)))
        with pytest.raises(DegenerateLossError):
            tr.masked_mse_loss(x, x, grid)

    def test_gradient_structure_and_finite_differences(self):
        rng = np.random.default_rng(5)
        target = rng.random((2, 3, 8, 8))
        grid_a = sample_mask(2, 2, 0.5, seed=6)
        grid_b = sample_mask(2, 2, 0.5, seed=7)
        recon = Tensor(rng.random((2, 3, 8, 8)), requires_grad=True)

        def f(t):
            return tr.masked_mse_loss(t, Tensor(target), [grid_a, grid_b])

        loss = f(recon)
        loss.backward()
        got = recon.grad.copy()
        # analytic gradient: 2 (r - t) / M on hidden pixels, 0 elsewhere
        hidden = np.stack(
            [np.repeat(np.repeat(~g.visible, 4, 0), 4, 1) for g in (grid_a, grid_b)]
        )[:, None]
        m_count = hidden.sum() * 3
        want = 2.0 * (recon.data - target) * hidden / m_count
        np.testing.assert_allclose(got, want, atol=1e-15)
        fd = finite_difference_grad(f, recon).data
        np.testing.assert_allclose(got, fd, atol=1e-9)

    def test_shape_mismatch(self):
        grid = sample_mask(2, 2, 0.5, seed=8)
        with pytest.raises(DimensionError):
            tr.masked_mse_loss(
                Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((1, 3, 8, 4))), grid
            )


def adam_decoupled_oracle(params, grads_per_step, lr, beta1, beta2, eps, wd):
    """Independent plain Adam with decoupled weight decay (test oracle)."""
    params = [p.copy() for p in params]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    for t, grads in enumerate(grads_per_step, start=1):
        bc1 = 1 - beta1 ** t
        bc2 = 1 - beta2 ** t
        for i, g in enumerate(grads):
            m[i] = beta1 * m[i] + (1 - beta1) * g
            v[i] = beta2 * v[i] + (1 - beta2) * g * g
            update = (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)
            params[i] = params[i] * (1 - lr * wd) - lr * update
    return params


class TestAdamP:
    def test_first_step_hand_case(self):
        """Scalar parameter, unit gradient: first step is -lr/(1+eps)."""
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = tr.AdamP([p], tr.OptimizerConfig(lr=1e-3, weight_decay=0.0))
        p.grad = np.array([1.0])
        opt.step()
        want = -1e-3 * (1.0 / (1.0 + 1e-8))
        assert abs(p.data[0] - want) < 1e-18

    def test_zero_gradient_no_decay_keeps_params(self):
        rng = np.random.default_rng(9)
        p = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        before = p.data.copy()
        opt = tr.AdamP([p], tr.OptimizerConfig(weight_decay=0.0))
        p.grad = np.zeros((3, 4))
        for _ in range(5):
            opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_projection_disabled_matches_adam_oracle(self):
        """delta <= 0 reproduces decoupled-weight-decay Adam to 1e-12."""
        rng = np.random.default_rng(10)
        shapes = [(4, 3), (7,), (2, 3, 2, 2)]
        init = [rng.standard_normal(s) for s in shapes]
        grads = [[rng.standard_normal(s) for s in shapes] for _ in range(100)]
        cfg = tr.OptimizerConfig(lr=3e-3, weight_decay=0.02, delta=0.0)
        params = [Tensor(a.copy(), requires_grad=True) for a in init]
        opt = tr.AdamP(params, cfg)
        for step_grads in grads:
            for p, g in zip(params, step_grads):
                p.grad = g.copy()
            opt.step()
        want = adam_decoupled_oracle(init, grads, 3e-3, 0.9, 0.999, 1e-8, 0.02)
        for p, w in zip(params, want):
            assert np.max(np.abs(p.data - w)) < 1e-12

    def test_parallel_update_projects_to_zero(self):
        """An update parallel to the weight is annihilated by the projection."""
        opt = tr.AdamP([], tr.OptimizerConfig(delta=0.5))
        p = np.array([[1.0, 2.0, 2.0, 4.0]])
        grad = np.array([[2.0, -1.0, 4.0, -2.0]]) * 1e-3  # orthogonal to p
        perturb = 2.5 * p
        projected, wd_scale = opt._project(p, grad, perturb)
        assert np.max(np.abs(projected)) < 1e-12
        assert wd_scale == 0.1

    def test_projection_skipped_when_gradient_aligned(self):
        opt = tr.AdamP([], tr.OptimizerConfig(delta=0.1))
        p = np.array([[1.0, 2.0, 2.0, 4.0]])
        grad = 0.3 * p  # cosine 1 > delta/sqrt(4)
        perturb = 2.5 * p
        projected, wd_scale = opt._project(p, grad, perturb)
        np.testing.assert_array_equal(projected, perturb)
        assert wd_scale == 1.0

    def test_non_finite_gradient_refused(self):
        from spmim.errors import NumericsError

        p = Tensor(np.zeros(2), requires_grad=True)
        opt = tr.AdamP([p])
        p.grad = np.array([1.0, np.inf])
        with pytest.raises(NumericsError):
            opt.step()


class TestCheckpointFormat:
    def _checkpoint(self):
        rng = np.random.default_rng(11)
        return tr.Checkpoint(
            config={"encoder": {"stem_channels": 4}, "note": "x"},
            tensors={
                "encoder.w": rng.standard_normal((3, 2)).astype(np.float32),
                "encoder.b": rng.standard_normal(3).astype(np.float32),
            },
            epoch=7,
            seed=123,
        )

    def test_round_trip_bytes_identical(self, tmp_path):
        path_a = tmp_path / "a.spmim"
        path_b = tmp_path / "b.spmim"
        ckpt = self._checkpoint()
        tr.save_checkpoint(path_a, ckpt)
        loaded = tr.load_checkpoint(path_a)
        tr.save_checkpoint(path_b, loaded)
        assert path_a.read_bytes() == path_b.read_bytes()
        for name in ckpt.tensors:
            np.testing.assert_array_equal(ckpt.tensors[name], loaded.tensors[name])
        assert loaded.epoch == 7 and loaded.seed == 123

    def test_flipped_payload_byte_detected(self, tmp_path):
        path = tmp_path / "c.spmim"
        tr.save_checkpoint(path, self._checkpoint())
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointCorruptionError):
            tr.load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.spmim"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(CheckpointFormatError):
            tr.load_checkpoint(path)

    def test_unknown_version(self, tmp_path):
        path = tmp_path / "e.spmim"
        tr.save_checkpoint(path, self._checkpoint())
        raw = path.read_bytes()
        meta_len = int.from_bytes(raw[8:12], "little")
        blob = raw[12 : 12 + meta_len].replace(b'"version":1', b'"version":9')
        path.write_bytes(raw[:8] + len(blob).to_bytes(4, "little") + blob
                         + raw[12 + meta_len :])
        with pytest.raises(CheckpointVersionError):
            tr.load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "f.spmim"
        tr.save_checkpoint(path, self._checkpoint())
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(CheckpointCorruptionError):
            tr.load_checkpoint(path)


class TestPretrainLoop:
    def _images(self, count=4, size=16, seed=12):
        return np.random.default_rng(seed).random((count, 3, size, size))

    def test_zero_epochs_empty_report(self):
        model = toy_model()
        records, opt = tr.pretrain(
            model, self._images(), tr.PretrainConfig(epochs=0),
            tr.OptimizerConfig(), seed=13,
        )
        assert records == []
        assert opt.t == 0

    def test_same_seed_identical_loss_curves(self):
        losses = []
        for _ in range(2):
            model = toy_model(seed=14)
            records, _ = tr.pretrain(
                model, self._images(), tr.PretrainConfig(epochs=3, batch_size=2),
                tr.OptimizerConfig(), seed=15,
            )
            losses.append([r.mean_loss for r in records])
        assert losses[0] == losses[1]

    def test_loss_decreases_on_tiny_problem(self):
        model = toy_model(seed=16)
        records, _ = tr.pretrain(
            model, self._images(count=2), tr.PretrainConfig(epochs=20, batch_size=2),
            tr.OptimizerConfig(lr=3e-3), seed=17,
        )
        assert records[-1].mean_loss < records[0].mean_loss

    def test_empty_dataset_rejected(self):
        model = toy_model()
        with pytest.raises(ArgumentError):
            tr.pretrain(model, np.zeros((0, 3, 16, 16)), tr.PretrainConfig(),
                        tr.OptimizerConfig(), seed=0)

    def test_indivisible_geometry_rejected(self):
        model = toy_model()
        with pytest.raises(ArgumentError):
            tr.pretrain(model, np.zeros((2, 3, 15, 15)), tr.PretrainConfig(),
                        tr.OptimizerConfig(), seed=0)


class TestCheckpointModelRoundTrip:
    def test_forward_preserved_within_f32(self, tmp_path):
        model = toy_model(seed=18)
        images = np.random.default_rng(19).random((2, 3, 16, 16))
        tr.pretrain(model, images, tr.PretrainConfig(epochs=2, batch_size=2),
                    tr.OptimizerConfig(), seed=20)
        config = {
            "encoder": tr.encoder_config_dict(model.encoder.config),
            "decoder": {"channels": [8, 8]},
        }
        ckpt = tr.make_pretrain_checkpoint(model, config, seed=18, epoch=2)
        path = tmp_path / "m.spmim"
        tr.save_checkpoint(path, ckpt)
        restored = tr.restore_pretrain_model(tr.load_checkpoint(path),
                                             downsample_ratio=4)
        grid = sample_mask(4, 4, 0.5, seed=21)
        from spmim.masking import build_mask_pyramid, stack_pyramids

        stack = stack_pyramids([build_mask_pyramid(grid, 16, 16, depth=2)] * 2)
        a = model.reconstruct(Tensor(images), stack, training=False).data
        b = restored.reconstruct(Tensor(images), stack, training=False).data
        rel = np.max(np.abs(a - b) / np.maximum(np.abs(a), 1.0))
        assert rel < 1e-6

    def test_optimizer_state_round_trip(self, tmp_path):
        model = toy_model(seed=22)
        images = np.random.default_rng(23).random((2, 3, 16, 16))
        _, opt = tr.pretrain(model, images, tr.PretrainConfig(epochs=1, batch_size=2),
                             tr.OptimizerConfig(), seed=24)
        config = {"encoder": tr.encoder_config_dict(model.encoder.config),
                  "decoder": {"channels": [8, 8]}}
        ckpt = tr.make_pretrain_checkpoint(model, config, seed=22, epoch=1,
                                           optimizer=opt)
        path = tmp_path / "o.spmim"
        tr.save_checkpoint(path, ckpt)
        loaded = tr.load_checkpoint(path)
        restored_model = tr.restore_pretrain_model(loaded, downsample_ratio=4)
        restored_opt = tr.restore_optimizer(loaded, restored_model,
                                            tr.OptimizerConfig())
        assert restored_opt is not None and restored_opt.t == opt.t
        for a, b in zip(opt._m, restored_opt._m):
            np.testing.assert_allclose(a, b, atol=1e-6)


class TestFinetune:
    def _separable_data(self, n_per_class=8, size=16, seed=25):
        rng = np.random.default_rng(seed)
        lows = rng.random((n_per_class, 3, size, size)) * 0.3
        highs = rng.random((n_per_class, 3, size, size)) * 0.3 + 0.7
        images = np.concatenate([lows, highs])
        labels = np.array([0] * n_per_class + [1] * n_per_class)
        return images, labels

    def test_separable_dataset_reaches_full_accuracy(self):
        images, labels = self._separable_data()
        cfg = tr.FinetuneConfig(epochs=25, batch_size=8, num_classes=2,
                                head_dropout=0.0)
        model = tr.build_classifier(toy_encoder_config(), cfg, seed=26,
                                    downsample_ratio=4)
        tr.finetune(model, images, labels, cfg, tr.OptimizerConfig(lr=3e-3),
                    seed=27)
        probs = tr.predict_probabilities(model, images)
        assert (probs.argmax(axis=1) == labels).mean() == 1.0

    def test_zero_head_gives_uniform_cross_entropy(self):
        """Zero head weights: initial loss is ln(num_classes)."""
        rng = np.random.default_rng(28)
        images = rng.random((4, 3, 16, 16))
        cfg = tr.FinetuneConfig(num_classes=4, head_dropout=0.0,
                                freeze_encoder=True)
        model = tr.build_classifier(toy_encoder_config(), cfg, seed=29,
                                    downsample_ratio=4)
        model.head.weight = Tensor(np.zeros(model.head.weight.shape),
                                   requires_grad=True)
        model.head.bias = Tensor(np.zeros(4), requires_grad=True)
        from spmim.tensor import cross_entropy

        logits = model.forward(Tensor(images), training=False)
        loss = cross_entropy(logits, np.array([0, 1, 2, 3]))
        assert abs(loss.item() - math.log(4)) < 1e-6

    def test_frozen_encoder_trains_head_only(self):
        images, labels = self._separable_data(n_per_class=4)
        cfg = tr.FinetuneConfig(epochs=2, batch_size=4, num_classes=2,
                                head_dropout=0.0, freeze_encoder=True)
        model = tr.build_classifier(toy_encoder_config(), cfg, seed=30,
                                    downsample_ratio=4)
        stem_before = model.encoder.stem.weight.data.copy()
        head_before = model.head.weight.data.copy()
        tr.finetune(model, images, labels, cfg, tr.OptimizerConfig(), seed=31)
        np.testing.assert_array_equal(model.encoder.stem.weight.data, stem_before)
        assert not np.array_equal(model.head.weight.data, head_before)

    def test_checkpoint_config_mismatch_rejected(self, tmp_path):
        model = toy_model(seed=32)
        config = {"encoder": tr.encoder_config_dict(model.encoder.config),
                  "decoder": {"channels": [8, 8]}}
        ckpt = tr.make_pretrain_checkpoint(model, config, seed=32, epoch=0)
        other = toy_encoder_config(stem=4)
        with pytest.raises(ConfigError):
            tr.build_classifier(other, tr.FinetuneConfig(), seed=33,
                                pretrained=ckpt, downsample_ratio=4)

    def test_label_range_validated(self):
        images = np.zeros((2, 3, 16, 16))
        cfg = tr.FinetuneConfig(num_classes=2, epochs=1)
        model = tr.build_classifier(toy_encoder_config(), cfg, seed=34,
                                    downsample_ratio=4)
        with pytest.raises(ConfigError):
            tr.finetune(model, images, np.array([0, 5]), cfg,
                        tr.OptimizerConfig(), seed=35)

    def test_pretrained_encoder_weights_are_loaded(self, tmp_path):
        model = toy_model(seed=36)
        config = {"encoder": tr.encoder_config_dict(model.encoder.config),
                  "decoder": {"channels": [8, 8]}}
        ckpt = tr.make_pretrain_checkpoint(model, config, seed=36, epoch=0)
        clf = tr.build_classifier(model.encoder.config,
                                  tr.FinetuneConfig(num_classes=2), seed=99,
                                  pretrained=ckpt, downsample_ratio=4)
        np.testing.assert_allclose(
            clf.encoder.stem.weight.data,
            model.encoder.stem.weight.data.astype(np.float32).astype(np.float64),
        )


class TestPipelineInvariants:
    def test_zero_embeddings_all_visible_is_deterministic_autoencoder(self):
        """With zero mask embeddings and nothing hidden, the eval-mode
        pretraining forward is a plain deterministic autoencoder."""
        from spmim.masking import build_mask_pyramid, stack_pyramids
        from spmim.tensor import no_grad

        model = toy_model(seed=40)
        for vec in model.embeddings.vectors:
            vec.data[...] = 0.0
        images = np.random.default_rng(41).random((2, 3, 16, 16))
        grid = sample_mask(4, 4, 0.0, seed=42)
        stack = stack_pyramids([build_mask_pyramid(grid, 16, 16, depth=2)] * 2)
        with no_grad():
            a = model.reconstruct(Tensor(images), stack, training=False).data
            b = model.reconstruct(Tensor(images), stack, training=False).data
        np.testing.assert_array_equal(a, b)

    def test_end_to_end_shape_preserved(self):
        from spmim.masking import build_mask_pyramid, stack_pyramids
        from spmim.tensor import no_grad

        model = toy_model(seed=43)
        images = np.random.default_rng(44).random((1, 3, 32, 32))
        grid = sample_mask(8, 8, 0.6, seed=45)
        stack = stack_pyramids([build_mask_pyramid(grid, 32, 32, depth=2)])
        with no_grad():
            recon = model.reconstruct(Tensor(images), stack, training=False)
        assert recon.shape == (1, 3, 32, 32)


class TestReportWriter:
    def test_report_files(self, tmp_path):
        records = [tr.EpochRecord(1, 0.5, 12.0), tr.EpochRecord(2, 0.25, 11.0)]
        full = tmp_path / "full.tsv"
        bare = tmp_path / "bare.tsv"
        tr.write_report(records, full, include_timing=True)
        tr.write_report(records, bare, include_timing=False)
        assert full.read_text().splitlines()[0] == "epoch\tmean_loss\twall_ms"
        assert bare.read_text().splitlines() == [
            "epoch\tmean_loss", "1\t0.5", "2\t0.25",
        ]
