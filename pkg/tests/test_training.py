import math

import numpy as np
import pytest

from lowrank_nmt import autodiff as ad
from lowrank_nmt.autodiff import ContractError, Tensor
from lowrank_nmt.compression import effective_param_count, prune
from lowrank_nmt.data import BatchPlan, build_vocab, collate, encode_pairs, make_batches, synthetic_task
from lowrank_nmt.models import FactorizationScheme, build_model, preset
from lowrank_nmt.training import (MAGIC, Adam, CheckpointIntegrityError, CorruptCheckpointError,
                                  MissingTensorError, PlateauSchedule, ShapeMismatchError, TrainingError,
                                  WarmupSchedule, accumulate_gradients, clip_grad_norm, fit, load_checkpoint,
                                  lr_schedule, make_optimizer, read_checkpoint, read_metrics, save_checkpoint,
                                  train_step)


def tiny_corpus(n=64, seed=0):
    pairs = synthetic_task("reverse", 10, (1, 6), n, seed)
    v = build_vocab([s for s, _ in pairs])
    return encode_pairs(pairs, v, v), len(v)


def tiny_model(family="transformer", vocab=14, scheme=None, seed=0):
    return build_model(preset(f"toy-{family}").with_vocab(vocab, vocab), scheme, seed=seed)


class TestSchedule:
    def test_reference_value(self):
        assert lr_schedule(4000, 512, 4000) == pytest.approx(6.988e-4, rel=1e-3)
        assert lr_schedule(4000, 512, 4000) == pytest.approx(512 ** -0.5 * 4000 ** -0.5, rel=1e-12)

    def test_shape(self):
        lrs = [lr_schedule(s, 64, 100) for s in range(1, 300)]
        assert all(a < b for a, b in zip(lrs[:99], lrs[1:100]))
        assert all(a > b for a, b in zip(lrs[99:], lrs[100:]))

    def test_step_zero(self):
        with pytest.raises(ContractError):
            lr_schedule(0, 64, 100)

    def test_factor_scales(self):
        assert WarmupSchedule(64, 100, 0.5)(7) == pytest.approx(0.5 * lr_schedule(7, 64, 100))

    def test_plateau_decay(self):
        s = PlateauSchedule(rate=1.0, decay=0.5, patience=1)
        for metric in (3.0, 2.0, 2.5, 2.4):
            s.report(metric)
        assert s(1) == 0.5


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        opt = Adam({"p": p})
        opt.step(0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    @pytest.mark.parametrize("g", [3.0, -0.02, 1e-6])
    def test_first_step_magnitude(self, g):
        p = Tensor(np.array([0.0]), dtype=np.float64, requires_grad=True)
        p.grad = np.array([g])
        Adam({"p": p}, eps=1e-9).step(0.01)
        assert p.data[0] == pytest.approx(-0.01 * g / (abs(g) + 1e-9), rel=1e-9)

    def test_moments_match_parameter_shapes(self):
        model = tiny_model()
        opt = make_optimizer(model)
        assert all(opt.m[n].shape == p.shape == opt.v[n].shape for n, p in model.named_parameters())
        assert opt.beta2 == 0.98 and make_optimizer(tiny_model("lstm")).beta2 == 0.999

    def test_clip(self):
        p = Tensor(np.zeros(2), dtype=np.float64, requires_grad=True)
        p.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(p.grad, [0.6, 0.8])


class TestTrainStep:
    def test_accumulating_copies_equals_single_batch(self):
        data, v = tiny_corpus()
        batch = collate(data[:8])
        a, b = tiny_model(vocab=v, seed=1), tiny_model(vocab=v, seed=1)
        opt_a, opt_b = make_optimizer(a), make_optimizer(b)
        sched = WarmupSchedule(64, 10)
        la = train_step(a, [batch], opt_a, sched)
        lb = train_step(b, [batch, batch, batch], opt_b, sched)
        assert la == pytest.approx(lb, rel=1e-6)
        for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_allclose(x.data, y.data, atol=1e-6)
        assert opt_a.step_count == opt_b.step_count == 1

    def test_group_gradient_is_token_weighted(self, f64):
        data, v = tiny_corpus()
        model = tiny_model(vocab=v)
        b1, b2 = collate(data[:3]), collate(data[3:10])
        accumulate_gradients(model, [b1, b2])
        split = {n: p.grad.copy() for n, p in model.named_parameters()}
        accumulate_gradients(model, [collate(data[:10])])
        for n, p in model.named_parameters():
            np.testing.assert_allclose(split[n], p.grad, atol=1e-10)

    def test_nan_names_step(self):
        data, v = tiny_corpus()
        model = tiny_model(vocab=v)
        opt = make_optimizer(model)
        train_step(model, [collate(data[:4])], opt, WarmupSchedule(64, 10))
        model.src_embed.table.data[:] = np.nan
        with pytest.raises(TrainingError, match="step 2"):
            train_step(model, [collate(data[:4])], opt, WarmupSchedule(64, 10))

    def test_empty_group(self):
        with pytest.raises(ContractError):
            accumulate_gradients(tiny_model(), [])


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path, no_factor_warnings):
        data, v = tiny_corpus()
        for family, scheme in (("transformer", FactorizationScheme.in_training("ff", 8)),
                               ("lstm", FactorizationScheme.in_training("embed", 4))):
            model = tiny_model(family, v, scheme, seed=3)
            path = tmp_path / f"{family}.ckpt"
            save_checkpoint(model, path, step=5)
            loaded = load_checkpoint(path)
            b = collate(data[:5])
            a1 = model.forward_logits(b.src, b.tgt_in).data
            a2 = loaded.forward_logits(b.src, b.tgt_in).data
            assert a1.tobytes() == a2.tobytes()
            assert loaded.scheme == scheme and loaded.config == model.config

    def test_float64_round_trip(self, tmp_path):
        with ad.default_dtype(np.float64):
            model = tiny_model()
        save_checkpoint(model, tmp_path / "m.ckpt")
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        assert all(p.dtype == np.float64 for p in loaded.parameters())

    def test_header_lists_every_parameter(self, tmp_path):
        model = tiny_model()
        save_checkpoint(model, tmp_path / "m.ckpt")
        header, arrays = read_checkpoint(tmp_path / "m.ckpt")
        names = [e["name"] for e in header["tensors"]]
        assert names == [n for n, _ in model.named_parameters()]
        assert len(set(names)) == len(names)
        assert (tmp_path / "m.ckpt").read_bytes().startswith(MAGIC)

    def test_optimizer_state_restored(self, tmp_path):
        data, v = tiny_corpus()
        model = tiny_model(vocab=v)
        opt = make_optimizer(model)
        for _ in range(3):
            train_step(model, [collate(data[:8])], opt, WarmupSchedule(64, 10))
        save_checkpoint(model, tmp_path / "m.ckpt", optimizer=opt, step=3)
        loaded, opt2, header = load_checkpoint(tmp_path / "m.ckpt", with_optimizer=True)
        assert header["step"] == 3 and opt2.step_count == 3
        # continuing from the checkpoint matches continuing in memory
        train_step(model, [collate(data[8:16])], opt, WarmupSchedule(64, 10))
        train_step(loaded, [collate(data[8:16])], opt2, WarmupSchedule(64, 10))
        for (_, x), (_, y) in zip(model.named_parameters(), loaded.named_parameters()):
            assert x.data.tobytes() == y.data.tobytes()

    def test_truncated(self, tmp_path):
        save_checkpoint(tiny_model(), tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(raw[:-100])
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(tmp_path / "cut.ckpt")

    def test_flipped_byte(self, tmp_path):
        save_checkpoint(tiny_model(), tmp_path / "m.ckpt")
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[-5] ^= 0xFF
        (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointIntegrityError, match="checksum"):
            load_checkpoint(tmp_path / "bad.ckpt")

    @pytest.mark.parametrize("content", [b"", b"hello", MAGIC + b"12\n{not json", MAGIC + b"x\n"])
    def test_corrupt_header(self, tmp_path, content):
        (tmp_path / "c.ckpt").write_bytes(content)
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_missing_tensor(self, tmp_path):
        model = tiny_model()
        del model.dec_norm  # drop a module so its tensors are never written
        model.dec_norm = None
        save_checkpoint(model, tmp_path / "m.ckpt")
        with pytest.raises(MissingTensorError, match="dec_norm"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_shape_mismatch(self, tmp_path):
        model = tiny_model()
        model.enc_norm.gain.data = np.ones(3, dtype=np.float32)
        save_checkpoint(model, tmp_path / "m.ckpt")
        with pytest.raises(ShapeMismatchError, match="enc_norm.gain"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_write_is_atomic(self, tmp_path):
        model = tiny_model()
        save_checkpoint(model, tmp_path / "m.ckpt")
        assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]

    def test_pruned_count_survives(self, tmp_path):
        pruned = prune(tiny_model(), 0.3)
        save_checkpoint(pruned, tmp_path / "p.ckpt")
        assert effective_param_count(load_checkpoint(tmp_path / "p.ckpt")) == effective_param_count(pruned)


class TestFit:
    def run(self, tmp_path, tag, seed=0, family="transformer"):
        data, v = tiny_corpus(96, seed=1)
        model = tiny_model(family, v, seed=seed)
        path = tmp_path / f"{tag}.csv"
        fit(model, data, BatchPlan(16, 2, seed=seed), 12, data[:16], eval_every=4, metrics_path=path, warmup=5)
        return read_metrics(path), model

    def test_metrics_columns_and_rows(self, tmp_path):
        rows, _ = self.run(tmp_path, "a")
        assert list(rows[0]) == ["step", "wall_time", "train_loss", "valid_ppl", "learning_rate"]
        assert [r["step"] for r in rows] == [4, 8, 12]
        assert all(math.isfinite(r["valid_ppl"]) for r in rows)

    @pytest.mark.parametrize("family", ["transformer", "lstm"])
    def test_deterministic(self, tmp_path, family):
        a, ma = self.run(tmp_path, "a", family=family)
        b, mb = self.run(tmp_path, "b", family=family)
        strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]
        assert strip(a) == strip(b)
        assert all(x.data.tobytes() == y.data.tobytes()
                   for x, y in zip(ma.parameters(), mb.parameters()))

    def test_seed_changes_trajectory(self, tmp_path):
        a, _ = self.run(tmp_path, "a", seed=0)
        b, _ = self.run(tmp_path, "b", seed=1)
        assert a[-1]["train_loss"] != b[-1]["train_loss"]

    def test_loss_decreases(self):
        data, v = tiny_corpus(128)
        model = tiny_model(vocab=v)
        res = fit(model, data, BatchPlan(16, seed=0), 60, eval_every=20, warmup=20)
        losses = [h[2] for h in res.history]
        assert losses[-1] < losses[0]

    def test_schedule_advances_per_update(self):
        data, v = tiny_corpus(64)
        model = tiny_model(vocab=v)
        groups = list(make_batches(data, BatchPlan(8, 4)))
        opt = make_optimizer(model)
        seen = []
        for g in groups:
            train_step(model, g, opt, lambda s: seen.append(s) or 1e-3)
        assert seen == list(range(1, len(groups) + 1))
