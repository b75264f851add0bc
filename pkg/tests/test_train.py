"""Training: masked loss, schedule, optimizers, early stopping, fit."""

import json
import math

import numpy as np
import pytest

import oracles
from conftest import make_model
from capkit import numerics as nm
from capkit import train as tr
from capkit import vision as vis
from capkit.errors import (
    EmptySplit,
    LengthMismatch,
    NonFinite,
    ShapeMismatch,
    ValidationError,
)
from capkit.textpipe import END_ID, PAD_ID, START_ID, TokenSequence
from capkit.transformer import CaptionModel, ModelConfig


class TestTrainConfig:
    def test_defaults(self):
        cfg = tr.TrainConfig()
        assert (cfg.batch_size, cfg.max_epochs, cfg.patience) == (64, 30, 5)
        assert (cfg.base_lr, cfg.peak_lr, cfg.warmup_fraction) == (1e-5, 1e-4, 0.1)
        assert cfg.optimizer_kind == "adamax"
        assert cfg.seed == 42
        assert cfg.hflip_prob == 0.5

    def test_rejects_inverted_lrs(self):
        with pytest.raises(ValidationError):
            tr.TrainConfig(base_lr=1e-3, peak_lr=1e-4)

    def test_rejects_zero_patience(self):
        with pytest.raises(ValidationError):
            tr.TrainConfig(patience=0)

    def test_rejects_unknown_optimizer(self):
        with pytest.raises(ValidationError):
            tr.TrainConfig(optimizer_kind="sgd")

    def test_rejects_bad_warmup(self):
        with pytest.raises(ValidationError):
            tr.TrainConfig(warmup_fraction=1.5)

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ValidationError):
            tr.TrainConfig.from_dict({"momentum": 0.9})


class TestCrossEntropy:
    def test_uniform_logits_vocab8(self):
        logits = nm.Tensor(np.zeros((3, 8), np.float64), dtype=np.float64)
        targets = TokenSequence(ids=[4, 5, 2])
        per_pos, mean = tr.cross_entropy_masked(logits, targets)
        np.testing.assert_allclose(per_pos.data, math.log(8), rtol=1e-12)
        np.testing.assert_allclose(float(mean.data), math.log(8), rtol=1e-12)
        assert float(mean.data) == pytest.approx(2.0794, abs=5e-5)

    def test_confident_logits_near_zero_loss(self):
        logits_values = np.full((2, 5), -30.0, np.float64)
        logits_values[0, 3] = 30.0
        logits_values[1, 2] = 30.0
        logits = nm.Tensor(logits_values, dtype=np.float64)
        _, mean = tr.cross_entropy_masked(logits, TokenSequence(ids=[3, 2]))
        assert float(mean.data) < 1e-12

    def test_pad_positions_contribute_nothing(self):
        rng = np.random.default_rng(0)
        logits = nm.Tensor(rng.normal(0, 1, (5, 6)), dtype=np.float64)
        targets = TokenSequence(ids=[4, 5, 2, PAD_ID, PAD_ID], length=3)
        per_pos, mean = tr.cross_entropy_masked(logits, targets)
        assert per_pos.data[3] == 0.0 and per_pos.data[4] == 0.0
        np.testing.assert_allclose(float(mean.data), per_pos.data[:3].mean(),
                                   rtol=1e-12)

    def test_length_mismatch(self):
        logits = nm.Tensor(np.zeros((2, 4), np.float32))
        with pytest.raises(LengthMismatch):
            tr.cross_entropy_masked(logits, TokenSequence(ids=[1, 2, 3]))

    def test_all_pad_rejected(self):
        logits = nm.Tensor(np.zeros((2, 4), np.float32))
        with pytest.raises(LengthMismatch):
            tr.cross_entropy_masked(logits, TokenSequence(ids=[PAD_ID, PAD_ID]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        logits = nm.Tensor(rng.normal(0, 2, (4, 6)), requires_grad=True,
                           dtype=np.float64)
        targets = TokenSequence(ids=[4, 2, 5, PAD_ID], length=3)
        with nm.GradTape() as tape:
            _, mean = tr.cross_entropy_masked(logits, targets)
        nm.backward(mean, tape)

        def loss_value():
            _, m = tr.cross_entropy_masked(logits, targets)
            return float(m.data)

        fd = oracles.fd_gradients(loss_value, {"logits": logits.data}, h=1e-6)
        np.testing.assert_allclose(logits.grad, fd["logits"], rtol=1e-6, atol=1e-10)
        # pad rows get exactly zero gradient
        assert np.all(logits.grad[3] == 0.0)


class TestLrSchedule:
    def cfg(self, **kw):
        return tr.TrainConfig(**{"base_lr": 1e-5, "peak_lr": 1e-4,
                                 "warmup_fraction": 0.1, **kw})

    def test_step_zero_is_base(self):
        assert tr.lr_at(0, 100, self.cfg()) == 1e-5

    def test_warmup_end_is_peak(self):
        cfg = self.cfg()
        assert tr.lr_at(10, 100, cfg) == cfg.peak_lr
        assert tr.lr_at(99, 100, cfg) == cfg.peak_lr

    def test_midpoint_is_average(self):
        cfg = self.cfg()
        assert tr.lr_at(5, 100, cfg) == pytest.approx((1e-5 + 1e-4) / 2, rel=1e-12)

    def test_monotone_during_warmup(self):
        cfg = self.cfg()
        values = [tr.lr_at(s, 100, cfg) for s in range(15)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_zero_warmup_fraction(self):
        cfg = self.cfg(warmup_fraction=0.0)
        assert tr.lr_at(0, 100, cfg) == cfg.peak_lr

    def test_tiny_totals_never_divide_by_zero(self):
        cfg = self.cfg()
        assert tr.lr_at(0, 1, cfg) == cfg.base_lr
        assert tr.lr_at(1, 1, cfg) == cfg.peak_lr

    def test_rejects_bad_queries(self):
        with pytest.raises(ValidationError):
            tr.lr_at(-1, 10, self.cfg())
        with pytest.raises(ValidationError):
            tr.lr_at(0, 0, self.cfg())


def scalar_params(value=0.0):
    return {"w": nm.Tensor(np.array([value], np.float32), requires_grad=True)}


class TestOptimizerStep:
    def test_adam_first_step_magnitude(self):
        params = scalar_params()
        state = tr.OptimizerState(kind="adam")
        tr.optimizer_step(params, {"w": np.array([1.0], np.float32)}, state, lr=0.01)
        want = -0.01 * 1.0 / (1.0 + tr.ADAM_EPS)
        np.testing.assert_allclose(params["w"].data, [want], rtol=1e-6)

    def test_adamax_first_step_magnitude(self):
        params = scalar_params()
        state = tr.OptimizerState(kind="adamax")
        tr.optimizer_step(params, {"w": np.array([2.0], np.float32)}, state, lr=0.01)
        # m = 0.1*2, corrected by 1/(1-0.9) = 10; u = |g| = 2
        want = -0.01 * 2.0 / (2.0 + tr.ADAM_EPS)
        np.testing.assert_allclose(params["w"].data, [want], rtol=1e-6)

    def test_zero_gradient_from_rest_is_fixed_point(self):
        for kind in ("adam", "adamax"):
            params = scalar_params(1.5)
            state = tr.OptimizerState(kind=kind)
            tr.optimizer_step(params, {"w": np.zeros(1, np.float32)}, state, lr=0.1)
            np.testing.assert_array_equal(params["w"].data, [1.5])

    def test_lr_zero_is_bit_identical(self):
        for kind in ("adam", "adamax"):
            params = scalar_params(0.7)
            before = params["w"].data.copy()
            state = tr.OptimizerState(kind=kind)
            tr.optimizer_step(params, {"w": np.array([3.0], np.float32)}, state, lr=0.0)
            np.testing.assert_array_equal(params["w"].data, before)
            assert state.step == 1

    def test_missing_grad_treated_as_zero(self):
        params = scalar_params(2.0)
        state = tr.OptimizerState(kind="adamax")
        tr.optimizer_step(params, {}, state, lr=0.5)
        np.testing.assert_array_equal(params["w"].data, [2.0])

    def test_grad_shape_mismatch(self):
        params = scalar_params()
        state = tr.OptimizerState(kind="adam")
        with pytest.raises(ShapeMismatch):
            tr.optimizer_step(params, {"w": np.zeros((2, 2), np.float32)}, state, 0.1)

    def test_adam_matches_reference_formulas(self):
        rng = np.random.default_rng(4)
        theta = np.array([0.3, -0.8], np.float64)
        params = {"w": nm.Tensor(theta.copy(), requires_grad=True, dtype=np.float64)}
        state = tr.OptimizerState(kind="adam")
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        lr = 0.02
        for t in range(1, 11):
            g = rng.normal(0, 1, 2)
            tr.optimizer_step(params, {"w": g}, state, lr)
            m = tr.ADAM_BETA1 * m + (1 - tr.ADAM_BETA1) * g
            v = tr.ADAM_BETA2 * v + (1 - tr.ADAM_BETA2) * g * g
            m_hat = m / (1 - tr.ADAM_BETA1 ** t)
            v_hat = v / (1 - tr.ADAM_BETA2 ** t)
            theta = theta - lr * m_hat / (np.sqrt(v_hat) + tr.ADAM_EPS)
            np.testing.assert_allclose(params["w"].data, theta, rtol=1e-12, err_msg=f"t={t}")

    def test_adamax_matches_reference_formulas(self):
        rng = np.random.default_rng(5)
        theta = np.array([1.0, -1.0], np.float64)
        params = {"w": nm.Tensor(theta.copy(), requires_grad=True, dtype=np.float64)}
        state = tr.OptimizerState(kind="adamax")
        m = np.zeros_like(theta)
        u = np.zeros_like(theta)
        lr = 0.05
        for t in range(1, 11):
            g = rng.normal(0, 1, 2)
            tr.optimizer_step(params, {"w": g}, state, lr)
            m = tr.ADAM_BETA1 * m + (1 - tr.ADAM_BETA1) * g
            u = np.maximum(tr.ADAM_BETA2 * u, np.abs(g))
            theta = theta - (lr / (1 - tr.ADAM_BETA1 ** t)) * m / (u + tr.ADAM_EPS)
            np.testing.assert_allclose(params["w"].data, theta, rtol=1e-12, err_msg=f"t={t}")

    def test_adamax_u_recurrence(self):
        params = scalar_params()
        state = tr.OptimizerState(kind="adamax")
        prev_u = np.float32(0.0)
        for g in (4.0, 2.0, 1.0, 0.5, 0.25):
            tr.optimizer_step(params, {"w": np.array([g], np.float32)}, state, 0.01)
            u = state.v["w"][0]
            decayed = np.float32(tr.ADAM_BETA2) * prev_u
            assert u == max(decayed, np.float32(abs(g)))
            prev_u = u


class TestEarlyStopper:
    def test_spec_fixture_sequence(self):
        stopper = tr.EarlyStopper(patience=2)
        losses = [3.0, 2.0, 2.5, 2.6, 2.7]
        stops = [stopper.update(epoch, loss) for epoch, loss in enumerate(losses)]
        assert stops == [False, False, False, False, True]
        assert stopper.best_epoch == 1
        assert stopper.best_val == 2.0

    def test_improvement_resets_the_clock(self):
        stopper = tr.EarlyStopper(patience=2)
        losses = [3.0, 2.9, 2.8, 2.7, 2.6]
        assert not any(stopper.update(e, v) for e, v in enumerate(losses))
        assert stopper.best_epoch == 4

    def test_equal_loss_is_not_improvement(self):
        stopper = tr.EarlyStopper(patience=1)
        assert stopper.update(0, 2.0) is False
        assert stopper.update(1, 2.0) is False  # stale by 1, within patience
        assert stopper.update(2, 2.0) is True
        assert stopper.best_epoch == 0


def feature_dataset(n_train=4, n_val=2, dim=4, vocab_size=8, max_len=6, seed=0):
    rng = np.random.default_rng(seed)
    words = list(range(4, vocab_size))

    def example(i):
        fm = vis.FeatureMap(source="resnet50",
                            values=rng.normal(0, 1, dim).astype(np.float32))
        body = [words[int(k)] for k in rng.integers(0, len(words), 3)]
        ids = [START_ID, *body, END_ID]
        ids = ids + [PAD_ID] * (max_len - len(ids))
        return tr.Example(image_id=f"t{i}", caption=TokenSequence(ids=ids, length=5),
                          features=[fm])

    return tr.Dataset(train=[example(i) for i in range(n_train)],
                      val=[example(100 + i) for i in range(n_val)])


def tiny_captioner(vocab_size=8, dim=4, max_len=6, seed=0):
    cfg = ModelConfig(vocab_size=vocab_size, sources={"resnet50": dim}, d_model=8,
                      h=2, layers_enc=1, layers_dec=1, d_ff=16, max_len=max_len)
    return tr.FeatureCaptioner(CaptionModel(cfg, seed=seed))


class TestCaptioners:
    def test_tinycnn_captioner_validations(self):
        model, _ = make_model()
        cnn = vis.TinyCnnParams.create(d_model=8, seed=0)
        with pytest.raises(ValidationError):
            tr.TinyCnnCaptioner(model, cnn)  # no tinycnn source
        cfg = ModelConfig(vocab_size=6, sources={"tinycnn": 4}, d_model=8, h=2,
                          layers_enc=1, layers_dec=1, d_ff=16, max_len=6)
        with pytest.raises(ValidationError):
            tr.TinyCnnCaptioner(CaptionModel(cfg, seed=0), cnn)  # dim mismatch

    def test_tinycnn_memory_matches_ingest_path(self):
        cfg = ModelConfig(vocab_size=6, sources={"tinycnn": 8}, d_model=8, h=2,
                          layers_enc=1, layers_dec=1, d_ff=16, max_len=6)
        model = CaptionModel(cfg, seed=1)
        cnn = vis.TinyCnnParams.create(d_model=8, seed=2)
        captioner = tr.TinyCnnCaptioner(model, cnn)
        rng = np.random.default_rng(3)
        image = vis.Image(pixels=rng.random((8, 8, 3)).astype(np.float32))
        seq = TokenSequence(ids=[START_ID, 4, END_ID])
        via_captioner = captioner.memory(
            tr.Example(image_id="x", caption=seq, image=image))
        via_features = model.encode([vis.tinycnn_forward(image, cnn)])
        np.testing.assert_array_equal(via_captioner.data, via_features.data)

    def test_merged_parameters(self):
        cfg = ModelConfig(vocab_size=6, sources={"tinycnn": 8}, d_model=8, h=2,
                          layers_enc=1, layers_dec=1, d_ff=16, max_len=6)
        model = CaptionModel(cfg, seed=0)
        cnn = vis.TinyCnnParams.create(d_model=8, seed=0)
        captioner = tr.TinyCnnCaptioner(model, cnn)
        names = set(captioner.parameters())
        assert set(model.parameters()) < names
        assert {"cnn.conv1_k", "cnn.proj_w"} < names


class TestFit:
    def fast_cfg(self, **kw):
        base = dict(batch_size=2, base_lr=1e-3, peak_lr=1e-2, warmup_fraction=0.1,
                    max_epochs=8, patience=8, seed=3, optimizer_kind="adamax",
                    hflip_prob=0.0)
        base.update(kw)
        return tr.TrainConfig(**base)

    def test_loss_decreases(self):
        captioner = tiny_captioner()
        dataset = feature_dataset()
        history = tr.fit(captioner, dataset, self.fast_cfg())
        assert history[-1]["train_loss"] < history[0]["train_loss"]
        assert all(set(h) == {"epoch", "train_loss", "val_loss", "lr"} for h in history)
        assert [h["epoch"] for h in history] == list(range(len(history)))

    def test_same_seed_identical_history(self):
        h1 = tr.fit(tiny_captioner(seed=7), feature_dataset(seed=11), self.fast_cfg())
        h2 = tr.fit(tiny_captioner(seed=7), feature_dataset(seed=11), self.fast_cfg())
        assert tr.history_to_json(h1) == tr.history_to_json(h2)

    def test_restores_best_weights(self):
        captioner = tiny_captioner(seed=2)
        dataset = feature_dataset(seed=5)
        history = tr.fit(captioner, dataset, self.fast_cfg(max_epochs=6))
        best = min(h["val_loss"] for h in history)
        final_val = tr.evaluate_loss(captioner, dataset.val)
        assert final_val == pytest.approx(best, abs=1e-7)

    def test_empty_split_rejected(self):
        captioner = tiny_captioner()
        dataset = feature_dataset()
        with pytest.raises(EmptySplit):
            tr.fit(captioner, tr.Dataset(train=[], val=dataset.val), self.fast_cfg())
        with pytest.raises(EmptySplit):
            tr.fit(captioner, tr.Dataset(train=dataset.train, val=[]), self.fast_cfg())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_reports_epoch_and_image(self):
        captioner = tiny_captioner()
        dataset = feature_dataset()
        huge = vis.FeatureMap(source="resnet50",
                              values=np.full(4, 1e38, dtype=np.float32))
        bad = tr.Example(image_id="boom", caption=dataset.train[0].caption,
                         features=[huge])
        dataset.train[0] = bad
        with pytest.raises(NonFinite, match=r"epoch 0.*'boom'"):
            tr.fit(captioner, dataset, self.fast_cfg(seed=0))

    def test_short_caption_rejected(self):
        captioner = tiny_captioner()
        dataset = feature_dataset()
        seq = TokenSequence(ids=[START_ID, PAD_ID, PAD_ID], length=1)
        dataset.train[0] = tr.Example(image_id="short", caption=seq,
                                      features=dataset.train[0].features)
        with pytest.raises(ValidationError):
            tr.fit(captioner, dataset, self.fast_cfg())

    def test_tinycnn_path_trains(self):
        cfg = ModelConfig(vocab_size=8, sources={"tinycnn": 8}, d_model=8, h=2,
                          layers_enc=1, layers_dec=1, d_ff=16, max_len=6)
        model = CaptionModel(cfg, seed=0)
        cnn = vis.TinyCnnParams.create(d_model=8, seed=1)
        captioner = tr.TinyCnnCaptioner(model, cnn)
        rng = np.random.default_rng(9)

        def example(i):
            image = vis.Image(pixels=rng.random((8, 8, 3)).astype(np.float32))
            ids = [START_ID, 4 + i % 4, 5, END_ID, PAD_ID, PAD_ID]
            return tr.Example(image_id=f"c{i}",
                              caption=TokenSequence(ids=ids, length=4), image=image)

        dataset = tr.Dataset(train=[example(i) for i in range(3)],
                             val=[example(10)])
        before = {n: p.data.copy() for n, p in captioner.cnn.parameters().items()}
        history = tr.fit(captioner, dataset, self.fast_cfg(max_epochs=2, hflip_prob=0.5))
        assert len(history) == 2
        changed = any(not np.array_equal(before[n], p.data)
                      for n, p in captioner.cnn.parameters().items())
        assert changed, "CNN weights never updated"


class TestHistoryJson:
    def test_round_trip_and_timestamp(self):
        history = [{"epoch": 0, "train_loss": 1.5, "val_loss": 2.25, "lr": 1e-4}]
        text = tr.history_to_json(history)
        payload = json.loads(text)
        assert payload == {"epochs": history}
        stamped = tr.history_to_json(history, "2026-01-01T00:00:00Z")
        assert json.loads(stamped)["generated_at"] == "2026-01-01T00:00:00Z"
