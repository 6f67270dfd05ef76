import pytest
import torch

from decred.data import AugmentConfig, BOS_ID, EOS_ID, PAD_ID, SynthSpec, synth_generate
from decred.decoding import DecodeConfig
from decred.losses import LossConfig
from decred.model import ModelConfig
from decred.trainer import (
    TrainConfig,
    _make_batch,
    calibrate_fusion,
    evaluate_dev_wer,
    lr_at,
    train,
)


def _tiny_cfgs(ds, total_steps=6, **train_kwargs):
    model_cfg = ModelConfig(
        E=1, D=2, d_model=16, d_ff=32, heads=2, dropout=0.1,
        feat_dim=12, vocab_size=ds.tokenizer.vocab_size, taps=(1, 2),
    )
    loss_cfg = LossConfig(alpha=0.3, betas={1: 0.4, 2: 0.6})
    defaults = dict(
        warmup_steps=total_steps - 1,
        total_steps=total_steps,
        batch_size=4,
        eval_every=max(total_steps // 2, 1),
        specaug_delay_steps=2,
        seed=0,
    )
    defaults.update(train_kwargs)
    train_cfg = TrainConfig(**defaults)
    aug_cfg = AugmentConfig(n_freq_masks=1, n_time_masks=1, max_time_width=4)
    return model_cfg, loss_cfg, train_cfg, aug_cfg


class TestSchedule:
    def test_zero_at_start(self):
        cfg = TrainConfig(warmup_steps=10, total_steps=100)
        assert lr_at(0, cfg) == 0.0

    def test_peak_at_warmup_end(self):
        cfg = TrainConfig(peak_lr=2e-3, warmup_steps=10, total_steps=100)
        assert lr_at(10, cfg) == pytest.approx(2e-3)

    def test_linear_ramp(self):
        cfg = TrainConfig(peak_lr=1e-3, warmup_steps=10, total_steps=100)
        assert lr_at(5, cfg) == pytest.approx(5e-4)

    def test_zero_at_end_and_beyond(self):
        cfg = TrainConfig(warmup_steps=10, total_steps=100)
        assert lr_at(100, cfg) == 0.0
        assert lr_at(150, cfg) == 0.0

    def test_decay_midpoint(self):
        cfg = TrainConfig(peak_lr=1e-3, warmup_steps=10, total_steps=110)
        assert lr_at(60, cfg) == pytest.approx(5e-4)

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            lr_at(-1, TrainConfig(warmup_steps=1, total_steps=2))


class TestTrainConfig:
    def test_warmup_must_precede_total(self):
        with pytest.raises(ValueError):
            TrainConfig(warmup_steps=100, total_steps=100)

    def test_patience_positive(self):
        with pytest.raises(ValueError):
            TrainConfig(warmup_steps=1, total_steps=2, patience=0)


class TestMakeBatch:
    def test_shapes_and_special_tokens(self, tiny_dataset):
        utts = tiny_dataset.utterances[:3]
        feats, feat_lens, inputs, targets, token_lens, ctc_targets = _make_batch(
            utts, [u.features for u in utts], tiny_dataset.tokenizer
        )
        assert feats.shape[0] == 3
        for i, u in enumerate(utts):
            ids = tiny_dataset.tokenizer.encode(u.transcript)
            n = len(ids)
            assert int(feat_lens[i]) == u.features.shape[0]
            assert int(token_lens[i]) == n + 1
            assert int(inputs[i, 0]) == BOS_ID
            assert inputs[i, 1 : n + 1].tolist() == ids
            assert targets[i, :n].tolist() == ids
            assert int(targets[i, n]) == EOS_ID
            assert (inputs[i, n + 1 :] == PAD_ID).all()
            assert ctc_targets[i].tolist() == ids

    def test_padded_frames_zero(self, tiny_dataset):
        utts = tiny_dataset.utterances[:3]
        feats, feat_lens, *_ = _make_batch(utts, [u.features for u in utts], tiny_dataset.tokenizer)
        for i in range(3):
            pad = feats[i, int(feat_lens[i]) :]
            assert pad.numel() == 0 or pad.abs().max().item() == 0.0


@pytest.fixture(scope="module")
def train_dataset():
    return synth_generate(SynthSpec(vocab_size=6, n_utts=24, len_range=(2, 4), feat_dim=12), seed=9)


class TestTrainLoop:
    def test_short_run_deterministic(self, train_dataset):
        model_cfg, loss_cfg, train_cfg, aug_cfg = _tiny_cfgs(train_dataset)
        runs = [
            train(model_cfg, loss_cfg, train_cfg, aug_cfg, train_dataset, train_dataset)
            for _ in range(2)
        ]
        assert runs[0].step_losses == runs[1].step_losses
        assert runs[0].metrics == runs[1].metrics
        pa = dict(runs[0].model.named_parameters())
        pb = dict(runs[1].model.named_parameters())
        for name in pa:
            assert torch.equal(pa[name], pb[name]), name

    def test_stops_at_total_steps(self, train_dataset):
        model_cfg, loss_cfg, train_cfg, aug_cfg = _tiny_cfgs(train_dataset, total_steps=4)
        result = train(model_cfg, loss_cfg, train_cfg, aug_cfg, train_dataset, train_dataset)
        assert result.stopped_step == 4
        assert len(result.step_losses) == 4

    def test_target_wer_stops_early(self, train_dataset):
        # an unreachable floor of 2.0 is satisfied by any dev WER, so the run
        # halts at the very first evaluation
        model_cfg, loss_cfg, train_cfg, aug_cfg = _tiny_cfgs(
            train_dataset, total_steps=40, eval_every=2, target_dev_wer=2.0, warmup_steps=10
        )
        result = train(model_cfg, loss_cfg, train_cfg, aug_cfg, train_dataset, train_dataset)
        assert result.stopped_step == 2

    def test_patience_stops(self, train_dataset, monkeypatch):
        import decred.trainer as trainer_mod

        monkeypatch.setattr(trainer_mod, "evaluate_dev_wer", lambda *a, **k: 1.0)
        model_cfg, loss_cfg, train_cfg, aug_cfg = _tiny_cfgs(
            train_dataset, total_steps=100, eval_every=1, patience=3, warmup_steps=50,
            target_dev_wer=-1.0,
        )
        result = train(model_cfg, loss_cfg, train_cfg, aug_cfg, train_dataset, train_dataset)
        # first eval improves on inf; the next `patience` evals do not
        assert result.stopped_step == 1 + train_cfg.patience

    def test_artifacts_written(self, train_dataset, tmp_path):
        model_cfg, loss_cfg, train_cfg, aug_cfg = _tiny_cfgs(train_dataset, total_steps=2)
        train(model_cfg, loss_cfg, train_cfg, aug_cfg, train_dataset, train_dataset, out_dir=str(tmp_path))
        assert (tmp_path / "checkpoint_best" / "weights.bin").exists()
        assert (tmp_path / "metrics.csv").read_text().startswith("step,")


class TestDevEval:
    def test_perfect_hyps_zero_wer(self, train_dataset, monkeypatch):
        from decred import trainer as trainer_mod

        model_cfg, loss_cfg, train_cfg, aug_cfg = _tiny_cfgs(train_dataset, total_steps=2)
        result = train(model_cfg, loss_cfg, train_cfg, aug_cfg, train_dataset, train_dataset)
        tok = train_dataset.tokenizer

        def fake_decode(model, feats_list, cfg, v=None, batch_size=64):
            return [tok.encode(u.transcript) for u in train_dataset.utterances]

        monkeypatch.setattr(trainer_mod, "greedy_decode_batch", fake_decode)
        assert evaluate_dev_wer(result.model, train_dataset) == 0.0


class TestCalibration:
    def test_never_worse_than_init(self, train_dataset):
        model_cfg, loss_cfg, train_cfg, aug_cfg = _tiny_cfgs(train_dataset, total_steps=4)
        result = train(model_cfg, loss_cfg, train_cfg, aug_cfg, train_dataset, train_dataset)
        v, info = calibrate_fusion(result.model, train_dataset, steps=20)
        assert info["ce_after"] <= info["ce_before"]
        assert set(v.vectors) == set(result.model.cfg.taps)

    def test_zero_steps_returns_one_hot_init(self, train_dataset):
        model_cfg, loss_cfg, train_cfg, aug_cfg = _tiny_cfgs(train_dataset, total_steps=2)
        result = train(model_cfg, loss_cfg, train_cfg, aug_cfg, train_dataset, train_dataset)
        v, info = calibrate_fusion(result.model, train_dataset, steps=0)
        assert info["ce_after"] == info["ce_before"]
        D = result.model.cfg.D
        assert torch.equal(v.vectors[D], torch.ones_like(v.vectors[D]))
        for d in result.model.cfg.taps:
            if d != D:
                assert torch.equal(v.vectors[d], torch.zeros_like(v.vectors[d]))
