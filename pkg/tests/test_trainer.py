import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import neg_sdr_oracle
from pse.corpus import ManifestKind, make_manifest
from pse.errors import ArgumentError, ConfigError, TrainingError
from pse.metrics import sdr
from pse.mixer import mixture_stream
from pse.sepnet import ModelConfig, build_model, save_checkpoint
from pse.synthesis import build_augmented_set, simulated_backend
from pse.trainer import (EarlyStopping, LogEntry, TrainConfig, Trainer, TrainLog, finetune_pse, neg_sdr_loss,
                         neg_sdr_torch, train, validation_sdr)

MICRO = ModelConfig(encoder_filters=16, encoder_kernel=16, bottleneck_channels=8, convblock_channels=8,
                    skip_channels=8, blocks_per_repeat=2)


class TestLoss:
    def test_zero_estimate(self):
        v = np.random.default_rng(0).standard_normal(100)
        assert neg_sdr_loss(np.zeros(100), v) == pytest.approx(0.0, abs=1e-6)

    def test_minus_ten(self):
        v = np.random.default_rng(0).standard_normal(100)
        r = np.random.default_rng(1).standard_normal(100)
        r *= np.sqrt(np.sum(v ** 2) / 10 / np.sum(r ** 2))
        assert neg_sdr_loss(v - r, v) == pytest.approx(-10.0, abs=1e-6)

    def test_floor(self):
        v = np.random.default_rng(0).standard_normal(100)
        assert neg_sdr_loss(v, v) == pytest.approx(-80.0, abs=1e-9)

    def test_errors(self):
        with pytest.raises(ArgumentError):
            neg_sdr_loss(np.zeros(3), np.ones(4))
        with pytest.raises(ArgumentError):
            neg_sdr_loss(np.zeros(3), np.zeros(3))

    def test_torch_matches_numpy(self):
        rng = np.random.default_rng(2)
        v, e = rng.standard_normal((3, 200)), rng.standard_normal((3, 200))
        t = neg_sdr_torch(torch.tensor(e), torch.tensor(v)).numpy()
        assert np.allclose(t, [neg_sdr_loss(a, b) for a, b in zip(e, v)], atol=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-2, 10.0), st.integers(1, 300))
    def test_loss_is_negative_sdr(self, seed, noise, n):
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(n)
        e = v + noise * rng.standard_normal(n)
        ratio = np.sum((v - e) ** 2) / np.sum(v ** 2)
        if ratio < 1e-6:
            return
        gap = neg_sdr_loss(e, v) + sdr(e, v)
        # the stabiliser shifts the loss by exactly 10 log10(1 + 1e-8 / ratio)
        assert abs(gap - 10 * math.log10(1 + 1e-8 / ratio)) < 1e-9
        if ratio >= 0.05:
            assert abs(gap) < 1e-6
        assert abs(neg_sdr_loss(e, v) - neg_sdr_oracle(e, v)) < 1e-9


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.learning_rate, c.batch_size, c.validate_every_mixtures, c.patience_mixtures) == (1e-5, 8, 500, 5000)
        assert c.snr_range == (-5.0, 5.0)

    def test_invariants(self):
        with pytest.raises(ConfigError):
            TrainConfig(patience_mixtures=100, validate_every_mixtures=500)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)

    def test_round_trip(self):
        c = TrainConfig(seed=4, snr_range=(-3, 2))
        assert TrainConfig.from_dict(c.to_dict()) == c


def predicted_stop(scores, every, patience):
    """Index of the validation at which training stops, or None."""
    best, best_i = -math.inf, -1
    for i, s in enumerate(scores):
        if s > best:
            best, best_i = s, i
        if (i - best_i) * every >= patience:
            return i
    return None


class TestEarlyStopping:
    def test_plateau_stops_ten_after_best(self):
        es = EarlyStopping(500, 5000)
        scores = [1, 2, 3, 3, 2, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0]
        stops = [es.update(s)[1] for s in scores]
        assert stops.index(True) == 2 + 10

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=60), st.integers(1, 5), st.integers(1, 12))
    def test_matches_analytic_prediction(self, scores, every_units, patience_factor):
        every = 100 * every_units
        patience = every * patience_factor
        es = EarlyStopping(every, patience)
        stop_at = None
        for i, s in enumerate(scores):
            if es.update(s)[1]:
                stop_at = i
                break
        assert stop_at == predicted_stop(scores, every, patience)


def test_trainlog_invariants(tmp_path):
    log = TrainLog()
    log.append(LogEntry(0, None, 1.0))
    log.append(LogEntry(500, 0.2, 2.0))
    with pytest.raises(ArgumentError):
        log.append(LogEntry(500, 0.1, 3.0))
    log.best_val_sdr = 2.0
    p = log.save(tmp_path / "log.jsonl")
    again = TrainLog.load(p)
    assert again.entries == log.entries and again.best_val_sdr == 2.0


@pytest.fixture
def toy_setup(small_corpus):
    _, sm, nm, _ = small_corpus
    val = list(mixture_stream(sm, nm, 4, segment_sec=0.5, seed=99))
    return sm, nm, val


def _cfg(**kw):
    base = dict(learning_rate=1e-3, batch_size=4, validate_every_mixtures=8, patience_mixtures=16,
                max_mixtures=48, segment_sec=0.5, seed=0, val_count=4)
    base.update(kw)
    return TrainConfig(**base)


def test_scripted_scores_stop_and_best_model(toy_setup, tmp_path):
    sm, nm, val = toy_setup
    scripted = iter([0.0, 5.0, 9.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.2])
    snapshots = []

    def validator(model):
        snapshots.append({k: v.clone() for k, v in model.net.state_dict().items()})
        return next(scripted)

    model = build_model("T", base=MICRO)
    cfg = _cfg(patience_mixtures=32, max_mixtures=10_000)
    model, log = Trainer(model, sm, nm, [], cfg, out_dir=tmp_path, validator=validator).run()
    assert [e.mixtures_seen for e in log.entries] == [0, 8, 16, 24, 32, 40, 48]
    assert log.best_val_sdr == 9.0 and log.best_mixtures_seen == 16
    assert log.stop_reason == "patience"
    best = snapshots[2]
    assert all(torch.equal(best[k], v) for k, v in model.net.state_dict().items())
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "trainlog.jsonl").exists()


def test_returned_model_scores_best_logged_value(toy_setup):
    sm, nm, val = toy_setup
    model, log = train(build_model("T", base=MICRO), sm, nm, val, _cfg())
    assert log.best_val_sdr == max(log.val_scores())
    assert abs(validation_sdr(model, val, 4) - log.best_val_sdr) < 1e-6


def test_same_seed_identical_logs(toy_setup):
    sm, nm, val = toy_setup
    _, a = train(build_model("T", base=MICRO), sm, nm, val, _cfg())
    _, b = train(build_model("T", base=MICRO), sm, nm, val, _cfg())
    assert a.entries == b.entries


def test_max_mixtures_cap(toy_setup):
    sm, nm, val = toy_setup
    _, log = train(build_model("T", base=MICRO), sm, nm, val, _cfg(max_mixtures=20, patience_mixtures=1000))
    assert log.stop_reason == "max_mixtures" and log.entries[-1].mixtures_seen <= 20


def test_empty_manifest_rejected(toy_setup):
    sm, _, val = toy_setup
    with pytest.raises(ArgumentError):
        train(build_model("T", base=MICRO), sm, make_manifest("N", ManifestKind.noise, []), val, _cfg())


def test_non_finite_loss_dumps_batch(toy_setup, tmp_path):
    sm, nm, val = toy_setup
    model = build_model("T", base=MICRO)
    with torch.no_grad():
        model.net.decoder.weight.fill_(float("nan"))
    with pytest.raises(TrainingError) as e:
        Trainer(model, sm, nm, val, _cfg(), out_dir=tmp_path, validator=lambda m: 0.0).run()
    dump = np.load(e.value.dump_path)
    assert dump["x"].shape == (4, 8000)


def test_gradient_step_does_not_increase_batch_loss(toy_setup):
    sm, nm, _ = toy_setup
    mixes = list(mixture_stream(sm, nm, 4, segment_sec=0.5, seed=3))
    x = torch.tensor(np.stack([m.x.samples for m in mixes]), dtype=torch.float64)
    s = torch.tensor(np.stack([m.s.samples for m in mixes]), dtype=torch.float64)
    for init in range(20):
        net = build_model("T", base=MICRO, init_seed=init).net.double()
        opt = torch.optim.SGD(net.parameters(), lr=1e-4)
        before = neg_sdr_torch(net(x), s).mean()
        opt.zero_grad()
        before.backward()
        opt.step()
        with torch.no_grad():
            after = neg_sdr_torch(net(x), s).mean()
        assert after.item() <= before.item() + 1e-9


class TestFinetune:
    def test_records_source_and_uses_partitions(self, small_corpus, tmp_path):
        root, sm, nm, texts = small_corpus
        from pse.corpus import SpeakerRef, read_clip
        spk = SpeakerRef("x", [read_clip(sm.records[0], root)])
        synth = build_augmented_set(simulated_backend(1.0, 1), spk, texts, 6.0, 0, tmp_path / "aug")
        ckpt = save_checkpoint(build_model("T", base=MICRO), tmp_path / "gen.ckpt")
        model, log = finetune_pse(ckpt, synth, nm, _cfg(val_count=3), out_dir=tmp_path / "ft")
        assert log.source_checkpoint == model.training_meta["source_checkpoint_id"]
        assert TrainLog.load(tmp_path / "ft" / "trainlog.jsonl").source_checkpoint == log.source_checkpoint

    def test_empty_synth_rejected(self, small_corpus, tmp_path):
        _, _, nm, _ = small_corpus
        ckpt = save_checkpoint(build_model("T", base=MICRO), tmp_path / "gen.ckpt")
        with pytest.raises(ArgumentError):
            finetune_pse(ckpt, make_manifest("E", ManifestKind.synthesized_speech, []), nm, _cfg())

    def test_text_manifest_rejected(self, small_corpus, tmp_path):
        _, _, nm, texts = small_corpus
        ckpt = save_checkpoint(build_model("T", base=MICRO), tmp_path / "gen.ckpt")
        with pytest.raises(ArgumentError):
            finetune_pse(ckpt, texts, nm, _cfg())
