import json

import numpy as np
import pytest

from envpredict import training
from envpredict.architectures import build_model, desk_config
from envpredict.autodiff import AdamState, NonFiniteError
from envpredict.features import compute_norm_stats, sample_minibatch, split_corpus
from envpredict.toysinger import ToySingerConfig, ToySingerOracle, synth_corpus
from envpredict.training import (
    TrainConfig,
    TrainingDiverged,
    iterated_loss,
    noise_loss,
    teacher_forced_loss,
    train,
)


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(ToySingerConfig(seed=2), 45, 120)


def fresh(corpus, head="mse", variant="proposed", seed=0):
    model = build_model(desk_config(head=head), variant, seed=seed)
    model.norm = compute_norm_stats(split_corpus(corpus)[0])
    return model


def batch_for(model, corpus, n, seed=0, size=4):
    span = model.config.history + n
    return sample_minibatch(corpus, size, span, np.random.default_rng(seed), model.config.control_context)


def grads_of(model, loss):
    model.zero_grad()
    loss.backward()
    return {k: p.grad.copy() for k, p in model.parameters().items()}


class TestRegimeEquivalences:
    @pytest.mark.parametrize("head", ["mse", "cgm"])
    def test_single_iteration_is_teacher_forcing(self, corpus, head):
        model = fresh(corpus, head)
        batch = batch_for(model, corpus, 1)
        a = iterated_loss(model, batch, 1)
        b = teacher_forced_loss(model, batch)
        assert float(a.data) == float(b.data)
        ga, gb = grads_of(model, a), grads_of(model, b)
        assert all(ga[k].tobytes() == gb[k].tobytes() for k in ga)

    def test_zero_noise_is_teacher_forcing(self, corpus):
        model = fresh(corpus)
        batch = batch_for(model, corpus, 1)
        a = noise_loss(model, batch, 0.0, np.random.default_rng(5))
        b = teacher_forced_loss(model, batch)
        assert float(a.data) == float(b.data)
        ga, gb = grads_of(model, a), grads_of(model, b)
        assert all(ga[k].tobytes() == gb[k].tobytes() for k in ga)

    def test_noise_level_and_placement(self, corpus, monkeypatch):
        model = fresh(corpus)
        batch = batch_for(model, corpus, 1, size=16)
        seen = {}
        real = training.teacher_forced_loss

        def spy(model, batch, n_targets=1, env=None):
            seen["env"] = env
            return real(model, batch, n_targets, env)

        monkeypatch.setattr(training, "teacher_forced_loss", spy)
        noise_loss(model, batch, 12.0, np.random.default_rng(0))
        h = model.config.history
        noisy_db = model.norm.denorm_env(seen["env"])
        noise = noisy_db[:, :h] - batch.envelopes[:, :h]
        assert noise.std() == pytest.approx(12.0, rel=0.05)
        assert abs(noise.mean()) < 0.5
        # the target frame is left clean
        assert seen["env"][:, h:].tobytes() == model.norm.norm_env(batch.envelopes[:, h:]).tobytes()

    def test_oracle_loss_is_zero(self, corpus):
        oracle = ToySingerOracle(ToySingerConfig(seed=2), norm=compute_norm_stats(corpus))
        batch = batch_for(oracle, corpus, 8)
        assert float(teacher_forced_loss(oracle, batch, 8).data) < 1e-20
        assert float(iterated_loss(oracle, batch, 8).data) < 1e-20


class TestGradientPath:
    def test_rollout_gradient_flows_through_predictions(self, corpus):
        model = fresh(corpus, seed=3)
        batch = batch_for(model, corpus, 2)
        full = grads_of(model, iterated_loss(model, batch, 2))
        cut = grads_of(model, iterated_loss(model, batch, 2, detach_rollout=True))
        assert float(iterated_loss(model, batch, 2).data) == float(
            iterated_loss(model, batch, 2, detach_rollout=True).data
        )
        assert any(not np.array_equal(full[k], cut[k]) for k in full)

    def test_cgm_rollout_feeds_top_component_mean(self, corpus):
        model = fresh(corpus, "cgm")
        batch = batch_for(model, corpus, 3)
        loss = iterated_loss(model, batch, 3)
        assert np.isfinite(float(loss.data))
        grads = grads_of(model, loss)
        assert all(np.all(np.isfinite(g)) for g in grads.values())


class TestUpdates:
    @staticmethod
    def _frozen_batch_losses(corpus, regime, seed, batch_seed, updates=51):
        model = fresh(corpus, seed=seed)
        n = 1 if regime == "noise" else 4
        batch = batch_for(model, corpus, n, seed=batch_seed, size=16)
        state = AdamState()
        losses = []
        for _ in range(updates):
            if regime == "noise":
                losses.append(training.train_step_noise(model, batch, 0.0, state, np.random.default_rng(0)))
            else:
                losses.append(training.train_step_iterated(model, batch, n, state))
        rises = [i for i, (a, b) in enumerate(zip(losses, losses[1:])) if b >= a]
        return losses, rises

    @pytest.mark.parametrize("regime,seed", [("noise", 0), ("noise", 1), ("noise", 2), ("iterated", 0)])
    def test_frozen_batch_loss_decreases(self, corpus, regime, seed):
        losses, rises = self._frozen_batch_losses(corpus, regime, seed, batch_seed=1)
        assert len(rises) <= 1
        assert losses[-1] < losses[0]

    @pytest.mark.parametrize("batch_seed", [0, 2])
    def test_early_overshoot_is_brief(self, corpus, batch_seed):
        # Adam's first steps have unit size, so on batches with little
        # frame-to-frame change the zero-initialised output bias can
        # overshoot for a few updates before the descent settles.
        losses, rises = self._frozen_batch_losses(corpus, "noise", 1, batch_seed)
        assert all(i < 15 for i in rises)
        assert losses[-1] < losses[0]

    @pytest.mark.parametrize("variant", ["bb1", "bb2"])
    def test_baselines_train(self, corpus, variant):
        model = fresh(corpus, "cgm", variant)
        batch = batch_for(model, corpus, 1, size=8)
        state = AdamState()
        rng = np.random.default_rng(0)
        first = training.train_step_noise(model, batch, 12.0, state, rng)
        for _ in range(20):
            last = training.train_step_noise(model, batch, 0.0, state, rng)
        assert np.isfinite(first) and last < first

    def test_step_rejects_non_finite(self, corpus):
        model = fresh(corpus)
        batch = batch_for(model, corpus, 1)
        batch.envelopes[0, 0, 0] = np.nan
        before = {k: p.data.copy() for k, p in model.parameters().items()}
        with pytest.raises(NonFiniteError):
            training.train_step_noise(model, batch, 0.0, AdamState(), np.random.default_rng(0))
        assert all(np.array_equal(before[k], p.data) for k, p in model.parameters().items())

    def test_short_batch(self, corpus):
        model = fresh(corpus)
        batch = batch_for(model, corpus, 2)
        with pytest.raises(ValueError, match="need"):
            iterated_loss(model, batch, 3)


class TestTrainLoop:
    CFG = dict(batch=4, max_updates=6, eval_every=3, eval_horizon=40, seed=7)

    def test_zero_updates(self, corpus):
        model = build_model(desk_config(), seed=0)
        before = {k: p.data.copy() for k, p in model.parameters().items()}
        model, log = train(model, corpus, TrainConfig(max_updates=0))
        assert log.records == []
        assert all(np.array_equal(before[k], p.data) for k, p in model.parameters().items())

    @pytest.mark.parametrize("regime", ["noise", "iterated"])
    def test_log_and_no_leakage(self, corpus, regime, tmp_path):
        cfg = TrainConfig(regime=regime, n_iter=3, **self.CFG)
        model, log = train(build_model(desk_config()), corpus, cfg, log_path=tmp_path / "log.jsonl")
        test_ids = {s.phrase_id for s in split_corpus(corpus)[1]}
        assert test_ids and log.seen_phrase_ids and not (log.seen_phrase_ids & test_ids)
        ups = log.updates
        assert [r["update"] for r in ups] == list(range(1, 7))
        assert [r["lr"] for r in ups] == [AdamState().lr(t) for t in range(6)]
        assert [r["update"] for r in log.evals] == [3, 6]
        assert all(np.isfinite(r["tf_mse_db2"]) and r["drift_db"] >= 0 for r in log.evals)
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert [json.loads(x) for x in lines] == log.records

    def test_deterministic(self, corpus, tmp_path):
        outs = []
        for run in ("a", "b"):
            cfg = TrainConfig(regime="iterated", n_iter=2, checkpoint_dir=str(tmp_path / run), **self.CFG)
            model, log = train(build_model(desk_config(), seed=1), corpus, cfg)
            outs.append((log.to_jsonl(), (tmp_path / run / "update_0000006.json.bin").read_bytes()))
        assert outs[0] == outs[1]

    def test_divergence_restores_last_good(self, corpus, monkeypatch):
        real = training.train_step_noise
        calls = {"n": 0}

        def flaky(model, *args, **kw):
            calls["n"] += 1
            loss = real(model, *args, **kw)
            if calls["n"] == 5:
                raise NonFiniteError("loss is nan")
            return loss

        monkeypatch.setattr(training, "train_step_noise", flaky)
        cfg = TrainConfig(regime="noise", batch=4, max_updates=10, eval_every=2, eval_horizon=0, seed=0)
        snapshots = {}
        real_eval = training._snapshot

        def record(model):
            snap = real_eval(model)
            snapshots[calls["n"]] = snap
            return snap

        monkeypatch.setattr(training, "_snapshot", record)
        with pytest.raises(TrainingDiverged, match="update 5") as err:
            train(build_model(desk_config()), corpus, cfg)
        good = snapshots[4]
        assert all(np.array_equal(good[k], p.data) for k, p in err.value.model.parameters().items())
        assert len(err.value.log.updates) == 4

    def test_head_mismatch_and_config_errors(self, corpus):
        with pytest.raises(ValueError, match="head"):
            train(build_model(desk_config()), corpus, TrainConfig(head="cgm", max_updates=1))
        for bad in (dict(regime="dropout"), dict(n_iter=0), dict(sigma_db=-1.0), dict(batch=0), dict(max_updates=-1)):
            with pytest.raises(ValueError):
                TrainConfig(**bad)
