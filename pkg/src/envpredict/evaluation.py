"""Autoregressive generation and objective error measures."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .architectures import control_windows
from .features import clamped_indices
from .losses import CGMParams, cgm_sample


@dataclass
class EvalReport:
    per_phrase_mse: list = field(default_factory=list)
    tf_mse: float = float("nan")
    baseline_mse: float = float("nan")
    drift: np.ndarray | None = None

    def records(self):
        out = [
            {"kind": "teacher_forced", "tf_mse_db2": self.tf_mse, "repeat_prev_mse_db2": self.baseline_mse},
        ]
        out += [
            {"kind": "phrase", "index": i, "tf_mse_db2": v} for i, v in enumerate(self.per_phrase_mse)
        ]
        if self.drift is not None:
            out += [{"kind": "drift", "horizon": k, "mean_abs_db": float(v)} for k, v in enumerate(self.drift)]
        return out


def _padded_controls(model, seqs, start, n_frames):
    """Normalised control tracks covering frames [start, start + n_frames) plus context.

    Frames outside a phrase are edge-replicated.
    """
    left, right = model.config.control_context
    ph, f0, loud = [], [], []
    for s in seqs:
        idx = clamped_indices(start - left, n_frames + left + right, len(s))
        ph.append(s.phonemes[idx])
        f0.append(s.f0[idx])
        loud.append(s.loudness[idx])
    norm = model.norm
    return np.stack(ph), norm.norm_f0(np.stack(f0)), norm.norm_loud(np.stack(loud)), left


def _frame(out, tau, rng):
    if isinstance(out, CGMParams):
        return cgm_sample(out, tau, rng)
    return out.data


def rollout(model, seqs, seeds, n_steps, tau=0.0, rng=None):
    """Free-run ``n_steps`` frames for a batch of phrases (normalised in, dB out).

    ``seeds`` is (B, history, bins) in dB and holds the frames just before
    the first generated one, which is phrase frame ``history``.
    """
    cfg = model.config
    h = cfg.history
    seeds = np.asarray(seeds, dtype=np.float64)
    if seeds.shape[1] != h:
        raise ValueError(f"need {h} seed frames, got {seeds.shape[1]}")
    ph, f0, loud, left = _padded_controls(model, seqs, 0, h + n_steps)
    out_frames = np.empty((len(seqs), h + n_steps, seeds.shape[2]))
    out_frames[:, :h] = model.norm.norm_env(seeds)
    with ad.no_grad():
        if n_steps:
            ctrl = model.encode_controls(*control_windows(cfg, ph, f0, loud, left + h, n_steps))
        for j in range(n_steps):
            out = model.predict_frames(out_frames[:, j : j + h], ctrl[:, j : j + 1])
            frame = _frame(out, tau, rng)
            ad.check_finite(frame, f"generated frame {h + j}")
            out_frames[:, h + j] = frame[:, 0]
    env = model.norm.denorm_env(out_frames)
    env[:, :h] = seeds
    return env


def generate(model, phonemes, f0, loudness, seed_envelopes, tau=0.0, rng=None, vocab_size=None):
    """Generate T envelope frames (dB); the first ``history`` frames are the seeds."""
    from .features import FeatureSequence

    phonemes, f0, loudness = (np.asarray(x) for x in (phonemes, f0, loudness))
    t = len(phonemes)
    if not (len(f0) == len(loudness) == t):
        raise ValueError(
            f"control tracks differ in length: phonemes {t}, f0 {len(f0)}, loudness {len(loudness)}"
        )
    h = model.config.history
    if t <= h:
        raise ValueError(f"need more than {h} frames to generate, got {t}")
    seed_envelopes = np.asarray(seed_envelopes, dtype=np.float64)
    v = vocab_size or model.config.phoneme_vocab
    dummy = np.zeros((t, seed_envelopes.shape[1]))
    seq = FeatureSequence(dummy, phonemes, f0, loudness, v)
    return rollout(model, [seq], seed_envelopes[None, :h], t - h, tau, rng)[0]


def _tf_predictions(model, seq):
    cfg = model.config
    h = cfg.history
    n = len(seq) - h
    ph, f0, loud, left = _padded_controls(model, [seq], 0, len(seq))
    with ad.no_grad():
        ctrl = model.encode_controls(*control_windows(cfg, ph, f0, loud, left + h, n))
        out = model.predict_frames(model.norm.norm_env(seq.envelopes[None, :-1]), ctrl)
    if isinstance(out, CGMParams):
        out = cgm_sample(out, 0.0)
    else:
        out = out.data
    return model.norm.denorm_env(out[0])


def eval_teacher_forced(model, split):
    """Per-phrase and pooled MSE (dB^2) over frames with a full history."""
    h = model.config.history
    usable = [s for s in split if len(s) > h]
    if not usable:
        raise ValueError("evaluation split is empty (or has no phrase longer than the history)")
    rep = EvalReport()
    sq, base, count = 0.0, 0.0, 0
    for seq in usable:
        pred = _tf_predictions(model, seq)
        target = seq.envelopes[h:]
        err = (pred - target) ** 2
        rep.per_phrase_mse.append(float(err.mean()))
        sq += float(err.sum())
        base += float(((seq.envelopes[h - 1 : -1] - target) ** 2).sum())
        count += err.size
    rep.tf_mse = sq / count
    rep.baseline_mse = base / count
    return rep


def repeat_previous_mse(split, history=16):
    """MSE (dB^2) of predicting every frame as a copy of the one before it."""
    num, den = 0.0, 0
    for seq in split:
        d = seq.envelopes[history:] - seq.envelopes[history - 1 : -1]
        num += float((d * d).sum())
        den += d.size
    if den == 0:
        raise ValueError("evaluation split is empty")
    return num / den


def free_run_drift(model, split, horizon=200, tau=0.0, rng=None):
    """Mean |error| in dB at free-run steps 0..horizon after seeding with true frames.

    Step 0 is the last seed frame, so the curve starts at exactly 0.
    Phrases are processed in phrase-id order so the result does not depend
    on the order of ``split``.
    """
    h = model.config.history
    if not split:
        raise ValueError("evaluation split is empty")
    short = [len(s) for s in split if len(s) < h + horizon]
    if short:
        raise ValueError(
            f"free-run drift over {horizon} frames needs phrases of >= {h + horizon} frames, "
            f"shortest has {min(short)}"
        )
    seqs = sorted(split, key=lambda s: s.phrase_id)
    seeds = np.stack([s.envelopes[:h] for s in seqs])
    gen = rollout(model, seqs, seeds, horizon, tau, rng)
    truth = np.stack([s.envelopes[: h + horizon] for s in seqs])
    err = np.abs(gen - truth)[:, h - 1 :]
    return err.mean(axis=(0, 2))
