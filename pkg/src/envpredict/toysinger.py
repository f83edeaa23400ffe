"""Deterministic synthetic singer: control tracks in, spectral envelopes out.

Each frame's envelope (dB over mel bins) is

    box-average of the phoneme templates over ``crossfade`` frames around t
    + tilt * loudness[t] * bin / (bins - 1)
    + ripple * sin(2 pi * bin * f0[t] / ripple_hz)

where a phoneme template is a sum of 2-3 Gaussian bumps over the bins. The
box average turns every phoneme change into a linear crossfade, so an
envelope frame is a fixed function of the controls in a short window.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor
from .features import N_BINS, FeatureSequence, NormStats


@dataclass(frozen=True)
class ToySingerConfig:
    vocab_size: int = 10
    formants: tuple = None
    tilt: float = 0.3
    ripple: float = 1.5
    ripple_hz: float = 2000.0
    crossfade: int = 8
    n_bins: int = N_BINS
    min_phone: int = 12
    max_phone: int = 48
    f0_base: float = 220.0
    f0_step: float = 0.15
    loud_step: float = 0.25
    smooth: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.crossfade < 1:
            raise ValueError("crossfade must be >= 1 frame")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.formants is None:
            object.__setattr__(self, "formants", random_formants(self.vocab_size, self.n_bins, self.seed))
        formants = tuple(tuple(tuple(float(v) for v in f) for f in ph) for ph in self.formants)
        object.__setattr__(self, "formants", formants)
        if len(formants) != self.vocab_size:
            raise ValueError("need one formant template per phoneme")
        for ph in formants:
            for c, w, _ in ph:
                if not 0 <= c <= self.n_bins - 1:
                    raise ValueError(f"formant centre {c} outside [0, {self.n_bins - 1}]")
                if w <= 0:
                    raise ValueError("formant widths must be > 0")

    def to_dict(self):
        d = asdict(self)
        d["formants"] = [[list(f) for f in ph] for ph in self.formants]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["formants"] = tuple(tuple(tuple(f) for f in ph) for ph in d["formants"])
        return cls(**d)


def random_formants(vocab_size, n_bins=N_BINS, seed=0):
    """2-3 (centre bin, width, height dB) triples per phoneme."""
    rng = np.random.default_rng([seed, 7919])
    out = []
    for _ in range(vocab_size):
        k = int(rng.integers(2, 4))
        centres = np.sort(rng.uniform(2, n_bins - 3, size=k))
        widths = rng.uniform(1.5, 5.0, size=k)
        heights = rng.uniform(10.0, 30.0, size=k)
        out.append(tuple((float(c), float(w), float(h)) for c, w, h in zip(centres, widths, heights)))
    return tuple(out)


def phoneme_templates(cfg):
    bins = np.arange(cfg.n_bins, dtype=np.float64)
    out = np.zeros((cfg.vocab_size, cfg.n_bins))
    for i, ph in enumerate(cfg.formants):
        for c, w, h in ph:
            out[i] += h * np.exp(-0.5 * ((bins - c) / w) ** 2)
    return out


def crossfade_offsets(cfg):
    lo = -(cfg.crossfade // 2)
    return np.arange(lo, lo + cfg.crossfade)


def _frame_terms(cfg, f0, loudness):
    bins = np.arange(cfg.n_bins, dtype=np.float64)
    f0 = np.asarray(f0, dtype=np.float64)[..., None]
    loudness = np.asarray(loudness, dtype=np.float64)[..., None]
    tilt = cfg.tilt * loudness * bins / (cfg.n_bins - 1)
    ripple = cfg.ripple * np.sin(2.0 * np.pi * bins * f0 / cfg.ripple_hz)
    return tilt + ripple


def render_envelopes(cfg, phonemes, f0, loudness):
    """Envelope frames (T x bins, dB) from control tracks via the generator formula."""
    phonemes = np.asarray(phonemes)
    t = len(phonemes)
    tmpl = phoneme_templates(cfg)
    idx = np.arange(t)[:, None] + crossfade_offsets(cfg)[None, :]
    blended = tmpl[phonemes[np.clip(idx, 0, t - 1)]].mean(axis=1)
    return blended + _frame_terms(cfg, f0, loudness)


def _smooth_walk(rng, n, step, width):
    x = np.cumsum(rng.normal(0.0, step, size=n + width - 1))
    kernel = np.ones(width) / width
    return np.convolve(x, kernel, mode="valid")


def synth_controls(cfg, phrase_len, rng):
    phonemes = np.empty(phrase_len, dtype=np.int32)
    pos, prev = 0, -1
    while pos < phrase_len:
        dur = int(rng.integers(cfg.min_phone, cfg.max_phone + 1))
        ph = int(rng.integers(0, cfg.vocab_size))
        if cfg.vocab_size > 1 and ph == prev:
            ph = (ph + 1 + int(rng.integers(0, cfg.vocab_size - 1))) % cfg.vocab_size
        phonemes[pos : pos + dur] = ph
        pos += dur
        prev = ph
    semis = 12.0 * np.tanh(
        (rng.normal(0.0, 3.0) + _smooth_walk(rng, phrase_len, cfg.f0_step * 3, cfg.smooth)) / 12.0
    )
    f0 = cfg.f0_base * 2.0 ** (semis / 12.0)
    loud = 10.0 + 10.0 * np.tanh(
        (rng.normal(0.0, 3.0) + _smooth_walk(rng, phrase_len, cfg.loud_step * 3, cfg.smooth)) / 10.0
    )
    return phonemes, f0, loud


def synth_corpus(cfg, n_phrases, phrase_len):
    """A list of FeatureSequence phrases, reproducible from ``cfg.seed``."""
    if n_phrases < 1:
        raise ValueError("n_phrases must be >= 1")
    if phrase_len < 1:
        raise ValueError("phrase_len must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    corpus = []
    for i in range(n_phrases):
        ph, f0, loud = synth_controls(cfg, phrase_len, rng)
        env = render_envelopes(cfg, ph, f0, loud)
        corpus.append(FeatureSequence(env, ph, f0, loud, cfg.vocab_size, phrase_id=i))
    return corpus


class ToySingerOracle:
    """Predictor that evaluates the generator formula from the control windows.

    It exposes the same prediction surface as a trained :class:`Model`
    (``encode_controls`` / ``predict_frames``) and ignores the envelope
    history, so its predictions are exact on toy-singer data.
    """

    variant = "oracle"

    def __init__(self, singer, config=None, norm=None):
        from .architectures import ModelConfig

        self.singer = singer
        self.config = config if config is not None else ModelConfig(
            phoneme_vocab=singer.vocab_size, n_bins=singer.n_bins
        )
        if self.config.window("ph") < singer.crossfade + 1:
            raise ValueError("phoneme window too short for the crossfade")
        self.norm = norm if norm is not None else NormStats()
        self._templates = phoneme_templates(singer)

    @property
    def head(self):
        return "mse"

    def parameters(self):
        return {}

    def zero_grad(self):
        pass

    def encode_controls(self, phonemes, f0, loudness):
        cfg, s = self.config, self.singer
        phonemes = np.asarray(phonemes)
        wp, wf, wl = (cfg.window(b) for b in ("ph", "f0", "loud"))
        n = phonemes.shape[-1] - wp + 1
        centre = wp // 2 + np.arange(n)[:, None] + crossfade_offsets(s)[None, :]
        blended = self._templates[phonemes[:, centre]].mean(axis=2)
        f0_hz = self.norm.denorm_f0(np.asarray(f0)[:, wf // 2 : wf // 2 + n])
        loud = self.norm.denorm_loud(np.asarray(loudness)[:, wl // 2 : wl // 2 + n])
        return Tensor(self.norm.norm_env(blended + _frame_terms(s, f0_hz, loud)))

    def predict_frames(self, history, controls):
        return controls

    def checkpoint_extra(self):
        return {"toy_singer": self.singer.to_dict()}

    @classmethod
    def from_manifest(cls, manifest):
        from .architectures import ModelConfig

        return cls(
            ToySingerConfig.from_dict(manifest["toy_singer"]),
            ModelConfig.from_dict(manifest["config"]),
            NormStats(**manifest["norm"]),
        )

