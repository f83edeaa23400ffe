"""A look at the synthetic singer used for every experiment in this repo.

Run with ``python3 demos/01_toy_singer.py``.
"""
import tempfile
from pathlib import Path

import numpy as np

from envpredict.features import compute_norm_stats, mel_grid, read_feature_file, split_corpus, write_feature_file
from envpredict.toysinger import ToySingerConfig, phoneme_templates, synth_corpus

# %% The frequency axis: 60 bins spaced evenly on the mel scale.
grid = mel_grid()
print("first bins (Hz):", np.round(grid.centers[:4], 1), "... last:", round(float(grid.centers[-1]), 1))

# %% Each phoneme is a fixed dB template built from a few Gaussian formants.
singer = ToySingerConfig(seed=0)
templates = phoneme_templates(singer)
print("templates:", templates.shape, "peak bin per phoneme:", templates.argmax(axis=1))

# %% A corpus is a list of phrases. Envelopes crossfade between templates,
# with a tilt that follows loudness and a ripple that follows f0.
corpus = synth_corpus(singer, n_phrases=45, phrase_len=120)
seq = corpus[0]
print("phrase 0:", seq.envelopes.shape, "phonemes", np.unique(seq.phonemes), f"f0 {seq.f0.min():.0f}-{seq.f0.max():.0f} Hz")

step = np.abs(np.diff(seq.envelopes, axis=0)).mean()
print(f"mean frame-to-frame change: {step:.2f} dB")

# %% Train/test membership is a hash of the phrase index, so it never moves.
train, test = split_corpus(corpus)
print("held out:", [s.phrase_id for s in test])

# Normalisation comes from the training side only.
norm = compute_norm_stats(train)
print(f"envelope mean {norm.env_mean:.3f} dB, sd {norm.env_sd:.3f} dB")

# %% Files round-trip exactly.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "p0.fsq"
    write_feature_file(seq, path)
    back = read_feature_file(path)
    print("bit-exact round trip:", back.envelopes.tobytes() == seq.envelopes.tobytes(), f"({path.stat().st_size} bytes)")
