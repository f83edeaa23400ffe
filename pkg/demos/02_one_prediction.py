"""From controls and sixteen past frames to one predicted envelope frame.

Run with ``python3 demos/02_one_prediction.py``.
"""
import numpy as np

from envpredict.architectures import (
    ModelConfig,
    PredictionInput,
    build_model,
    desk_config,
    param_count,
    predict_frame,
    receptive_field,
)
from envpredict.losses import cgm_sample
from envpredict.toysinger import ToySingerConfig, synth_corpus

# %% Full default sizes first. Envelope history is 16 frames; the phoneme
# window is 64 frames centred on the target, f0 and loudness 8 each.
cfg = ModelConfig()
print("receptive fields (before, after):", receptive_field(cfg))
for variant in ("proposed", "bb1", "bb2"):
    print(f"{variant:>9}: {param_count(build_model(cfg, variant)):>9,d} parameters")

# %% The desk configuration keeps every depth and narrows the widths.
model = build_model(desk_config(head="cgm"), "proposed", seed=0)
print("desk proposed/cgm:", param_count(model), "parameters")

seq = synth_corpus(ToySingerConfig(seed=0), 1, 120)[0]
t = 60
h = model.config.history


def window(track, w):
    return track[t - w // 2 : t + w // 2]


inp = PredictionInput(
    env_history=(seq.envelopes[t - h : t] - 7.8) / 7.7,  # roughly normalised
    phoneme_window=window(seq.phonemes, model.config.window("ph")),
    f0_window=(np.log(window(seq.f0, 8)) - 5.4) / 0.23,
    loudness_window=(window(seq.loudness, 8) - 9.0) / 4.3,
)

# %% The net predicts an offset that is added to the last history frame.
# The output layer starts at zero, so before training every component mean
# is exactly the previous frame and the weights are uniform.
out = predict_frame(model, inp)
weights = out.weights()
print("mixture weights, bin 0:", np.round(weights[0], 3))
offset = out.means[:, 0] - inp.env_history[-1]
print(f"component-0 offset from previous frame: max |.| = {np.abs(offset).max():.3f}")

# %% Temperature 0 picks the top component's mean; higher temperatures sample.
rng = np.random.default_rng(0)
greedy = cgm_sample(out, 0.0)
for tau in (0.25, 1.0):
    spread = np.std([cgm_sample(out, tau, rng) - greedy for _ in range(200)])
    print(f"tau={tau}: sample spread around the greedy frame {spread:.3f}")
