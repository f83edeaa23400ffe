"""The proposed 2d-convolutional envelope predictor and the two baselines.

All three variants share the control encoder: phonemes go through an
embedding, f0 and loudness through outer products with a learned basis, and
each track through its own symmetric stack of (2x1) dilated convolutions.
They differ in how the envelope history is read and how the next frame is
reconstructed:

``proposed``
    causal (2x1) time stack over the history treated as a time x frequency
    image, then DenseNet stacks of (1x2) frequency convolutions.
``bb1``
    WaveNet-style 1d causal stack with the bins as channels.
``bb2``
    the same stack with (2x3) kernels dilated in time and frequency.

Every variant adds its output to the previous frame (the mean of each
mixture component for the ``cgm`` head).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ConvSpec, Tensor, activation, concat_features, conv2d, reshape
from .features import NormStats
from .losses import SIGMA_MIN_DB, CGMParams

VARIANTS = ("proposed", "bb1", "bb2")
HEADS = ("mse", "cgm")
BRANCHES = ("ph", "f0", "loud")


@dataclass(frozen=True)
class ModelConfig:
    n_e: int = 4
    n_ph: int = 6
    n_f0: int = 3
    n_loud: int = 3
    n_bins: int = 60
    freq_stacks: int = 3
    layers_per_freq_stack: int = 4
    densenet_growth: int = 16
    bottleneck_width: int = 64
    time_channels: int = 64
    head: str = "mse"
    cgm_components: int = 4
    phoneme_vocab: int = 10
    time_activation: str = "gated"
    freq_activation: str = "relu"
    bb1_channels: int = 256
    bb2_channels: int = 80

    def __post_init__(self):
        for f in ("n_e", "n_ph", "n_f0", "n_loud"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        for f in ("time_activation", "freq_activation"):
            if getattr(self, f) not in ("relu", "tanh", "gated"):
                raise ValueError(f"{f} must be relu, tanh or gated")
        if self.freq_activation == "gated":
            raise ValueError("gated activation is only supported in the time stacks")
        for f in (
            "freq_stacks",
            "layers_per_freq_stack",
            "densenet_growth",
            "bottleneck_width",
            "time_channels",
            "cgm_components",
            "phoneme_vocab",
            "bb1_channels",
            "bb2_channels",
        ):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")

    @property
    def history(self):
        return 2**self.n_e

    def window(self, branch):
        return 2 ** {"ph": self.n_ph, "f0": self.n_f0, "loud": self.n_loud}[branch]

    @property
    def out_features(self):
        return 1 if self.head == "mse" else 3 * self.cgm_components

    @property
    def control_context(self):
        """Frames of control context needed (before, after) a run of targets."""
        w = max(self.window(b) for b in BRANCHES)
        return (w // 2, w // 2 - 1)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def desk_config(**overrides):
    """Narrow widths that train in minutes on one CPU core; depths match the full config."""
    base = dict(
        time_channels=8,
        densenet_growth=8,
        bottleneck_width=16,
        bb1_channels=32,
        bb2_channels=12,
    )
    base.update(overrides)
    return ModelConfig(**base)


def receptive_field(cfg):
    """Frames (past, future) each input branch can see around the predicted frame."""
    out = {"env": (cfg.history, 0)}
    for b in BRANCHES:
        w = cfg.window(b)
        out[b] = (-(-w // 2), w // 2 - 1)
    return out


# --------------------------------------------------------------------------
# layer plans


def _time_stack(plan, prefix, depth, cin, channels, act, alignment, kernel=(2, 1), freq_dilate=False, padding="none"):
    cout = 2 * channels if act == "gated" else channels
    for layer in range(depth):
        d = 2**layer
        plan[f"{prefix}.t{layer}"] = ConvSpec(
            kernel, (d, d if freq_dilate else 1), padding, alignment, cin, cout
        )
        cin = channels
    return cin


def layer_plan(cfg, variant):
    """Ordered mapping from layer name to ConvSpec for a config and variant."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    plan = {}
    c = cfg.time_channels
    act = cfg.time_activation
    for b in BRANCHES:
        _time_stack(plan, b, getattr(cfg, f"n_{b}"), 1, c, act, "symmetric_time")
    ctrl = 3 * c
    if variant == "proposed":
        _time_stack(plan, "env", cfg.n_e, 1, c, act, "causal_time")
        cs = 4 * c
        g, bw = cfg.densenet_growth, cfg.bottleneck_width
        for s in range(cfg.freq_stacks):
            for j in range(cfg.layers_per_freq_stack):
                plan[f"fs{s}.l{j}.bn"] = ConvSpec(in_features=cs + j * g, out_features=bw)
                plan[f"fs{s}.l{j}.conv"] = ConvSpec(
                    (1, 2), (1, 2**j), "same_frequency", "not_applicable", bw, g
                )
            cs = cs + cfg.layers_per_freq_stack * g
            if s < cfg.freq_stacks - 1:
                plan[f"fs{s}.tr"] = ConvSpec(in_features=cs, out_features=bw)
                cs = bw
        plan["out"] = ConvSpec(in_features=cs, out_features=cfg.out_features)
    elif variant == "bb1":
        r = cfg.bb1_channels
        _time_stack(plan, "env", cfg.n_e, cfg.n_bins, r, act, "causal_time")
        plan["cond"] = ConvSpec(in_features=ctrl, out_features=1)
        plan["hidden"] = ConvSpec(in_features=r + cfg.n_bins, out_features=r)
        plan["out"] = ConvSpec(in_features=r, out_features=cfg.n_bins * cfg.out_features)
    else:
        r = cfg.bb2_channels
        _time_stack(
            plan, "env", cfg.n_e, 1, r, act, "causal_time",
            kernel=(2, 3), freq_dilate=True, padding="same_frequency",
        )
        plan["hidden"] = ConvSpec(in_features=r + ctrl, out_features=r)
        plan["out"] = ConvSpec(in_features=r, out_features=cfg.out_features)
    return plan


def param_shapes(cfg, variant):
    shapes = {
        "ph.emb": (cfg.phoneme_vocab, cfg.n_bins),
        "f0.basis": (cfg.n_bins,),
        "loud.basis": (cfg.n_bins,),
    }
    for name, spec in layer_plan(cfg, variant).items():
        shapes[f"{name}.w"] = spec.weight_shape
        shapes[f"{name}.b"] = (spec.out_features,)
    return shapes


# --------------------------------------------------------------------------
# model


class Model:
    """Parameters plus the plan that wires them; immutable outside training."""

    def __init__(self, config, variant, params, norm=None):
        self.config = config
        self.variant = variant
        self.params = params
        self.norm = norm if norm is not None else NormStats()
        self.plan = layer_plan(config, variant)
        expected = param_shapes(config, variant)
        if set(expected) != set(params):
            raise ValueError("parameter names do not match the config")
        for k, shp in expected.items():
            if params[k].shape != tuple(shp):
                raise ValueError(f"parameter {k!r} has shape {params[k].shape}, expected {shp}")

    @property
    def head(self):
        return self.config.head

    def parameters(self):
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _conv(self, name, x):
        return conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], self.plan[name])

    def _stack(self, prefix, x, depth):
        """Run a (2 x k_f) time stack, evaluating only positions the outputs use.

        Output i of layer l reads layer inputs i and i + 2**l. For a few
        outputs (single-frame prediction) the needed positions thin out
        to a binary tree, so each layer gathers exactly those pairs.
        """
        act = self.config.time_activation
        n_out = x.shape[1] - (2**depth - 1)
        need = [np.arange(n_out)]
        for layer in reversed(range(depth)):
            p = need[0]
            need.insert(0, np.union1d(p, p + 2**layer))
        dense = sum(x.shape[1] - (2 ** (k + 1) - 1) for k in range(depth))
        if dense <= sum(len(p) for p in need[1:]):
            for layer in range(depth):
                x = activation(self._conv(f"{prefix}.t{layer}", x), act)
            return x
        if len(need[0]) < x.shape[1]:
            x = ad.take(x, need[0], axis=1)
        have = need[0]
        for layer in range(depth):
            name = f"{prefix}.t{layer}"
            spec = self.plan[name]
            d = 2**layer
            p = need[layer + 1]
            if len(have) == len(p) + d and have[-1] - have[0] == len(have) - 1:
                y = self._conv(name, x)
            else:
                ia = np.searchsorted(have, p)
                ib = np.searchsorted(have, p + d)
                b, _, f, c = x.shape
                pairs = ad.reshape(ad.take(x, np.stack([ia, ib], axis=1), axis=1), (b * len(p), 2, f, c))
                spec1 = replace(spec, dilation=(1, spec.dilation[1]))
                y = conv2d(pairs, self.params[f"{name}.w"], self.params[f"{name}.b"], spec1)
                y = ad.reshape(y, (b, len(p)) + y.shape[2:])
            x = activation(y, act)
            have = p
        return x

    def encode_controls(self, phonemes, f0, loudness):
        """Control features for N consecutive targets, shape (B, N, bins, 3C).

        Each track is (B, N + window - 1) long, covering its branch window
        around every target; f0 and loudness are normalised.
        """
        cfg = self.config
        nb = cfg.n_bins
        phonemes = np.asarray(phonemes)
        b, lp = phonemes.shape
        x_ph = reshape(ad.embedding_lookup(phonemes, self.params["ph.emb"]), (b, lp, nb, 1))
        outs = [self._stack("ph", x_ph, cfg.n_ph)]
        for name, track in (("f0", f0), ("loud", loudness)):
            track = np.asarray(track, dtype=np.float64)
            x = ad.scalar_expand(track, self.params[f"{name}.basis"])
            x = reshape(x, track.shape + (nb, 1))
            outs.append(self._stack(name, x, getattr(cfg, f"n_{name}")))
        n = {o.shape[1] for o in outs}
        if len(n) != 1:
            raise ValueError(f"control windows give different target counts {sorted(n)}")
        return concat_features(outs)

    def predict_frames(self, history, controls):
        """Predict N consecutive frames from a teacher-forced history.

        ``history`` is (B, 2**n_e + N - 1, bins) normalised envelopes; target j
        sees frames j .. j + 2**n_e - 1 and its previous frame is the last of
        those. Returns a (B, N, bins) Tensor, or CGMParams for the cgm head.
        """
        cfg = self.config
        history = ad.as_tensor(history)
        b, t, nb = history.shape
        h = cfg.history
        n = t - h + 1
        if n < 1:
            raise ValueError(f"history has {t} frames, need at least {h}")
        if controls.shape[:3] != (b, n, nb):
            raise ValueError(f"control features {controls.shape} do not match {n} targets")
        prev = history[:, h - 1 :, :]
        if self.variant == "proposed":
            x = self._stack("env", reshape(history, (b, t, nb, 1)), cfg.n_e)
            x = concat_features([x, controls])
            fa = cfg.freq_activation
            for s in range(cfg.freq_stacks):
                feats = [x]
                for j in range(cfg.layers_per_freq_stack):
                    inp = concat_features(feats)
                    y = activation(self._conv(f"fs{s}.l{j}.bn", inp), fa)
                    feats.append(activation(self._conv(f"fs{s}.l{j}.conv", y), fa))
                x = concat_features(feats)
                if s < cfg.freq_stacks - 1:
                    x = activation(self._conv(f"fs{s}.tr", x), fa)
            out = self._conv("out", x)
        elif self.variant == "bb1":
            x = self._stack("env", reshape(history, (b, t, 1, nb)), cfg.n_e)
            cond = reshape(self._conv("cond", controls), (b, n, 1, nb))
            x = activation(self._conv("hidden", concat_features([x, cond])), "relu")
            out = reshape(self._conv("out", x), (b, n, nb, cfg.out_features))
        else:
            x = self._stack("env", reshape(history, (b, t, nb, 1)), cfg.n_e)
            x = activation(self._conv("hidden", concat_features([x, controls])), "relu")
            out = self._conv("out", x)
        if cfg.head == "mse":
            return prev + reshape(out, (b, n, nb))
        k = cfg.cgm_components
        sigma_min = SIGMA_MIN_DB / self.norm.env_sd
        means = out[..., k : 2 * k] + reshape(prev, (b, n, nb, 1))
        scales = ad.exp(out[..., 2 * k :]) + sigma_min
        return CGMParams(out[..., :k], means, scales)


def build_model(cfg, variant="proposed", seed=0, norm=None):
    """Instantiate parameters with seeded fan-in uniform initialisation."""
    rng = np.random.default_rng(seed)
    plan = layer_plan(cfg, variant)
    params = {}
    for name, shape in param_shapes(cfg, variant).items():
        if name == "ph.emb":
            params[name] = Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True)
        elif name.endswith(".basis"):
            params[name] = Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True)
        elif name.endswith(".b"):
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
        else:
            spec = plan[name[:-2]]
            fan_in = spec.kernel[0] * spec.kernel[1] * spec.in_features
            gain = 0.1 if name == "out.w" else 1.0
            params[name] = ad.init_uniform(rng, shape, fan_in, gain)
    return Model(cfg, variant, params, norm)


def build_bb_model(variant, cfg, seed=0, norm=None):
    if variant not in ("bb1", "bb2"):
        raise ValueError("baseline variant must be 'bb1' or 'bb2'")
    return build_model(cfg, variant, seed, norm)


def param_count(model):
    return int(sum(p.data.size for p in model.parameters().values()))


# --------------------------------------------------------------------------
# single-frame prediction


@dataclass
class PredictionInput:
    """Normalised inputs for one target frame, most recent history frame last."""

    env_history: np.ndarray
    phoneme_window: np.ndarray
    f0_window: np.ndarray
    loudness_window: np.ndarray


def control_windows(cfg, phonemes, f0, loudness, first, n):
    """Slice per-branch control windows for targets first .. first + n - 1.

    Tracks are (B, L) arrays already padded far enough; branch windows span
    [t - W/2, t + W/2 - 1] around each target t.
    """
    out = []
    for b, track in zip(BRANCHES, (phonemes, f0, loudness)):
        w = cfg.window(b)
        lo = first - w // 2
        hi = first + n - 1 + w // 2
        if lo < 0 or hi > track.shape[-1]:
            raise ValueError(
                f"{b} track of length {track.shape[-1]} does not cover frames {lo}..{hi - 1}"
            )
        out.append(track[..., lo:hi])
    return tuple(out)


def predict_frame(model, inp):
    """Predict the next frame (normalised) from one PredictionInput."""
    cfg = model.config
    checks = (
        ("env_history", np.shape(inp.env_history), (cfg.history, cfg.n_bins)),
        ("phoneme_window", np.shape(inp.phoneme_window), (cfg.window("ph"),)),
        ("f0_window", np.shape(inp.f0_window), (cfg.window("f0"),)),
        ("loudness_window", np.shape(inp.loudness_window), (cfg.window("loud"),)),
    )
    for name, got, want in checks:
        if tuple(got) != want:
            raise ValueError(f"{name} has shape {tuple(got)}, expected {want}")
    with ad.no_grad():
        ctrl = model.encode_controls(
            np.asarray(inp.phoneme_window)[None],
            np.asarray(inp.f0_window, dtype=np.float64)[None],
            np.asarray(inp.loudness_window, dtype=np.float64)[None],
        )
        out = model.predict_frames(np.asarray(inp.env_history, dtype=np.float64)[None], ctrl)
    if isinstance(out, CGMParams):
        p = out.numpy()
        return CGMParams(p.logits[0, 0], p.means[0, 0], p.scales[0, 0])
    return out.data[0, 0]


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "envpredict-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_model(model, path):
    """Write a JSON manifest at ``path`` and the raw parameters next to it (``.bin``).

    Parameters are stored as little-endian float64 in sorted-name order.
    """
    path = Path(path)
    blob_path = path.with_name(path.name + ".bin")
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": model.variant,
        "config": asdict(model.config),
        "norm": model.norm.as_dict(),
    }
    entries, chunks, offset = [], [], 0
    for name in sorted(model.parameters()):
        arr = np.ascontiguousarray(model.parameters()[name].data, dtype="<f8")
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes}
        )
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest["blob"] = blob_path.name
    manifest["params"] = entries
    extra = getattr(model, "checkpoint_extra", None)
    if extra is not None:
        manifest.update(extra())
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    blob_path.write_bytes(b"".join(chunks))


def load_model(path):
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: manifest is not valid JSON ({e})") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}"
        )
    cfg = ModelConfig.from_dict(manifest["config"])
    norm = NormStats(**manifest["norm"])
    variant = manifest["variant"]
    if variant == "oracle":
        from .toysinger import ToySingerOracle

        return ToySingerOracle.from_manifest(manifest)
    expected = param_shapes(cfg, variant)
    listed = {e["name"]: e for e in manifest["params"]}
    if set(listed) != set(expected):
        missing = sorted(set(expected) - set(listed))
        extra = sorted(set(listed) - set(expected))
        raise CheckpointError(f"{path}: parameter set differs (missing {missing}, extra {extra})")
    blob = (path.parent / manifest["blob"]).read_bytes()
    params = {}
    for name, shape in expected.items():
        e = listed[name]
        if tuple(e["shape"]) != tuple(shape):
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: manifest {tuple(e['shape'])}, "
                f"config implies {tuple(shape)}"
            )
        nbytes = int(np.prod(shape)) * 8
        if e["nbytes"] != nbytes:
            raise CheckpointError(f"{path}: byte count for {name!r} does not match its shape")
        if e["offset"] + nbytes > len(blob):
            raise CheckpointError(
                f"{path}: parameter blob truncated ({len(blob)} bytes, "
                f"{name!r} needs up to {e['offset'] + nbytes})"
            )
        arr = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=e["offset"])
        params[name] = Tensor(arr.reshape(shape).astype(np.float64), requires_grad=True)
    return Model(cfg, variant, params, norm)
