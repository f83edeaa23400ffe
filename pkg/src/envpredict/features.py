"""Frame-synchronous feature tracks, their file format, normalisation and batching."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FRAME_RATE = 200.0
N_BINS = 60
F_MAX = 8000.0


class FeatureFileError(ValueError):
    """Base class for malformed ``.fsq`` files."""


class BadMagicError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class TrackLengthError(FeatureFileError):
    pass


@dataclass(eq=False)
class FeatureSequence:
    """Aligned envelope (T x bins, dB), phoneme, f0 (Hz) and loudness tracks."""

    envelopes: np.ndarray
    phonemes: np.ndarray
    f0: np.ndarray
    loudness: np.ndarray
    vocab_size: int
    frame_rate: float = FRAME_RATE
    phrase_id: int = -1

    def __post_init__(self):
        self.envelopes = np.ascontiguousarray(self.envelopes, dtype=np.float64)
        self.phonemes = np.ascontiguousarray(self.phonemes, dtype=np.int32)
        self.f0 = np.ascontiguousarray(self.f0, dtype=np.float64)
        self.loudness = np.ascontiguousarray(self.loudness, dtype=np.float64)
        if self.envelopes.ndim != 2:
            raise ValueError("envelopes must be a (frames, bins) array")
        t = self.envelopes.shape[0]
        lengths = {
            "phonemes": len(self.phonemes),
            "f0": len(self.f0),
            "loudness": len(self.loudness),
        }
        bad = {k: n for k, n in lengths.items() if n != t}
        if bad:
            raise TrackLengthError(f"tracks must all have {t} frames, got {bad}")
        if self.frame_rate != FRAME_RATE:
            raise ValueError(f"frame rate must be {FRAME_RATE} Hz, got {self.frame_rate}")
        if not np.all(np.isfinite(self.envelopes)):
            raise ValueError("envelope values must be finite")
        if not np.all(np.isfinite(self.loudness)):
            raise ValueError("loudness values must be finite")
        if not np.all(self.f0 > 0) or not np.all(np.isfinite(self.f0)):
            raise ValueError("f0 must be finite and > 0 in every frame (interpolate unvoiced parts)")
        if t and (self.phonemes.min() < 0 or self.phonemes.max() >= self.vocab_size):
            raise ValueError(f"phoneme ids must lie in [0, {self.vocab_size})")

    def __len__(self):
        return self.envelopes.shape[0]

    @property
    def n_bins(self):
        return self.envelopes.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            self.vocab_size == other.vocab_size
            and self.frame_rate == other.frame_rate
            and all(
                a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip(self._tracks(), other._tracks())
            )
        )

    def _tracks(self):
        return (self.envelopes, self.phonemes, self.f0, self.loudness)


# --------------------------------------------------------------------------
# mel grid


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelGrid:
    n_bins: int
    f_max: float
    centers: np.ndarray = field(repr=False)


def mel_grid(n_bins=N_BINS, f_max=F_MAX):
    """Bin centres equally spaced on the mel axis between 0 Hz and ``f_max``.

    The first centre sits one mel step above 0 Hz and the last one at ``f_max``.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    if f_max <= 0:
        raise ValueError("f_max must be > 0")
    mels = np.linspace(0.0, hz_to_mel(f_max), n_bins + 1)[1:]
    centers = mel_to_hz(mels)
    centers[-1] = min(centers[-1], f_max)
    return MelGrid(n_bins, float(f_max), centers)


# --------------------------------------------------------------------------
# .fsq file format
#
# header: 8-byte magic, u16 version, u32 vocabulary size, u64 frame count T,
#         u32 bin count
# tracks: envelopes (f64, T*bins), phonemes (i32), f0 (f64), loudness (f64);
#         each track is preceded by its u64 frame count.
# all little endian

MAGIC = b"ENVSEQ\x00\x01"
VERSION = 1
_HEADER = struct.Struct("<8sHIQI")
_COUNT = struct.Struct("<Q")
_TRACK_DTYPES = ("<f8", "<i4", "<f8", "<f8")


def encode_tracks(envelopes, phonemes, f0, loudness, vocab_size):
    """Serialise raw tracks without validating them (lets tests forge bad files)."""
    envelopes = np.asarray(envelopes)
    t, nb = envelopes.shape
    parts = [_HEADER.pack(MAGIC, VERSION, int(vocab_size), t, nb)]
    for arr, dt in zip((envelopes, phonemes, f0, loudness), _TRACK_DTYPES):
        arr = np.asarray(arr).astype(dt)
        parts.append(_COUNT.pack(arr.shape[0]))
        parts.append(arr.tobytes())
    return b"".join(parts)


def write_feature_file(seq, path):
    data = encode_tracks(seq.envelopes, seq.phonemes, seq.f0, seq.loudness, seq.vocab_size)
    Path(path).write_bytes(data)


def decode_tracks(buf):
    if len(buf) < 8 or buf[:8] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:8])!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError("file ends inside the header")
    _, version, vocab, t, nb = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise FeatureFileError(f"unsupported feature file version {version}")
    pos = _HEADER.size
    tracks = []
    for i, dt in enumerate(_TRACK_DTYPES):
        if pos + _COUNT.size > len(buf):
            raise TruncatedFileError(f"file ends before track {i} length")
        (n,) = _COUNT.unpack_from(buf, pos)
        pos += _COUNT.size
        if n != t:
            raise TrackLengthError(f"track {i} has {n} frames, header says {t}")
        width = nb if i == 0 else 1
        nbytes = n * width * np.dtype(dt).itemsize
        if pos + nbytes > len(buf):
            raise TruncatedFileError(
                f"track {i} needs {nbytes} bytes, only {len(buf) - pos} remain"
            )
        arr = np.frombuffer(buf, dtype=dt, count=n * width, offset=pos)
        tracks.append(arr.reshape(n, nb) if i == 0 else arr)
        pos += nbytes
    if pos != len(buf):
        raise FeatureFileError(f"{len(buf) - pos} trailing bytes after the last track")
    return tracks, vocab


def read_feature_file(path, phrase_id=-1):
    (env, ph, f0, loud), vocab = decode_tracks(Path(path).read_bytes())
    return FeatureSequence(env, ph, f0, loud, vocab, phrase_id=phrase_id)


def write_manifest(paths, path):
    Path(path).write_text("".join(f"{p}\n" for p in paths))


def read_manifest(path):
    """Read a corpus manifest; relative entries resolve against the manifest's folder."""
    base = Path(path).parent
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            p = Path(line)
            out.append(p if p.is_absolute() else base / p)
    return out


def load_corpus(manifest):
    return [read_feature_file(p, phrase_id=i) for i, p in enumerate(read_manifest(manifest))]


# --------------------------------------------------------------------------
# train / test split


def is_test_phrase(index, test_fraction=0.1):
    h = hashlib.sha256(f"phrase-{int(index)}".encode()).digest()
    return int.from_bytes(h[:8], "little") / 2.0**64 < test_fraction


def split_corpus(corpus, test_fraction=0.1):
    """Deterministic split keyed on each phrase's id (list position if unset)."""
    train, test = [], []
    for i, seq in enumerate(corpus):
        pid = seq.phrase_id if seq.phrase_id >= 0 else i
        (test if is_test_phrase(pid, test_fraction) else train).append(seq)
    return train, test


# --------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class NormStats:
    """Per-track mean/sd; one envelope pair shared by all bins, f0 on log Hz."""

    env_mean: float = 0.0
    env_sd: float = 1.0
    logf0_mean: float = 0.0
    logf0_sd: float = 1.0
    loud_mean: float = 0.0
    loud_sd: float = 1.0

    def __post_init__(self):
        for name in ("env_sd", "logf0_sd", "loud_sd"):
            v = getattr(self, name)
            if not v > 0:
                raise ValueError(f"{name} must be > 0, got {v}")

    def as_dict(self):
        return {k: float(getattr(self, k)) for k in self.__dataclass_fields__}

    def norm_env(self, x):
        return (np.asarray(x) - self.env_mean) / self.env_sd

    def denorm_env(self, x):
        return np.asarray(x) * self.env_sd + self.env_mean

    def norm_f0(self, f0_hz):
        return (np.log(f0_hz) - self.logf0_mean) / self.logf0_sd

    def denorm_f0(self, x):
        return np.exp(np.asarray(x) * self.logf0_sd + self.logf0_mean)

    def norm_loud(self, x):
        return (np.asarray(x) - self.loud_mean) / self.loud_sd

    def denorm_loud(self, x):
        return np.asarray(x) * self.loud_sd + self.loud_mean


def _mean_sd(values, name):
    values = np.concatenate([np.ravel(v) for v in values])
    m = float(values.mean())
    sd = float(values.std())
    if values.max() == values.min() or not sd > 0:
        raise ValueError(f"{name} track is constant (sd = 0); cannot normalise")
    return m, sd


def compute_norm_stats(corpus):
    if not corpus:
        raise ValueError("cannot compute statistics of an empty corpus")
    em, es = _mean_sd([s.envelopes for s in corpus], "envelope")
    fm, fs = _mean_sd([np.log(s.f0) for s in corpus], "f0")
    lm, ls = _mean_sd([s.loudness for s in corpus], "loudness")
    return NormStats(em, es, fm, fs, lm, ls)


def apply_norm(seq, stats):
    """Normalised copies of the continuous tracks: (envelopes, log-f0, loudness)."""
    return stats.norm_env(seq.envelopes), stats.norm_f0(seq.f0), stats.norm_loud(seq.loudness)


def invert_norm(envelopes, f0, loudness, stats):
    return stats.denorm_env(envelopes), stats.denorm_f0(f0), stats.denorm_loud(loudness)


# --------------------------------------------------------------------------
# minibatches


@dataclass
class Batch:
    """Aligned training windows.

    ``envelopes`` covers ``span`` frames starting at ``starts``; the control
    tracks cover the same frames widened by ``context = (left, right)``
    frames, edge-replicated at phrase boundaries.
    """

    envelopes: np.ndarray
    phonemes: np.ndarray
    f0: np.ndarray
    loudness: np.ndarray
    context: tuple
    phrase_ids: np.ndarray
    starts: np.ndarray

    def __len__(self):
        return self.envelopes.shape[0]

    @property
    def span(self):
        return self.envelopes.shape[1]


def clamped_indices(start, length, n):
    return np.clip(np.arange(start, start + length), 0, n - 1)


def sample_minibatch(corpus, batch=16, span=40, rng=None, context=(0, 0)):
    """Draw ``batch`` windows of ``span`` frames, uniform over valid start positions.

    Every window lies inside a single phrase. Start positions are drawn
    uniformly over all (phrase, start) pairs, so long phrases are picked
    proportionally more often.
    """
    if rng is None:
        raise ValueError("sample_minibatch needs an explicit numpy Generator")
    if batch < 1 or span < 1:
        raise ValueError("batch and span must be >= 1")
    counts = np.array([max(len(s) - span + 1, 0) for s in corpus], dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        longest = max((len(s) for s in corpus), default=0)
        raise ValueError(f"no phrase long enough for span {span} (longest has {longest} frames)")
    cum = np.cumsum(counts)
    picks = rng.integers(0, total, size=batch)
    which = np.searchsorted(cum, picks, side="right")
    starts = picks - np.concatenate([[0], cum[:-1]])[which]
    left, right = context
    env, ph, f0, loud, pids = [], [], [], [], []
    for w, s in zip(which, starts):
        seq = corpus[w]
        env.append(seq.envelopes[s : s + span])
        idx = clamped_indices(s - left, span + left + right, len(seq))
        ph.append(seq.phonemes[idx])
        f0.append(seq.f0[idx])
        loud.append(seq.loudness[idx])
        pids.append(seq.phrase_id if seq.phrase_id >= 0 else int(w))
    return Batch(
        np.stack(env),
        np.stack(ph),
        np.stack(f0),
        np.stack(loud),
        (left, right),
        np.array(pids),
        np.asarray(starts),
    )
