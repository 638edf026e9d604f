"""Waveform-to-feature pipeline: log mel filterbank energies (LFBE) with
per-utterance normalization, speed perturbation, time/frequency masking,
and frame stacking.

All operations are pure functions of their inputs plus an explicit seed,
so independent utterances can be processed concurrently.
"""

from __future__ import annotations

import struct
import wave as _wave
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

BLOB_MAGIC = b"LFBE"
BLOB_VERSION = 1


@dataclass
class Waveform:
    """Mono PCM audio: amplitudes nominally in [-1, 1] plus a sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-d sample sequence")
        if self.sample_rate < 8000:
            raise ValueError(f"sample rate must be >= 8000 Hz, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.size


@dataclass
class FeatureMatrix:
    """T x F feature frames with a per-frame validity mask.

    ``meta['stages']`` tracks provenance (raw / normalized / augmented /
    stacked); other meta keys record stage-specific details.
    """

    frames: np.ndarray
    mask: np.ndarray
    frame_shift_ms: float
    meta: dict = field(default_factory=lambda: {"stages": ["raw"]})

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        t, f = self.frames.shape
        if t < 1 or f < 1:
            raise ValueError(f"feature matrix must be at least 1 x 1, got {t} x {f}")
        if self.mask.shape != (t,):
            raise ValueError(f"mask length {self.mask.shape} does not match T={t}")
        if not self.mask.any():
            raise ValueError("feature matrix must have at least one valid frame")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature matrix contains non-finite entries")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_channels(self) -> int:
        return self.frames.shape[1]


@dataclass
class FrontendConfig:
    n_mels: int = 40
    window_ms: float = 25.0
    hop_ms: float = 10.0
    speed_factors: tuple[float, ...] = (0.9, 1.1)
    mask_prob: float = 0.5
    stack: int = 3
    skip: int = 2
    log_floor: float = 1e-10
    max_time_mask: int = 10
    max_freq_mask: int = 8

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask_prob must lie in [0, 1], got {self.mask_prob}")
        if not self.window_ms > self.hop_ms > 0:
            raise ValueError(
                f"need window_ms > hop_ms > 0, got {self.window_ms}/{self.hop_ms}"
            )
        if self.n_mels < 1:
            raise ValueError("n_mels must be at least 1")
        if any(f <= 0 for f in self.speed_factors):
            raise ValueError(f"speed factors must be positive, got {self.speed_factors}")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")


# ---------------------------------------------------------------------------
# mel filterbank


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular, area-unnormalized mel filters from 0 Hz to Nyquist.

    Returns an (n_bins, n_mels) weight matrix over rfft power bins.
    """
    n_bins = n_fft // 2 + 1
    bin_freqs = np.arange(n_bins) * sample_rate / n_fft
    corners = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    weights = np.zeros((n_bins, n_mels))
    for i in range(n_mels):
        left, center, right = corners[i], corners[i + 1], corners[i + 2]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        weights[:, i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return weights


def mel_center_frequencies(n_mels: int, sample_rate: int) -> np.ndarray:
    corners = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    return corners[1:-1]


# ---------------------------------------------------------------------------
# feature extraction


def frame_count(n_samples: int, window: int, hop: int) -> int:
    return (n_samples - window) // hop + 1


def extract_lfbe(wave: Waveform, cfg: FrontendConfig) -> FeatureMatrix:
    """Log mel filterbank energies over Hann-windowed frames.

    T = floor((N - W) / H) + 1 frames of cfg.n_mels channels each;
    energies are floored at cfg.log_floor before the log.
    """
    x = wave.samples
    if not np.all(np.isfinite(x)):
        raise ValueError("corrupt audio: non-finite sample")
    window = int(round(wave.sample_rate * cfg.window_ms / 1000.0))
    hop = int(round(wave.sample_rate * cfg.hop_ms / 1000.0))
    if x.size < window:
        raise ValueError(
            f"utterance too short: {x.size} samples < one {window}-sample window"
        )
    frames = np.lib.stride_tricks.sliding_window_view(x, window)[::hop]
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)
    spectrum = np.fft.rfft(frames * hann, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    fbank = mel_filterbank(cfg.n_mels, window, wave.sample_rate)
    energies = power @ fbank
    feats = np.log(np.maximum(energies, cfg.log_floor))
    return FeatureMatrix(
        frames=feats,
        mask=np.ones(feats.shape[0], dtype=bool),
        frame_shift_ms=cfg.hop_ms,
        meta={"stages": ["raw"]},
    )


def normalize_per_utterance(feats: FeatureMatrix) -> FeatureMatrix:
    """Standardize each channel to mean 0 / population variance 1 over the
    valid frames.  Zero-variance channels are set to zero and flagged in
    meta; invalid frames pass through untouched.
    """
    valid = feats.mask
    if int(valid.sum()) < 2:
        raise ValueError("degenerate normalization: fewer than 2 valid frames")
    sub = feats.frames[valid]
    mean = sub.mean(axis=0)
    var = sub.var(axis=0)
    dead = var <= 1e-20
    scale = np.where(dead, 1.0, np.sqrt(np.where(dead, 1.0, var)))
    out = feats.frames.copy()
    out[valid] = (sub - mean) / scale
    if dead.any():
        out[np.ix_(valid, dead)] = 0.0
    meta = dict(feats.meta)
    meta["stages"] = list(meta.get("stages", [])) + ["normalized"]
    meta["zero_variance_channels"] = [int(i) for i in np.flatnonzero(dead)]
    return FeatureMatrix(out, feats.mask.copy(), feats.frame_shift_ms, meta)


def speed_perturb(wave: Waveform, factor: float) -> Waveform:
    """Resample by linear interpolation at stride ``factor``.

    Output length is round(N / factor); the sample rate tag is unchanged,
    so the content plays ``factor`` times faster.
    """
    if factor <= 0:
        raise ValueError(f"invalid speed factor: {factor}")
    n = len(wave)
    n_out = int(round(n / factor))
    positions = np.arange(n_out) * factor
    resampled = np.interp(positions, np.arange(n), wave.samples)
    return Waveform(resampled, wave.sample_rate)


def spec_augment(
    feats: FeatureMatrix, cfg: FrontendConfig, rng_seed: int
) -> FeatureMatrix:
    """Zero one contiguous time band and one frequency band, each applied
    independently with probability cfg.mask_prob.  Band widths are uniform
    on [1, max_width].  Deterministic given rng_seed; the validity mask is
    untouched (masking alters values, not validity).
    """
    rng = np.random.default_rng(rng_seed)
    t_total, f_total = feats.frames.shape
    apply_time = rng.random() < cfg.mask_prob
    apply_freq = rng.random() < cfg.mask_prob
    out = feats.frames.copy()
    time_band = freq_band = None
    if apply_time:
        width = int(rng.integers(1, min(cfg.max_time_mask, t_total) + 1))
        start = int(rng.integers(0, t_total - width + 1))
        out[start : start + width, :] = 0.0
        time_band = (start, width)
    if apply_freq:
        width = int(rng.integers(1, min(cfg.max_freq_mask, f_total) + 1))
        start = int(rng.integers(0, f_total - width + 1))
        out[:, start : start + width] = 0.0
        freq_band = (start, width)
    meta = dict(feats.meta)
    meta["stages"] = list(meta.get("stages", [])) + ["augmented"]
    meta["time_band"] = time_band
    meta["freq_band"] = freq_band
    return FeatureMatrix(out, feats.mask.copy(), feats.frame_shift_ms, meta)


def stack_and_skip(feats: FeatureMatrix, stack: int, skip: int) -> FeatureMatrix:
    """Concatenate ``stack`` adjacent frames and advance ``skip + 1`` steps.

    With stack=3, skip=2 output frame t holds input frames (3t, 3t+1, 3t+2);
    missing tail frames are zero-padded and output frame t is valid iff
    input frame t * (skip+1) is valid.
    """
    if stack < 1 or skip < 0:
        raise ValueError(f"need stack >= 1 and skip >= 0, got {stack}/{skip}")
    stride = skip + 1
    t_in, f_in = feats.frames.shape
    t_out = -(-t_in // stride)  # ceil
    idx = np.arange(t_out)[:, None] * stride + np.arange(stack)[None, :]
    padded = np.vstack([feats.frames, np.zeros((stack, f_in))])
    clipped = np.minimum(idx, t_in + stack - 1)
    gathered = np.where((idx < t_in)[:, :, None], padded[clipped], 0.0)
    frames = gathered.reshape(t_out, stack * f_in)
    mask = feats.mask[np.arange(t_out) * stride]
    meta = dict(feats.meta)
    meta["stages"] = list(meta.get("stages", [])) + ["stacked"]
    return FeatureMatrix(frames, mask, feats.frame_shift_ms * stride, meta)


# ---------------------------------------------------------------------------
# WAV and feature-blob I/O


def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM RIFF/WAVE file."""
    with _wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, wave: Waveform) -> None:
    pcm = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with _wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(wave.sample_rate)
        w.writeframes(pcm.tobytes())


def save_features(feats: FeatureMatrix, path) -> None:
    """Write the documented binary blob: magic "LFBE", version u16, T u32,
    F u32, row-major float32 little-endian values, then T mask bytes.
    """
    t, f = feats.frames.shape
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<HII", BLOB_VERSION, t, f))
        fh.write(feats.frames.astype("<f4").tobytes())
        fh.write(feats.mask.astype(np.uint8).tobytes())


def load_features(path, frame_shift_ms: float = 10.0) -> FeatureMatrix:
    """Read a feature blob written by save_features.

    The blob does not store the frame shift; pass it explicitly if it
    differs from the 10 ms default.
    """
    blob = Path(path).read_bytes()
    if blob[:4] != BLOB_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r} at byte 0")
    if len(blob) < 14:
        raise ValueError(f"{path}: truncated header at byte {len(blob)}")
    version, t, f = struct.unpack("<HII", blob[4:14])
    if version != BLOB_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    need = 14 + 4 * t * f + t
    if len(blob) != need:
        raise ValueError(
            f"{path}: expected {need} bytes, file ends at byte {len(blob)}"
        )
    frames = np.frombuffer(blob[14 : 14 + 4 * t * f], dtype="<f4").astype(np.float64)
    mask = np.frombuffer(blob[14 + 4 * t * f :], dtype=np.uint8).astype(bool)
    return FeatureMatrix(
        frames.reshape(t, f), mask, frame_shift_ms, {"stages": ["loaded"]}
    )


def as_variant(feats: FeatureMatrix, **changes) -> FeatureMatrix:
    return replace(feats, **changes)
