"""Deterministic synthetic corpora for desk-scale experiments.

Four kinds:

* ``asr``        tone-sequence audio; each character is a fixed-frequency
                 tone, transcripts are 2-5 characters long.  Sentiment
                 labels are present but random (pure label noise).
* ``sentiment``  3-way class encoded by the amplitude envelope: each class
                 has its own level band (mean frame energy alone separates
                 the classes) and its own amplitude-modulation rate (a cue
                 that survives per-utterance normalization).
* ``avd``        activation, valence and dominance are smooth invertible
                 functions of the fundamental frequency, the tone
                 amplitude over a fixed noise bed, and the duration of a
                 constant-rate chirp, respectively.
* ``combined``   all fields; valence is correlated with the sentiment
                 class by construction.

Identical (kind, n, seed) inputs produce byte-identical corpora.
"""

from __future__ import annotations

import json
import math
import zlib
from pathlib import Path

import numpy as np

from .frontend import Waveform, mel_center_frequencies, write_wav

SAMPLE_RATE = 16000

CHAR_TONES = {"a": 330.0, "b": 470.0, "c": 680.0, "d": 980.0, "e": 1400.0}
CHAR_SECONDS = 0.14
GAP_SECONDS = 0.04
PAD_SECONDS = 0.08

SENTIMENT_AMP = (0.08, 0.32, 0.85)  # disjoint even with +-8% jitter
SENTIMENT_AM_RATE = (0.0, 4.0, 10.0)

COMBINED_AMP = (0.15, 0.4, 0.8)
COMBINED_AM_DEPTH = (0.0, 0.5, 0.5)
COMBINED_VALENCE = (2.2, 4.0, 5.8)

AVD_F0_RANGE = (150.0, 450.0)
AVD_AMP_RANGE = (0.04, 0.7)
AVD_DUR_RANGE = (0.5, 1.25)
AVD_NOISE = 0.06
AVD_PLUCK_PERIOD = 0.25
AVD_PLUCK_TAU = 0.05625
AVD_MARKER_FREQ = 3200.0
AVD_MARKER_SECONDS = 0.25
AVD_MARKER_AMP = 0.3

_CLASS_NAMES = ("negative", "neutral", "positive")


def avd_from_latents(f0: float, amp: float, dur: float) -> tuple[float, float, float]:
    """Forward map from generator latents to seven-point-scale targets."""
    act = 1.5 + 5.0 * math.log(f0 / AVD_F0_RANGE[0]) / math.log(AVD_F0_RANGE[1] / AVD_F0_RANGE[0])
    val = 1.5 + 5.0 * math.log(amp / AVD_AMP_RANGE[0]) / math.log(AVD_AMP_RANGE[1] / AVD_AMP_RANGE[0])
    dom = 1.5 + 5.0 * (dur - AVD_DUR_RANGE[0]) / (AVD_DUR_RANGE[1] - AVD_DUR_RANGE[0])
    return act, val, dom


def latents_from_avd(act: float, val: float, dom: float) -> tuple[float, float, float]:
    """Exact inverse of avd_from_latents."""
    f0 = AVD_F0_RANGE[0] * (AVD_F0_RANGE[1] / AVD_F0_RANGE[0]) ** ((act - 1.5) / 5.0)
    amp = AVD_AMP_RANGE[0] * (AVD_AMP_RANGE[1] / AVD_AMP_RANGE[0]) ** ((val - 1.5) / 5.0)
    dur = AVD_DUR_RANGE[0] + (dom - 1.5) / 5.0 * (AVD_DUR_RANGE[1] - AVD_DUR_RANGE[0])
    return f0, amp, dur


def _edges(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    r = min(ramp, n // 2)
    if r > 0:
        fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        env[:r] = fade
        env[-r:] = fade[::-1]
    return env


def _tone(freq: float, seconds: float, amp: float) -> np.ndarray:
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    return amp * np.sin(2.0 * np.pi * freq * t) * _edges(n, int(0.005 * SAMPLE_RATE))


def _am_envelope(n: int, rate: float, depth: float) -> np.ndarray:
    if rate <= 0.0 or depth <= 0.0:
        return np.ones(n)
    t = np.arange(n) / SAMPLE_RATE
    return 1.0 - depth * np.sin(np.pi * rate * t) ** 2


def _pluck_envelope(n: int, period_s: float, tau_s: float) -> np.ndarray:
    """Repeating exponential decay; how long each burst stays above a fixed
    noise bed grows linearly with the log of the carrier amplitude."""
    t = np.arange(n) / SAMPLE_RATE
    return np.exp(-(t % period_s) / tau_s)


def _tone_sequence(text: str, amp: float) -> np.ndarray:
    pad = np.zeros(int(PAD_SECONDS * SAMPLE_RATE))
    gap = np.zeros(int(GAP_SECONDS * SAMPLE_RATE))
    parts = [pad]
    for ch in text:
        parts.append(_tone(CHAR_TONES[ch], CHAR_SECONDS, amp))
        parts.append(gap)
    parts.append(pad)
    return np.concatenate(parts)


def _transcript(rng: np.random.Generator, lo: int, hi: int) -> str:
    chars = sorted(CHAR_TONES)
    length = int(rng.integers(lo, hi + 1))
    out = []
    for _ in range(length):
        c = chars[int(rng.integers(len(chars)))]
        while out and c == out[-1]:  # avoid adjacent repeats
            c = chars[int(rng.integers(len(chars)))]
        out.append(c)
    return "".join(out)


def _split_for(index: int, n: int) -> str:
    n_val = max(2, round(0.2 * n))
    n_test = max(2, round(0.15 * n))
    n_train = n - n_val - n_test
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "validation"
    return "test"


def _record_rng(kind: str, seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(kind.encode()), index])


def _make_asr(rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    text = _transcript(rng, 2, 5)
    samples = _tone_sequence(text, amp=0.5)
    samples = samples + 5e-4 * rng.standard_normal(samples.size)
    label = _CLASS_NAMES[int(rng.integers(3))]
    return samples, {"transcript": text, "sentiment": label}


def _make_sentiment(rng: np.random.Generator, index: int) -> tuple[np.ndarray, dict]:
    cls = index % 3
    text = _transcript(rng, 1, 3)
    amp = SENTIMENT_AMP[cls] * float(rng.uniform(0.92, 1.08))
    samples = _tone_sequence(text, amp)
    samples = samples * _am_envelope(samples.size, SENTIMENT_AM_RATE[cls], 1.0)
    samples = samples + 5e-4 * rng.standard_normal(samples.size)
    return samples, {"transcript": text, "sentiment": _CLASS_NAMES[cls]}


_DITHER_CACHE: dict[int, np.ndarray] = {}


def _noise_bed(n: int) -> np.ndarray:
    """Fixed dither sequence: the same realization for every utterance, so
    the bed is an exact level reference rather than a random one."""
    size = 1 << int(np.ceil(np.log2(max(n, 1024))))
    if size not in _DITHER_CACHE:
        _DITHER_CACHE[size] = np.random.default_rng(0xD17E4).standard_normal(size)
    return _DITHER_CACHE[size][:n]


def _make_avd(rng: np.random.Generator, index: int) -> tuple[np.ndarray, dict]:
    # stratify the discrete latents by index so every split covers the
    # full range even in small corpora
    centers = mel_center_frequencies(40, SAMPLE_RATE)
    levels = centers[(centers >= AVD_F0_RANGE[0]) & (centers <= AVD_F0_RANGE[1])]
    f0 = float(levels[index % len(levels)])
    # amplitude: jittered stratum of a log-spaced grid
    stratum = (index * 7) % 16 + float(rng.uniform(0.0, 1.0))
    amp = float(
        AVD_AMP_RANGE[0] * (AVD_AMP_RANGE[1] / AVD_AMP_RANGE[0]) ** (stratum / 16.0)
    )
    # whole pluck periods only, so the audible duty cycle is duration-free
    max_periods = int(AVD_DUR_RANGE[1] / AVD_PLUCK_PERIOD)
    min_periods = int(np.ceil(AVD_DUR_RANGE[0] / AVD_PLUCK_PERIOD))
    n_levels = max_periods - min_periods + 1
    dur = AVD_PLUCK_PERIOD * (min_periods + index % n_levels)
    n = int(round(dur * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    # steady tone at f0: the active mel band carries activation; the audible
    # fraction of each decay burst over the fixed noise bed carries amplitude
    # through per-utterance normalization
    env = _pluck_envelope(n, AVD_PLUCK_PERIOD, AVD_PLUCK_TAU)
    samples = amp * np.sin(2.0 * np.pi * f0 * t) * env * _edges(n, int(0.005 * SAMPLE_RATE))
    # fixed-length marker: its pooled on-fraction varies with duration only
    marker = _tone(AVD_MARKER_FREQ, AVD_MARKER_SECONDS, AVD_MARKER_AMP)
    samples[: marker.size] += marker[: samples.size]
    samples = samples + AVD_NOISE * _noise_bed(n)
    act, val, dom = avd_from_latents(f0, amp, dur)
    return samples, {"activation": act, "valence": val, "dominance": dom}


def _make_combined(rng: np.random.Generator, index: int) -> tuple[np.ndarray, dict]:
    cls = index % 3
    text = _transcript(rng, 3, 5)
    amp = COMBINED_AMP[cls] * float(rng.uniform(0.92, 1.08))
    samples = _tone_sequence(text, amp)
    samples = samples * _am_envelope(samples.size, SENTIMENT_AM_RATE[cls], COMBINED_AM_DEPTH[cls])
    samples = samples + 5e-4 * rng.standard_normal(samples.size)

    mean_log_freq = float(np.mean([np.log(CHAR_TONES[c]) for c in text]))
    lo, hi = np.log(min(CHAR_TONES.values())), np.log(max(CHAR_TONES.values()))
    act = 1.5 + 5.0 * (mean_log_freq - lo) / (hi - lo)
    val = COMBINED_VALENCE[cls] + float(rng.uniform(-0.4, 0.4))
    dur = samples.size / SAMPLE_RATE
    dur_lo = 3 * (CHAR_SECONDS + GAP_SECONDS) + 2 * PAD_SECONDS
    dur_hi = 5 * (CHAR_SECONDS + GAP_SECONDS) + 2 * PAD_SECONDS
    dom = 1.5 + 5.0 * (dur - dur_lo) / (dur_hi - dur_lo)
    return samples, {
        "transcript": text,
        "sentiment": _CLASS_NAMES[cls],
        "activation": act,
        "valence": val,
        "dominance": dom,
    }


def generate_synthetic(kind: str, n: int, seed: int, out_dir) -> Path:
    """Write ``n`` WAV files plus a manifest.jsonl under ``out_dir``.

    Returns the manifest path.  Roughly 65% of records land in train,
    20% in validation, 15% in test, in index order.
    """
    if kind not in ("asr", "sentiment", "avd", "combined"):
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if n < 8:
        raise ValueError(f"need at least 8 utterances, got {n}")
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n):
        rng = _record_rng(kind, seed, i)
        if kind == "asr":
            samples, fields = _make_asr(rng)
        elif kind == "sentiment":
            samples, fields = _make_sentiment(rng, i)
        elif kind == "avd":
            samples, fields = _make_avd(rng, i)
        else:
            samples, fields = _make_combined(rng, i)
        rel = f"wavs/utt{i:04d}.wav"
        write_wav(out_dir / rel, Waveform(np.clip(samples, -1.0, 1.0), SAMPLE_RATE))
        record = {"audio": rel, "split": _split_for(i, n)}
        record.update(
            {k: (round(v, 6) if isinstance(v, float) else v) for k, v in fields.items()}
        )
        lines.append(json.dumps(record, sort_keys=True))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
