"""Synthetic source signals: speech-like babble, tones and noise."""

from __future__ import annotations

import numpy as np
from scipy import signal


def tone(freq: float, n: int, fs: int, amplitude: float = 0.5) -> np.ndarray:
    return amplitude * np.sin(2 * np.pi * freq * np.arange(n) / fs)


def white_noise(n: int, rng: np.random.Generator, channels: int | None = None) -> np.ndarray:
    shape = (n,) if channels is None else (channels, n)
    return rng.standard_normal(shape)


def pink_noise(n: int, rng: np.random.Generator, channels: int | None = None) -> np.ndarray:
    """1/f noise by spectral shaping of white noise."""
    shape = (n,) if channels is None else (channels, n)
    spec = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    f = np.arange(spec.shape[-1], dtype=float)
    f[0] = 1.0
    spec /= np.sqrt(f)
    out = np.fft.irfft(spec, n=n, axis=-1)
    return out / (np.std(out) + 1e-12)


def activity_schedule(n: int, fs: int, rng: np.random.Generator, on_range=(0.6, 2.5),
                      off_range=(0.1, 0.4), start_on: bool = True) -> np.ndarray:
    """Boolean on/off mask built from alternating random segment lengths."""
    mask = np.zeros(n, dtype=bool)
    pos, on = 0, start_on
    while pos < n:
        seg = int(rng.uniform(*(on_range if on else off_range)) * fs)
        mask[pos:pos + max(seg, 1)] = on
        pos += max(seg, 1)
        on = not on
    return mask


def speech_like(n: int, fs: int, rng: np.random.Generator, activity: np.ndarray | None = None,
                ) -> np.ndarray:
    """Voiced/unvoiced babble with a wandering pitch and syllable envelope.

    A glottal pulse train (pitch 90-240 Hz) plus aspiration noise is shaped
    by two slowly moving formant resonators and a 3-6 Hz syllable envelope.
    Output is normalised to unit RMS over the active part.
    """
    t = np.arange(n) / fs
    f0_base = rng.uniform(90.0, 240.0)
    f0 = f0_base * (1.0 + 0.12 * np.sin(2 * np.pi * rng.uniform(0.2, 0.8) * t + rng.uniform(0, 6.3)))
    phase = np.cumsum(f0) / fs
    pulses = np.diff(np.floor(phase), prepend=0.0)
    excitation = signal.lfilter([1.0], [1.0, -0.95], pulses)
    excitation += 0.15 * rng.standard_normal(n)

    out = np.zeros(n)
    block = 400
    zi = [np.zeros(2), np.zeros(2)]
    formants = [(rng.uniform(400, 900), rng.uniform(0.5, 1.5)),
                (rng.uniform(1100, 2400), rng.uniform(0.5, 1.5))]
    for start in range(0, n, block):
        seg = excitation[start:start + block]
        acc = np.zeros(len(seg))
        tc = start / fs
        for j, (fc, rate) in enumerate(formants):
            fcur = fc * (1.0 + 0.25 * np.sin(2 * np.pi * rate * tc + j))
            b, a = signal.iirpeak(fcur, Q=4.0, fs=fs)
            y, zi[j] = signal.lfilter(b, a, seg, zi=zi[j])
            acc += y
        out[start:start + len(seg)] = acc
    # broadband fricative component keeps the cross-spectrum well conditioned
    out += 0.3 * np.std(out) * signal.lfilter([1.0, -0.9], [1.0], rng.standard_normal(n))

    rate = rng.uniform(3.0, 6.0)
    env = 0.55 + 0.45 * np.abs(np.sin(np.pi * rate * t + rng.uniform(0, np.pi)))
    out *= env
    if activity is not None:
        ramp = np.convolve(activity.astype(float), np.hanning(161) / np.hanning(161).sum(), mode="same")
        out *= ramp
        active = activity
    else:
        active = np.ones(n, dtype=bool)
    rms = np.sqrt(np.mean(out[active] ** 2)) if active.any() else 1.0
    return out / (rms + 1e-12)
