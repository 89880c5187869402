"""Audio and visual features.

Lag convention for GCC-PHAT: column ``Z // 2`` holds lag 0 and a positive
lag means channel 1 leads channel 2 (channel 2 is a delayed copy). With
channel 1 = left microphone, a source on the wearer's left produces
positive lags.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

N_BINS = 360
DEFAULT_SIGMA = 4.0
PHAT_EPS = 1e-8


@dataclass(frozen=True)
class StftFrames:
    data: np.ndarray  # (T, F) complex
    window: int
    hop: int
    sample_rate: int | None = None

    @property
    def shape(self):
        return self.data.shape


def stft(wave: np.ndarray, window: int = 1024, hop: int = 320,
         sample_rate: int | None = None) -> StftFrames:
    """Hann-windowed short-time Fourier transform without padding.

    Produces ``floor((N - window) / hop) + 1`` frames of ``window // 2 + 1``
    bins.
    """
    wave = np.asarray(wave, dtype=float)
    if wave.ndim != 1:
        raise ValueError("stft expects a mono waveform")
    if len(wave) < window:
        raise ValueError(f"waveform of {len(wave)} samples is shorter than the window {window}")
    n_frames = (len(wave) - window) // hop + 1
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = wave[idx] * np.hanning(window + 1)[:-1]
    return StftFrames(np.fft.rfft(frames, axis=-1), window, hop, sample_rate)


def gcc_phat(ch1: StftFrames, ch2: StftFrames, n_lags: int = 96) -> np.ndarray:
    """Per-frame GCC-PHAT cropped to ``n_lags`` lags centred on zero.

    Returns a (T, n_lags) array; column ``n_lags // 2 + k`` is lag ``k``.
    """
    if ch1.shape != ch2.shape:
        raise ValueError(f"STFT shapes differ: {ch1.shape} vs {ch2.shape}")
    if n_lags > ch1.window:
        raise ValueError("more lags requested than the window provides")
    cross = ch1.data * np.conj(ch2.data)
    cross = cross / np.maximum(np.abs(cross), PHAT_EPS)
    cc = np.fft.irfft(cross, n=ch1.window, axis=-1)
    half = n_lags // 2
    lags = np.arange(-half, n_lags - half)
    # cc[n] peaks at n = -D when ch2 lags ch1 by D; flip so the column reads +D
    return cc[:, (-lags) % ch1.window]


def gcc_phat_stereo(clip: np.ndarray, window: int = 1024, hop: int = 320,
                    n_lags: int = 96) -> np.ndarray:
    """GCC-PHAT feature of a (2, N) clip."""
    return gcc_phat(stft(clip[0], window, hop), stft(clip[1], window, hop), n_lags)


def lag_axis(n_lags: int) -> np.ndarray:
    half = n_lags // 2
    return np.arange(-half, n_lags - half)


def expected_lag(az_deg, mic_spacing: float, sound_speed: float, sample_rate: int):
    """Far-field lag in samples for a wearer-relative azimuth.

    Positive when the left microphone (channel 1) hears the source first,
    which happens for sources on the left (azimuth near 180).
    """
    return -mic_spacing * np.cos(np.radians(az_deg)) / sound_speed * sample_rate


def _bandlimited_sample(values: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Whittaker-Shannon interpolation of ``values`` at fractional indices."""
    n = np.arange(len(values))
    return np.sinc(positions[:, None] - n[None, :]) @ values


@dataclass(frozen=True)
class SrpEstimate:
    azimuth: float
    low_confidence: bool
    power: np.ndarray  # steered response over the 360 candidate azimuths


def srp_phat_doa(feat: np.ndarray, mic_spacing: float = 0.16, sound_speed: float = 343.0,
                 sample_rate: int = 16000) -> SrpEstimate:
    """Steered response power over a 1 degree azimuth grid.

    The GCC-PHAT is averaged over frames and read at each candidate's
    expected lag by band-limited interpolation. A two-microphone array
    cannot tell front from back, so mirror azimuths tie; the first
    (front hemisphere) candidate wins. Silent input falls back to 90 deg
    with ``low_confidence`` set.
    """
    feat = np.asarray(feat, dtype=float)
    mean = feat.mean(axis=0)
    n_lags = len(mean)
    candidates = np.arange(N_BINS, dtype=float)
    if not np.any(np.abs(mean) > 1e-12):
        return SrpEstimate(90.0, True, np.zeros(N_BINS))
    pos = expected_lag(candidates, mic_spacing, sound_speed, sample_rate) + n_lags // 2
    power = _bandlimited_sample(mean, pos)
    return SrpEstimate(float(candidates[int(np.argmax(power))]), False, power)


def patchify(img: np.ndarray, r: int = 16) -> np.ndarray:
    """Split an (H, W, 3) uint8 image into row-major flattened patches.

    Returns (H*W/r^2, r*r*3) float values in [0, 1], channel-last within
    each patch.
    """
    img = np.asarray(img)
    h, w, c = img.shape
    if h % r or w % r:
        raise ValueError(f"image {h}x{w} is not divisible into {r}x{r} patches")
    scale = 255.0 if img.dtype == np.uint8 else 1.0
    p = img.reshape(h // r, r, w // r, r, c).transpose(0, 2, 1, 3, 4)
    return p.reshape((h // r) * (w // r), r * r * c).astype(np.float64) / scale


def patchify_u8(img: np.ndarray, r: int = 16) -> np.ndarray:
    """As :func:`patchify` but keeps the raw uint8 values (for caching)."""
    h, w, c = img.shape
    if h % r or w % r:
        raise ValueError(f"image {h}x{w} is not divisible into {r}x{r} patches")
    p = img.reshape(h // r, r, w // r, r, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(p.reshape((h // r) * (w // r), r * r * c))


def unpatchify(patches: np.ndarray, height: int, width: int, r: int = 16) -> np.ndarray:
    c = patches.shape[1] // (r * r)
    p = patches.reshape(height // r, width // r, r, r, c).transpose(0, 2, 1, 3, 4)
    return p.reshape(height, width, c)


def gaussian_target(theta: int, sigma: float = DEFAULT_SIGMA, n_bins: int = N_BINS) -> np.ndarray:
    """Wrapped Gaussian over the azimuth bins, normalised to sum 1.

    Built once around bin 0 and rolled, so shifting ``theta`` shifts the
    vector exactly.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d = np.arange(n_bins)
    d = np.minimum(d, n_bins - d)
    p = np.exp(-0.5 * (d / sigma) ** 2)
    return np.roll(p / p.sum(), int(theta) % n_bins)


def gaussian_targets(thetas, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    base = gaussian_target(0, sigma)
    return np.stack([np.roll(base, int(t) % N_BINS) for t in thetas])


def posterior_argmax(p: np.ndarray) -> np.ndarray:
    """Predicted azimuth (degrees) as the most probable bin."""
    return np.argmax(p, axis=-1).astype(float) * (360.0 / p.shape[-1])


def n_stft_frames(n_samples: int, window: int = 1024, hop: int = 320) -> int:
    return (n_samples - window) // hop + 1


def feature_conventions(window: int, hop: int, n_lags: int, patch: int) -> dict:
    return {
        "window": window, "hop": hop, "n_lags": n_lags, "lag_zero_column": n_lags // 2,
        "lag_sign": "positive = channel 1 (left) leads", "patch": patch,
        "patch_order": "row-major, channel-last", "patch_dtype": "uint8 (scale by 1/255)",
    }


def is_silent(feat: np.ndarray) -> bool:
    return not np.any(np.abs(feat) > 1e-12)


def wrapped_sigma_ok(sigma: float) -> bool:
    return sigma > 0 and math.isfinite(sigma)
