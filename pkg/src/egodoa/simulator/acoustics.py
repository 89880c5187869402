"""Parametric binaural renderer.

Two omnidirectional microphones sit on a horizontal axis through the
wearer's head, perpendicular to the facing direction. Channel 0 is the
left microphone and channel 1 the right one. For every output sample the
retarded emission time is solved per ear, so moving sources and moving
listeners produce Doppler shifts without any explicit frequency model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from ..geometry import Pose, in_fov, relative_doa, relative_doa_array, wrap_deg
from .trajectory import ConfigError, Trajectory

OVERSAMPLE = 4
NEAR_FIELD = 0.3  # metres, clamp for the 1/r gain
SOURCE_PAD = 0.15  # seconds of source history needed before the first output sample
SHADOW_BLOCK = 0.005  # seconds per head-shadow filter update
SHADOW_F_LOW = 300.0
SHADOW_F_OPEN = 20000.0


@dataclass(frozen=True)
class AcousticsConfig:
    sample_rate: int = 16000
    sound_speed: float = 343.0
    mic_spacing: float = 0.16
    head_shadow: float = 1.0
    reverb_tail: float = 0.0
    reverb_drr_db: float = 12.0
    source_level_dbfs: float = -26.0
    noise_snr_db: float = float("inf")

    def validate(self) -> None:
        if self.sample_rate not in (16000, 48000):
            raise ConfigError(f"sample rate {self.sample_rate} not in {{16000, 48000}}")
        if self.mic_spacing <= 0:
            raise ConfigError("mic spacing must be positive")
        if not 0.0 <= self.head_shadow <= 1.0:
            raise ConfigError("head shadow strength must lie in [0, 1]")
        if self.reverb_tail < 0:
            raise ConfigError("reverb tail must be non-negative")


@dataclass
class ClipAnnotation:
    time: float
    azimuth: float
    azimuth_bin: int
    in_fov: bool
    wearer: Pose
    speaker: Pose
    wearer_speaking: bool = False


@dataclass
class BinauralClip:
    samples: np.ndarray  # (2, N) float32
    sample_rate: int
    annotation: ClipAnnotation | None = field(default=None)

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] != 2:
            raise ValueError(f"binaural clip needs shape (2, N), got {self.samples.shape}")


def ear_positions(traj: Trajectory, times: np.ndarray, spacing: float):
    """Left and right microphone (x, y, z) positions, each shape (3, n)."""
    center = traj.positions_at(times)
    r = np.radians(traj.yaw_at(times))
    half = spacing / 2.0
    offset = np.stack([np.cos(r), np.zeros_like(r), -np.sin(r)]) * half
    return center - offset, center + offset


def shadow_amount(az_deg: np.ndarray, strength: float) -> np.ndarray:
    """Contralateral shadow in [0, 1] for (left, right) ears, shape (2, n).

    Shadow grows with how far the source sits on the opposite side of the
    head and is amplified for sources behind the wearer, which makes the
    interaural phase differ between a source and its front-back mirror.
    """
    a = np.radians(az_deg)
    lateral = np.cos(a)
    rear = np.maximum(0.0, -np.sin(a))
    weight = 0.3 + 1.2 * rear
    left = np.maximum(0.0, lateral) * weight
    right = np.maximum(0.0, -lateral) * weight
    return np.clip(strength * np.stack([left, right]), 0.0, 1.0)


def _one_pole_blocks(x: np.ndarray, cutoffs: np.ndarray, block: int, fs: int) -> np.ndarray:
    """One-pole low-pass whose cutoff is updated every ``block`` samples."""
    out = np.empty_like(x)
    y_prev = 0.0
    for b, fc in enumerate(cutoffs):
        seg = x[b * block:(b + 1) * block]
        if len(seg) == 0:
            break
        alpha = 1.0 - math.exp(-2.0 * math.pi * fc / fs)
        y, _ = signal.lfilter([alpha], [1.0, alpha - 1.0], seg, zi=[(1.0 - alpha) * y_prev])
        out[b * block:b * block + len(seg)] = y
        y_prev = y[-1]
    return out


def _read_fractional(src_up: np.ndarray, pos: np.ndarray) -> np.ndarray:
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    i0 = np.clip(i0, 0, len(src_up) - 2)
    return src_up[i0] * (1.0 - frac) + src_up[i0 + 1] * frac


def _retarded_delay(spk: Trajectory, ear: np.ndarray, times: np.ndarray, c: float,
                    iters: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Propagation delay so that |ear(t) - spk(t - tau)| = c * tau."""
    dist = np.linalg.norm(ear - spk.positions_at(times), axis=0)
    tau = dist / c
    for _ in range(iters):
        dist = np.linalg.norm(ear - spk.positions_at(times - tau), axis=0)
        tau = dist / c
    return tau, dist


def render_scene_audio(wearer: Trajectory, speaker: Trajectory, source: np.ndarray,
                       cfg: AcousticsConfig, t_start: float, n_samples: int,
                       seed: int = 0, wearer_source: np.ndarray | None = None) -> np.ndarray:
    """Render ``n_samples`` of binaural audio starting at ``t_start``.

    ``source`` sample ``i`` is emitted at ``t_start - SOURCE_PAD + i / fs``;
    it must cover ``n_samples`` plus the padding. ``wearer_source`` (same
    timing) is the wearer's own voice, rendered near field at zero ITD.
    """
    cfg.validate()
    fs = cfg.sample_rate
    pad = int(round(SOURCE_PAD * fs))
    if len(source) < n_samples + pad:
        raise ConfigError(f"source has {len(source)} samples, need {n_samples + pad}")
    times = t_start + np.arange(n_samples) / fs
    src_up = signal.resample_poly(source, OVERSAMPLE, 1)
    left, right = ear_positions(wearer, times, cfg.mic_spacing)

    ears = []
    for ear in (left, right):
        tau, dist = _retarded_delay(speaker, ear, times, cfg.sound_speed)
        read = ((times - tau) - (t_start - SOURCE_PAD)) * fs * OVERSAMPLE
        ears.append(_read_fractional(src_up, read) / np.maximum(dist, NEAR_FIELD))
    out = np.stack(ears)

    if cfg.head_shadow > 0:
        block = max(int(round(SHADOW_BLOCK * fs)), 1)
        centers = times[::block] + 0.5 * block / fs
        wpos = wearer.positions_at(centers)
        spos = speaker.positions_at(centers)
        az = relative_doa_array(wpos[0], wpos[2], wearer.yaw_at(centers), spos[0], spos[2])
        shadow = shadow_amount(az, cfg.head_shadow)
        cut = SHADOW_F_OPEN * (SHADOW_F_LOW / SHADOW_F_OPEN) ** shadow
        for ch in range(2):
            out[ch] = _one_pole_blocks(out[ch], cut[ch], block, fs)

    rng = np.random.default_rng(seed)
    if cfg.reverb_tail > 0:
        n_tail = max(int(cfg.reverb_tail * fs), 1)
        env = np.exp(-3.0 * math.log(10.0) * np.arange(n_tail) / n_tail)
        energy = 10.0 ** (-cfg.reverb_drr_db / 10.0)
        for ch in range(2):
            tail = rng.standard_normal(n_tail) * env
            tail *= math.sqrt(energy / np.sum(tail ** 2))
            out[ch] = out[ch] + signal.fftconvolve(out[ch], tail)[:n_samples]

    if wearer_source is not None:
        mouth_dist = 0.15
        delay = int(round(mouth_dist / cfg.sound_speed * fs))
        own = wearer_source[pad - delay:pad - delay + n_samples] / NEAR_FIELD
        out = out + own[None, :]

    out *= 10.0 ** (cfg.source_level_dbfs / 20.0)
    if math.isfinite(cfg.noise_snr_db):
        noise = rng.standard_normal(out.shape)
        out, _ = mix_at_snr(out, noise, cfg.noise_snr_db)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def render_binaural(wearer: Trajectory, speaker: Trajectory, source: np.ndarray,
                    cfg: AcousticsConfig, clip_centers=None, clip_seconds: float = 0.5,
                    seed: int = 0, wearer_source: np.ndarray | None = None,
                    wearer_active: np.ndarray | None = None) -> list[BinauralClip]:
    """Render annotated binaural clips.

    The scene audio is rendered once over the span covered by the
    trajectories (minus the source padding) and cut into clips of
    ``clip_seconds`` centred on ``clip_centers``. Without centres a single
    clip spanning the whole render is returned.
    """
    cfg.validate()
    fs = cfg.sample_rate
    if abs(wearer.t[0] - speaker.t[0]) > 1e-9 or abs(wearer.t[-1] - speaker.t[-1]) > 1e-9:
        raise ConfigError("wearer and speaker trajectories are not time-aligned")
    t0 = float(wearer.t[0])
    n_total = int(math.floor((wearer.t[-1] - t0) * fs))
    pad = int(round(SOURCE_PAD * fs))
    n_total = min(n_total, len(source) - pad)
    audio = render_scene_audio(wearer, speaker, source, cfg, t0, n_total, seed=seed,
                               wearer_source=wearer_source)
    if clip_centers is None:
        mid = t0 + n_total / (2 * fs)
        return [BinauralClip(audio, fs, annotate(wearer, speaker, mid))]
    clip_len = int(round(clip_seconds * fs))
    clips = []
    for tc in clip_centers:
        start = int(round((tc - t0) * fs)) - clip_len // 2
        if start < 0 or start + clip_len > n_total:
            raise ConfigError(f"clip centred at {tc:.3f}s falls outside the rendered audio")
        speaking = False
        if wearer_active is not None:
            speaking = bool(wearer_active[pad + start + clip_len // 2])
        clips.append(BinauralClip(audio[:, start:start + clip_len].copy(), fs,
                                  annotate(wearer, speaker, tc, speaking)))
    return clips


def annotate(wearer: Trajectory, speaker: Trajectory, time: float,
             wearer_speaking: bool = False) -> ClipAnnotation:
    wp = wearer.pose_at(time)
    sp = speaker.pose_at(time)
    az = relative_doa(wp, sp)
    az_bin = int(round(az)) % 360
    return ClipAnnotation(time=float(time), azimuth=az, azimuth_bin=az_bin, in_fov=in_fov(az_bin),
                          wearer=wp, speaker=sp, wearer_speaking=wearer_speaking)


def signal_power(x: np.ndarray) -> float:
    return float(np.mean(np.asarray(x, dtype=float) ** 2))


def mix_at_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float):
    """Add ``noise`` to ``clean`` at the requested SNR.

    The noise is looped or truncated along the last axis to match. Returns
    ``(mixed, meta)`` where ``meta`` carries the applied gain and whether
    the SNR is defined (it is not when ``clean`` is silent, in which case
    the noise is scaled against unit reference power).
    """
    clean = np.asarray(clean, dtype=float)
    if math.isinf(snr_db) and snr_db > 0:
        return clean.copy(), {"gain": 0.0, "snr_defined": True, "snr_db": snr_db}
    noise = np.asarray(noise, dtype=float)
    if noise.shape[:-1] != clean.shape[:-1]:
        noise = np.broadcast_to(noise, clean.shape[:-1] + noise.shape[-1:])
    if noise.shape[-1] != clean.shape[-1]:
        reps = -(-clean.shape[-1] // noise.shape[-1])
        noise = np.concatenate([noise] * reps, axis=-1)[..., :clean.shape[-1]]
    p_noise = signal_power(noise)
    if p_noise == 0.0:
        raise ValueError("noise signal is all zeros")
    p_clean = signal_power(clean)
    defined = p_clean > 0.0
    ref = p_clean if defined else 1.0
    gain = math.sqrt(ref / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean + gain * noise, {"gain": gain, "snr_defined": defined, "snr_db": snr_db}


def measured_snr_db(clean: np.ndarray, mixed: np.ndarray) -> float:
    return 10.0 * math.log10(signal_power(clean) / signal_power(np.asarray(mixed) - clean))


def wearer_facing_pose(x: float, z: float, target: Pose, height: float = 1.65) -> Pose:
    """Pose at (x, z) whose facing vector points at ``target``."""
    return Pose(x, height, z, wrap_deg(math.degrees(math.atan2(target.x - x, target.z - z))))
