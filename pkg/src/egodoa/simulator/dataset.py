"""Scene specs, chunking and the on-disk dataset layout.

Layout under the output directory::

    manifest.jsonl          one JSON object per chunk
    audio/<scene>/<chunk>.wav   2-channel float32 PCM
    frames/<scene>/<chunk>.png  8-bit RGB

Manifest fields (angles in degrees, positions in metres, times in seconds):
``scene_id, split, chunk_index, frame_index, time, clip_start, clip_end,
sample_rate, fps, wearer{x,y,z,yaw}, speaker{x,y,z,yaw}, azimuth,
azimuth_bin, elevation, distance, in_fov, wearer_speaking, audio, frame``.
``audio`` and ``frame`` are paths relative to the manifest.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.io import wavfile

from ..geometry import CameraIntrinsics
from .acoustics import SOURCE_PAD, AcousticsConfig, render_binaural
from .frames import render_frame
from .sources import activity_schedule, speech_like
from .trajectory import ConfigError, TrajectoryParams, gen_trajectory

MANIFEST = "manifest.jsonl"
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    seed: int
    duration: float = 10.0
    fps: float = 50.0
    split: str = "train"
    chunk_stride: int = 2
    clip_frames: int = 25
    wearer_faces_speaker: bool = True
    wearer_speech: float = 0.0  # fraction of time the wearer talks
    trajectory: TrajectoryParams = field(default_factory=TrajectoryParams)
    acoustics: AcousticsConfig = field(default_factory=AcousticsConfig)
    camera: CameraIntrinsics = field(default_factory=CameraIntrinsics)

    @property
    def clip_seconds(self) -> float:
        return self.clip_frames / self.fps

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.fps))

    def frame_times(self) -> np.ndarray:
        return self.clip_seconds / 2 + np.arange(self.n_frames) / self.fps

    def chunk_frames(self) -> np.ndarray:
        return np.arange(0, self.n_frames, self.chunk_stride)


def make_scene_specs(n_scenes: int, seed: int, duration: float = 10.0,
                     split_fractions=(0.8, 0.1, 0.1), **kwargs) -> list[SceneSpec]:
    """Seeded scene list with a scene-level train/val/test split."""
    if n_scenes <= 0:
        raise ConfigError("need at least one scene")
    seeds = np.random.SeedSequence(seed).generate_state(n_scenes)
    order = np.random.default_rng(seed).permutation(n_scenes)
    frac = np.asarray(split_fractions, dtype=float)
    frac = frac / frac.sum()
    n_val = int(round(frac[1] * n_scenes))
    n_test = int(round(frac[2] * n_scenes))
    if n_scenes >= 3:
        n_val, n_test = max(n_val, 1), max(n_test, 1)
    n_train = n_scenes - n_val - n_test
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[idx] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return [SceneSpec(scene_id=f"scene{i:04d}", seed=int(seeds[i]), duration=duration,
                      split=split_of[i], **kwargs) for i in range(n_scenes)]


@dataclass
class Chunk:
    clip: object  # BinauralClip
    frame: np.ndarray
    frame_index: int
    chunk_index: int


def simulate_scene(spec: SceneSpec) -> list[Chunk]:
    """Generate every chunk of one scene; a pure function of ``spec``."""
    acfg = spec.acoustics
    acfg.validate()
    fs = acfg.sample_rate
    total = spec.duration + spec.clip_seconds
    tparams = dataclasses.replace(spec.trajectory, duration=total)
    ss = np.random.SeedSequence(spec.seed).spawn(5)
    speaker = gen_trajectory(int(ss[0].generate_state(1)[0]), tparams)
    speaker.y[:] = np.random.default_rng(ss[4]).uniform(1.5, 1.8)
    wearer = gen_trajectory(int(ss[1].generate_state(1)[0]), tparams,
                            look_at=speaker if spec.wearer_faces_speaker else None)

    rng_src = np.random.default_rng(ss[2])
    n_src = int(math.ceil((total + SOURCE_PAD) * fs)) + 16
    talk = activity_schedule(n_src, fs, rng_src)
    source = speech_like(n_src, fs, rng_src, activity=talk)
    own, own_active = None, None
    if spec.wearer_speech > 0:
        p = min(spec.wearer_speech, 0.95)
        own_active = activity_schedule(n_src, fs, rng_src, on_range=(0.8 * p * 3, 1.2 * p * 3),
                                       off_range=(0.8 * (1 - p) * 3, 1.2 * (1 - p) * 3),
                                       start_on=bool(rng_src.uniform() < p))
        own = speech_like(n_src, fs, rng_src, activity=own_active) * 2.0

    frames_t = spec.frame_times()
    chunk_idx = spec.chunk_frames()
    clips = render_binaural(wearer, speaker, source, acfg, clip_centers=frames_t[chunk_idx],
                            clip_seconds=spec.clip_seconds, seed=int(ss[3].generate_state(1)[0]),
                            wearer_source=own, wearer_active=own_active)
    out = []
    for k, (fi, clip) in enumerate(zip(chunk_idx, clips)):
        ann = clip.annotation
        img = render_frame(ann.wearer, ann.speaker, spec.camera, seed=spec.seed % (2 ** 31) + int(fi))
        out.append(Chunk(clip=clip, frame=img, frame_index=int(fi), chunk_index=k))
    return out


def _manifest_row(spec: SceneSpec, ch: Chunk, audio_rel: str, frame_rel: str) -> dict:
    ann = ch.clip.annotation
    w, s = ann.wearer, ann.speaker
    horiz = math.hypot(s.x - w.x, s.z - w.z)
    return {
        "scene_id": spec.scene_id,
        "split": spec.split,
        "chunk_index": ch.chunk_index,
        "frame_index": ch.frame_index,
        "time": round(ann.time, 6),
        "clip_start": round(ann.time - spec.clip_seconds / 2, 6),
        "clip_end": round(ann.time + spec.clip_seconds / 2, 6),
        "sample_rate": ch.clip.sample_rate,
        "fps": spec.fps,
        "wearer": {k: round(v, 6) for k, v in w.as_dict().items()},
        "speaker": {k: round(v, 6) for k, v in s.as_dict().items()},
        "azimuth": round(ann.azimuth, 6),
        "azimuth_bin": ann.azimuth_bin,
        "elevation": round(math.degrees(math.atan2(s.y - w.y, horiz)), 6),
        "distance": round(horiz, 6),
        "in_fov": bool(ann.in_fov),
        "wearer_speaking": bool(ann.wearer_speaking),
        "audio": audio_rel,
        "frame": frame_rel,
    }


def _write_scene(args) -> list[dict]:
    spec, out_dir = args
    out_dir = Path(out_dir)
    adir = out_dir / "audio" / spec.scene_id
    fdir = out_dir / "frames" / spec.scene_id
    rows = []
    try:
        adir.mkdir(parents=True, exist_ok=True)
        fdir.mkdir(parents=True, exist_ok=True)
        for ch in simulate_scene(spec):
            name = f"{ch.chunk_index:05d}"
            a_rel = f"audio/{spec.scene_id}/{name}.wav"
            f_rel = f"frames/{spec.scene_id}/{name}.png"
            wavfile.write(out_dir / a_rel, ch.clip.sample_rate, ch.clip.samples.T.astype(np.float32))
            Image.fromarray(ch.frame, mode="RGB").save(out_dir / f_rel, optimize=False)
            rows.append(_manifest_row(spec, ch, a_rel, f_rel))
    except OSError as exc:
        raise OSError(f"failed writing scene {spec.scene_id} under {out_dir}: {exc}") from exc
    return rows


def write_dataset(scenes: list[SceneSpec], out_dir, workers: int = 1) -> list[dict]:
    """Simulate ``scenes`` into ``out_dir`` and write the manifest.

    Scenes may be generated in parallel; rows are always written in scene
    order so the manifest is reproducible.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    jobs = [(s, str(out_dir)) for s in scenes]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_scene = list(pool.map(_write_scene, jobs))
    else:
        per_scene = [_write_scene(j) for j in jobs]
    rows = [r for scene_rows in per_scene for r in scene_rows]
    path = out_dir / MANIFEST
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing manifest {path}: {exc}") from exc
    return rows


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_chunk_audio(root, row) -> tuple[int, np.ndarray]:
    fs, data = wavfile.read(Path(root) / row["audio"])
    return fs, np.ascontiguousarray(data.T)


def load_chunk_frame(root, row) -> np.ndarray:
    with Image.open(Path(root) / row["frame"]) as im:
        return np.asarray(im.convert("RGB"))


def in_fov_fraction(rows) -> float:
    return float(np.mean([r["in_fov"] for r in rows])) if rows else float("nan")


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
