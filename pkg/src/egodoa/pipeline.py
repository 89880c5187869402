"""Feature caching between the simulator output and training/evaluation."""

from __future__ import annotations

import hashlib
import json
import os
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .features import feature_conventions, gcc_phat_stereo, patchify_u8
from .model.checkpoint import load_checkpoint, save_checkpoint
from .model.train import FeatureSet
from .simulator.dataset import load_chunk_audio, load_chunk_frame, read_manifest

log = logging.getLogger(__name__)
INDEX = "index.json"


class MissingArtifact(FileNotFoundError):
    """An input the command depends on does not exist."""


@dataclass(frozen=True)
class FeatureConfig:
    window: int = 1024
    hop: int = 320
    n_lags: int = 96
    patch: int = 16

    def digest(self, manifest_sha: str) -> str:
        blob = json.dumps({"features": asdict(self), "manifest": manifest_sha}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def file_sha(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _chunk_name(row) -> str:
    return f"{row['scene_id']}/{row['chunk_index']:05d}.feat"


def _featurize_one(args):
    root, out, row, fcfg = args
    _, audio = load_chunk_audio(root, row)
    gcc = gcc_phat_stereo(audio.astype(np.float64), fcfg.window, fcfg.hop, fcfg.n_lags).astype(np.float32)
    patches = patchify_u8(load_chunk_frame(root, row), fcfg.patch)
    path = Path(out) / _chunk_name(row)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, asdict(fcfg), {"gcc": gcc, "patches": patches},
                    {"conventions": feature_conventions(fcfg.window, fcfg.hop, fcfg.n_lags, fcfg.patch)})
    return gcc.shape, patches.shape


def featurize_dataset(dataset_dir, out_dir, fcfg: FeatureConfig = FeatureConfig(),
                      workers: int = 1) -> dict:
    """Compute per-chunk GCC-PHAT and patch caches.

    The cache is keyed by a hash of the feature config and the manifest
    bytes; an existing cache with a matching hash is reused untouched.
    """
    dataset_dir, out_dir = Path(dataset_dir), Path(out_dir)
    manifest = dataset_dir / "manifest.jsonl"
    if not manifest.exists():
        raise MissingArtifact(f"dataset manifest not found: {manifest}")
    digest = fcfg.digest(file_sha(manifest))
    index_path = out_dir / INDEX
    if index_path.exists():
        index = json.loads(index_path.read_text())
        if index.get("hash") == digest and all((out_dir / c).exists() for c in index["chunks"]):
            log.info("feature cache %s is up to date (hash %s); nothing recomputed", out_dir, digest)
            index["reused"] = True
            return index
        log.info("feature cache hash changed (%s -> %s); recomputing", index.get("hash"), digest)
    rows = read_manifest(manifest)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(str(dataset_dir), str(out_dir), r, fcfg) for r in rows]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            shapes = list(pool.map(_featurize_one, jobs, chunksize=16))
    else:
        shapes = [_featurize_one(j) for j in jobs]
    gshape, pshape = shapes[0] if shapes else ((0, 0), (0, 0))
    log.info("features: gcc %s, patches %s for %d chunks", tuple(gshape), tuple(pshape), len(rows))
    index = {"hash": digest, "config": asdict(fcfg), "dataset": os.path.relpath(dataset_dir, out_dir),
             "gcc_shape": list(gshape), "patch_shape": list(pshape),
             "chunks": [_chunk_name(r) for r in rows], "reused": False}
    index_path.write_text(json.dumps({k: v for k, v in index.items() if k != "reused"}, indent=1, sort_keys=True))
    return index


def load_features(feature_dir, dataset_dir, split: str | None = None) -> tuple[FeatureSet, list[dict]]:
    """Load cached features (optionally one split) with their manifest rows."""
    feature_dir = Path(feature_dir)
    if not (feature_dir / INDEX).exists():
        raise MissingArtifact(f"feature cache not found: {feature_dir / INDEX}")
    rows = read_manifest(Path(dataset_dir) / "manifest.jsonl")
    if split is not None:
        rows = [r for r in rows if r["split"] == split]
    gcc, patches = [], []
    for r in rows:
        path = feature_dir / _chunk_name(r)
        if not path.exists():
            raise MissingArtifact(f"missing feature file {path}")
        _, t, _ = load_checkpoint(path)
        gcc.append(t["gcc"])
        patches.append(t["patches"])
    if not rows:
        return FeatureSet(np.zeros((0, 0, 0), np.float32), np.zeros((0, 0, 0), np.uint8),
                          np.zeros(0, int), np.zeros(0, bool), np.zeros(0, bool)), rows
    return FeatureSet(np.stack(gcc), np.stack(patches),
                      np.array([r["azimuth_bin"] for r in rows], dtype=int),
                      np.array([r["in_fov"] for r in rows], dtype=bool),
                      np.array([r["wearer_speaking"] for r in rows], dtype=bool)), rows
