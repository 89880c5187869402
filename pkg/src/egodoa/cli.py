"""Command-line entry point: ``egodoa simulate|featurize|train|evaluate|report``.

Every subcommand reads the same config (TOML, or JSON by extension),
writes under ``<out>/<stage>/`` and leaves the effective merged config
there as ``config.json``. Exit codes: 0 ok, 2 config error, 3 missing
artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .features import srp_phat_doa
from .model.network import ModelConfig, ParameterStore
from .model.train import NumericalError, TrainConfig, fit, load_params, predict_set
from .pipeline import FeatureConfig, MissingArtifact, featurize_dataset, load_features
from .simulator.acoustics import AcousticsConfig
from .simulator.dataset import in_fov_fraction, make_scene_specs, write_dataset
from .simulator.trajectory import ConfigError as SimConfigError

log = logging.getLogger("egodoa")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


def stage_dir(cfg: dict, stage: str) -> Path:
    return Path(cfg["run"]["out"]) / stage


def _prepare(cfg: dict, stage: str) -> Path:
    d = stage_dir(cfg, stage)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise config_mod.ConfigError(f"cannot create output directory {d}: {exc}") from exc
    (d / "config.json").write_text(config_mod.to_json(cfg), encoding="utf-8")
    return d


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found: {path} (run the earlier stage first)")
    return path


def cmd_simulate(cfg: dict) -> int:
    sim = cfg["simulate"]
    out = _prepare(cfg, "dataset")
    acoustics = AcousticsConfig(sample_rate=sim["sample_rate"], mic_spacing=sim["mic_spacing"],
                                head_shadow=sim["head_shadow"], reverb_tail=sim["reverb_tail"],
                                reverb_drr_db=sim["reverb_drr_db"],
                                noise_snr_db=sim["noise_snr_db"])
    specs = make_scene_specs(sim["n_scenes"], cfg["run"]["seed"], duration=sim["duration"],
                             split_fractions=tuple(sim["split_fractions"]), fps=sim["fps"],
                             wearer_faces_speaker=sim["wearer_faces_speaker"],
                             wearer_speech=sim["wearer_speech"], acoustics=acoustics)
    rows = write_dataset(specs, out, workers=cfg["run"]["workers"])
    counts = {s: sum(r["split"] == s for r in rows) for s in ("train", "val", "test")}
    print(f"simulated {len(specs)} scenes, {len(rows)} chunks "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']})")
    print(f"in-FOV fraction: {in_fov_fraction(rows):.3f}")
    return EXIT_OK


def _feature_config(cfg: dict) -> FeatureConfig:
    f = cfg["featurize"]
    return FeatureConfig(window=f["window"], hop=f["hop"], n_lags=f["n_lags"], patch=f["patch"])


def cmd_featurize(cfg: dict) -> int:
    data = stage_dir(cfg, "dataset")
    _require(data / "manifest.jsonl", "dataset manifest")
    out = _prepare(cfg, "features")
    index = featurize_dataset(data, out, _feature_config(cfg), workers=cfg["run"]["workers"])
    if index["reused"]:
        print(f"feature cache up to date (hash {index['hash']}), nothing recomputed")
    else:
        print(f"featurized {len(index['chunks'])} chunks (hash {index['hash']})")
    print(f"audio features {tuple(index['gcc_shape'])}, visual patches {tuple(index['patch_shape'])}")
    return EXIT_OK


def _load_split(cfg: dict, split: str):
    feats = stage_dir(cfg, "features")
    _require(feats / "index.json", "feature cache")
    return load_features(feats, stage_dir(cfg, "dataset"), split)


def _model_config(cfg: dict, data) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(depth=m["depth"], heads=m["heads"], hidden=m["hidden"], ff=m["ff"],
                       pre_ln=m["pre_ln"], audio_len=data.gcc.shape[1], audio_dim=data.gcc.shape[2],
                       visual_len=data.patches.shape[1], visual_dim=data.patches.shape[2],
                       seed=cfg["run"]["seed"])


def _train_config(cfg: dict, mode: str) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                       optimizer=t["optimizer"], momentum=t["momentum"], sigma=t["sigma"],
                       patience=t["patience"], mode=mode, seed=cfg["run"]["seed"])


def cmd_train(cfg: dict, resume: bool = False) -> int:
    train, _ = _load_split(cfg, "train")
    val, _ = _load_split(cfg, "val")
    if len(train) == 0:
        raise MissingArtifact("the dataset has no training chunks")
    cap = cfg["train"]["max_chunks"]
    if cap and len(train) > cap:
        train = train.subset(np.arange(cap))
    out = _prepare(cfg, "train")
    mcfg = _model_config(cfg, train)
    runs = [("av", "separate")] + ([("ao", "audio_only")] if cfg["train"]["ablation"] else [])
    for name, mode in runs:
        run_dir = out / name
        last = run_dir / "last.ckpt"
        params = ParameterStore(mcfg)
        res = fit(params, train, val if len(val) else None, _train_config(cfg, mode), run_dir,
                  resume=last if resume and last.exists() else None)
        epochs_run = sum(h["split"] == "train" for h in res["history"])
        print(f"{name}: {epochs_run} epochs, best epoch {res['best_epoch']}, "
              f"best validation AE {res['best_ae']:.2f} deg")
    return EXIT_OK


def cmd_evaluate(cfg: dict) -> int:
    from .eval import EvalReport, reports_to_csv, reports_to_json

    ev = cfg["evaluate"]
    test, rows = _load_split(cfg, "test")
    if len(test) == 0:
        raise MissingArtifact("the dataset has no test chunks")
    ckpt_name = f"{ev['checkpoint']}.ckpt"
    av_ckpt = _require(stage_dir(cfg, "train") / "av" / ckpt_name, "audio-visual checkpoint")
    ao_ckpt = stage_dir(cfg, "train") / "ao" / ckpt_name
    if ev["audio_only"]:
        _require(ao_ckpt, "audio-only checkpoint")
    out = _prepare(cfg, "eval")
    gts = test.azimuth_bin.astype(float)
    reports, posts = [], {}

    posts["av"] = predict_set(load_params(av_ckpt), test, "separate")
    reports.append(EvalReport.build("audio_visual", np.argmax(posts["av"], axis=1), gts, ev["threshold"]))
    if ev["audio_only"]:
        posts["ao"] = predict_set(load_params(ao_ckpt), test, "audio_only")
        reports.append(EvalReport.build("audio_only", np.argmax(posts["ao"], axis=1), gts, ev["threshold"]))
    if ev["srp"]:
        reports.append(srp_report(test, cfg, ev["threshold"]))
    for key, p in posts.items():
        if not np.all(np.isfinite(p)):
            raise NumericalError(f"non-finite posterior from the {key} model")

    (out / "report.json").write_text(reports_to_json(reports), encoding="utf-8")
    (out / "report.csv").write_text(reports_to_csv(reports), encoding="utf-8")
    for r in reports:
        (out / f"histogram_{r.method}.csv").write_text(r.histogram.to_csv(), encoding="utf-8")
    for key, p in posts.items():
        np.save(out / f"posteriors_{key}.npy", p.astype(np.float32))
    meta = [{"scene_id": r["scene_id"], "chunk_index": r["chunk_index"], "azimuth_bin": r["azimuth_bin"],
             "in_fov": r["in_fov"]} for r in rows]
    (out / "chunks.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    for r in reports:
        s = r.splits
        print(f"{r.method:>13}: overall AE {_fmt(s['overall'].mean_ae)}  in-FOV {_fmt(s['in_fov'].mean_ae)}"
              f"  out-of-FOV {_fmt(s['out_fov'].mean_ae)}  acc {_fmt(s['overall'].accuracy)}%")
    return EXIT_OK


def srp_report(test, cfg: dict, threshold: float = 2.0):
    from .eval import EvalReport
    sim = cfg["simulate"]
    preds = np.array([srp_phat_doa(g, sim["mic_spacing"], 343.0, sim["sample_rate"]).azimuth
                      for g in test.gcc])
    return EvalReport.build("srp_phat", preds, test.azimuth_bin.astype(float), threshold)


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.2f}"


def cmd_report(cfg: dict) -> int:
    from .report import write_report
    ev_dir = _require(stage_dir(cfg, "eval"), "evaluation outputs")
    _require(ev_dir / "report.json", "evaluation report")
    out = _prepare(cfg, "report")
    written = write_report(ev_dir, stage_dir(cfg, "train"), out, cfg["report"]["n_examples"])
    for p in written:
        print(p)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "featurize": cmd_featurize, "train": cmd_train,
            "evaluate": cmd_evaluate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egodoa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="TOML or JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--preset", choices=sorted(config_mod.PRESETS), default=None)
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from last.ckpt if present")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = config_mod.resolve(args.config, args.preset, args.seed, args.workers)
        fn = COMMANDS[args.command]
        return fn(cfg, resume=args.resume) if args.command == "train" else fn(cfg)
    except (config_mod.ConfigError, SimConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
