"""Plot-ready CSVs and matplotlib figures from evaluation and training outputs.

Everything written here is a pure function of the input files, so running
the report twice gives byte-identical outputs (PNG metadata is stripped).
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PNG_META = {"Software": None}
LABELS = {"av": "audio-visual", "ao": "audio-only"}


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def pick_examples(chunks: list[dict], n: int) -> list[int]:
    """Alternate in-view and out-of-view chunks, earliest first."""
    inside = [i for i, c in enumerate(chunks) if c["in_fov"]]
    outside = [i for i, c in enumerate(chunks) if not c["in_fov"]]
    picked = []
    while len(picked) < n and (inside or outside):
        for pool in (inside, outside):
            if pool and len(picked) < n:
                picked.append(pool.pop(0))
    return picked


def posterior_rows(posts: dict[str, np.ndarray], chunks: list[dict], picked: list[int]) -> list[list]:
    rows = []
    for k, idx in enumerate(picked):
        c = chunks[idx]
        for key in sorted(posts):
            # renormalise in double precision so float32 rounding does not show in the sums
            p = posts[key][idx].astype(np.float64)
            p = p / p.sum()
            rows.append([k, LABELS.get(key, key), c["scene_id"], c["chunk_index"], c["azimuth_bin"],
                         int(c["in_fov"])] + [f"{v:.9e}" for v in p])
    return rows


def write_report(eval_dir, train_dir, out_dir, n_examples: int = 2) -> list[Path]:
    eval_dir, train_dir, out_dir = Path(eval_dir), Path(train_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    report = json.loads((eval_dir / "report.json").read_text())
    methods = [r["method"] for r in report["reports"]]

    # error histograms
    hist_rows, hists = [], {}
    for m in methods:
        rows = _read_csv(eval_dir / f"histogram_{m}.csv")
        hists[m] = rows
        hist_rows += [[m, r["gt_bin_deg"], r["mean_ae_deg"], r["count"]] for r in rows]
    written.append(_write(out_dir / "error_histogram.csv",
                          _csv_text(["method", "gt_bin_deg", "mean_ae_deg", "count"], hist_rows)))
    fig, ax = plt.subplots(figsize=(8, 3.5))
    for m in methods:
        x = [int(r["gt_bin_deg"]) for r in hists[m]]
        y = [float(r["mean_ae_deg"]) for r in hists[m]]
        ax.plot(x, y, ".", ms=3, label=m.replace("_", " "))
    ax.axvspan(60, 120, color="0.9", zorder=0)
    ax.set(xlim=(0, 360), xlabel="ground-truth DOA (deg)", ylabel="mean AE (deg)")
    ax.legend(fontsize=8)
    written.append(_save(fig, out_dir / "error_histogram.png"))

    # posterior examples
    chunks = json.loads((eval_dir / "chunks.json").read_text())
    posts = {k: np.load(eval_dir / f"posteriors_{k}.npy") for k in ("av", "ao")
             if (eval_dir / f"posteriors_{k}.npy").exists()}
    picked = pick_examples(chunks, n_examples)
    header = ["example", "model", "scene_id", "chunk_index", "gt_deg", "in_fov"] + [f"p{b}" for b in range(360)]
    written.append(_write(out_dir / "posterior_examples.csv", _csv_text(header, posterior_rows(posts, chunks, picked))))
    fig, axes = plt.subplots(1, max(len(picked), 1), figsize=(4 * max(len(picked), 1), 3), squeeze=False)
    for ax, idx in zip(axes[0], picked):
        for key in sorted(posts):
            ax.plot(np.arange(360), posts[key][idx], lw=1, label=LABELS.get(key, key))
        ax.axvline(chunks[idx]["azimuth_bin"], color="k", ls="--", lw=0.8)
        ax.set(xlim=(0, 360), xlabel="DOA (deg)",
               title=f"{chunks[idx]['scene_id']}/{chunks[idx]['chunk_index']}"
                     f" ({'in' if chunks[idx]['in_fov'] else 'out of'} view)")
        ax.legend(fontsize=7)
    written.append(_save(fig, out_dir / "posterior_examples.png"))

    # training curves
    curve_rows = []
    for key in ("av", "ao"):
        log_path = train_dir / key / "train_log.csv"
        if log_path.exists():
            curve_rows += [[LABELS[key], r["epoch"], r["split"], r["loss"], r["accuracy"], r["ae"]]
                           for r in _read_csv(log_path)]
    written.append(_write(out_dir / "training_curves.csv",
                          _csv_text(["model", "epoch", "split", "loss", "accuracy", "ae"], curve_rows)))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    for model in sorted({r[0] for r in curve_rows}):
        for split, ls in (("train", "-"), ("val", "--")):
            sel = [r for r in curve_rows if r[0] == model and r[2] == split]
            if sel:
                ep = [int(r[1]) for r in sel]
                ax1.plot(ep, [float(r[3]) for r in sel], ls, label=f"{model} {split}")
                ax2.plot(ep, [float(r[5]) for r in sel], ls, label=f"{model} {split}")
    ax1.set(xlabel="epoch", ylabel="EMD loss")
    ax2.set(xlabel="epoch", ylabel="mean AE (deg)")
    ax1.legend(fontsize=7)
    written.append(_save(fig, out_dir / "training_curves.png"))
    return written


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)
    return path
