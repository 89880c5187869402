"""Optimisers, the separate audio-only / audio-visual training step and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import geometry
from ..features import gaussian_targets
from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .network import (ModelConfig, ParameterStore, audio_only_predict, emd_loss, encode_audio,
                      encode_visual, fuse_predict, patches_to_float, predict)

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 512
    lr: float = 1e-3
    optimizer: str = "sgd"  # sgd | momentum | adam
    momentum: float = 0.9
    sigma: float = 4.0
    patience: int = 5
    mode: str = "separate"  # separate | audio_only
    seed: int = 0
    eval_batch: int = 256

    def __post_init__(self):
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer}")
        if self.mode not in ("separate", "audio_only"):
            raise ValueError(f"unknown training mode {self.mode}")
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs, batch size and learning rate must be positive")


class Optimizer:
    """Plain SGD, SGD with momentum, or Adam over a :class:`ParameterStore`."""

    def __init__(self, params: ParameterStore, kind: str = "sgd", lr: float = 1e-3,
                 momentum: float = 0.9, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.state: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                if self.kind == "adam" and name + ".m" in self.state:
                    g = np.zeros_like(p.data)
                else:
                    continue
            g = g.astype(p.data.dtype, copy=False)
            if self.kind == "sgd":
                p.data = p.data - self.lr * g
            elif self.kind == "momentum":
                v = self.state.get(name + ".v")
                v = g if v is None else self.momentum * v + g
                self.state[name + ".v"] = v
                p.data = p.data - self.lr * v
            else:
                m = self.state.get(name + ".m", np.zeros_like(p.data))
                v = self.state.get(name + ".v", np.zeros_like(p.data))
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                self.state[name + ".m"], self.state[name + ".v"] = m, v
                mhat = m / (1 - b1 ** self.step_count)
                vhat = v / (1 - b2 ** self.step_count)
                p.data = (p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt/{k}": v for k, v in self.state.items()}
        out["opt/__step__"] = np.array([self.step_count], dtype=np.int64)
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.state = {k[4:]: v.copy() for k, v in arrays.items()
                      if k.startswith("opt/") and k != "opt/__step__"}
        self.step_count = int(arrays.get("opt/__step__", np.array([0]))[0])


def partition(in_fov) -> tuple[np.ndarray, np.ndarray]:
    """Split batch indices into (in view, out of view)."""
    flags = np.asarray(in_fov, dtype=bool)
    return np.flatnonzero(flags), np.flatnonzero(~flags)


def batch_loss(batch: dict, params: ParameterStore, mode: str = "separate"):
    """Summed EMD loss over a batch, routed as in the separate strategy.

    Returns ``(loss tensor averaged over the batch, parts)`` where ``parts``
    holds the summed per-branch losses and branch sizes.
    """
    n = len(batch["gcc"])
    if n == 0:
        raise ValueError("empty batch")
    dt = params.cfg.dtype
    targets = batch["target"]
    if mode == "separate":
        i_av, i_ao = partition(batch["in_fov"])
    else:
        i_av, i_ao = np.array([], dtype=int), np.arange(n)
    terms, parts = [], {"n_av": len(i_av), "n_ao": len(i_ao), "loss_av": 0.0, "loss_ao": 0.0}
    if len(i_ao):
        p_ao = audio_only_predict(encode_audio(batch["gcc"][i_ao], params), params)
        l_ao = emd_loss(targets[i_ao].astype(dt), p_ao)
        terms.append(l_ao)
        parts["loss_ao"] = float(l_ao.data)
    if len(i_av):
        z_a = encode_audio(batch["gcc"][i_av], params)
        z_v = encode_visual(patches_to_float(batch["patches"][i_av], dt), params)
        p_av = fuse_predict(z_a, z_v, params)
        l_av = emd_loss(targets[i_av].astype(dt), p_av)
        terms.append(l_av)
        parts["loss_av"] = float(l_av.data)
    total = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return ad.scale(total, 1.0 / n), parts


def train_step_separate(batch: dict, params: ParameterStore, opt: Optimizer,
                        mode: str = "separate") -> dict:
    """One gradient step on a batch; returns the loss and its per-branch parts."""
    params.zero_grad()
    loss, parts = batch_loss(batch, params, mode)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value}")
    loss.backward()
    opt.step()
    parts["loss"] = value
    return parts


@dataclass
class FeatureSet:
    gcc: np.ndarray  # (N, L_a, Z) float32
    patches: np.ndarray  # (N, L_v, P) uint8
    azimuth_bin: np.ndarray  # (N,) int
    in_fov: np.ndarray  # (N,) bool
    wearer_speaking: np.ndarray | None = None

    def __len__(self):
        return len(self.gcc)

    def subset(self, idx) -> "FeatureSet":
        ws = None if self.wearer_speaking is None else self.wearer_speaking[idx]
        return FeatureSet(self.gcc[idx], self.patches[idx], self.azimuth_bin[idx], self.in_fov[idx], ws)

    def batch(self, idx, sigma: float) -> dict:
        return {"gcc": self.gcc[idx], "patches": self.patches[idx],
                "target": gaussian_targets(self.azimuth_bin[idx], sigma),
                "in_fov": self.in_fov[idx]}


def predict_set(params: ParameterStore, data: FeatureSet, mode: str = "separate",
                batch_size: int = 256) -> np.ndarray:
    out = []
    for lo in range(0, len(data), batch_size):
        sl = slice(lo, lo + batch_size)
        out.append(predict(params, data.gcc[sl], data.patches[sl], data.in_fov[sl], mode))
    return np.concatenate(out) if out else np.zeros((0, params.cfg.bins))


def score_posteriors(post: np.ndarray, data: FeatureSet, sigma: float) -> dict:
    pred = np.argmax(post, axis=1).astype(float)
    ae = geometry.cyclic_abs_error(data.azimuth_bin.astype(float), pred)
    tgt = gaussian_targets(data.azimuth_bin, sigma)
    loss = float(np.sum((post.astype(float) - tgt) ** 2) / max(len(data), 1))
    return {"loss": loss, "accuracy": float(np.mean(ae < 2.0) * 100.0), "ae": float(np.mean(ae))}


LOG_FIELDS = ["epoch", "split", "loss", "accuracy", "ae"]


def fit(params: ParameterStore, train: FeatureSet, val: FeatureSet | None, cfg: TrainConfig,
        out_dir, resume: str | Path | None = None, on_epoch=None) -> dict:
    """Epoch loop with per-epoch checkpoints and early stopping on validation AE.

    Writes ``train_log.csv`` (epoch, split, loss, accuracy, ae) and
    ``epoch_XXX.ckpt`` / ``last.ckpt`` / ``best.ckpt`` under ``out_dir``.
    Epoch shuffles are seeded by ``(seed, epoch)``, so resuming from a
    checkpoint replays the uninterrupted run exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    opt = Optimizer(params, cfg.optimizer, cfg.lr, cfg.momentum)
    history: list[dict] = []
    start_epoch, best_ae, best_epoch, stale = 1, math.inf, 0, 0
    if resume is not None:
        _, tensors, meta = load_checkpoint(resume)
        for name, t in params.items():
            t.data = tensors[name].astype(params.cfg.dtype)
        opt.load_state(tensors)
        start_epoch = meta["epoch"] + 1
        best_ae, best_epoch, stale = meta["best_ae"], meta["best_epoch"], meta["stale"]
        history = meta["history"]
    log_path = out_dir / "train_log.csv"

    for epoch in range(start_epoch, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train))
        sums, count = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[lo:lo + cfg.batch_size])
            parts = train_step_separate(train.batch(idx, cfg.sigma), params, opt, cfg.mode)
            sums += parts["loss"] * len(idx)
            count += len(idx)
        for name, t in params.items():
            if not np.all(np.isfinite(t.data)):
                raise NumericalError(f"parameter {name} became non-finite at epoch {epoch}")
        train_metrics = score_posteriors(predict_set(params, train, cfg.mode, cfg.eval_batch), train, cfg.sigma)
        train_metrics["loss"] = sums / count
        history.append({"epoch": epoch, "split": "train", **train_metrics})
        if val is not None and len(val):
            vm = score_posteriors(predict_set(params, val, cfg.mode, cfg.eval_batch), val, cfg.sigma)
            history.append({"epoch": epoch, "split": "val", **vm})
            improved = vm["ae"] < best_ae - 1e-9
        else:
            vm = None
            improved = True
        if improved:
            best_ae = vm["ae"] if vm else train_metrics["ae"]
            best_epoch, stale = epoch, 0
        else:
            stale += 1
        log.info("epoch %d train loss %.5f ae %.2f%s", epoch, train_metrics["loss"], train_metrics["ae"],
                 f" | val ae {vm['ae']:.2f} acc {vm['accuracy']:.1f}" if vm else "")
        meta = {"epoch": epoch, "best_ae": best_ae, "best_epoch": best_epoch, "stale": stale,
                "history": history, "train": asdict(cfg)}
        tensors = {**params.arrays(), **opt.state_arrays()}
        ckpt = out_dir / f"epoch_{epoch:03d}.ckpt"
        save_checkpoint(ckpt, params.cfg.to_dict(), tensors, meta)
        save_checkpoint(out_dir / "last.ckpt", params.cfg.to_dict(), tensors, meta)
        if improved:
            save_checkpoint(out_dir / "best.ckpt", params.cfg.to_dict(), tensors, meta)
        write_log(log_path, history)
        if on_epoch is not None:
            on_epoch(epoch, history)
        if stale >= cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    return {"history": history, "best_epoch": best_epoch, "best_ae": best_ae}


def write_log(path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]) for k in LOG_FIELDS})


def load_params(path) -> ParameterStore:
    config, tensors, _ = load_checkpoint(path)
    cfg = ModelConfig(**config)
    return ParameterStore(cfg, {k: v for k, v in tensors.items() if not k.startswith("opt/")})
