"""Audio-visual transformer for relative DOA estimation.

Audio GCC-PHAT frames and image patches are embedded, prefixed with a
learned CLS token, offset by learned position encodings and passed
through separate encoder stacks. Speakers in view are classified from the
two CLS outputs of a joint attention over both token sequences; speakers
out of view use the audio CLS alone (the visual half of the classifier
input is zero-filled).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

N_BINS = 360
SPHERE_COARSE = (45, 90)
SPHERE_FINE = (90, 180)


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    heads: int = 4
    hidden: int = 128
    ff: int = 256
    audio_len: int = 22
    audio_dim: int = 96
    visual_len: int = 196
    visual_dim: int = 768
    bins: int = N_BINS
    pre_ln: bool = False
    spherical_head: bool = False
    activity_head: bool = False
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("depth", "heads", "hidden", "ff", "audio_len", "audio_dim",
                     "visual_len", "visual_dim", "bins"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")

    @property
    def d_k(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


def _msa_names(prefix: str) -> list[str]:
    return [f"{prefix}.{w}" for w in ("wq", "wk", "wv", "wo")]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    h, f = cfg.hidden, cfg.ff
    shapes = {}
    for mod, length, dim in (("audio", cfg.audio_len, cfg.audio_dim),
                             ("visual", cfg.visual_len, cfg.visual_dim)):
        shapes[f"{mod}.embed"] = (dim, h)
        shapes[f"{mod}.cls"] = (h,)
        shapes[f"{mod}.pos"] = (length + 1, h)
        for d in range(cfg.depth):
            p = f"{mod}.enc{d}"
            for name in _msa_names(p + ".msa"):
                shapes[name] = (h, h)
            shapes[f"{p}.ln1.g"] = (h,)
            shapes[f"{p}.ln1.b"] = (h,)
            shapes[f"{p}.mlp.w1"] = (h, f)
            shapes[f"{p}.mlp.b1"] = (f,)
            shapes[f"{p}.mlp.w2"] = (f, h)
            shapes[f"{p}.mlp.b2"] = (h,)
            shapes[f"{p}.ln2.g"] = (h,)
            shapes[f"{p}.ln2.b"] = (h,)
    for name in _msa_names("fusion"):
        shapes[name] = (h, h)
    shapes["cls.w1"] = (2 * h, f)
    shapes["cls.b1"] = (f,)
    shapes["cls.w2"] = (f, cfg.bins)
    shapes["cls.b2"] = (cfg.bins,)
    if cfg.spherical_head:
        n = SPHERE_COARSE[0] * SPHERE_COARSE[1]
        for m in ("a", "v"):
            shapes[f"sphere.w{m}"] = (h, n)
            shapes[f"sphere.b{m}"] = (n,)
    if cfg.activity_head:
        shapes["activity.w"] = (h, 1)
        shapes["activity.b"] = (1,)
    return shapes


class ParameterStore(dict):
    """Named parameter tensors plus the config that fixed their shapes."""

    def __init__(self, cfg: ModelConfig, arrays: dict[str, np.ndarray] | None = None):
        super().__init__()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        shapes = param_shapes(cfg)
        if arrays is None:
            arrays = init_arrays(cfg)
        for name, shape in shapes.items():
            arr = np.asarray(arrays[name], dtype=dtype)
            if arr.shape != shape:
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            self[name] = Tensor(arr.copy(), requires_grad=True, name=name)

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.values()))


def init_arrays(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf in ("b", "b1", "b2", "ba", "bv"):
            arr = np.zeros(shape)
        elif leaf in ("cls", "pos"):
            arr = rng.normal(0.0, 0.02, shape)
        else:
            fan_in = shape[0]
            arr = rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape)
        out[name] = arr
    return out


def _const(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _embed(x, params: ParameterStore, mod: str, length: int) -> Tensor:
    dt = params.cfg.dtype
    x = _const(x, dt)
    if x.ndim == 2:
        x = ad.reshape(x, (1,) + x.shape)
    if x.shape[1] != length:
        raise ValueError(f"{mod} input has {x.shape[1]} steps, model expects {length}")
    b = x.shape[0]
    h = params.cfg.hidden
    tokens = ad.matmul(x, params[f"{mod}.embed"])
    cls = ad.broadcast_to(ad.reshape(params[f"{mod}.cls"], (1, 1, h)), (b, 1, h))
    return ad.add(ad.concat([cls, tokens], axis=1), params[f"{mod}.pos"])


def embed_audio(feat, params: ParameterStore) -> Tensor:
    """GCC-PHAT frames (B, L_a, Z) -> tokens (B, 1 + L_a, h)."""
    return _embed(feat, params, "audio", params.cfg.audio_len)


def embed_visual(patches, params: ParameterStore) -> Tensor:
    """Flattened patches (B, L_v, 3 r^2) -> tokens (B, 1 + L_v, h)."""
    return _embed(patches, params, "visual", params.cfg.visual_len)


def attention_weights(z: Tensor, wq: Tensor, wk: Tensor, heads: int) -> Tensor:
    b, t, h = z.shape
    dk = h // heads
    q = ad.transpose(ad.reshape(ad.matmul(z, wq), (b, t, heads, dk)), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(ad.matmul(z, wk), (b, t, heads, dk)), (0, 2, 3, 1))
    return ad.softmax(ad.scale(ad.matmul(q, k), 1.0 / math.sqrt(dk)), axis=-1)


def msa(z: Tensor, params: ParameterStore, prefix: str) -> Tensor:
    """Multi-head scaled dot-product self-attention, heads concatenated then projected."""
    heads = params.cfg.heads
    b, t, h = z.shape
    dk = h // heads
    att = attention_weights(z, params[prefix + ".wq"], params[prefix + ".wk"], heads)
    v = ad.transpose(ad.reshape(ad.matmul(z, params[prefix + ".wv"]), (b, t, heads, dk)),
                     (0, 2, 1, 3))
    ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, t, h))
    return ad.matmul(ctx, params[prefix + ".wo"])


def mlp_block(z: Tensor, params: ParameterStore, prefix: str) -> Tensor:
    hid = ad.gelu(ad.add(ad.matmul(z, params[prefix + ".w1"]), params[prefix + ".b1"]))
    return ad.add(ad.matmul(hid, params[prefix + ".w2"]), params[prefix + ".b2"])


def encoder_block(z: Tensor, params: ParameterStore, prefix: str) -> Tensor:
    """One encoder layer.

    Default (post-sublayer norm): z_hat = LN(MSA(z)) + z, out = LN(MLP(z_hat)) + z_hat.
    With ``cfg.pre_ln``: z_hat = MSA(LN(z)) + z, out = MLP(LN(z_hat)) + z_hat.
    """
    ln1 = (params[prefix + ".ln1.g"], params[prefix + ".ln1.b"])
    ln2 = (params[prefix + ".ln2.g"], params[prefix + ".ln2.b"])
    if params.cfg.pre_ln:
        zh = ad.add(msa(ad.layer_norm(z, *ln1), params, prefix + ".msa"), z)
        return ad.add(mlp_block(ad.layer_norm(zh, *ln2), params, prefix + ".mlp"), zh)
    zh = ad.add(ad.layer_norm(msa(z, params, prefix + ".msa"), *ln1), z)
    return ad.add(ad.layer_norm(mlp_block(zh, params, prefix + ".mlp"), *ln2), zh)


def encode(tokens: Tensor, params: ParameterStore, mod: str) -> Tensor:
    for d in range(params.cfg.depth):
        tokens = encoder_block(tokens, params, f"{mod}.enc{d}")
    return tokens


def encode_audio(feat, params: ParameterStore) -> Tensor:
    return encode(embed_audio(feat, params), params, "audio")


def encode_visual(patches, params: ParameterStore) -> Tensor:
    return encode(embed_visual(patches, params), params, "visual")


def classifier_logits(x: Tensor, params: ParameterStore) -> Tensor:
    hid = ad.gelu(ad.add(ad.matmul(x, params["cls.w1"]), params["cls.b1"]))
    return ad.add(ad.matmul(hid, params["cls.w2"]), params["cls.b2"])


def fused_cls(z_a: Tensor, z_v: Tensor, params: ParameterStore) -> tuple[Tensor, Tensor]:
    """Joint attention over both token sequences; returns the two CLS outputs."""
    joint = msa(ad.concat([z_a, z_v], axis=1), params, "fusion")
    la = z_a.shape[1]
    return joint[:, 0, :], joint[:, la, :]


def fuse_predict(z_a: Tensor, z_v: Tensor, params: ParameterStore) -> Tensor:
    """DOA posterior (B, 360) from encoded audio and visual sequences."""
    cls_a, cls_v = fused_cls(z_a, z_v, params)
    return ad.softmax(classifier_logits(ad.concat([cls_a, cls_v], axis=-1), params), axis=-1)


def audio_only_predict(z_a: Tensor, params: ParameterStore) -> Tensor:
    """DOA posterior (B, 360) from the audio CLS alone."""
    cls_a = z_a[:, 0, :]
    zeros = Tensor(np.zeros(cls_a.shape, dtype=cls_a.data.dtype))
    return ad.softmax(classifier_logits(ad.concat([cls_a, zeros], axis=-1), params), axis=-1)


def emd_loss(target, p_hat: Tensor, reduce: str = "sum") -> Tensor:
    """Squared difference between target and predicted DOA distributions.

    Per row the loss is sum_i (p_i - p_hat_i)^2; rows are summed
    (``reduce="sum"``) or averaged (``"mean"``).
    """
    target = _const(target, p_hat.data.dtype)
    if target.shape[-1] != p_hat.shape[-1]:
        raise ValueError(f"distribution lengths differ: {target.shape[-1]} vs {p_hat.shape[-1]}")
    total = ad.sum_all(ad.square(ad.sub(p_hat, target)))
    if reduce == "mean" and p_hat.ndim > 1:
        return ad.scale(total, 1.0 / p_hat.shape[0])
    return total


def spherical_head(cls_a: Tensor, cls_v: Tensor, params: ParameterStore) -> tuple[Tensor, Tensor]:
    """Spherical activity map from the two fused CLS vectors.

    Each CLS is projected to 45*90 values and reshaped; the stacked
    (B, 2, 45, 90) map is bilinearly upsampled to (B, 2, 90, 180). Returns
    the raw map and its channel mean (B, 90, 180) used as the score grid.
    """
    b = cls_a.shape[0]
    chans = []
    for m, c in (("a", cls_a), ("v", cls_v)):
        proj = ad.add(ad.matmul(c, params[f"sphere.w{m}"]), params[f"sphere.b{m}"])
        chans.append(ad.reshape(proj, (b, 1) + SPHERE_COARSE))
    coarse = ad.concat(chans, axis=1)
    fine = ad.upsample_bilinear(coarse, *SPHERE_FINE)
    score = ad.scale(ad.sum_axis(fine, 1), 0.5)
    return fine, score


def spherical_bce_loss(score_logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-cell binary cross-entropy on sigmoid(score)."""
    p = ad.sigmoid(score_logits)
    t = _const(target, p.data.dtype)
    eps = 1e-7
    pos = ad.mul(t, ad.log(ad.add(p, eps)))
    neg = ad.mul(ad.sub(1.0, t), ad.log(ad.add(ad.sub(1.0, p), eps)))
    total = ad.sum_all(ad.add(pos, neg))
    return ad.scale(total, -1.0 / p.data.size)


def spherical_target(points, radius: int = 2) -> np.ndarray:
    """(90, 180) grid with 1 at each (azimuth, elevation) cell and its neighbours.

    Azimuth wraps around; elevation is clipped.
    """
    from ..eval import sphere_to_cell
    grid = np.zeros(SPHERE_FINE)
    rr, cc = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    disk = rr ** 2 + cc ** 2 <= radius ** 2
    for sp in points:
        r0, c0 = sphere_to_cell(sp)
        rows = r0 + rr[disk]
        cols = (c0 + cc[disk]) % SPHERE_FINE[1]
        keep = (rows >= 0) & (rows < SPHERE_FINE[0])
        grid[rows[keep], cols[keep]] = 1.0
    return grid


def wearer_activity_predict(z_a: Tensor, params: ParameterStore) -> Tensor:
    """Probability (B,) that the wearer is talking, from the audio CLS."""
    logit = ad.add(ad.matmul(z_a[:, 0, :], params["activity.w"]), params["activity.b"])
    return ad.reshape(ad.sigmoid(logit), (z_a.shape[0],))


def bce_loss(prob: Tensor, labels) -> Tensor:
    t = _const(labels, prob.data.dtype)
    eps = 1e-7
    pos = ad.mul(t, ad.log(ad.add(prob, eps)))
    neg = ad.mul(ad.sub(1.0, t), ad.log(ad.add(ad.sub(1.0, prob), eps)))
    return ad.scale(ad.sum_all(ad.add(pos, neg)), -1.0 / prob.data.size)


def predict(params: ParameterStore, gcc, patches, in_fov, mode: str = "separate") -> np.ndarray:
    """Inference routing: posterior (B, 360) for a batch.

    ``separate`` sends in-view rows through the fused path and the rest
    through the audio-only path; ``audio_only`` ignores the frames.
    """
    gcc = np.asarray(gcc)
    in_fov = np.asarray(in_fov, dtype=bool)
    out = np.empty((len(gcc), params.cfg.bins), dtype=params.cfg.dtype)
    av = np.flatnonzero(in_fov) if mode == "separate" else np.array([], dtype=int)
    ao = np.setdiff1d(np.arange(len(gcc)), av)
    if len(ao):
        out[ao] = audio_only_predict(encode_audio(gcc[ao], params), params).data
    if len(av):
        z_a = encode_audio(gcc[av], params)
        z_v = encode_visual(patches_to_float(patches[av], params.cfg.dtype), params)
        out[av] = fuse_predict(z_a, z_v, params).data
    return out


def patches_to_float(patches, dtype) -> np.ndarray:
    patches = np.asarray(patches)
    if patches.dtype == np.uint8:
        return patches.astype(dtype) * np.asarray(1.0 / 255.0, dtype=dtype)
    return patches.astype(dtype)
