import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egodoa.model import autodiff as ad
from egodoa.model.autodiff import Tensor
from egodoa.model.checkpoint import load_checkpoint, save_checkpoint
from egodoa.model.network import (ModelConfig, ParameterStore, attention_weights, audio_only_predict,
                                  bce_loss, embed_audio, embed_visual, emd_loss, encode_audio,
                                  encode_visual, encoder_block, fuse_predict, fused_cls, msa, predict,
                                  spherical_bce_loss, spherical_head, spherical_target,
                                  wearer_activity_predict)
from egodoa.model.train import (FeatureSet, NumericalError, Optimizer, TrainConfig, batch_loss, fit,
                                load_params, partition, train_step_separate)
from egodoa.features import gaussian_targets
from egodoa.geometry import SpherePoint

from gradcheck import TOL, check_tensors

SMALL = dict(depth=1, heads=2, hidden=16, ff=8, audio_len=2, audio_dim=5, visual_len=2, visual_dim=6,
             dtype="float64")


def small_params(seed=0, **kw):
    return ParameterStore(ModelConfig(**{**SMALL, "seed": seed, **kw}))


def small_inputs(rng, b=2):
    return rng.standard_normal((b, 2, 5)), rng.standard_normal((b, 2, 6))


def proj_sum(t: Tensor, seed=7) -> Tensor:
    return ad.sum_all(ad.mul(t, Tensor(np.random.default_rng(seed).standard_normal(t.shape))))


def assert_grads(loss_fn, params, names=None):
    names = names or list(params)
    errs = check_tensors(loss_fn, {n: params[n] for n in names})
    bad = {k: v for k, v in errs.items() if not v < TOL}
    assert not bad, bad


class TestEmbedding:
    def test_token_count(self):
        p = small_params()
        a, v = small_inputs(np.random.default_rng(0), b=3)
        assert embed_audio(a, p).shape == (3, 3, 16)
        assert embed_visual(v, p).shape == (3, 3, 16)

    def test_paper_visual_length(self):
        p = ParameterStore(ModelConfig(depth=1, heads=2, hidden=8, ff=8, dtype="float64"))
        assert embed_visual(np.zeros((1, 196, 768)), p).shape == (1, 197, 8)

    def test_zero_params_give_position_encoding(self):
        p = small_params()
        for name, t in p.items():
            if not name.endswith(".pos"):
                t.data = np.zeros_like(t.data)
        a, v = small_inputs(np.random.default_rng(1))
        np.testing.assert_array_equal(embed_audio(np.zeros_like(a), p).data[0], p["audio.pos"].data)
        np.testing.assert_array_equal(embed_visual(np.zeros_like(v), p).data[1], p["visual.pos"].data)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            embed_audio(np.zeros((1, 3, 5)), small_params())

    def test_gradients(self):
        p = small_params()
        a, v = small_inputs(np.random.default_rng(2))
        assert_grads(lambda: proj_sum(embed_audio(a, p)), p, ["audio.embed", "audio.cls", "audio.pos"])
        assert_grads(lambda: proj_sum(embed_visual(v, p)), p, ["visual.embed", "visual.cls", "visual.pos"])


def naive_msa(z, wq, wk, wv, wo, heads):
    t, h = z.shape
    dk = h // heads
    outs = []
    for i in range(heads):
        sl = slice(i * dk, (i + 1) * dk)
        q, k, v = z @ wq[:, sl], z @ wk[:, sl], z @ wv[:, sl]
        att = np.zeros((t, t))
        for r in range(t):
            s = np.array([q[r] @ k[c] / math.sqrt(dk) for c in range(t)])
            e = np.exp(s - s.max())
            att[r] = e / e.sum()
        outs.append(att @ v)
    return np.concatenate(outs, axis=1) @ wo


class TestAttention:
    def test_matches_naive_loop(self):
        p = small_params(3)
        z = np.random.default_rng(4).standard_normal((1, 5, 16))
        got = msa(Tensor(z), p, "audio.enc0.msa").data[0]
        w = [p[f"audio.enc0.msa.{k}"].data for k in ("wq", "wk", "wv", "wo")]
        np.testing.assert_allclose(got, naive_msa(z[0], *w, heads=2), atol=1e-10, rtol=0)

    def test_single_token(self):
        p = small_params(3)
        z = np.random.default_rng(5).standard_normal((1, 1, 16))
        att = attention_weights(Tensor(z), p["audio.enc0.msa.wq"], p["audio.enc0.msa.wk"], 2).data
        assert np.all(att == 1.0)
        expected = z[0] @ p["audio.enc0.msa.wv"].data @ p["audio.enc0.msa.wo"].data
        np.testing.assert_allclose(msa(Tensor(z), p, "audio.enc0.msa").data[0], expected, atol=1e-12)

    def test_identical_tokens(self):
        p = small_params(3)
        z = np.tile(np.random.default_rng(6).standard_normal((1, 1, 16)), (1, 4, 1))
        out = msa(Tensor(z), p, "audio.enc0.msa").data[0]
        np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-12)

    def test_rows_stochastic(self):
        p = small_params(3)
        z = np.random.default_rng(7).standard_normal((3, 6, 16)) * 5
        att = attention_weights(Tensor(z), p["audio.enc0.msa.wq"], p["audio.enc0.msa.wk"], 2).data
        np.testing.assert_allclose(att.sum(axis=-1), 1, atol=1e-6)

    @pytest.mark.parametrize("pre_ln", [False, True])
    def test_block_permutation_equivariance(self, pre_ln):
        p = small_params(8, pre_ln=pre_ln)
        z = np.random.default_rng(9).standard_normal((1, 5, 16))
        perm = np.array([0, 3, 1, 4, 2])  # CLS stays first
        out = encoder_block(Tensor(z), p, "audio.enc0").data
        out_perm = encoder_block(Tensor(z[:, perm]), p, "audio.enc0").data
        np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-12)

    @pytest.mark.parametrize("pre_ln", [False, True])
    def test_block_gradients(self, pre_ln):
        p = small_params(10, pre_ln=pre_ln)
        z = Tensor(np.random.default_rng(11).standard_normal((2, 3, 16)), requires_grad=True)
        names = [n for n in p if n.startswith("audio.enc0")]
        assert_grads(lambda: proj_sum(encoder_block(z, p, "audio.enc0")), p, names)
        errs = check_tensors(lambda: proj_sum(encoder_block(z, p, "audio.enc0")), {"z": z})
        assert errs["z"] < TOL

    def test_msa_gradients(self):
        p = small_params(12)
        z = np.random.default_rng(13).standard_normal((2, 3, 16))
        assert_grads(lambda: proj_sum(msa(Tensor(z), p, "fusion")), p,
                     ["fusion.wq", "fusion.wk", "fusion.wv", "fusion.wo"])


class TestPrediction:
    def test_simplex_and_deterministic(self):
        p = small_params(14)
        a, v = small_inputs(np.random.default_rng(15), b=4)
        out1 = fuse_predict(encode_audio(a * 1e3, p), encode_visual(v, p), p).data
        out2 = fuse_predict(encode_audio(a * 1e3, p), encode_visual(v, p), p).data
        assert np.all(out1 >= 0)
        np.testing.assert_allclose(out1.sum(axis=1), 1, atol=1e-6)
        assert np.array_equal(out1, out2)

    def test_audio_only_ignores_visual(self):
        p = small_params(16)
        a, v = small_inputs(np.random.default_rng(17), b=3)
        x = predict(p, a, v, np.zeros(3, bool))
        y = predict(p, a, v * 100 + 3, np.zeros(3, bool))
        assert np.array_equal(x, y)
        np.testing.assert_allclose(x.sum(axis=1), 1, atol=1e-6)

    def test_fused_end_to_end_gradient(self):
        p = small_params(18)
        a, v = small_inputs(np.random.default_rng(19))
        tgt = gaussian_targets([30, 200])
        assert_grads(lambda: emd_loss(tgt, fuse_predict(encode_audio(a, p), encode_visual(v, p), p)), p)

    def test_audio_only_gradient(self):
        p = small_params(20)
        a, _ = small_inputs(np.random.default_rng(21))
        tgt = gaussian_targets([100, 300])
        names = [n for n in p if not n.startswith(("visual", "fusion"))]
        assert_grads(lambda: emd_loss(tgt, audio_only_predict(encode_audio(a, p), p)), p, names)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 1e4))
    def test_simplex_any_scale(self, seed, scale):
        p = small_params(1)
        a, v = small_inputs(np.random.default_rng(seed), b=2)
        out = predict(p, a * scale, v * scale, np.array([True, False]))
        assert np.all(np.isfinite(out)) and np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1, atol=1e-6)


class TestEmd:
    def test_identity_zero(self):
        t = gaussian_targets([5])
        assert float(emd_loss(t, Tensor(t)).data) == 0

    def test_one_hot(self):
        a, b = np.zeros(360), np.zeros(360)
        a[3], b[7] = 1, 1
        assert float(emd_loss(a, Tensor(b)).data) == 2

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            emd_loss(np.zeros(360), Tensor(np.zeros(359)))

    def test_gradient_against_fd(self):
        rng = np.random.default_rng(22)
        for _ in range(5):
            p = rng.dirichlet(np.ones(360))
            logits = Tensor(rng.standard_normal(360), requires_grad=True)
            errs = check_tensors(lambda: emd_loss(p, ad.softmax(logits)), {"l": logits})
            assert errs["l"] < 1e-4
            q = Tensor(rng.dirichlet(np.ones(360)), requires_grad=True)
            emd_loss(p, q).backward()
            np.testing.assert_allclose(q.grad, 2 * (q.data - p))


def make_batch(rng, flags):
    n = len(flags)
    return {"gcc": rng.standard_normal((n, 2, 5)), "patches": rng.standard_normal((n, 2, 6)),
            "target": gaussian_targets(rng.integers(0, 360, n)), "in_fov": np.asarray(flags, bool)}


class TestSeparateTraining:
    def test_partition_random(self):
        rng = np.random.default_rng(23)
        for _ in range(100):
            flags = rng.random(rng.integers(1, 40)) < 0.5
            av, ao = partition(flags)
            assert not set(av) & set(ao)
            assert sorted(np.concatenate([av, ao])) == list(range(len(flags)))
            assert np.all(flags[av]) and not np.any(flags[ao])

    def test_all_out_of_view_no_visual_gradient(self):
        p = small_params(24)
        batch = make_batch(np.random.default_rng(25), [False] * 5)
        p.zero_grad()
        loss, parts = batch_loss(batch, p)
        loss.backward()
        assert parts["n_av"] == 0
        for name, t in p.items():
            if name.startswith(("visual", "fusion")):
                assert t.grad is None or not np.any(t.grad), name

    def test_all_in_view_matches_fused_only(self):
        p = small_params(26)
        batch = make_batch(np.random.default_rng(27), [True] * 6)
        loss, _ = batch_loss(batch, p)
        ref = emd_loss(batch["target"], fuse_predict(encode_audio(batch["gcc"], p),
                                                     encode_visual(batch["patches"], p), p))
        assert float(loss.data) == float(ad.scale(ref, 1.0 / 6).data)

    def test_mixed_batch_sums_branches(self):
        p = small_params(28)
        batch = make_batch(np.random.default_rng(29), [True, False, True, False, False])
        loss, parts = batch_loss(batch, p)
        assert parts["n_av"] + parts["n_ao"] == 5
        assert float(loss.data) == pytest.approx((parts["loss_av"] + parts["loss_ao"]) / 5, rel=1e-12)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            batch_loss(make_batch(np.random.default_rng(0), []), small_params())

    def test_step_changes_parameters(self):
        p = small_params(30)
        before = {k: v.data.copy() for k, v in p.items()}
        train_step_separate(make_batch(np.random.default_rng(31), [True, False]), p, Optimizer(p, "sgd", 0.1))
        assert any(not np.array_equal(before[k], p[k].data) for k in p)

    def test_non_finite_loss(self):
        p = small_params(32)
        p["cls.b2"].data[:] = np.nan
        with pytest.raises(NumericalError):
            train_step_separate(make_batch(np.random.default_rng(0), [False]), p, Optimizer(p))


class TestSphericalHead:
    def test_shapes(self):
        p = small_params(33, spherical_head=True)
        cls_a, cls_v = (Tensor(np.random.default_rng(34).standard_normal((2, 16))) for _ in range(2))
        fine, score = spherical_head(cls_a, cls_v, p)
        assert fine.shape == (2, 2, 90, 180) and score.shape == (2, 90, 180)

    def test_constant_preserved(self):
        p = small_params(35, spherical_head=True)
        for m in ("a", "v"):
            p[f"sphere.w{m}"].data[:] = 0
            p[f"sphere.b{m}"].data[:] = 1.25
        fine, score = spherical_head(Tensor(np.ones((1, 16))), Tensor(np.ones((1, 16))), p)
        np.testing.assert_allclose(fine.data, 1.25, atol=1e-12)

    def test_upsample_matches_direct_bilinear(self):
        rng = np.random.default_rng(36)
        grid = rng.standard_normal((45, 90))
        up = ad.upsample_bilinear(Tensor(grid[None]), 90, 180).data[0]

        def direct(i, j):
            # half-pixel source coordinates clamped to the grid
            y = min(max((i + 0.5) * 45 / 90 - 0.5, 0), 44)
            x = min(max((j + 0.5) * 90 / 180 - 0.5, 0), 89)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, 44), min(x0 + 1, 89)
            fy, fx = y - y0, x - x0
            return ((1 - fy) * (1 - fx) * grid[y0, x0] + (1 - fy) * fx * grid[y0, x1]
                    + fy * (1 - fx) * grid[y1, x0] + fy * fx * grid[y1, x1])
        ref = np.array([[direct(i, j) for j in range(180)] for i in range(90)])
        np.testing.assert_allclose(up, ref, atol=1e-6)

    def test_head_gradient(self):
        p = small_params(37, spherical_head=True)
        a, v = small_inputs(np.random.default_rng(38))
        tgt = np.stack([spherical_target([SpherePoint(40, 10)]), spherical_target([SpherePoint(300, -20)])])

        def loss():
            cls_a, cls_v = fused_cls(encode_audio(a, p), encode_visual(v, p), p)
            return spherical_bce_loss(spherical_head(cls_a, cls_v, p)[1], tgt)
        assert_grads(loss, p, ["sphere.wa", "sphere.ba", "sphere.wv", "sphere.bv", "fusion.wq", "audio.embed"])

    def test_target_dilation(self):
        t = spherical_target([SpherePoint(0, 0)], radius=2)
        assert t.sum() == 13  # 5x5 disc of radius 2
        assert t[:, 179].any()  # wraps in azimuth


class TestActivityHead:
    def test_range_and_half(self):
        p = small_params(39, activity_head=True)
        a, _ = small_inputs(np.random.default_rng(40), b=5)
        prob = wearer_activity_predict(encode_audio(a * 50, p), p).data
        assert np.all((prob >= 0) & (prob <= 1))
        p["activity.w"].data[:] = 0
        p["activity.b"].data[:] = 0
        assert np.all(wearer_activity_predict(encode_audio(a, p), p).data == 0.5)

    def test_gradient(self):
        p = small_params(41, activity_head=True)
        a, _ = small_inputs(np.random.default_rng(42), b=4)
        labels = np.array([1, 0, 1, 1])
        assert_grads(lambda: bce_loss(wearer_activity_predict(encode_audio(a, p), p), labels), p,
                     ["activity.w", "activity.b", "audio.enc0.mlp.w1", "audio.cls"])


def toy_set(n=24, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureSet(rng.standard_normal((n, 2, 5)).astype(np.float32),
                      rng.integers(0, 256, (n, 2, 6)).astype(np.uint8),
                      rng.integers(0, 360, n), rng.random(n) < 0.5)


class TestCheckpointAndDeterminism:
    def test_roundtrip_bit_identical(self, tmp_path):
        p = ParameterStore(ModelConfig(**{**SMALL, "dtype": "float32", "seed": 43}))
        data = toy_set()
        save_checkpoint(tmp_path / "m.ckpt", p.cfg.to_dict(), p.arrays(), {"note": "x"})
        q = load_params(tmp_path / "m.ckpt")
        assert q.cfg == p.cfg
        a = predict(p, data.gcc, data.patches, data.in_fov)
        b = predict(q, data.gcc, data.patches, data.in_fov)
        assert a.dtype == b.dtype and np.array_equal(a, b)
        _, _, meta = load_checkpoint(tmp_path / "m.ckpt")
        assert meta == {"note": "x"}

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.ckpt")

    def _fit(self, out, epochs=3, resume=None, optimizer="adam"):
        p = ParameterStore(ModelConfig(**{**SMALL, "dtype": "float32", "seed": 44}))
        cfg = TrainConfig(epochs=epochs, batch_size=5, lr=1e-2, optimizer=optimizer, patience=100, seed=5)
        res = fit(p, toy_set(), toy_set(8, 1), cfg, out, resume=resume)
        return p, res

    @pytest.mark.parametrize("optimizer", ["sgd", "momentum", "adam"])
    def test_seeded_determinism(self, tmp_path, optimizer):
        p1, _ = self._fit(tmp_path / "a", optimizer=optimizer)
        p2, _ = self._fit(tmp_path / "b", optimizer=optimizer)
        for k in p1:
            assert np.array_equal(p1[k].data, p2[k].data)
        assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        full, res_full = self._fit(tmp_path / "full", epochs=4)
        self._fit(tmp_path / "part", epochs=2)
        resumed, res_resumed = self._fit(tmp_path / "part", epochs=4, resume=tmp_path / "part" / "last.ckpt")
        assert res_full["history"] == res_resumed["history"]
        for k in full:
            assert np.array_equal(full[k].data, resumed[k].data)

    def test_log_rows_per_epoch(self, tmp_path):
        self._fit(tmp_path / "log", epochs=3)
        lines = (tmp_path / "log" / "train_log.csv").read_text().splitlines()
        assert lines[0] == "epoch,split,loss,accuracy,ae"
        assert sum(",train," in ln for ln in lines) == 3 and sum(",val," in ln for ln in lines) == 3
        assert sorted(p.name for p in (tmp_path / "log").glob("epoch_*.ckpt")) == [
            "epoch_001.ckpt", "epoch_002.ckpt", "epoch_003.ckpt"]

    def test_early_stopping(self, tmp_path):
        p = ParameterStore(ModelConfig(**{**SMALL, "dtype": "float32"}))
        cfg = TrainConfig(epochs=50, batch_size=8, lr=1e-9, optimizer="sgd", patience=2)
        res = fit(p, toy_set(), toy_set(8, 1), cfg, tmp_path)
        assert sum(h["split"] == "train" for h in res["history"]) < 50
