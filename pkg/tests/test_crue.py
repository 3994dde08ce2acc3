import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evact import autodiff as ad
from evact.autodiff import AttentionBlock, Mlp2, ParamStore, gradcheck
from evact.crue import (HAND_PROMPT, CrueModel, GaussianEmbedding, LossConfig, ModelConfig,
                        ToyEventEncoder, ToyTextEncoder, contrastive_loss, cr_fusion, cr_fusion_all,
                        encode_events, encode_text, final_loss, mean_pool, reg_loss, reparam_sample,
                        smooth_l1_loss, uncertainty_estimate)
from evact.errors import DegenerateStd, ShapeError, ValidationError, VocabError
from evact.representation import FrameStack

SMALL = ModelConfig(frame_hw=(8, 8), downsample=4, n_time=2, enc_hidden=6, d_event=6, d_text=6,
                    proj_hidden=5, d_joint=4, n_prompt=2)


def frames(t, h=8, w=8, seed=0):
    rng = np.random.default_rng(seed)
    f = rng.integers(0, 5, (t, h, w, 2)).astype(np.int64)
    return FrameStack(f, [(i, i + 1) for i in range(t)], "AFE",
                      [(10 * i, 10 * i + 9) for i in range(t)], (0, 10 * t - 1))


def np_softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)


def np_attention(blk, x):
    q = x @ blk.wq.data + blk.bq.data
    k = x @ blk.wk.data + blk.bk.data
    v = x @ blk.wv.data + blk.bv.data
    logits = q @ np.swapaxes(k, -1, -2) / math.sqrt(x.shape[-1])
    w = np.exp(logits - logits.max(-1, keepdims=True))
    w /= w.sum(-1, keepdims=True)
    return (w @ v) @ blk.wo.data + blk.bo.data


def np_mlp(m, x):
    return np.maximum(x @ m.w1.data + m.b1.data, 0) @ m.w2.data + m.b2.data


def brute_contrastive(f1, f2, tau):
    b = len(f1)
    n1 = [r / np.linalg.norm(r) for r in f1]
    n2 = [r / np.linalg.norm(r) for r in f2]
    s = [[float(n1[i] @ n2[j]) / tau for j in range(b)] for i in range(b)]
    fwd = -sum(s[i][i] - math.log(sum(math.exp(s[i][j]) for j in range(b))) for i in range(b)) / b
    bwd = -sum(s[i][i] - math.log(sum(math.exp(s[j][i]) for j in range(b))) for i in range(b)) / b
    return (fwd + bwd) / 2


def randomize_biases(store):
    for name in store.names():
        if ".b" in name:
            store[name].data = store.rng.normal(size=store[name].shape)


class TestEncoders:
    def encoder(self, seed=0):
        store = ParamStore(seed)
        return ToyEventEncoder(store, "enc", (8, 8), dim=6, hidden=5, downsample=4, n_time=2)

    def test_single_frame_shape(self):
        assert encode_events(self.encoder(), frames(1)).shape == (1, 6)

    def test_duplicate_frames_duplicate_rows(self):
        fs = frames(1)
        dup = FrameStack(np.concatenate([fs.frames, fs.frames]), [(0, 1), (1, 2)], "AFE",
                         [(5, 5), (5, 5)], (0, 10))
        out = encode_events(self.encoder(), dup).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_empty_stack(self):
        empty = FrameStack(np.zeros((0, 8, 8, 2)), [], "AFE", [], (0, 0))
        with pytest.raises(ValidationError):
            encode_events(self.encoder(), empty)

    def test_wrong_geometry(self):
        with pytest.raises(ShapeError):
            self.encoder().features(frames(2, 6, 8))

    def test_against_reference_forward(self):
        enc = self.encoder(3)
        fs = frames(3, seed=4)
        # pool 4x4 blocks by explicit loops, scale by the frame peak, append time features
        rows = []
        for i, fr in enumerate(fs.frames):
            cells = [fr[by * 4:(by + 1) * 4, bx * 4:(bx + 1) * 4, c].sum()
                     for by in range(2) for bx in range(2) for c in range(2)]
            peak = max(cells) or 1
            centre = (fs.time_ranges[i][0] + fs.time_ranges[i][1]) / 2
            pos = (centre - fs.span[0]) / (fs.span[1] - fs.span[0])
            rows.append([c / peak for c in cells] + [math.sin(math.pi * pos), math.cos(math.pi * pos)])
        np.testing.assert_allclose(enc.features(fs), rows, atol=1e-15)
        np.testing.assert_allclose(encode_events(enc, fs).data, np_mlp(enc.mlp, np.array(rows)), atol=1e-13)

    def text(self, seed=0):
        return ToyTextEncoder(ParamStore(seed), "txt", ["walk", "run", "fast"], dim=5, n_prompt=3)

    def test_equal_paths_average_to_either(self):
        enc = self.text()
        v = np.arange(5.0)
        enc.embed.data[:] = v
        enc.prompt.data[:] = v
        hand, learn = enc.paths([["walk", "fast"]])
        np.testing.assert_allclose(hand.data, learn.data, atol=1e-14)
        np.testing.assert_allclose(encode_text(enc, ["walk", "fast"]).data, v, atol=1e-14)

    def test_zero_embeddings(self):
        enc = self.text()
        enc.embed.data[:] = 0
        enc.prompt.data[:] = 0
        assert not encode_text(enc, ["run"]).data.any()

    def test_unknown_token(self):
        with pytest.raises(VocabError):
            encode_text(self.text(), ["swim"])
        with pytest.raises(VocabError):
            encode_text(self.text(), [999])

    def test_empty_caption(self):
        with pytest.raises(ValidationError):
            encode_text(self.text(), [])

    def test_against_reference_pooling(self):
        enc = self.text(2)
        emb = {w: enc.embed.data[i] for w, i in enc.vocab.items()}
        hand = [emb[w] for w in (*HAND_PROMPT, "run", "fast", ".")]
        learn = list(enc.prompt.data) + [emb["run"], emb["fast"]]
        expected = (np.mean(hand, axis=0) + np.mean(learn, axis=0)) / 2
        np.testing.assert_allclose(encode_text(enc, "run fast").data, expected, atol=1e-14)


class TestFusion:
    def setup(self, d_in=5, d=4, seed=0):
        store = ParamStore(seed)
        pe, pt = Mlp2(store, "pe", d_in, 6, d), Mlp2(store, "pt", d_in, 6, d)
        randomize_biases(store)
        return pe, pt

    def test_single_frame(self):
        pe, pt = self.setup()
        fe, ft = np.random.default_rng(1).normal(size=(1, 5)), np.ones(5)
        fu = cr_fusion(fe, ft, pe, pt)
        np.testing.assert_array_equal(fu.weights.data, [1.0])
        np.testing.assert_allclose(fu.fused.data, pe(fe).data[0], atol=1e-15)

    def test_identical_frames(self):
        pe, pt = self.setup()
        fe = np.tile(np.random.default_rng(1).normal(size=(1, 5)), (2, 1))
        np.testing.assert_allclose(cr_fusion(fe, np.ones(5), pe, pt).weights.data, [0.5, 0.5], atol=1e-15)

    def test_against_brute_force(self):
        pe, pt = self.setup(seed=3)
        rng = np.random.default_rng(4)
        fe, ft = rng.normal(size=(3, 5)), rng.normal(size=5)
        ep, tp = np_mlp(pe, fe), np_mlp(pt, ft)
        logits = [sum(ep[i, c] * tp[c] for c in range(4)) for i in range(3)]
        z = [math.exp(l - max(logits)) for l in logits]
        w = [x / sum(z) for x in z]
        fused = [sum(w[i] * ep[i, c] for i in range(3)) for c in range(4)]
        fu = cr_fusion(fe, ft, pe, pt)
        np.testing.assert_allclose(fu.weights.data, w, atol=1e-14)
        np.testing.assert_allclose(fu.fused.data, fused, atol=1e-14)

    def test_mismatched_projection(self):
        store = ParamStore(0)
        with pytest.raises(ShapeError):
            cr_fusion(np.ones((2, 5)), np.ones(5), Mlp2(store, "a", 5, 3, 4), Mlp2(store, "b", 5, 3, 3))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**32))
    def test_weights_simplex_and_permutation_equivariance(self, t, seed):
        pe, pt = self.setup(seed=seed % 100)
        rng = np.random.default_rng(seed)
        fe, ft = rng.normal(size=(t, 5)) * 3, rng.normal(size=5)
        a = cr_fusion(fe, ft, pe, pt)
        w = a.weights.data
        assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12
        perm = rng.permutation(t)
        b = cr_fusion(fe[perm], ft, pe, pt)
        np.testing.assert_allclose(b.weights.data, w[perm], atol=1e-14)
        np.testing.assert_allclose(b.fused.data, a.fused.data, atol=1e-12)

    def test_padding_mask_ignores_padded_frames(self):
        pe, pt = self.setup()
        rng = np.random.default_rng(5)
        fe, ft = rng.normal(size=(3, 5)), rng.normal(size=5)
        padded = np.concatenate([fe, rng.normal(size=(2, 5))])
        mask = np.array([1, 1, 1, 0, 0], bool)
        a, b = cr_fusion(fe, ft, pe, pt), cr_fusion(padded, ft, pe, pt, mask)
        np.testing.assert_allclose(b.fused.data, a.fused.data, atol=1e-14)
        assert np.all(b.weights.data[3:] == 0)
        np.testing.assert_allclose(mean_pool(pe(padded), mask).data, pe(fe).data.mean(0), atol=1e-14)

    def test_all_pairs_matches_single_fusions(self):
        pe, pt = self.setup()
        rng = np.random.default_rng(6)
        fe, fts = rng.normal(size=(2, 4, 5)), rng.normal(size=(3, 5))
        mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], bool)
        fused, w = cr_fusion_all(pe(fe), pt(fts), mask)
        for b in range(2):
            for k in range(3):
                one = cr_fusion(fe[b], fts[k], pe, pt, mask[b])
                np.testing.assert_allclose(fused.data[b, k], one.fused.data, atol=1e-13)
                np.testing.assert_allclose(w.data[b, k], one.weights.data, atol=1e-14)


class TestUncertainty:
    def blocks(self, seed=0):
        store = ParamStore(seed)
        a1, a2 = AttentionBlock(store, "att1", 2), AttentionBlock(store, "att2", 2)
        randomize_biases(store)
        return store, a1, a2

    def test_zeroed_sigma_projection(self):
        _, a1, a2 = self.blocks()
        a2.wo.data[:] = 0
        a2.bo.data[:] = 0
        g = uncertainty_estimate(np.random.default_rng(0).normal(size=8), a1, a2)
        np.testing.assert_allclose(g.sigma.data, np.full(8, math.log(2)), atol=1e-15)

    def test_identity_projection_single_token(self):
        _, a1, a2 = self.blocks()
        a1.wv.data[:] = np.eye(2)
        a1.wo.data[:] = np.eye(2)
        a1.bv.data[:] = 0
        a1.bo.data[:] = 0
        # D = 2: each half is one channel, so one token carrying the value twice
        g = uncertainty_estimate(np.array([0.7, -1.2]), a1, a2)
        np.testing.assert_allclose(g.mu.data, [0.7, 0.7], atol=1e-15)

    def test_odd_dimension(self):
        _, a1, a2 = self.blocks()
        with pytest.raises(ShapeError):
            uncertainty_estimate(np.ones(5), a1, a2)

    def test_against_reference(self):
        _, a1, a2 = self.blocks(4)
        f = np.random.default_rng(2).normal(size=(3, 8))
        tokens = lambda h: np.stack([h, h], axis=-1)
        mu = np_attention(a1, tokens(f[:, :4])).reshape(3, 8)
        sigma = np_softplus(np_attention(a2, tokens(f[:, 4:])).reshape(3, 8))
        g = uncertainty_estimate(f, a1, a2)
        np.testing.assert_allclose(g.mu.data, mu, atol=1e-13)
        np.testing.assert_allclose(g.sigma.data, sigma, atol=1e-13)
        assert np.all(g.sigma.data >= 0)


class TestSampling:
    def gaussian(self, sigma):
        return GaussianEmbedding(ad.as_tensor(np.array([0.5, -1.0, 2.0, 0.0])), ad.as_tensor(np.asarray(sigma, float)))

    def test_zero_sigma_collapses(self):
        s = reparam_sample(self.gaussian(np.zeros(4)), 7, np.random.default_rng(0))
        assert len(s) == 7
        assert np.all(s.samples.data == np.array([0.5, -1.0, 2.0, 0.0]))

    def test_deterministic(self):
        g = self.gaussian([1.0, 2.0, 0.5, 0.1])
        a = reparam_sample(g, 5, np.random.default_rng(3)).samples.data
        b = reparam_sample(g, 5, np.random.default_rng(3)).samples.data
        np.testing.assert_array_equal(a, b)

    def test_needs_one_sample(self):
        with pytest.raises(ValidationError):
            reparam_sample(self.gaussian(np.ones(4)), 0, np.random.default_rng(0))

    def test_statistics(self):
        sigma = np.array([1.0, 2.0, 0.5, 0.1])
        g = self.gaussian(sigma)
        n = 10**5
        x = reparam_sample(g, n, np.random.default_rng(11)).samples.data
        assert np.all(np.abs(x.mean(0) - g.mu.data) <= 3 * sigma / math.sqrt(n))
        assert np.all(np.abs(x.std(0) - sigma) <= 0.05 * sigma)

    def test_gradient_reaches_mu_and_sigma(self):
        store = ParamStore(0)
        mu, sigma = store.add("mu", np.zeros(3)), store.add("sigma", np.ones(3))
        s = reparam_sample(GaussianEmbedding(mu, sigma), 4, np.random.default_rng(1))
        grads = store.backward(ad.tsum(s.samples))
        np.testing.assert_allclose(grads["mu"], 4.0)
        np.testing.assert_allclose(grads["sigma"], s.delta.sum(0), atol=1e-14)


class TestLosses:
    @pytest.mark.parametrize("d, expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
    def test_smooth_l1_branches(self, d, expected):
        target = np.array([0.3, -0.1, 1.0])
        assert smooth_l1_loss(target + d, target).item() == pytest.approx(expected, abs=1e-15)

    def test_reg_examples(self):
        z = GaussianEmbedding(ad.as_tensor(np.zeros(2)), ad.as_tensor(np.zeros(2)))
        assert reg_loss(z, z).item() == 0.0
        e = GaussianEmbedding(ad.as_tensor(np.zeros(2)), ad.as_tensor(np.ones(2)))
        t = GaussianEmbedding(ad.as_tensor(np.zeros(1)), ad.as_tensor(np.zeros(1)))
        assert reg_loss(e, t).item() == 2.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.one_of(st.just(0.0), st.floats(1e-6, 10)), min_size=1, max_size=6),
           st.lists(st.one_of(st.just(0.0), st.floats(1e-6, 10)), min_size=1, max_size=6))
    def test_reg_brute_force(self, se, stt):
        g = lambda s: GaussianEmbedding(ad.as_tensor(np.zeros(len(s))), ad.as_tensor(np.array(s)))
        r = reg_loss(g(se), g(stt)).item()
        assert r == pytest.approx(sum(x * x for x in se) + sum(x * x for x in stt), rel=1e-12)
        assert r >= 0 and (r == 0) == (not any(se) and not any(stt))

    def test_contrastive_single_pair(self):
        assert contrastive_loss(np.array([[1.0, 2.0]]), np.array([[-3.0, 0.5]]), 0.1).item() == 0.0

    def test_contrastive_orthonormal(self):
        e = np.eye(2)
        assert contrastive_loss(e, e, 1.0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-9)

    def test_contrastive_brute_force(self):
        rng = np.random.default_rng(0)
        f1, f2 = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        assert contrastive_loss(f1, f2, 0.3).item() == pytest.approx(brute_contrastive(f1, f2, 0.3), abs=1e-12)

    def test_contrastive_tau(self):
        with pytest.raises(ValidationError):
            contrastive_loss(np.eye(2), np.eye(2), 0.0)
        with pytest.raises(ValidationError):
            LossConfig(tau=-1)

    @pytest.mark.parametrize("b", [2, 3, 4])
    def test_identity_pairing_is_best(self, b):
        rng = np.random.default_rng(b)
        for _ in range(20):
            f = rng.normal(size=(b, 5))
            ident = contrastive_loss(f, f, 0.5).item()
            for perm in itertools.permutations(range(b)):
                assert ident <= contrastive_loss(f, f[list(perm)], 0.5).item() + 1e-12

    def fixture(self, seed=0, theta=1.0, n=3):
        store = ParamStore(seed)
        a1, a2 = AttentionBlock(store, "att1", 2), AttentionBlock(store, "att2", 2)
        randomize_biases(store)
        rng = np.random.default_rng(seed + 1)
        fe = store.add("fe", rng.normal(size=(3, 4)))
        ft = store.add("ft", rng.normal(size=(3, 4)))
        ge, gt = uncertainty_estimate(fe, a1, a2), uncertainty_estimate(ft, a1, a2)
        cfg = LossConfig(tau=0.2, theta=theta, n_samples=n)
        se = reparam_sample(ge, n, np.random.default_rng(7), "event")
        st_ = reparam_sample(gt, n, np.random.default_rng(8), "text")
        return store, (a1, a2, fe, ft, ge, gt, se, st_, cfg)

    def test_final_is_sum_of_terms(self):
        _, (a1, a2, fe, ft, ge, gt, se, st_, cfg) = self.fixture()
        total, parts = final_loss(se, st_, fe, ft, ge, gt, cfg)
        assert total.item() == pytest.approx(parts["contrastive"] + parts["smooth_l1"] + parts["reg"], abs=1e-12)
        assert parts["final"] == total.item()

    def test_final_against_reference(self):
        _, (a1, a2, fe, ft, ge, gt, se, st_, cfg) = self.fixture(2)
        total, _ = final_loss(se, st_, fe, ft, ge, gt, cfg)
        xe, xt = se.samples.data, st_.samples.data
        con = np.mean([brute_contrastive(xe[i], xt[j], cfg.tau) for i in range(3) for j in range(3)])
        norm = lambda v: (v - v.mean(-1, keepdims=True)) / v.std(-1, keepdims=True)
        hub = lambda d: np.where(np.abs(d) < 1, 0.5 * d * d, np.abs(d) - 0.5)
        sl1 = (hub(xe - norm(fe.data)).mean() + hub(xt - norm(ft.data)).mean()) / 2
        reg = np.mean((ge.sigma.data ** 2).sum(-1) + (gt.sigma.data ** 2).sum(-1))
        assert total.item() == pytest.approx(con + sl1 + reg, abs=1e-12)

    def test_theta_zero_ignores_sigma_at_zero_delta(self):
        _, (a1, a2, fe, ft, ge, gt, se, st_, _) = self.fixture()
        cfg = LossConfig(tau=0.2, theta=0.0, n_samples=3)

        def at_zero_delta(g):
            s = reparam_sample(g, 3, np.random.default_rng(0))
            s.samples = g.mu + np.zeros_like(s.delta) * g.sigma
            return s

        base, _ = final_loss(at_zero_delta(ge), at_zero_delta(gt), fe, ft, ge, gt, cfg)
        ge2 = GaussianEmbedding(ge.mu, ge.sigma * 5.0 + 1.0)
        gt2 = GaussianEmbedding(gt.mu, gt.sigma * 0.1)
        moved, _ = final_loss(at_zero_delta(ge2), at_zero_delta(gt2), fe, ft, ge2, gt2, cfg)
        assert moved.item() == base.item()

    def test_constant_source_rejected(self):
        _, (a1, a2, fe, ft, ge, gt, se, st_, cfg) = self.fixture()
        with pytest.raises(DegenerateStd):
            final_loss(se, st_, np.ones((3, 4)), ft, ge, gt, cfg)

    def test_sigma_receives_gradient(self):
        store, (a1, a2, fe, ft, ge, gt, se, st_, cfg) = self.fixture(5)
        total, _ = final_loss(se, st_, fe, ft, ge, gt, cfg)
        grads = store.backward(total)
        assert np.all(ge.sigma.data > 0)
        assert any(np.abs(grads[n]).max() > 0 for n in store.names() if n.startswith("att2"))

    def test_sigma_collapse_makes_sl1_deterministic(self):
        f = np.array([1.0, 3.0, -2.0, 0.5])
        g = GaussianEmbedding(ad.mean_std_normalize(f), ad.as_tensor(np.zeros(4)))
        s = reparam_sample(g, 4, np.random.default_rng(0))
        assert smooth_l1_loss(s.samples, ad.mean_std_normalize(f)).item() == 0.0


class TestModel:
    VOCAB = ["wave", "jump", "a", "hand", "up"]

    def batch(self, seed, b=3, t=3):
        rng = np.random.default_rng(seed)
        model_in = 2 * 2 * 2 + SMALL.n_time
        x = rng.uniform(0, 1, (b, t, model_in))
        mask = np.ones((b, t), bool)
        mask[-1, -1] = False
        return x, mask, [["wave"], ["jump", "hand", "up"]], np.array([0, 1, 1][:b])

    @pytest.mark.parametrize("seed", [0, 1])
    @pytest.mark.parametrize("use_cr, use_ue, pairs", [(True, True, True), (True, True, False),
                                                       (False, True, True), (True, False, True)])
    def test_gradcheck(self, seed, use_cr, use_ue, pairs):
        model = CrueModel(self.VOCAB, replace(SMALL, pair_fusion=pairs), seed=seed, use_cr=use_cr, use_ue=use_ue)
        randomize_biases(model.store)
        x, mask, caps, labels = self.batch(seed)
        cfg = LossConfig(tau=0.5, n_samples=2)
        f = lambda: model.loss(x, mask, caps, labels, cfg, np.random.default_rng(seed))[0]
        report = gradcheck(f, model.store, h=1e-5)
        assert max(report.values()) < 1e-4, report

    def test_parameter_groups(self):
        names = CrueModel(self.VOCAB, SMALL).store.names()
        for prefix in ("event_enc", "text_enc.embed", "text_enc.prompt", "proj_e", "proj_t", "att1", "att2"):
            assert any(n.startswith(prefix) for n in names)

    def test_scores_shape_and_range(self):
        model = CrueModel(self.VOCAB, SMALL, seed=0)
        x, mask, caps, _ = self.batch(0)
        s = model.class_scores(x, mask, caps)
        assert s.shape == (3, 2) and np.all(np.abs(s) <= 1 + 1e-12)

    def test_scores_match_single_item_fusion(self):
        model = CrueModel(self.VOCAB, SMALL, seed=2)
        x, mask, caps, _ = self.batch(1)
        s = model.class_scores(x, mask, caps)
        f_t = model.text_encoder.encode_many(caps)
        for b in range(3):
            for k in range(2):
                fu = cr_fusion(model.event_encoder(x[b]), f_t[k], model.proj_e, model.proj_t, mask[b])
                me = ad.l2_normalize(model.gaussian(fu.fused).mu).data
                mt = ad.l2_normalize(model.gaussian(fu.text_proj).mu).data
                assert s[b, k] == pytest.approx(float(me @ mt), abs=1e-12)
