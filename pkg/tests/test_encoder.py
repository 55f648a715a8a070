import numpy as np
import pytest

from lcm import costs
from lcm import tensor as T
from lcm.encoder import (
    AttentionWeights,
    EncoderConfig,
    EncoderLayerWeights,
    EncoderWeights,
    LALWeights,
    compact_encoder_forward,
    encoder_forward,
    encoder_layer_forward,
    local_aggregation,
    multihead_attention,
    topk_attention_mask,
    transformer_encoder_forward,
)
from lcm.errors import CountError, DegenerateRowError
from lcm.layers import knn_graph, parameter_list
from lcm.mpm import build_model


def zero_weights(weights):
    for _, p in parameter_list(weights):
        p.data = np.zeros_like(p.data)


def rand_tokens_centers(n, d, seed, dtype=np.float64):
    rng = np.random.default_rng(seed)
    tokens = T.Tensor(rng.normal(size=(n, d)).astype(dtype), requires_grad=True)
    centers = rng.normal(size=(n, 3))
    return tokens, centers, rng


class TestLocalAggregation:
    def test_zero_weights_zero_output(self):
        tokens, centers, rng = rand_tokens_centers(10, 8, 0)
        w = LALWeights.init(8, 4, 3, rng, dtype=np.float64)
        zero_weights(w)
        out = local_aggregation(tokens, centers, w)
        assert np.array_equal(out.data, np.zeros((10, 8)))

    def test_permutation_equivariance(self):
        tokens, centers, rng = rand_tokens_centers(12, 8, 1)
        w = LALWeights.init(8, 6, 4, rng, dtype=np.float64)
        base = local_aggregation(tokens, centers, w).data
        perm = rng.permutation(12)
        permuted = local_aggregation(
            T.Tensor(tokens.data[perm]), centers[perm], w
        ).data
        assert np.max(np.abs(permuted - base[perm])) < 1e-9

    def test_k1_matches_direct_per_token_map(self):
        tokens, centers, rng = rand_tokens_centers(7, 6, 2)
        w = LALWeights.init(6, 5, 1, rng, dtype=np.float64)
        out = local_aggregation(tokens, centers, w).data
        for i in range(7):
            pair = np.concatenate([tokens.data[i], tokens.data[i]])
            h = pair @ w.down.w.data + w.down.b.data
            h = 0.5 * h * (1.0 + np.tanh(0.7978845608028654 * (h + 0.044715 * h**3)))
            want = h @ w.up.w.data + w.up.b.data
            assert np.max(np.abs(out[i] - want)) < 1e-9

    def test_k_exceeds_tokens(self):
        tokens, centers, rng = rand_tokens_centers(4, 6, 3)
        w = LALWeights.init(6, 5, 5, rng, dtype=np.float64)
        with pytest.raises(CountError):
            local_aggregation(tokens, centers, w)

    def test_batched_matches_per_item(self):
        rng = np.random.default_rng(4)
        tokens = rng.normal(size=(3, 9, 8))
        centers = rng.normal(size=(3, 9, 3))
        w = LALWeights.init(8, 4, 3, rng, dtype=np.float64)
        batched = local_aggregation(T.Tensor(tokens), centers, w).data
        for i in range(3):
            single = local_aggregation(T.Tensor(tokens[i]), centers[i], w).data
            assert np.max(np.abs(batched[i] - single)) < 1e-12


class TestEncoderLayer:
    def test_zero_weights_pure_residual(self):
        cfg = EncoderConfig(variant="LCM", n_layers=1, d=8, d_h=4, d_ffn=16, k_local=3)
        rng = np.random.default_rng(5)
        w = EncoderLayerWeights.init(cfg, rng, dtype=np.float64)
        zero_weights(w)
        tokens, centers, _ = rand_tokens_centers(6, 8, 6)
        out = encoder_layer_forward(tokens, None, centers, w)
        assert np.array_equal(out.data, tokens.data)

    def test_gradient_full_layer(self):
        cfg = EncoderConfig(variant="LCM", n_layers=1, d=6, d_h=4, d_ffn=8, k_local=3)
        rng = np.random.default_rng(7)
        w = EncoderLayerWeights.init(cfg, rng, dtype=np.float64)
        tokens, centers, _ = rand_tokens_centers(5, 6, 8)
        pos = T.Tensor(np.random.default_rng(9).normal(size=(5, 6)))
        params = [p for _, p in parameter_list(w)]

        def f():
            return T.tsum(T.square(encoder_layer_forward(tokens, pos, centers, w)))

        report = T.finite_difference_check(f, params + [tokens], eps=1e-5, tol=1e-4)
        assert report.passed, report.max_rel_err

    def test_ablation_a_is_ln_ffn_block(self):
        cfg = EncoderConfig(variant="LCM", n_layers=1, d=8, d_h=4, d_ffn=16, k_local=3, ablation="A")
        rng = np.random.default_rng(10)
        w = EncoderLayerWeights.init(cfg, rng, dtype=np.float64)
        assert w.lal is None and w.ln1 is None
        tokens, centers, _ = rand_tokens_centers(6, 8, 11)
        out = encoder_layer_forward(tokens, None, centers, w)
        want = T.add(tokens, w.ffn(w.ln2(tokens)))
        assert np.array_equal(out.data, want.data)


class TestCompactEncoder:
    def _enc(self, n_layers, seed, d=8):
        cfg = EncoderConfig(variant="LCM", n_layers=n_layers, d=d, d_h=4, d_ffn=16, k_local=3)
        return EncoderWeights.init(cfg, np.random.default_rng(seed), dtype=np.float64)

    def test_zero_layers_identity(self):
        enc = self._enc(0, 12)
        tokens, centers, _ = rand_tokens_centers(6, 8, 13)
        out = compact_encoder_forward(tokens, T.Tensor(np.zeros((6, 8))), centers, enc)
        assert np.array_equal(out.data, tokens.data)

    def test_deterministic(self):
        enc = self._enc(2, 14)
        tokens, centers, _ = rand_tokens_centers(6, 8, 15)
        ep = T.Tensor(np.random.default_rng(16).normal(size=(6, 8)))
        a = compact_encoder_forward(tokens, ep, centers, enc).data
        b = compact_encoder_forward(tokens, ep, centers, enc).data
        assert np.array_equal(a, b)

    def test_single_layer_composition(self):
        enc = self._enc(1, 17)
        tokens, centers, _ = rand_tokens_centers(6, 8, 18)
        ep = T.Tensor(np.random.default_rng(19).normal(size=(6, 8)))
        stack = compact_encoder_forward(tokens, ep, centers, enc).data
        knn = knn_graph(centers, 3)
        single = encoder_layer_forward(tokens, ep, centers, enc.layers[0], knn_idx=knn).data
        assert np.array_equal(stack, single)

    def test_positional_embedding_added_every_layer(self):
        enc = self._enc(2, 20)
        tokens, centers, _ = rand_tokens_centers(6, 8, 21)
        ep = T.Tensor(np.random.default_rng(22).normal(size=(6, 8)))
        knn = knn_graph(centers, 3)
        x = encoder_layer_forward(tokens, ep, centers, enc.layers[0], knn_idx=knn)
        x = encoder_layer_forward(x, ep, centers, enc.layers[1], knn_idx=knn)
        assert np.array_equal(compact_encoder_forward(tokens, ep, centers, enc).data, x.data)

    def test_full_encoder_permutation_equivariance(self):
        enc = self._enc(2, 23)
        tokens, centers, rng = rand_tokens_centers(10, 8, 24)
        ep_arr = rng.normal(size=(10, 8))
        base = compact_encoder_forward(tokens, T.Tensor(ep_arr), centers, enc).data
        perm = rng.permutation(10)
        out = compact_encoder_forward(
            T.Tensor(tokens.data[perm]), T.Tensor(ep_arr[perm]), centers[perm], enc
        ).data
        assert np.max(np.abs(out - base[perm])) < 1e-9


class TestAttention:
    def test_single_token_is_value_then_output_projection(self):
        rng = np.random.default_rng(25)
        w = AttentionWeights.init(8, 2, rng, dtype=np.float64)
        token = T.Tensor(rng.normal(size=(1, 8)))
        out = multihead_attention(token, w).data
        v = token.data @ w.wv.w.data + w.wv.b.data
        want = v @ w.wo.w.data + w.wo.b.data
        assert np.max(np.abs(out - want)) < 1e-12

    def test_zero_mask_equals_no_mask_bitwise(self):
        rng = np.random.default_rng(26)
        w = AttentionWeights.init(8, 2, rng, dtype=np.float64)
        tokens = T.Tensor(rng.normal(size=(7, 8)))
        assert np.array_equal(
            multihead_attention(tokens, w).data,
            multihead_attention(tokens, w, mask=np.zeros((7, 7))).data,
        )

    def test_fully_masked_row_rejected(self):
        rng = np.random.default_rng(27)
        w = AttentionWeights.init(8, 2, rng, dtype=np.float64)
        tokens = T.Tensor(rng.normal(size=(3, 8)))
        mask = np.zeros((3, 3))
        mask[1, :] = -np.inf
        with pytest.raises(DegenerateRowError):
            multihead_attention(tokens, w, mask=mask)

    def test_gradient(self):
        rng = np.random.default_rng(28)
        w = AttentionWeights.init(6, 2, rng, dtype=np.float64)
        tokens = T.Tensor(rng.normal(size=(5, 6)), requires_grad=True)
        # wk.b provably cannot affect the output (softmax shift invariance),
        # so its true gradient is zero; checked separately below.
        params = [p for n, p in parameter_list(w) if n != "wk.b"]
        report = T.finite_difference_check(
            lambda: T.tsum(T.square(multihead_attention(tokens, w))),
            params + [tokens], eps=1e-5, tol=1e-4,
        )
        assert report.passed, report.max_rel_err

    def test_key_bias_invariance(self):
        rng = np.random.default_rng(39)
        w = AttentionWeights.init(6, 2, rng, dtype=np.float64)
        tokens = T.Tensor(rng.normal(size=(5, 6)), requires_grad=True)
        base = multihead_attention(tokens, w).data.copy()
        with T.Tape() as tape:
            loss = T.tsum(T.square(multihead_attention(tokens, w)))
        g = T.backward(loss, tape).get(w.wk.b)
        assert np.max(np.abs(g)) < 1e-12
        w.wk.b.data = w.wk.b.data + 3.7
        shifted = multihead_attention(tokens, w).data
        assert np.max(np.abs(shifted - base)) < 1e-12


class TestTopKMask:
    def test_k_equals_n_all_zeros(self):
        rng = np.random.default_rng(29)
        scores = rng.normal(size=(6, 6))
        assert np.array_equal(topk_attention_mask(scores, 6, "FEATURE"), np.zeros((6, 6)))
        centers = rng.normal(size=(6, 3))
        assert np.array_equal(topk_attention_mask(centers, 6, "GEOMETRY"), np.zeros((6, 6)))

    def test_geometry_k1_self_only(self):
        rng = np.random.default_rng(30)
        centers = rng.normal(size=(5, 3))
        mask = topk_attention_mask(centers, 1, "GEOMETRY")
        assert np.array_equal(np.isfinite(mask), np.eye(5, dtype=bool))

    def test_masked_softmax_row_support(self):
        rng = np.random.default_rng(31)
        for k in (1, 3, 5):
            scores = rng.normal(size=(8, 8))
            mask = topk_attention_mask(scores, k, "FEATURE")
            probs = T.softmax_rows(T.Tensor(scores + mask)).data
            nonzeros = (probs > 0).sum(axis=1)
            assert np.all(nonzeros <= k)
            assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-12

    def test_count_error(self):
        with pytest.raises(CountError):
            topk_attention_mask(np.zeros((4, 4)), 5, "FEATURE")


class TestTransformerEncoder:
    def test_zero_weights_identity(self):
        cfg = EncoderConfig(variant="TRANSFORMER", n_layers=2, d=8, d_ffn=16, n_heads=2)
        enc = EncoderWeights.init(cfg, np.random.default_rng(32), dtype=np.float64)
        zero_weights(enc)
        tokens, centers, _ = rand_tokens_centers(6, 8, 33)
        out = transformer_encoder_forward(tokens, T.Tensor(np.zeros((6, 8))), centers, enc)
        assert np.array_equal(out.data, tokens.data)

    @pytest.mark.parametrize("variant", ["TRANSFORMER_TOPK_FEATURE", "TRANSFORMER_TOPK_GEOMETRY"])
    def test_topk_n_equals_full_attention_bitwise(self, variant):
        rng = np.random.default_rng(34)
        n = 7
        full_cfg = EncoderConfig(variant="TRANSFORMER", n_layers=2, d=8, d_ffn=16, n_heads=2)
        enc = EncoderWeights.init(full_cfg, rng, dtype=np.float64)
        topk_enc = EncoderWeights(
            config=EncoderConfig(variant=variant, n_layers=2, d=8, d_ffn=16, n_heads=2, top_k=n),
            layers=enc.layers,
        )
        tokens, centers, _ = rand_tokens_centers(n, 8, 35)
        ep = T.Tensor(np.random.default_rng(36).normal(size=(n, 8)))
        assert np.array_equal(
            encoder_forward(tokens, ep, centers, enc).data,
            encoder_forward(tokens, ep, centers, topk_enc).data,
        )

    def test_gradient(self):
        cfg = EncoderConfig(variant="TRANSFORMER", n_layers=1, d=6, d_ffn=8, n_heads=2)
        enc = EncoderWeights.init(cfg, np.random.default_rng(37), dtype=np.float64)
        tokens, centers, _ = rand_tokens_centers(4, 6, 38)
        params = [p for n, p in parameter_list(enc) if not n.endswith("wk.b")]
        report = T.finite_difference_check(
            lambda: T.tsum(T.square(transformer_encoder_forward(tokens, None, centers, enc))),
            params, eps=1e-5, tol=1e-4,
        )
        assert report.passed, report.max_rel_err


class TestCounters:
    def test_affine_closed_form(self):
        assert costs.affine_params(10, 7) == 77
        assert costs.affine_flops(5, 10, 7) == 2 * 5 * 10 * 7 + 5 * 7

    def test_paper_operating_point(self):
        t = costs.paper_transformer_classifier()
        l = costs.paper_lcm_classifier()
        pt = costs.count_params(t)
        pl = costs.count_params(l)
        assert abs(pt - 22.1e6) <= 0.05 * 22.1e6
        assert pl <= 3.2e6
        assert 1 - pl / pt >= 0.85

    @pytest.mark.parametrize("maker", [costs.paper_transformer_classifier, costs.paper_lcm_classifier])
    def test_count_params_matches_instantiation(self, maker):
        from lcm.layers import count_values

        cfg = maker()
        model = build_model(cfg, np.random.default_rng(0))
        assert costs.count_params(cfg) == count_values(model)

    def test_flop_ratio(self):
        t = costs.paper_transformer_classifier()
        l = costs.paper_lcm_classifier()
        ratio = costs.count_flops(l, 2048, 128) / costs.count_flops(t, 2048, 128)
        assert ratio <= 0.35

    def test_mixing_slopes(self):
        ns = [64, 128, 256, 512, 1024]
        st, rt = costs.fit_loglog(ns, [costs.mixing_flops(costs.paper_transformer_classifier(), n) for n in ns])
        sl, rl = costs.fit_loglog(ns, [costs.mixing_flops(costs.paper_lcm_classifier(), n) for n in ns])
        assert st >= 1.8 and rt >= 0.98
        assert sl <= 1.15 and rl >= 0.98
