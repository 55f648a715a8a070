"""Property-check suite: one named check per module invariant.

The registry is enumerated in the JSON report so coverage is auditable;
any failure makes the run exit nonzero.
"""

from __future__ import annotations

import logging
import os
import time

import numpy as np

from .. import costs, mpm
from .. import tensor as T
from ..decoder import (
    DecoderConfig, DecoderLayerWeights, DecoderWeights, LCFFNWeights, SSMWeights,
    lcffn, linearity_check, mamba_decoder_forward, ssm_sublayer, transformer_decoder_forward,
)
from ..encoder import (
    AttentionWeights, EncoderConfig, EncoderLayerWeights, EncoderWeights,
    compact_encoder_forward, encoder_forward, local_aggregation, multihead_attention,
    topk_attention_mask,
)
from ..geometry import (
    OrderingSpec, PointCloud, chamfer_l2, farthest_point_sample, hilbert_order,
    knn_indices, order_by_axis, synth_shape,
)
from ..layers import count_values, parameter_list
from .config import RunConfig
from .metrics import write_json

log = logging.getLogger(__name__)


def _result(name, passed, residual=None, detail=""):
    return {"name": name, "passed": bool(passed),
            "residual": None if residual is None else float(residual), "detail": detail}


# --- tensorcore -------------------------------------------------------------

def check_core_op_gradients(n_seeds):
    worst = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        x = T.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        w = T.Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        gam = T.Tensor(rng.uniform(0.5, 1.5, size=6), requires_grad=True)
        bet = T.Tensor(rng.normal(size=6), requires_grad=True)

        def f():
            h = T.linear(x, w, bet)
            h = T.layer_norm(h, gam, bet, eps=1e-5)
            h = T.gelu(h)
            p = T.softmax_rows(h)
            picked = T.gather_rows(p, np.array([0, 0, 2, 3]))
            return T.tmean(T.square(T.segment_max(picked, 2)))

        rep = T.finite_difference_check(f, [x, w, gam, bet], eps=1e-5, tol=1e-4)
        worst = max(worst, rep.max_rel_err)
    return _result("tensorcore.op_gradients_vs_fd", worst < 1e-4, worst,
                   f"{n_seeds} seeds, composite op chain")


def check_matmul_identity_bitwise(_):
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(6, 6)), rng.normal(size=(6, 9))
    eye = T.Tensor(np.eye(6))
    same = np.array_equal(
        T.matmul(T.matmul(T.Tensor(a), eye), T.Tensor(b)).data,
        T.matmul(T.Tensor(a), T.Tensor(b)).data,
    )
    return _result("tensorcore.matmul_identity_bitwise", same, 0.0 if same else 1.0)


def check_softmax_rows(_):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(30, 9)) * 5
    out = T.softmax_rows(T.Tensor(x)).data
    r1 = np.max(np.abs(out.sum(axis=-1) - 1.0))
    r2 = np.max(np.abs(out - T.softmax_rows(T.Tensor(x + 7.5)).data))
    return _result("tensorcore.softmax_sum_and_shift", max(r1, r2) < 1e-12, max(r1, r2))


def check_backward_idempotent(_):
    rng = np.random.default_rng(2)
    x = T.Tensor(rng.normal(size=(5, 5)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(5, 5)), requires_grad=True)

    def run():
        with T.Tape() as tape:
            loss = T.tsum(T.gelu(T.matmul(x, w)))
        return T.backward(loss, tape)[w]

    same = np.array_equal(run(), run())
    return _result("tensorcore.backward_rerun_idempotent", same, 0.0 if same else 1.0)


# --- geometry ---------------------------------------------------------------

def check_fps_maxmin(n_seeds):
    from math import inf

    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(int(rng.integers(10, 64)), 3))
        n = int(rng.integers(2, len(pts) + 1))
        _, idx = farthest_point_sample(PointCloud(pts), n)
        chosen = [idx[0]]
        for i in idx[1:]:
            best = {j: min(((pts[j] - pts[s]) ** 2).sum() for s in chosen)
                    for j in range(len(pts)) if j not in chosen}
            if best[i] < max(best.values()) - 1e-12:
                return _result("geometry.fps_greedy_maxmin", False, detail=f"seed {seed}")
            chosen.append(i)
    return _result("geometry.fps_greedy_maxmin", True, 0.0, f"{n_seeds} exhaustive instances")


def check_knn_bruteforce(n_seeds):
    for seed in range(n_seeds):
        rng = np.random.default_rng(100 + seed)
        q = rng.normal(size=(int(rng.integers(2, 64)), 3))
        keys = rng.normal(size=(int(rng.integers(4, 64)), 3))
        k = int(rng.integers(1, len(keys) + 1))
        got = knn_indices(q, keys, k)
        want = []
        for qi in q:
            d = [((sum((qi[c] - kj[c]) ** 2 for c in range(3))), j) for j, kj in enumerate(keys)]
            d.sort()
            want.append([j for _, j in d[:k]])
        if not np.array_equal(got, np.asarray(want)):
            return _result("geometry.knn_matches_bruteforce", False, detail=f"seed {seed}")
    return _result("geometry.knn_matches_bruteforce", True, 0.0, f"{n_seeds} random instances")


def check_chamfer(n_seeds):
    worst = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng(200 + seed)
        a = rng.normal(size=(int(rng.integers(1, 9)), 3))
        b = rng.normal(size=(int(rng.integers(1, 9)), 3))
        got = chamfer_l2(a, b).item()
        ref = 0.0
        for p in a:
            ref += min(((p - qq) ** 2).sum() for qq in b) / len(a)
        for qq in b:
            ref += min(((p2 - qq) ** 2).sum() for p2 in a) / len(b)
        worst = max(worst, abs(got - ref))
        if got < 0 or chamfer_l2(a, a).item() != 0.0:
            return _result("geometry.chamfer_properties", False, detail="sign/self")
        theta = rng.uniform(0, 2 * np.pi)
        rot = np.array([[np.cos(theta), -np.sin(theta), 0],
                        [np.sin(theta), np.cos(theta), 0], [0, 0, 1.0]])
        worst = max(worst, abs(got - chamfer_l2(a @ rot.T, b @ rot.T).item()))
    at = T.Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    bt = T.Tensor(np.random.default_rng(1).normal(size=(5, 3)), requires_grad=True)
    rep = T.finite_difference_check(lambda: chamfer_l2(at, bt), [at, bt], eps=1e-6, tol=1e-5)
    ok = worst < 1e-9 and rep.passed
    return _result("geometry.chamfer_properties", ok, max(worst, rep.max_rel_err),
                   "double-loop equality, symmetry, rotation invariance, gradient")


def check_hilbert_adjacency(_):
    corners = np.array([[x, y, z] for x in (0.0, 1) for y in (0.0, 1) for z in (0.0, 1)])
    perm = hilbert_order(corners, bits=1)
    path = corners[perm]
    steps = np.abs(np.diff(path, axis=0)).sum(axis=1)
    ok = sorted(perm.tolist()) == list(range(8)) and np.all(steps == 1.0)
    return _result("geometry.hilbert_bits1_hamiltonian", ok, float(np.max(np.abs(steps - 1.0))))


def check_orderings_are_permutations(n_seeds):
    for seed in range(n_seeds):
        rng = np.random.default_rng(300 + seed)
        centers = rng.normal(size=(int(rng.integers(2, 40)), 3))
        for spec in (OrderingSpec(("X",)), OrderingSpec(("Y",)), OrderingSpec(("Z",)),
                     OrderingSpec(("H",), hilbert_bits=5)):
            for perm in spec.permutations(centers):
                if sorted(perm.tolist()) != list(range(len(centers))):
                    return _result("geometry.orderings_are_permutations", False)
    return _result("geometry.orderings_are_permutations", True, 0.0)


# --- encoder ----------------------------------------------------------------

def check_encoder_equivariance(_):
    rng = np.random.default_rng(3)
    cfg = EncoderConfig(variant="LCM", n_layers=2, d=8, d_h=4, d_ffn=16, k_local=3)
    enc = EncoderWeights.init(cfg, rng, dtype=np.float64)
    tokens = rng.normal(size=(10, 8))
    centers = rng.normal(size=(10, 3))
    ep = rng.normal(size=(10, 8))
    base = compact_encoder_forward(T.Tensor(tokens), T.Tensor(ep), centers, enc).data
    perm = rng.permutation(10)
    out = compact_encoder_forward(T.Tensor(tokens[perm]), T.Tensor(ep[perm]), centers[perm], enc).data
    lal = enc.layers[0].lal
    base_l = local_aggregation(T.Tensor(tokens), centers, lal).data
    out_l = local_aggregation(T.Tensor(tokens[perm]), centers[perm], lal).data
    resid = max(np.max(np.abs(out - base[perm])), np.max(np.abs(out_l - base_l[perm])))
    return _result("encoder.permutation_equivariance", resid < 1e-9, resid)


def check_topk_identities(_):
    rng = np.random.default_rng(4)
    n = 8
    w = AttentionWeights.init(8, 2, rng, dtype=np.float64)
    tokens = T.Tensor(rng.normal(size=(n, 8)))
    centers = rng.normal(size=(n, 3))
    full = multihead_attention(tokens, w).data
    masked = multihead_attention(tokens, w, mask=topk_attention_mask(centers, n, "GEOMETRY")).data
    if not np.array_equal(full, masked):
        return _result("encoder.topk_full_is_noop", False, detail="K=N mask changed outputs")
    worst = 0.0
    for k in (1, 3):
        scores = rng.normal(size=(n, n))
        probs = T.softmax_rows(T.Tensor(scores + topk_attention_mask(scores, k, "FEATURE"))).data
        if np.any((probs > 0).sum(axis=1) > k):
            return _result("encoder.topk_full_is_noop", False, detail="row support exceeds K")
        worst = max(worst, np.max(np.abs(probs.sum(axis=1) - 1.0)))
    self_only = multihead_attention(
        tokens, w, mask=topk_attention_mask(centers, 1, "GEOMETRY")
    ).data
    v = tokens.data @ w.wv.w.data + w.wv.b.data
    want = v @ w.wo.w.data + w.wo.b.data
    worst = max(worst, np.max(np.abs(self_only - want)))
    return _result("encoder.topk_full_is_noop", worst < 1e-12, worst,
                   "K=N bitwise no-op; row support <= K; geometric K=1 = self value path")


def check_layer_gradients(_):
    rng = np.random.default_rng(5)
    worst = 0.0
    cfg = EncoderConfig(variant="LCM", n_layers=1, d=6, d_h=4, d_ffn=8, k_local=3)
    w = EncoderLayerWeights.init(cfg, rng, dtype=np.float64)
    tokens = T.Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    centers = rng.normal(size=(5, 3))
    rep = T.finite_difference_check(
        lambda: T.tsum(T.square(__import__("lcm.encoder", fromlist=["encoder_layer_forward"])
                                .encoder_layer_forward(tokens, None, centers, w))),
        [p for _, p in parameter_list(w)] + [tokens], eps=1e-5, tol=1e-4)
    worst = max(worst, rep.max_rel_err)
    attn = AttentionWeights.init(6, 2, rng, dtype=np.float64)
    rep = T.finite_difference_check(
        lambda: T.tsum(T.square(multihead_attention(tokens, attn))),
        [p for n2, p in parameter_list(attn) if n2 != "wk.b"], eps=1e-5, tol=1e-4)
    worst = max(worst, rep.max_rel_err)
    return _result("encoder.layer_gradients_vs_fd", worst < 1e-4, worst,
                   "LAL/FFN/LN layer and attention (key bias has provably zero gradient)")


def check_count_params_cross(_):
    for maker in (costs.paper_transformer_classifier, costs.paper_lcm_classifier):
        cfg = maker()
        model = mpm.build_model(cfg, np.random.default_rng(0))
        if costs.count_params(cfg) != count_values(model):
            return _result("encoder.count_params_matches_instantiation", False, detail=cfg.encoder.variant)
    return _result("encoder.count_params_matches_instantiation", True, 0.0)


def check_flop_slopes(_):
    ns = [64, 128, 256, 512, 1024]
    st, rt = costs.fit_loglog(ns, [costs.mixing_flops(costs.paper_transformer_classifier(), n) for n in ns])
    sl, rl = costs.fit_loglog(ns, [costs.mixing_flops(costs.paper_lcm_classifier(), n) for n in ns])
    ok = st >= 1.8 and sl <= 1.15 and rt >= 0.98 and rl >= 0.98
    return _result("encoder.flop_scaling_slopes", ok, None,
                   f"attention {st:.3f} (R2 {rt:.3f}), local {sl:.3f} (R2 {rl:.3f})")


# --- decoder ----------------------------------------------------------------

def check_frozen_scan_linear(_):
    rng = np.random.default_rng(6)
    w = SSMWeights.init(8, 8, 4, rng, dtype=np.float64, mode="FROZEN_LINEAR")
    w.x_to_b.b.data = rng.normal(size=4)
    w.x_to_c.b.data = rng.normal(size=4)
    worst = 0.0
    for _ in range(25):
        x = rng.normal(size=(12, 8))
        y = rng.normal(size=(12, 8))
        alpha, beta = rng.uniform(0.2, 1.8, size=2)
        lhs = ssm_sublayer(T.Tensor(alpha * x + beta * y), w).data
        rhs = alpha * ssm_sublayer(T.Tensor(x), w).data + beta * ssm_sublayer(T.Tensor(y), w).data
        worst = max(worst, np.max(np.abs(lhs - rhs)))
        hom = ssm_sublayer(T.Tensor(alpha * x), w).data - alpha * ssm_sublayer(T.Tensor(x), w).data
        worst = max(worst, np.max(np.abs(hom)))
    return _result("decoder.frozen_scan_superposition", worst < 1e-8, worst)


def check_scan_causality(_):
    from ..decoder import ssm_scan

    rng = np.random.default_rng(7)
    w = SSMWeights.init(6, 6, 3, rng, dtype=np.float64)
    x = rng.normal(size=(12, 6))
    full = ssm_scan(T.Tensor(x), w).data
    for t in range(1, 12):
        if not np.array_equal(full[:t], ssm_scan(T.Tensor(x[:t]), w).data):
            return _result("decoder.selective_scan_causal", False, detail=f"t={t}")
    return _result("decoder.selective_scan_causal", True, 0.0, "bitwise for all truncations")


def check_scan_stability(_):
    rng = np.random.default_rng(8)
    w = SSMWeights.init(4, 4, 3, rng, dtype=np.float64)
    x = T.Tensor(rng.normal(size=(400, 4)) * 10.0)
    y = ssm_sublayer(x, w)
    a = -np.exp(w.a_log.data)
    abar_max = float(np.exp(0.9 * a.max()))  # delta > 0 keeps |exp(dA)| < 1
    ok = np.all(np.isfinite(y.data)) and abar_max < 1.0
    return _result("decoder.hidden_state_stability", ok, abar_max,
                   "A strictly negative; long noisy sequence stays finite")


def check_lcffn_permutation(_):
    rng = np.random.default_rng(9)
    w = LCFFNWeights.init(8, 4, 3, rng, dtype=np.float64)
    tokens = rng.normal(size=(9, 8))
    centers = rng.normal(size=(9, 3))
    base = lcffn(T.Tensor(tokens), centers, w).data
    perm = rng.permutation(9)
    out = lcffn(T.Tensor(tokens[perm]), centers[perm], w).data
    resid = np.max(np.abs(out - base[perm]))
    return _result("decoder.lcffn_permutation_invariance", resid < 1e-9, resid)


def check_ordering_dependence(_):
    rng = np.random.default_rng(10)
    cfg = DecoderConfig(m_layers=1, d=8, d_inner=8, d_state=4, d_h=4, k_local=3,
                        ffn_kind="FFN", d_ffn=16, ordering=OrderingSpec(("X",)))
    dec = DecoderWeights.init(cfg, rng, dtype=np.float64)
    tokens = T.Tensor(rng.normal(size=(10, 8)))
    centers = rng.normal(size=(10, 3))
    out_x = mamba_decoder_forward(tokens, None, centers, dec).data
    dec_y = DecoderWeights(config=DecoderConfig(
        m_layers=1, d=8, d_inner=8, d_state=4, d_h=4, k_local=3, ffn_kind="FFN",
        d_ffn=16, ordering=OrderingSpec(("Y",))), layers=dec.layers)
    out_y = mamba_decoder_forward(tokens, None, centers, dec_y).data
    gap = float(np.max(np.abs(out_x - out_y)))
    cfg_a = DecoderConfig(m_layers=1, d=8, d_inner=8, d_state=4, d_h=4, k_local=3,
                          n_heads=2, ffn_kind="FFN", d_ffn=16,
                          sublayer_kind="ATTENTION", ordering=OrderingSpec(("X",)))
    att = DecoderWeights.init(cfg_a, rng, dtype=np.float64)
    a = transformer_decoder_forward(tokens, None, centers, att).data
    perm = rng.permutation(10)
    b = transformer_decoder_forward(T.Tensor(tokens.data[perm]), None, centers[perm], att).data
    inv_resid = float(np.max(np.abs(b - a[perm])))
    ok = gap > 0.0 and inv_resid < 1e-9
    return _result("decoder.ordering_sensitivity_contrast", ok, inv_resid,
                   f"FFN scan gap {gap:.3e}; attention equivariance residual {inv_resid:.3e}")


def check_decoder_gradients(_):
    rng = np.random.default_rng(11)
    cfg = DecoderConfig(m_layers=1, d=6, d_inner=6, d_state=3, d_h=4, k_local=3,
                        ffn_kind="LCFFN", ordering=OrderingSpec(("Y",)))
    w = DecoderLayerWeights.init(cfg, rng, dtype=np.float64)
    tokens = T.Tensor(rng.normal(size=(6, 6)), requires_grad=True)
    centers = rng.normal(size=(6, 3))
    from ..decoder import decoder_layer_forward

    rep = T.finite_difference_check(
        lambda: T.tsum(T.square(decoder_layer_forward(tokens, None, centers, w,
                                                      ordering=cfg.ordering))),
        [p for _, p in parameter_list(w)] + [tokens], eps=1e-5, tol=1e-4)
    return _result("decoder.layer_gradients_vs_fd", rep.passed, rep.max_rel_err)


def check_theorem_premise(_):
    rep = linearity_check(trials=40, tol=1e-8, seed=1)
    ok = rep.ssm_linear and rep.attention_nonlinear_gap > 1e-3
    return _result("decoder.linearity_premise", ok, rep.ssm_max_residual,
                   f"attention gap {rep.attention_nonlinear_gap:.3e}")


# --- mpm --------------------------------------------------------------------

def _tiny_training_setup(seed=0):
    from ..encoder import EncoderConfig as EC

    enc = EC(variant="LCM", n_layers=2, d=16, d_h=8, d_ffn=16, k_local=3)
    dec = DecoderConfig(m_layers=2, d=16, d_inner=16, d_state=4, d_h=8, k_local=3,
                        ffn_kind="LCFFN", ordering=OrderingSpec(("Y",)))
    cfg = mpm.ModelConfig(encoder=enc, decoder=dec, k_group=8, embed_hidden=8, pe_hidden=8)
    model = mpm.build_model(cfg, np.random.default_rng(seed), dtype=np.float64)
    clouds = [synth_shape(["sphere", "cube"][i % 2], 96, 0.01, rng_seed=i) for i in range(2)]
    pts = np.stack([c.points for c in clouds])
    cidx, gidx = mpm.build_patch_index_cache(pts, 16, 8)
    centers, patches = mpm.patches_from_cache(pts, cidx, gidx)
    vis, msk = zip(*(mpm.MaskSpec(0.4, rng_seed=i).split(16) for i in range(2)))
    return model, centers, patches, np.stack(vis), np.stack(msk)


def check_e2e_gradients(_):
    model, centers, patches, vis, msk = _tiny_training_setup()
    params = parameter_list(model)
    groups = {}
    for name, p in params:
        groups.setdefault(name.split(".")[0], []).append(p)

    def f():
        return mpm.pretrain_forward(model, centers, patches, vis, msk, dtype=np.float64)

    rng = np.random.default_rng(0)
    worst = 0.0
    checked = 0
    for key, members in groups.items():
        rep = T.finite_difference_check(f, members[:4], eps=1e-5, tol=1e-3,
                                        max_coords_per_param=6, rng=rng)
        worst = max(worst, rep.max_rel_err)
        checked += rep.n_coords
        if not rep.passed:
            return _result("mpm.end_to_end_gradients", False, worst, f"group {key}")
    return _result("mpm.end_to_end_gradients", True, worst, f"{checked} coordinates spot-checked")


def check_mask_arithmetic(_):
    for r in (0.1, 0.25, 0.4, 0.5, 0.75, 0.9):
        for n in (8, 16, 33, 64, 100):
            vis, msk = mpm.MaskSpec(r, rng_seed=0).split(n)
            if len(vis) + len(msk) != n or len(vis) != int(round(r * n)):
                return _result("mpm.mask_arithmetic", False, detail=f"r={r} n={n}")
            if not np.array_equal(np.sort(np.concatenate([vis, msk])), np.arange(n)):
                return _result("mpm.mask_arithmetic", False, detail="not a partition")
    return _result("mpm.mask_arithmetic", True, 0.0)


def check_loss_patch_permutation(_):
    model, centers, patches, vis, msk = _tiny_training_setup(seed=3)
    base = mpm.pretrain_forward(model, centers, patches, vis, msk, dtype=np.float64).item()
    rng = np.random.default_rng(4)
    shuffled = patches.copy()
    b, n, k, _unused = shuffled.shape
    for i in range(b):
        for j in range(n):
            shuffled[i, j] = shuffled[i, j, rng.permutation(k)]
    other = mpm.pretrain_forward(model, centers, shuffled, vis, msk, dtype=np.float64).item()
    resid = abs(base - other)
    return _result("mpm.loss_invariant_to_patch_point_order", resid < 1e-9, resid)


def check_checkpoint_roundtrip(_):
    import tempfile

    model, centers, patches, vis, msk = _tiny_training_setup(seed=5)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.lcm")
        model32 = mpm.build_model(model.config, np.random.default_rng(5))
        mpm.save_checkpoint(model32, path)
        clone = mpm.build_model(model.config, np.random.default_rng(99))
        mpm.load_checkpoint(path, clone)
        for (na, pa), (_, pb) in zip(parameter_list(model32), parameter_list(clone)):
            if not np.array_equal(pa.data, pb.data):
                return _result("mpm.checkpoint_roundtrip_bitwise", False, detail=na)
    return _result("mpm.checkpoint_roundtrip_bitwise", True, 0.0)


def check_training_determinism(_):
    def run():
        model, centers, patches, vis, msk = _tiny_training_setup(seed=6)
        model32 = mpm.build_model(model.config, np.random.default_rng(6))
        tc = mpm.TrainConfig(batch_size=2, rng_seed=0, n_patches=16)
        opt = mpm.AdamWState()
        batch = {"centers": centers, "patches": patches, "visible": vis, "masked": msk}
        return [mpm.pretrain_step(batch, model32, opt, tc, lr=1e-3) for _ in range(3)]

    a, b = run(), run()
    same = a == b
    return _result("mpm.seeded_training_determinism", same, 0.0 if same else 1.0,
                   f"loss sequences {a} vs {b}")


def check_injected_fault(_):
    """Deliberately wrong gradient; must fail (used to prove failures surface)."""
    rng = np.random.default_rng(12)
    a = T.Tensor(rng.normal(size=(3, 3)), requires_grad=True)

    def buggy():
        out = a.data * a.data

        def bwd(g):
            return (2.02 * g * a.data,)

        return T.tsum(T._record("buggy_square", (a,), out, bwd))

    rep = T.finite_difference_check(buggy, [a], eps=1e-5, tol=1e-4)
    return _result("injected.gradient_fault", rep.passed, rep.max_rel_err,
                   "intentionally scaled gradient; this check is supposed to fail")


REGISTRY = [
    check_core_op_gradients,
    check_matmul_identity_bitwise,
    check_softmax_rows,
    check_backward_idempotent,
    check_fps_maxmin,
    check_knn_bruteforce,
    check_chamfer,
    check_hilbert_adjacency,
    check_orderings_are_permutations,
    check_encoder_equivariance,
    check_topk_identities,
    check_layer_gradients,
    check_count_params_cross,
    check_flop_slopes,
    check_frozen_scan_linear,
    check_scan_causality,
    check_scan_stability,
    check_lcffn_permutation,
    check_ordering_dependence,
    check_decoder_gradients,
    check_theorem_premise,
    check_e2e_gradients,
    check_mask_arithmetic,
    check_loss_patch_permutation,
    check_checkpoint_roundtrip,
    check_training_determinism,
]


def run_propcheck(cfg: RunConfig, out_dir=None) -> dict:
    out_dir = out_dir or cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    n_seeds = cfg["propcheck.seeds"]
    checks = list(REGISTRY)
    if cfg["propcheck.inject_fault"] == "grad_scale":
        checks.append(check_injected_fault)
    results = []
    for fn in checks:
        t0 = time.perf_counter()
        try:
            res = fn(n_seeds)
        except Exception as exc:  # a crash is a failure, not an abort
            res = _result(fn.__name__, False, detail=f"exception: {exc!r}")
        res["seconds"] = round(time.perf_counter() - t0, 3)
        results.append(res)
        log.info("%-45s %s  residual=%s (%.2fs)", res["name"],
                 "PASS" if res["passed"] else "FAIL", res["residual"], res["seconds"])
    report = {
        "n_checks": len(results),
        "n_failed": sum(not r["passed"] for r in results),
        "passed": all(r["passed"] for r in results),
        "checks": results,
    }
    write_json(report, out_dir, "propcheck_report.json")
    return report
