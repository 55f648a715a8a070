"""Acceptance criteria, one test per criterion, each printing a PASS line.

Criteria 8-10 train real models and are marked `slow`; everything else is
analytic or property-based and runs in seconds. Stated runtime budgets
assume an 8-worker reference machine; measured wall time is printed.
"""

import json
import time

import numpy as np
import pytest

from lcm import costs, mpm
from lcm import tensor as T
from lcm.decoder import (
    DecoderConfig, LCFFNWeights, SSMWeights, lcffn, linearity_check, ssm_sublayer,
)
from lcm.encoder import (
    AttentionWeights, EncoderConfig, EncoderLayerWeights, encoder_layer_forward,
    multihead_attention, topk_attention_mask,
)
from lcm.geometry import (
    OrderingSpec, PointCloud, chamfer_l2, farthest_point_sample, knn_indices,
)
from lcm.harness.config import load_config
from lcm.harness.finetune import run_finetune
from lcm.harness.ordering import run_ordering_study
from lcm.harness.pretrain import run_pretrain
from lcm.harness.propcheck import run_propcheck
from lcm.layers import parameter_list

from oracles import chamfer_double_loop, fps_is_greedy_maxmin, knn_bruteforce


def report(criterion, passed, detail, t0):
    status = "PASS" if passed else "FAIL"
    print(f"\n[criterion {criterion:>2}] {status}  ({time.perf_counter() - t0:.1f}s)  {detail}")
    assert passed, detail


@pytest.fixture(scope="session")
def pretrain_run(tmp_path_factory):
    """Criterion 8's full default run: 2000 clouds, r=0.4, 50 epochs."""
    out = tmp_path_factory.mktemp("pretrain_full")
    cfg = load_config("configs/pretrain_default.cfg", overrides=[f"out={out}"])
    t0 = time.perf_counter()
    summary = run_pretrain(cfg, out_dir=str(out))
    summary["wall_seconds"] = time.perf_counter() - t0
    summary["out"] = str(out)
    return summary


def test_criterion_1_parameter_reproduction():
    t0 = time.perf_counter()
    p_t = costs.count_params(costs.paper_transformer_classifier())
    p_l = costs.count_params(costs.paper_lcm_classifier())
    reduction = 1 - p_l / p_t
    ok = (abs(p_t - 22.1e6) <= 0.05 * 22.1e6) and p_l <= 3.2e6 and reduction >= 0.85
    report(1, ok, f"transformer {p_t/1e6:.3f}M (target 22.1M±5%), "
                  f"compact {p_l/1e6:.3f}M (cap 3.2M), reduction {100*reduction:.1f}%", t0)


def test_criterion_2_flop_reproduction():
    t0 = time.perf_counter()
    f_t = costs.count_flops(costs.paper_transformer_classifier(), 2048, 128, 32)
    f_l = costs.count_flops(costs.paper_lcm_classifier(), 2048, 128, 32)
    ratio = f_l / f_t
    report(2, ratio <= 0.35,
           f"{f_t/1e9:.2f}G vs {f_l/1e9:.2f}G at 2048 pts / 128 patches "
           f"(ratio {ratio:.3f} <= 0.35; multiply-add = 2 FLOPs convention)", t0)


def test_criterion_3_complexity_scaling():
    t0 = time.perf_counter()
    ns = [64, 128, 256, 512, 1024]
    st, rt = costs.fit_loglog(ns, [costs.mixing_flops(costs.paper_transformer_classifier(), n) for n in ns])
    sl, rl = costs.fit_loglog(ns, [costs.mixing_flops(costs.paper_lcm_classifier(), n) for n in ns])
    ok = st >= 1.8 and rt >= 0.98 and sl <= 1.15 and rl >= 0.98
    report(3, ok, f"token-mixing slopes: attention {st:.3f} (R2 {rt:.4f}) >= 1.8, "
                  f"local {sl:.3f} (R2 {rl:.4f}) <= 1.15", t0)


def test_criterion_4_linearity_premise():
    t0 = time.perf_counter()
    rep = linearity_check(trials=100, tol=1e-8, n_visible=24, n_masked=40, seed=0)
    ok = rep.ssm_linear and rep.attention_nonlinear_gap > 1e-3
    report(4, ok, f"frozen-scan superposition residual {rep.ssm_max_residual:.2e} < 1e-8 "
                  f"over {rep.trials} pairs; attention gap {rep.attention_nonlinear_gap:.3e} > 1e-3", t0)


def test_criterion_5_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {}

    def fd(name, f, params, tol=1e-4):
        rep = T.finite_difference_check(f, params, eps=1e-5, tol=tol)
        worst[name] = rep.max_rel_err
        return rep.passed

    ok = True
    tokens = T.Tensor(rng.normal(size=(6, 8)), requires_grad=True)
    centers = rng.normal(size=(6, 3))
    # LAL + FFN + layer norm inside one compact encoder layer
    lw = EncoderLayerWeights.init(
        EncoderConfig(variant="LCM", n_layers=1, d=8, d_h=4, d_ffn=12, k_local=3), rng,
        dtype=np.float64)
    ok &= fd("lal_ffn_layernorm",
             lambda: T.tsum(T.square(encoder_layer_forward(tokens, None, centers, lw))),
             [p for _, p in parameter_list(lw)] + [tokens])
    # attention (key bias has a provably zero gradient; checked by invariance
    # tests, excluded from the fd sweep)
    aw = AttentionWeights.init(8, 2, rng, dtype=np.float64)
    ok &= fd("attention",
             lambda: T.tsum(T.square(multihead_attention(tokens, aw))),
             [p for n, p in parameter_list(aw) if n != "wk.b"] + [tokens])
    # selective SSM scan sublayer
    sw = SSMWeights.init(8, 8, 4, rng, dtype=np.float64)
    ok &= fd("ssm_selective_scan",
             lambda: T.tsum(T.square(ssm_sublayer(tokens, sw))),
             [p for _, p in parameter_list(sw)] + [tokens])
    # LCFFN
    cw = LCFFNWeights.init(8, 4, 3, rng, dtype=np.float64)
    ok &= fd("lcffn", lambda: T.tsum(T.square(lcffn(tokens, centers, cw))),
             [p for _, p in parameter_list(cw)] + [tokens])
    # patch embedding
    ew = mpm.EmbedWeights.init(6, 8, rng, dtype=np.float64)
    patch = T.Tensor(rng.normal(size=(4, 5, 3)), requires_grad=True)
    ok &= fd("embed", lambda: T.tsum(T.square(mpm.embed_patches(patch, ew))),
             [p for _, p in parameter_list(ew)] + [patch])
    # positional encoding
    pw = mpm.PosEncWeights(epe=mpm.PosEncMLP.init(6, 8, rng, dtype=np.float64), dpe=None)
    coords = T.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    ok &= fd("positional_encoding",
             lambda: T.tsum(T.square(mpm.positional_encoding(coords, pw, "ENCODER"))),
             [p for _, p in parameter_list(pw)] + [coords])
    # reconstruction head through the Chamfer loss
    hw = mpm.ReconHead.init(8, 8, 4, rng, dtype=np.float64)
    feats = T.Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    target = T.Tensor(rng.normal(size=(3, 4, 3)))
    from lcm.geometry import chamfer_batched

    ok &= fd("recon_head_chamfer",
             lambda: T.tmean(chamfer_batched(mpm.reconstruct(feats, hw), target)),
             [p for _, p in parameter_list(hw)] + [feats])
    # Chamfer loss w.r.t. both point sets
    a = T.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    ok &= fd("chamfer", lambda: chamfer_l2(a, b), [a, b])
    detail = "; ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(5, ok and max(worst.values()) < 1e-4, f"max rel err per layer type: {detail}", t0)


def test_criterion_6_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    for trial in range(200):
        pts = rng.normal(size=(int(rng.integers(4, 65)), 3))
        n = int(rng.integers(2, len(pts) + 1))
        _, idx = farthest_point_sample(PointCloud(pts), n)
        assert fps_is_greedy_maxmin(pts, idx.tolist()), f"fps trial {trial}"
    for trial in range(200):
        q = rng.normal(size=(int(rng.integers(1, 65)), 3))
        keys = rng.normal(size=(int(rng.integers(2, 65)), 3))
        k = int(rng.integers(1, len(keys) + 1))
        assert np.array_equal(knn_indices(q, keys, k), knn_bruteforce(q, keys, k)), \
            f"knn trial {trial}"
    worst = 0.0
    for trial in range(200):
        a = rng.normal(size=(int(rng.integers(1, 9)), 3))
        b = rng.normal(size=(int(rng.integers(1, 9)), 3))
        worst = max(worst, abs(chamfer_l2(a, b).item() - chamfer_double_loop(a, b)))
    report(6, worst < 1e-12,
           f"FPS max-min exhaustive, KNN exact, Chamfer within {worst:.1e} of the "
           f"double loop; 200 random instances each", t0)


def test_criterion_7_topk_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    n = 12
    w = AttentionWeights.init(16, 4, rng, dtype=np.float64)
    tokens = T.Tensor(rng.normal(size=(n, 16)))
    centers = rng.normal(size=(n, 3))
    full = multihead_attention(tokens, w).data
    noop = multihead_attention(tokens, w, mask=topk_attention_mask(centers, n, "GEOMETRY")).data
    bitwise = np.array_equal(full, noop)
    support_ok = True
    sum_resid = 0.0
    for k in (1, 4, 7):
        scores = rng.normal(size=(n, n))
        probs = T.softmax_rows(T.Tensor(scores + topk_attention_mask(scores, k, "FEATURE"))).data
        support_ok &= bool(np.all((probs > 0).sum(axis=1) <= k))
        sum_resid = max(sum_resid, float(np.max(np.abs(probs.sum(axis=1) - 1.0))))
    self_only = multihead_attention(tokens, w, mask=topk_attention_mask(centers, 1, "GEOMETRY")).data
    v = tokens.data @ w.wv.w.data + w.wv.b.data
    self_resid = float(np.max(np.abs(self_only - (v @ w.wo.w.data + w.wo.b.data))))
    ok = bitwise and support_ok and sum_resid < 1e-12 and self_resid < 1e-12
    report(7, ok, f"K=N bitwise no-op: {bitwise}; row support <= K with sums within "
                  f"{sum_resid:.1e}; geometric K=1 self-only residual {self_resid:.1e}", t0)


@pytest.mark.slow
def test_criterion_8_desk_scale_pretraining(pretrain_run, tmp_path):
    t0 = time.perf_counter()
    frac = pretrain_run["val_loss_final"] / pretrain_run["val_loss_epoch0"]
    # determinism probe: the same seeded path, shortened, must reproduce bitwise
    probe = [
        "data.train_per_class=16", "data.val_per_class=4",
        "train.epochs=2", "train.warmup_epochs=1", "train.batch_size=32",
    ]
    curves = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        cfg = load_config("configs/pretrain_default.cfg", overrides=[f"out={out}", *probe])
        run_pretrain(cfg, out_dir=str(out))
        rows = open(out / "pretrain_metrics.csv").read().splitlines()
        curves.append([",".join(r.split(",")[:4]) for r in rows])
    deterministic = curves[0] == curves[1]
    ok = frac <= 0.40 and deterministic
    report(8, ok, f"default config (2000 clouds, r=0.4, 50 epochs): val chamfer "
                  f"{pretrain_run['val_loss_epoch0']:.4f} -> {pretrain_run['val_loss_final']:.4f} "
                  f"({100*frac:.1f}% of epoch 0, need <= 40%); deterministic rerun: "
                  f"{deterministic}; full run took {pretrain_run['wall_seconds']:.0f}s", t0)


@pytest.mark.slow
def test_criterion_9_desk_scale_finetuning(pretrain_run, tmp_path):
    t0 = time.perf_counter()
    ckpt = pretrain_run["checkpoint"]
    # (a) full-label fine-tune from the pretrained encoder reaches 90%
    cfg = load_config("configs/finetune_default.cfg", overrides=[
        f"out={tmp_path / 'full'}", f"finetune.init={ckpt}",
        "finetune.val_every=4",
    ])
    full = run_finetune(cfg, out_dir=str(tmp_path / "full"))
    acc = full["per_seed"][0]["pretrained"]
    # (b) 5-seed direction check on a 10% label split, identical budgets.
    # Run as a linear probe at a budget where feature quality shows: with
    # full fine-tuning this benchmark saturates both variants at 100% and
    # the comparison degenerates to a tie.
    cfg_cmp = load_config("configs/finetune_default.cfg", overrides=[
        f"out={tmp_path / 'compare'}", f"finetune.init={ckpt}",
        "finetune.compare=true", "finetune.seeds=0,1,2,3,4",
        "finetune.label_fraction=0.1", "finetune.frozen=true",
        "finetune.epochs=6", "finetune.batch_size=16",
        "finetune.lr=1e-3", "finetune.warmup_epochs=2",
        "finetune.val_every=6",
    ])
    cmp_summary = run_finetune(cfg_cmp, out_dir=str(tmp_path / "compare"))
    mean_pre = cmp_summary["mean_pretrained"]
    mean_scratch = cmp_summary["mean_scratch"]
    ok = acc >= 0.90 and mean_pre >= mean_scratch
    report(9, ok, f"full-label val accuracy {acc:.4f} (>= 0.90); 10%-label linear-probe "
                  f"means over 5 seeds: pretrained {mean_pre:.4f} vs scratch "
                  f"{mean_scratch:.4f} (direction check)", t0)


@pytest.mark.slow
def test_criterion_10_ordering_study(tmp_path):
    t0 = time.perf_counter()
    cfg = load_config(None, overrides=[f"out={tmp_path}"])
    rep = run_ordering_study(cfg, out_dir=str(tmp_path))
    cost = rep["combined_order_cost"]
    ok = (rep["n_cells"] == 24 and rep["ffn_spread_all_positive"]
          and cost["within_25pct_of_q"])
    soft = rep["lcffn_spread_leq_ffn_count"]
    report(10, ok, f"24 cells (4 orderings x FFN/LCFFN x 3 seeds); FFN spread positive in "
                   f"all seeds: {rep['ffn_spread_all_positive']}; LCFFN spread <= FFN in "
                   f"{soft}/3 seeds (soft criterion, reported); combined-order scan cost "
                   f"{cost['ratio']:.2f}x vs q={cost['q']} (+/-25%)", t0)


def test_criterion_11_infrastructure(tmp_path):
    t0 = time.perf_counter()
    # checkpoint round trip, bitwise
    enc = EncoderConfig(variant="LCM", n_layers=1, d=16, d_h=8, d_ffn=16, k_local=3)
    dec = DecoderConfig(m_layers=1, d=16, d_inner=16, d_state=4, d_h=8, k_local=3,
                        ffn_kind="LCFFN", ordering=OrderingSpec(("Y",)))
    mc = mpm.ModelConfig(encoder=enc, decoder=dec, k_group=8, embed_hidden=8, pe_hidden=8)
    model = mpm.build_model(mc, np.random.default_rng(0))
    path = tmp_path / "m.lcm"
    mpm.save_checkpoint(model, path)
    clone = mpm.build_model(mc, np.random.default_rng(123))
    mpm.load_checkpoint(path, clone)
    bitwise = all(np.array_equal(a.data, b.data) for (_, a), (_, b)
                  in zip(parameter_list(model), parameter_list(clone)))
    # seeded rerun reproduces metrics files modulo the seconds column
    probe = ["data.train_per_class=4", "data.val_per_class=2", "data.n_points=128",
             "model.k_group=8", "train.n_patches=16", "train.epochs=1",
             "train.warmup_epochs=1", "train.batch_size=8", "model.d=16",
             "model.d_h=8", "model.d_ffn=16", "model.embed_hidden=8",
             "model.pe_hidden=8", "model.d_inner=16", "model.d_state=4",
             "model.dec_d_h=8", "model.k_local=3"]
    curves = []
    for tag in ("r1", "r2"):
        out = tmp_path / tag
        run_pretrain(load_config(None, overrides=[f"out={out}", *probe]), out_dir=str(out))
        rows = open(out / "pretrain_metrics.csv").read().splitlines()
        curves.append([",".join(r.split(",")[:4]) for r in rows])
    reproducible = curves[0] == curves[1]
    # propcheck exit semantics: clean suite passes, injected fault fails
    clean = run_propcheck(load_config(None, overrides=[f"out={tmp_path / 'p1'}",
                                                       "propcheck.seeds=2"]),
                          out_dir=str(tmp_path / "p1"))
    faulty = run_propcheck(load_config(None, overrides=[f"out={tmp_path / 'p2'}",
                                                        "propcheck.seeds=2",
                                                        "propcheck.inject_fault=grad_scale"]),
                           out_dir=str(tmp_path / "p2"))
    fault_named = [c["name"] for c in faulty["checks"] if not c["passed"]] == ["injected.gradient_fault"]
    listed = json.load(open(tmp_path / "p1" / "propcheck_report.json"))
    registry_audit = listed["n_checks"] >= 26 and all("residual" in c for c in listed["checks"])
    ok = bitwise and reproducible and clean["passed"] and not faulty["passed"] and \
        fault_named and registry_audit
    report(11, ok, f"checkpoint bitwise: {bitwise}; seeded rerun identical: {reproducible}; "
                   f"propcheck clean pass / fault fail with named check: "
                   f"{clean['passed']}/{fault_named}; registry enumerated with residuals: "
                   f"{registry_audit}", t0)
