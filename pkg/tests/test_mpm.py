import numpy as np
import pytest

from lcm import mpm
from lcm import tensor as T
from lcm.decoder import DecoderConfig
from lcm.encoder import EncoderConfig
from lcm.errors import ConfigError, CountError, DataError, FormatError
from lcm.geometry import OrderingSpec, PointCloud, synth_shape
from lcm.layers import parameter_list


def tiny_model_config(with_decoder=True, n_classes=None, d=16, k_group=8):
    enc = EncoderConfig(variant="LCM", n_layers=2, d=d, d_h=8, d_ffn=16, k_local=3)
    dec = None
    if with_decoder:
        dec = DecoderConfig(m_layers=2, d=d, d_inner=d, d_state=4, d_h=8, k_local=3,
                            ffn_kind="LCFFN", ordering=OrderingSpec(("Y",)))
    return mpm.ModelConfig(encoder=enc, decoder=dec, k_group=k_group, embed_hidden=8,
                           pe_hidden=8, n_classes=n_classes, head_hidden=(16, 16))


def tiny_batch(n_clouds, n_points=128, n_patches=16, k_group=8, seed=0, r=0.4):
    clouds = [synth_shape(["sphere", "cube", "torus", "cylinder"][i % 4], n_points, 0.01,
                          rng_seed=seed + i) for i in range(n_clouds)]
    pts = np.stack([c.points for c in clouds])
    cidx, gidx = mpm.build_patch_index_cache(pts, n_patches, k_group)
    centers, patches = mpm.patches_from_cache(pts, cidx, gidx)
    vis, msk = [], []
    for i in range(n_clouds):
        v, m = mpm.MaskSpec(r, rng_seed=seed * 1000 + i).split(n_patches)
        vis.append(v)
        msk.append(m)
    return {
        "centers": centers, "patches": patches,
        "visible": np.stack(vis), "masked": np.stack(msk),
        "points": pts, "center_idx": cidx, "group_idx": gidx,
        "labels": np.array([i % 4 for i in range(n_clouds)]),
    }


class TestMasking:
    def test_split_arithmetic(self):
        vis, msk = mpm.MaskSpec(0.4, rng_seed=1).split(64)
        assert len(vis) == 26 and len(msk) == 38

    def test_same_seed_same_split(self):
        a = mpm.MaskSpec(0.4, rng_seed=7).split(64)
        b = mpm.MaskSpec(0.4, rng_seed=7).split(64)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_partition_is_disjoint_cover(self):
        for r in (0.1, 0.4, 0.6, 0.9):
            for n in (8, 33, 64):
                vis, msk = mpm.MaskSpec(r, rng_seed=0).split(n)
                assert len(vis) + len(msk) == n
                assert np.array_equal(np.sort(np.concatenate([vis, msk])), np.arange(n))

    def test_invalid_ratio(self):
        with pytest.raises(ConfigError):
            mpm.MaskSpec(0.0)
        with pytest.raises(ConfigError):
            mpm.MaskSpec(1.0)

    def test_degenerate_split_rejected(self):
        with pytest.raises(CountError):
            mpm.MaskSpec(0.01).split(4)


class TestPatchify:
    def test_patchify_and_mask(self):
        pc = synth_shape("sphere", 256, 0.0, rng_seed=0)
        ps = mpm.patchify_and_mask(pc, 16, 8, mpm.MaskSpec(0.4, rng_seed=3))
        ps.validate()
        assert ps.centers.shape == (16, 3)
        assert ps.patches.shape == (16, 8, 3)
        # relative coordinates stay within the patch radius scale
        assert np.abs(ps.patches).max() < 2.0

    def test_counts_exceeding_cloud(self):
        pc = synth_shape("sphere", 64, 0.0, rng_seed=0)
        with pytest.raises(CountError):
            mpm.patchify_and_mask(pc, 65, 8, mpm.MaskSpec(0.4))

    def test_cached_indices_match_direct(self):
        pc = synth_shape("torus", 256, 0.01, rng_seed=5)
        ps = mpm.patchify_and_mask(pc, 16, 8, mpm.MaskSpec(0.4, rng_seed=0))
        cidx, gidx = mpm.build_patch_index_cache(pc.points[None], 16, 8)
        centers, patches = mpm.patches_from_cache(pc.points[None], cidx, gidx)
        assert np.array_equal(centers[0], ps.centers)
        assert np.array_equal(patches[0], ps.patches)

    def test_cache_valid_under_rigid_augmentation(self):
        pc = synth_shape("cube", 256, 0.01, rng_seed=6)
        cidx, gidx = mpm.build_patch_index_cache(pc.points[None], 16, 8)
        aug = mpm.augment_cloud(pc.points, np.random.default_rng(1))
        centers, patches = mpm.patches_from_cache(aug[None], cidx, gidx)
        direct = mpm.patchify_and_mask(PointCloud(aug), 16, 8, mpm.MaskSpec(0.4))
        assert np.allclose(np.sort(centers[0].ravel()), np.sort(direct.centers.ravel()), atol=1e-12)
        assert abs(np.sort(patches[0].ravel())
                   - np.sort(direct.patches.ravel())).max() < 1e-12


class TestEmbedAndPE:
    def test_embed_point_permutation_invariance(self):
        rng = np.random.default_rng(0)
        w = mpm.EmbedWeights.init(8, 16, rng, dtype=np.float64)
        patch = rng.normal(size=(4, 8, 3))
        base = mpm.embed_patches(T.Tensor(patch), w).data
        shuffled = patch[:, rng.permutation(8), :]
        assert np.array_equal(mpm.embed_patches(T.Tensor(shuffled), w).data, base)

    def test_zero_patch_zero_embedding(self):
        rng = np.random.default_rng(1)
        w = mpm.EmbedWeights.init(8, 16, rng, dtype=np.float64)
        out = mpm.embed_patches(T.Tensor(np.zeros((2, 8, 3))), w).data
        # zero biases make the per-point MLP map zero to zero
        assert np.array_equal(out, np.zeros((2, 16)))

    def test_embed_gradient(self):
        rng = np.random.default_rng(2)
        w = mpm.EmbedWeights.init(4, 6, rng, dtype=np.float64)
        patch = T.Tensor(rng.normal(size=(3, 5, 3)), requires_grad=True)
        params = [p for _, p in parameter_list(w)]
        report = T.finite_difference_check(
            lambda: T.tsum(T.square(mpm.embed_patches(patch, w))), params + [patch],
            eps=1e-5, tol=1e-4,
        )
        assert report.passed

    def test_pe_duplicate_coords_and_separate_weights(self):
        rng = np.random.default_rng(3)
        w = mpm.PosEncWeights(
            epe=mpm.PosEncMLP.init(8, 16, rng, dtype=np.float64),
            dpe=mpm.PosEncMLP.init(8, 16, rng, dtype=np.float64),
        )
        coords = np.array([[0.1, 0.2, 0.3], [0.1, 0.2, 0.3], [0.5, 0.5, 0.5]])
        enc = mpm.positional_encoding(coords, w, "ENCODER").data
        assert np.array_equal(enc[0], enc[1])
        dec = mpm.positional_encoding(coords, w, "DECODER").data
        assert np.max(np.abs(enc - dec)) > 1e-3

    def test_pe_gradient(self):
        rng = np.random.default_rng(4)
        w = mpm.PosEncWeights(epe=mpm.PosEncMLP.init(6, 8, rng, dtype=np.float64), dpe=None)
        coords = T.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        params = [p for _, p in parameter_list(w)]
        report = T.finite_difference_check(
            lambda: T.tsum(T.square(mpm.positional_encoding(coords, w, "ENCODER"))),
            params + [coords], eps=1e-5, tol=1e-4,
        )
        assert report.passed


class TestReconHead:
    def test_output_shape_and_zero_weights(self):
        rng = np.random.default_rng(5)
        head = mpm.ReconHead.init(16, 16, 8, rng, dtype=np.float64)
        r = T.Tensor(rng.normal(size=(6, 16)))
        out = mpm.reconstruct(r, head)
        assert out.shape == (6, 8, 3)
        for _, p in parameter_list(head):
            p.data = np.zeros_like(p.data)
        assert np.array_equal(mpm.reconstruct(r, head).data, np.zeros((6, 8, 3)))

    def test_chamfer_gradient_through_head(self):
        from lcm.geometry import chamfer_batched

        rng = np.random.default_rng(6)
        head = mpm.ReconHead.init(8, 8, 4, rng, dtype=np.float64)
        r = T.Tensor(rng.normal(size=(3, 8)))
        target = T.Tensor(rng.normal(size=(3, 4, 3)))
        params = [p for _, p in parameter_list(head)]
        report = T.finite_difference_check(
            lambda: T.tmean(chamfer_batched(mpm.reconstruct(r, head), target)),
            params, eps=1e-6, tol=1e-4,
        )
        assert report.passed


class TestAdamW:
    def test_zero_grad_no_decay_keeps_params(self):
        p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = mpm.AdamWState()
        grads = {"p": np.zeros(2)}
        mpm.adamw_update([("p", p)], grads, state, lr=0.1, weight_decay=0.0)
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        rng = np.random.default_rng(7)
        vals = rng.normal(size=5)
        g = rng.normal(size=5)
        p = T.Tensor(vals.copy(), requires_grad=True)
        state = mpm.AdamWState()
        mpm.adamw_update([("p", p)], {"p": g}, state, lr=0.01, weight_decay=0.0, eps=1e-12)
        step = vals - p.data
        assert np.max(np.abs(step - 0.01 * np.sign(g))) < 1e-6

    def test_decay_only_shrinks(self):
        p = T.Tensor(np.array([2.0, -4.0]), requires_grad=True)
        state = mpm.AdamWState()
        mpm.adamw_update([("p", p)], {"p": np.zeros(2)}, state, lr=0.1, weight_decay=0.5)
        assert np.max(np.abs(p.data - np.array([2.0, -4.0]) * (1 - 0.1 * 0.5))) < 1e-12

    def test_cosine_schedule(self):
        lrs = [mpm.cosine_lr(s, total_steps=100, warmup_steps=10, base_lr=1.0) for s in range(100)]
        assert lrs[0] == pytest.approx(0.1)
        assert lrs[9] == pytest.approx(1.0)
        assert max(lrs) <= 1.0
        assert lrs[-1] < 0.01
        assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))


class TestPretrainStep:
    def test_loss_finite_positive_and_decreasing_on_repeat(self):
        cfg = tiny_model_config()
        model = mpm.build_model(cfg, np.random.default_rng(0))
        tc = mpm.TrainConfig(batch_size=8, rng_seed=0, n_patches=16, lr=1e-3)
        batch = tiny_batch(8)
        opt = mpm.AdamWState()
        first = mpm.pretrain_step(batch, model, opt, tc, lr=1e-3)
        assert np.isfinite(first) and first > 0
        for _ in range(30):
            last = mpm.pretrain_step(batch, model, opt, tc, lr=1e-3)
        assert last < first

    def test_overfit_single_batch(self):
        cfg = tiny_model_config()
        model = mpm.build_model(cfg, np.random.default_rng(1))
        tc = mpm.TrainConfig(batch_size=8, rng_seed=0, n_patches=16, lr=2e-3)
        batch = tiny_batch(8, seed=3)
        opt = mpm.AdamWState()
        first = mpm.pretrain_step(batch, model, opt, tc, lr=2e-3)
        for _ in range(199):
            last = mpm.pretrain_step(batch, model, opt, tc, lr=2e-3)
        assert last <= 0.1 * first, (first, last)

    def test_seeded_determinism(self):
        def run():
            cfg = tiny_model_config()
            model = mpm.build_model(cfg, np.random.default_rng(2))
            tc = mpm.TrainConfig(batch_size=6, rng_seed=9, n_patches=16)
            opt = mpm.AdamWState()
            clouds = [PointCloud(synth_shape("sphere", 128, 0.01, rng_seed=i).points)
                      for i in range(6)]
            losses = []
            for step in range(3):
                losses.append(mpm.pretrain_step(
                    clouds, model, opt, tc, lr=1e-3,
                    patchify_fn=lambda pc, seed: mpm.patchify_and_mask(
                        pc, 16, 8, mpm.MaskSpec(0.4, rng_seed=seed)),
                    step_seed=step,
                ))
            return losses

        assert run() == run()

    def test_worker_chunking_deterministic(self):
        cfg = tiny_model_config()
        batch = tiny_batch(8, seed=11)

        def run(workers):
            model = mpm.build_model(cfg, np.random.default_rng(3))
            tc = mpm.TrainConfig(batch_size=8, rng_seed=0, workers=workers, n_patches=16)
            opt = mpm.AdamWState()
            return [mpm.pretrain_step(batch, model, opt, tc, lr=1e-3) for _ in range(3)]

        assert run(2) == run(2)

    def test_loss_invariant_to_point_order_within_patches(self):
        cfg = tiny_model_config()
        model = mpm.build_model(cfg, np.random.default_rng(4))
        batch = tiny_batch(4, seed=13)
        loss_a = mpm.pretrain_forward(
            model, batch["centers"], batch["patches"], batch["visible"], batch["masked"]
        ).item()
        rng = np.random.default_rng(5)
        shuffled = batch["patches"].copy()
        b, n, k, _ = shuffled.shape
        for i in range(b):
            for j in range(n):
                shuffled[i, j] = shuffled[i, j, rng.permutation(k)]
        loss_b = mpm.pretrain_forward(
            model, batch["centers"], shuffled, batch["visible"], batch["masked"]
        ).item()
        assert loss_a == pytest.approx(loss_b, abs=1e-6)


class TestEndToEndGradients:
    def test_spot_checks_per_layer_type(self):
        cfg = tiny_model_config()
        model = mpm.build_model(cfg, np.random.default_rng(6), dtype=np.float64)
        batch = tiny_batch(2, n_points=96, n_patches=16, seed=17)
        params = parameter_list(model)
        groups = {}
        for name, p in params:
            key = name.split(".")[0]
            groups.setdefault(key, []).append((name, p))

        def f():
            return mpm.pretrain_forward(
                model, batch["centers"], batch["patches"], batch["visible"],
                batch["masked"], dtype=np.float64,
            )

        rng = np.random.default_rng(0)
        for key, members in groups.items():
            chosen = [p for _, p in members[:4]]
            report = T.finite_difference_check(
                f, chosen, eps=1e-5, tol=1e-3, max_coords_per_param=6, rng=rng
            )
            assert report.passed, (key, report.max_rel_err)
            assert report.n_coords >= 20 or sum(p.size for p in chosen) < 20


class TestClassifier:
    def test_linearly_separable_toy_reaches_full_accuracy(self):
        # two classes of tiny clouds offset along z: separable by pooling alone
        cfg = tiny_model_config(with_decoder=False, n_classes=2)
        model = mpm.build_model(cfg, np.random.default_rng(7))
        rng = np.random.default_rng(8)
        pts = []
        labels = []
        for i in range(32):
            base = rng.normal(size=(128, 3)) * 0.2
            base[:, 2] += 1.0 if i % 2 else -1.0
            pts.append(base)
            labels.append(i % 2)
        pts = np.stack(pts)
        cidx, gidx = mpm.build_patch_index_cache(pts, 16, 8)
        dataset = {"points": pts, "labels": np.array(labels), "center_idx": cidx, "group_idx": gidx}
        tc = mpm.TrainConfig(batch_size=16, rng_seed=0, lr=5e-3, warmup_epochs=0, epochs=20)
        opt = mpm.AdamWState()
        acc = 0.0
        for epoch in range(20):
            metrics = mpm.finetune_classifier_epoch(model, opt, dataset, tc, epoch, augment=False)
            acc = metrics["train_acc"]
            if acc == 1.0:
                break
        assert acc == 1.0

    def test_frozen_encoder_still_learns_head(self):
        cfg = tiny_model_config(with_decoder=False, n_classes=4)
        model = mpm.build_model(cfg, np.random.default_rng(9))
        data = tiny_batch(16, seed=23)
        dataset = {"points": data["points"], "labels": data["labels"],
                   "center_idx": data["center_idx"], "group_idx": data["group_idx"]}
        tc = mpm.TrainConfig(batch_size=8, rng_seed=0, lr=5e-3, warmup_epochs=0, epochs=8)
        opt = mpm.AdamWState()
        enc_before = model.encoder.layers[0].lal.down.w.data.copy()
        first = mpm.finetune_classifier_epoch(model, opt, dataset, tc, 0, frozen_encoder=True,
                                              augment=False)["train_loss"]
        for epoch in range(1, 8):
            last = mpm.finetune_classifier_epoch(model, opt, dataset, tc, epoch,
                                                 frozen_encoder=True, augment=False)["train_loss"]
        assert last < first
        assert np.array_equal(enc_before, model.encoder.layers[0].lal.down.w.data)

    def test_label_out_of_range(self):
        cfg = tiny_model_config(with_decoder=False, n_classes=2)
        model = mpm.build_model(cfg, np.random.default_rng(10))
        data = tiny_batch(4, seed=29)
        dataset = {"points": data["points"], "labels": np.array([0, 1, 2, 0]),
                   "center_idx": data["center_idx"], "group_idx": data["group_idx"]}
        tc = mpm.TrainConfig(batch_size=4, rng_seed=0)
        with pytest.raises(DataError):
            mpm.finetune_classifier_epoch(model, opt_state=mpm.AdamWState(), dataset=dataset,
                                          cfg=tc, epoch=0)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        cfg = tiny_model_config(n_classes=4)
        model = mpm.build_model(cfg, np.random.default_rng(11))
        path = tmp_path / "model.lcm"
        opt = mpm.AdamWState(step=17)
        opt.m["embed.lin1.w"] = np.ones((3, 8), dtype=np.float32)
        opt.v["embed.lin1.w"] = np.full((3, 8), 0.5, dtype=np.float32)
        mpm.save_checkpoint(model, path, opt_state=opt)
        clone = mpm.build_model(cfg, np.random.default_rng(999))
        opt2 = mpm.AdamWState()
        mpm.load_checkpoint(path, clone, opt_state=opt2)
        for (na, pa), (nb, pb) in zip(parameter_list(model), parameter_list(clone)):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)
        assert opt2.step == 17
        assert np.array_equal(opt2.m["embed.lin1.w"], opt.m["embed.lin1.w"])

    def test_forward_identical_after_roundtrip(self, tmp_path):
        cfg = tiny_model_config()
        model = mpm.build_model(cfg, np.random.default_rng(12))
        batch = tiny_batch(2, seed=31)
        before = mpm.pretrain_forward(model, batch["centers"], batch["patches"],
                                      batch["visible"], batch["masked"]).item()
        path = tmp_path / "m.lcm"
        mpm.save_checkpoint(model, path)
        clone = mpm.build_model(cfg, np.random.default_rng(777))
        mpm.load_checkpoint(path, clone)
        after = mpm.pretrain_forward(clone, batch["centers"], batch["patches"],
                                     batch["visible"], batch["masked"]).item()
        assert before == after

    def test_truncated_file_rejected(self, tmp_path):
        cfg = tiny_model_config()
        model = mpm.build_model(cfg, np.random.default_rng(13))
        path = tmp_path / "m.lcm"
        mpm.save_checkpoint(model, path)
        blob = path.read_bytes()
        (tmp_path / "cut.lcm").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError):
            mpm.read_checkpoint(tmp_path / "cut.lcm")

    def test_config_mismatch_rejected(self, tmp_path):
        model = mpm.build_model(tiny_model_config(), np.random.default_rng(14))
        path = tmp_path / "m.lcm"
        mpm.save_checkpoint(model, path)
        other = mpm.build_model(tiny_model_config(d=16, k_group=4), np.random.default_rng(15))
        with pytest.raises(FormatError):
            mpm.load_checkpoint(path, other)

    def test_encoder_only_load_leaves_head_fresh(self, tmp_path):
        pre_model = mpm.build_model(tiny_model_config(), np.random.default_rng(16))
        path = tmp_path / "pre.lcm"
        mpm.save_checkpoint(pre_model, path)
        ft = mpm.build_model(tiny_model_config(with_decoder=False, n_classes=4),
                             np.random.default_rng(17))
        head_before = ft.cls_head.lin1.w.data.copy()
        report = mpm.load_encoder_into(ft, path)
        assert report["loaded"]
        assert not report["missing"]
        assert np.array_equal(ft.cls_head.lin1.w.data, head_before)
        assert np.array_equal(ft.embed.lin1.w.data, pre_model.embed.lin1.w.data)
        assert np.array_equal(
            ft.encoder.layers[0].lal.down.w.data, pre_model.encoder.layers[0].lal.down.w.data
        )
