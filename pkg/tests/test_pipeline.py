import numpy as np
import pytest

from cpspan import nncore
from cpspan.data import MaskSpec, generate_mask, resample_complete, synth_gaussian
from cpspan.exceptions import InvalidArgumentError, StageError, TrainingDivergenceError
from cpspan.gradcheck import max_gradient_error, numerical_gradient
from cpspan.pipeline import (
    LOSS_MODES,
    TrainConfig,
    align_train,
    batch_objective,
    embed_observed,
    finish_run,
    init_autoencoders,
    pretrain,
    prototype_context,
    run,
)
from cpspan.prototype import kmeans


def small_config(**kw):
    base = dict(pretrain_epochs=3, align_epochs=2, batch_size=32, hidden=(16,), d=4,
                dtype="float64", seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def masked():
    ds = synth_gaussian(120, 3, 3, [6, 5, 4], 6.0, seed=1)
    return ds.with_mask(generate_mask(120, 3, MaskSpec(0.3, seed=2)))


def tiny_problem(mode, seed=0, alpha=0.7, beta=0.3):
    ds = synth_gaussian(12, 2, 2, [3, 2], 3.0, seed=seed)
    ds = ds.with_mask(generate_mask(12, 2, MaskSpec(0.25, seed=seed)))
    cfg = TrainConfig(hidden=(4,), d=2, dtype="float64", seed=seed, loss_mode=mode,
                      alpha=alpha, beta=beta, tau=0.6, batch_size=8)
    aes = init_autoencoders(ds, cfg)
    # random biases keep every unit off its ReLU kink
    rng = np.random.default_rng(100 + seed)
    for ae in aes:
        for name, p in ae.parameters().items():
            if name.endswith("bias"):
                p[...] = rng.uniform(0.05, 0.3, p.shape)
    proto = prototype_context(ds, aes, cfg, 0) if "pa" in cfg.terms else None
    batch = np.random.default_rng(seed).permutation(12)[:8]
    index = [resample_complete(ds, v, seed) for v in range(2)]
    xs = [ds.views[v][index[v][batch]] for v in range(2)]
    observed = ds.mask.astype(bool)[batch]
    return aes, xs, observed, batch, cfg, proto


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.batch_size, c.pretrain_epochs, c.align_epochs, c.d) == (256, 200, 50, 10)
        assert (c.lr_pretrain, c.lr_align, c.alpha, c.beta, c.rank) == (5e-4, 1e-4, 1e-3, 1e-3, 1)

    @pytest.mark.parametrize("bad", [dict(batch_size=0), dict(lr_pretrain=-1.0),
                                     dict(loss_mode="nope"), dict(rank=0), dict(alpha=-1.0)])
    def test_invalid(self, bad):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(**bad)

    def test_terms(self):
        assert TrainConfig(loss_mode="rec-only").terms == set()
        assert TrainConfig().terms == {"ia", "pa"}


class TestBatchObjective:
    @pytest.mark.parametrize("mode", LOSS_MODES)
    @pytest.mark.parametrize("seed", range(4))
    def test_gradients_match_finite_differences(self, mode, seed):
        aes, xs, observed, batch, cfg, proto = tiny_problem(mode, seed)
        assert sum(p.size for ae in aes for p in ae.parameters().values()) <= 200
        _, grads, p_grads = batch_objective(aes, xs, observed, batch, cfg, proto)

        def f():
            return batch_objective(aes, xs, observed, batch, cfg, proto, return_grad=False)[0].total

        for v, ae in enumerate(aes):
            for name, p in ae.parameters().items():
                err = max_gradient_error(grads[v][name], numerical_gradient(f, p))
                assert err <= 1e-4, (mode, v, name, err)
        for key, g in p_grads.items():
            err = max_gradient_error(g, numerical_gradient(f, proto.states[key].relaxed))
            assert err <= 1e-4, (mode, key, err)

    def test_total_is_weighted_sum(self):
        aes, xs, observed, batch, cfg, proto = tiny_problem("cpspan")
        out, _, _ = batch_objective(aes, xs, observed, batch, cfg, proto)
        assert out.total == pytest.approx(out.rec + cfg.alpha * out.ia + cfg.beta * out.pa,
                                          abs=1e-12)

    def test_rec_only_has_no_alignment_terms(self):
        aes, xs, observed, batch, cfg, proto = tiny_problem("rec-only")
        out, _, p_grads = batch_objective(aes, xs, observed, batch, cfg, proto)
        assert set(out.as_dict()) == {"rec", "total"}
        assert p_grads == {}

    def test_zero_coefficients_equal_rec_only(self):
        aes, xs, observed, batch, cfg, proto = tiny_problem("cpspan", alpha=0.0, beta=0.0)
        _, g_full, _ = batch_objective(aes, xs, observed, batch, cfg, proto)
        _, g_rec, _ = batch_objective(aes, xs, observed, batch, cfg.replace(loss_mode="rec-only"))
        for a, b in zip(g_full, g_rec):
            assert a.keys() == b.keys()
            assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_prototype_term_needs_context(self):
        aes, xs, observed, batch, cfg, _ = tiny_problem("rec+pa")
        with pytest.raises(InvalidArgumentError):
            batch_objective(aes, xs, observed, batch, cfg, None)


class TestPretrain:
    def test_zero_epochs_is_initialisation(self, masked):
        cfg = small_config(pretrain_epochs=0)
        aes, curve = pretrain(masked, cfg)
        assert curve == []
        assert all(a.equals(b) for a, b in zip(aes, init_autoencoders(masked, cfg)))

    def test_reconstruction_decreases(self, masked):
        _, curve = pretrain(masked, small_config(pretrain_epochs=15))
        assert len(curve) == 15
        assert curve[-1]["rec"] < curve[0]["rec"]

    @pytest.mark.slow
    def test_reconstruction_decreases_over_twenty_seeds(self):
        drops = 0
        for seed in range(20):
            ds = synth_gaussian(64, 2, 2, [6, 4], 4.0, seed=seed)
            ds = ds.with_mask(generate_mask(64, 2, MaskSpec(0.3, seed=seed)))
            cfg = small_config(pretrain_epochs=200, hidden=(8,), batch_size=64, seed=seed)
            _, curve = pretrain(ds, cfg)
            drops += curve[-1]["rec"] < curve[0]["rec"]
        assert drops >= 19

    def test_deterministic(self, masked):
        a, ca = pretrain(masked, small_config())
        b, cb = pretrain(masked, small_config())
        assert ca == cb
        assert all(x.equals(y) for x, y in zip(a, b))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch(self, masked):
        cfg = small_config(lr_pretrain=1e30, dtype="float32")
        with pytest.raises(TrainingDivergenceError) as err:
            pretrain(masked, cfg)
        assert err.value.epoch is not None

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_run_wraps_stage(self, masked):
        with pytest.raises(StageError) as err:
            run(masked, small_config(lr_pretrain=1e30, dtype="float32"))
        assert err.value.stage == "pretrain"


class TestAlignTrain:
    def test_curves_and_terms(self, masked):
        cfg = small_config()
        for mode, keys in [("rec-only", {"rec", "total"}),
                           ("cpspan", {"rec", "ia", "pa", "total"}),
                           ("rec+ia", {"rec", "ia", "total"}),
                           ("rec+pa", {"rec", "pa", "total"}),
                           ("contrastive-baseline", {"rec", "cl", "pa", "total"})]:
            report = run(masked, cfg.replace(loss_mode=mode))
            assert len(report.curves) == cfg.pretrain_epochs + cfg.align_epochs
            align = [r for r in report.curves if r["stage"] == "align"]
            assert all(set(r) - {"stage", "epoch"} == keys for r in align)
            for r in align:
                expected = (r["rec"] + cfg.alpha * (r.get("ia", 0) + r.get("cl", 0))
                            + cfg.beta * r.get("pa", 0))
                assert abs(r["total"] - expected) <= 1e-9

    def test_modes_share_first_epoch_reconstruction(self, masked):
        firsts = {run(masked, small_config(loss_mode=m, align_epochs=1)).curves[0]["rec"]
                  for m in ("rec-only", "rec+ia", "rec+pa", "cpspan")}
        assert len(firsts) == 1

    def test_states_are_permutations(self, masked):
        aes, _ = pretrain(masked, small_config())
        _, states, _ = align_train(masked, aes, small_config())
        assert set(states) == {(0, 1), (0, 2), (1, 2)}
        for s in states.values():
            assert (s.hard.sum(0) == 1).all() and (s.hard.sum(1) == 1).all()
            assert s.relaxed.min() >= -1e-4
            assert np.abs(s.relaxed.sum(0) - 1).max() <= 1e-3
            assert np.abs(s.relaxed.sum(1) - 1).max() <= 1e-3

    def test_input_autoencoders_untouched(self, masked):
        aes, _ = pretrain(masked, small_config())
        before = [ae.copy() for ae in aes]
        align_train(masked, aes, small_config())
        assert all(a.equals(b) for a, b in zip(aes, before))

    @pytest.mark.parametrize("seed", range(3))
    def test_planted_correspondence_recovered(self, seed):
        # strong sample alignment pulls the two embedding spaces together, so
        # matching prototypes must pair clusters of the same true class
        ds = synth_gaussian(300, 2, 3, [20, 15], 8.0, seed=seed)
        ds = ds.with_mask(generate_mask(300, 2, MaskSpec(0.3, seed=seed)))
        cfg = TrainConfig(alpha=100.0, beta=1.0, lr_align=1e-3, pretrain_epochs=30,
                          align_epochs=20, hidden=(64,), dtype="float64", seed=seed,
                          batch_size=64)
        report = run(ds, cfg)
        hs = embed_observed(ds, report.autoencoders)
        majority = []
        for v in range(2):
            rows = ds.observed(v)
            ps = kmeans(hs[v][rows], 3, [seed, 8, v])
            majority.append([int(np.bincount(ds.labels[rows][ps.assignments == c]).argmax())
                             for c in range(3)])
        assert sorted(majority[0]) == sorted(majority[1]) == [0, 1, 2]
        planted = [majority[1].index(majority[0][r]) for r in range(3)]
        assert report.permutations["0-1"] == planted


class TestRun:
    def test_complete_data_clusters_well(self):
        ds = synth_gaussian(300, 3, 5, [20, 15, 10], 8.0, seed=3)
        report = run(ds, small_config(pretrain_epochs=10, align_epochs=3))
        assert report.metrics["acc"] >= 0.95

    def test_deterministic_report(self, masked):
        a = run(masked, small_config()).to_json(timing=False)
        b = run(masked, small_config()).to_json(timing=False)
        assert a == b

    def test_stage_purity_through_checkpoints(self, masked, tmp_path):
        cfg = small_config()
        whole = run(masked, cfg)
        aes, curve = pretrain(masked, cfg)
        loaded = []
        for v, ae in enumerate(aes):
            path = tmp_path / f"view_{v}.ckpt"
            nncore.save_checkpoint(ae, path)
            loaded.append(nncore.load_checkpoint(path))
        staged = run(masked, cfg, pretrained=(loaded, curve))
        assert staged.to_json(timing=False) == whole.to_json(timing=False)

    def test_sentinel_independence(self, masked):
        a = run(masked.with_sentinel(0.0), small_config())
        b = run(masked.with_sentinel(-1e6), small_config())
        assert a.to_json(timing=False) == b.to_json(timing=False)
        assert np.array_equal(a.fused, b.fused)

    def test_unknown_cluster_count(self, masked):
        from cpspan.data import MultiViewDataset
        unlabeled = MultiViewDataset(masked.views, masked.mask)
        with pytest.raises(InvalidArgumentError):
            run(unlabeled, small_config())
        report = run(unlabeled, small_config(n_clusters=3))
        assert report.metrics is None
        assert set(report.predicted) <= {0, 1, 2}

    def test_report_contents(self, masked):
        report = run(masked, small_config())
        d = report.to_dict()
        assert set(d["permutations"]) == {"0-1", "0-2", "1-2"}
        assert d["neighbor_log"]["count"] == int((masked.mask == 0).sum())
        assert {"pretrain", "align", "cluster", "total"} <= set(d["timing"])
        assert report.fused.shape == (120, 3 * 4)
