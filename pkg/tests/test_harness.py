import math

import numpy as np
import pytest
import torch

from gatsbi.config import Config
from gatsbi.errors import ConfigurationError, InputError, NumericalError
from gatsbi.harness import (
    Checkpoint,
    MetricsRow,
    MetricsTable,
    ablation_config,
    build_dataset,
    evaluate,
    evaluate_baselines,
    evaluate_predictor,
    metric_ade,
    metric_fde,
    run_ablation,
    train,
)
from gatsbi.synthetic import generate_dataset


def loop_ade(a, b):
    total = 0.0
    for t in range(len(a)):
        total += math.sqrt((a[t][0] - b[t][0]) ** 2 + (a[t][1] - b[t][1]) ** 2)
    return total / len(a)


def loop_fde(a, b):
    return math.sqrt((a[-1][0] - b[-1][0]) ** 2 + (a[-1][1] - b[-1][1]) ** 2)


class TestMetrics:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(8, 2))
        assert metric_ade(x, x) == 0.0 and metric_fde(x, x) == 0.0

    def test_uniform_offset(self):
        x = np.zeros((5, 2))
        assert metric_ade(x + [0.0, 2.0], x) == pytest.approx(2.0)

    def test_last_step_divergence(self):
        truth = np.zeros((6, 2))
        pred = truth.copy()
        pred[-1] = [0.0, 3.0]
        assert metric_fde(pred, truth) == 3.0

    def test_single_step_ade_equals_fde(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
        assert metric_ade(a, b) == metric_fde(a, b) >= 0

    def test_empty(self):
        with pytest.raises(InputError):
            metric_fde(np.zeros((0, 2)), np.zeros((0, 2)))

    def test_brute_force_1000_pairs(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            T = int(rng.integers(1, 30))
            a, b = rng.normal(0, 5, (T, 2)), rng.normal(0, 5, (T, 2))
            assert abs(metric_ade(a, b) - loop_ade(a, b)) <= 1e-12
            assert abs(metric_fde(a, b) - loop_fde(a, b)) <= 1e-12


class TestTable:
    def test_two_fold_std(self):
        row = MetricsRow.from_folds("m", 25, [1.0, 3.0], [2.0, 6.0])
        # population std of two numbers is half their distance
        assert (row.ade_mean, row.ade_std, row.fde_mean, row.fde_std) == (2.0, 1.0, 4.0, 2.0)

    def test_csv_roundtrip(self, tmp_path):
        table = MetricsTable([MetricsRow("a", 25, 1.0, 0.1, 2.0, 0.2), MetricsRow("b", 50, 3.0, 0.0, 4.0, 0.0)])
        path = tmp_path / "m.csv"
        table.write_csv(path)
        assert path.read_text().splitlines()[0] == "model,horizon_frames,ade_mean,ade_std,fde_mean,fde_std"
        back = MetricsTable.read_csv(path)
        assert back.get("b", 50).fde_mean == 4.0
        assert "a" in table.render()


class TestEvaluation:
    def test_perfect_stub(self, small_data):
        row = evaluate_predictor(lambda t: t.ego_fut, small_data, range(3), "oracle")
        assert row.as_tuple()[2:] == (0.0, 0.0, 0.0, 0.0)

    @pytest.mark.parametrize("horizon", [5, 10, 20])
    def test_const_v_noiseless(self, small_cfg, horizon):
        cfg = small_cfg.replace(generator__sigma_obs=0.0,
                                generator__behavior_mix={"constant": 1.0, "accelerating": 0.0, "overtaker": 0.0},
                                generator__agents=1)
        data = build_dataset(generate_dataset(cfg.generator, 3, seed=1), cfg, horizon)
        row = {r.model: r for r in evaluate_baselines(data)}["const_v"]
        assert row.ade_mean < 1e-9 and row.fde_mean < 1e-9


@pytest.fixture(scope="module")
def trained(small_cfg, small_data):
    return train(small_cfg, small_data)


class TestTraining:
    def test_learns(self, small_cfg, small_data):
        cfg = small_cfg.replace(train__epochs=25, model__name="physics_module")
        ckpt = train(cfg, small_data, folds=[0])
        assert ckpt.log[-1]["train_loss"][0] < ckpt.log[0]["train_loss"][0]

    def test_deterministic(self, small_cfg, small_data, trained):
        again = train(small_cfg, small_data)
        assert again.parameter_hash() == trained.parameter_hash()
        a, b = evaluate(trained, small_data), evaluate(again, small_data)
        assert abs(a.ade_mean - b.ade_mean) <= 1e-6 and abs(a.fde_mean - b.fde_mean) <= 1e-6

    def test_zero_learning_rate(self, small_cfg, small_data):
        cfg = small_cfg.replace(train__learning_rate=0.0, model__name="physics_module")
        ckpt = train(cfg, small_data, folds=[0])
        from gatsbi.model import build_model

        init = build_model(cfg, small_data.tensors.t_obs, small_data.tensors.t_pred, seed=0).state_dict()
        for name, value in ckpt.states[0].items():
            assert torch.equal(value, init[name])
        losses = [rec["train_loss"][0] for rec in ckpt.log]
        # only float32 summation order changes with the batch shuffle
        assert max(losses) - min(losses) < 1e-6 * max(losses)

    def test_selection_and_log(self, trained, small_data):
        assert len(trained.log) == 3
        best = min(trained.log, key=lambda r: r["mean_val_ade"])
        assert trained.selected_epoch == best["epoch"]
        assert sorted(trained.states) == [0, 1, 2]

    def test_divergence_aborts(self, small_cfg, small_data):
        bad = small_data.tensors.subset(np.arange(len(small_data.tensors)))
        bad.ego_fut[:] = np.nan
        broken = type(small_data)(bad, small_data.folds, small_data.horizon)
        with pytest.raises(NumericalError, match="non-finite"):
            train(small_cfg.replace(train__epochs=1), broken, folds=[0])

    def test_evaluation_is_read_only(self, trained, small_data):
        before = trained.parameter_hash()
        evaluate(trained, small_data)
        evaluate(trained, small_data, sampler="best_mode")
        assert trained.parameter_hash() == before

    def test_fold_isolation(self, trained, small_data):
        ids = small_data.tensors.scene_ids
        for fold in trained.folds:
            train_scenes = {ids[i] for i in small_data.folds.train_indices(fold)}
            held_out = {s for s, f in trained.scene_fold.items() if f == fold}
            assert not train_scenes & held_out

    def test_checkpoint_roundtrip(self, trained, small_data, tmp_path):
        path = tmp_path / "ck.pt"
        trained.save(path)
        loaded = Checkpoint.load(path)
        assert loaded.parameter_hash() == trained.parameter_hash()
        assert Config.from_dict(loaded.config) == Config.from_dict(trained.config)
        assert evaluate(loaded, small_data) == evaluate(trained, small_data)

    def test_samplers_order(self, trained, small_data):
        best = evaluate(trained, small_data, sampler="best_mode")
        top = evaluate(trained, small_data, sampler="most_probable")
        assert best.ade_mean <= top.ade_mean + 1e-9

    def test_wrong_horizon(self, trained, small_cfg, small_scenes):
        other = build_dataset(small_scenes, small_cfg, 5)
        with pytest.raises(ConfigurationError):
            evaluate(trained, other)

    def test_unknown_sampler(self, trained, small_data):
        with pytest.raises(ConfigurationError):
            evaluate(trained, small_data, sampler="median")


class TestAblations:
    def test_no_decay_matches_manual(self, small_cfg, small_data):
        cfg = small_cfg.replace(train__epochs=1)
        table, _ = run_ablation("no_decay", small_data, cfg, folds=[0])
        manual = train(cfg.replace(social__lambda_h=0.0, social__lambda_p=0.0), small_data, folds=[0])
        got = table.rows[0]
        want = evaluate(manual, small_data)
        assert (got.ade_mean, got.fde_mean) == (want.ade_mean, want.fde_mean)

    def test_star_connected(self, small_cfg, small_data):
        cfg = ablation_config("star-connected", small_cfg)
        assert cfg.social.topology == "star"
        from gatsbi.model import build_model

        model = build_model(cfg, small_data.tensors.t_obs, small_data.tensors.t_pred, seed=0).eval()
        with torch.no_grad():
            A = model(small_data.tensors.batch(np.arange(len(small_data.tensors))))["attention"]
        M = A.shape[-1]
        off = ~torch.eye(M - 1, dtype=torch.bool)
        assert (A[:, 1:, 1:][:, off] == 0).all()

    def test_unimodal_shape(self, small_cfg, small_data):
        cfg = ablation_config("unimodal", small_cfg)
        from gatsbi.model import build_model

        model = build_model(cfg, small_data.tensors.t_obs, small_data.tensors.t_pred, seed=0).eval()
        with torch.no_grad():
            out = model(small_data.tensors.batch([0, 1]))
        assert "mixture" not in out and out["trajectory"].shape == (2, 10, 2)

    def test_unknown_variant(self, small_cfg):
        with pytest.raises(ConfigurationError):
            ablation_config("no_physics", small_cfg)

    def test_combined(self, small_cfg):
        cfg = ablation_config(["no_anticipation", "no decay"], small_cfg)
        assert cfg.social.anticipation == "off" and cfg.social.effective_lambdas == (0.0, 0.0)
