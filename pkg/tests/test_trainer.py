import json
from dataclasses import replace

import numpy as np
import pytest

from conceptlm import trainer
from conceptlm.errors import ConfigError
from conceptlm.model import load_checkpoint
from conceptlm.objective import ObjectiveConfig
from conceptlm.trainer import (GridPoint, TrainConfig, derive_run_seed,
                               grid_points, load_manifest, sweep, train)


def _cfg(**kw):
    base = dict(learning_rate=1e-3, batch_size=4, max_epochs=2,
                early_stop_patience=2, seed=5,
                objective=ObjectiveConfig(concept_weight=0.5))
    base.update(kw)
    base["early_stop_patience"] = min(base["early_stop_patience"],
                                      base["max_epochs"])
    return TrainConfig(**base)


def _params_equal(a, b):
    return all(np.array_equal(a[n], b[n]) for n in a.names())


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=-1.0)
        with pytest.raises(ConfigError):
            TrainConfig(max_epochs=3, early_stop_patience=4)
        with pytest.raises(ConfigError):
            TrainConfig(train_split=1.0)
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="sgd")


class TestTrain:
    def test_zero_learning_rate_leaves_params(self, tiny_params,
                                              tiny_dataset):
        best, log = train(tiny_params, tiny_dataset,
                          _cfg(learning_rate=0.0, max_epochs=1))
        assert _params_equal(best, tiny_params)
        assert len(log.steps) > 0
        assert log.stopping_epoch == 1

    def test_lambda_zero_ignores_annotations(self, tiny_params,
                                             tiny_dataset):
        cfg = _cfg(objective=ObjectiveConfig(concept_weight=0.0),
                   max_epochs=2)
        with_anns, _ = train(tiny_params, tiny_dataset, cfg)
        stripped = [(seq, []) for seq, _ in tiny_dataset]
        without, _ = train(tiny_params, stripped, cfg)
        assert _params_equal(with_anns, without)

    def test_validation_ntp_decreases(self, tiny_params, tiny_dataset):
        cfg = _cfg(max_epochs=3, early_stop_patience=3,
                   objective=ObjectiveConfig(concept_weight=0.0))
        _, log = train(tiny_params, tiny_dataset, cfg)
        ntp = [e["ntp"] for e in log.val_history]
        assert ntp[0] > ntp[1] > ntp[2]

    def test_bit_identical_reruns(self, tiny_params, tiny_dataset):
        a, _ = train(tiny_params, tiny_dataset, _cfg())
        b, _ = train(tiny_params, tiny_dataset, _cfg())
        assert _params_equal(a, b)

    def test_seed_changes_result(self, tiny_params, tiny_dataset):
        a, _ = train(tiny_params, tiny_dataset, _cfg(seed=5))
        b, _ = train(tiny_params, tiny_dataset, _cfg(seed=6))
        assert not _params_equal(a, b)

    def test_input_params_not_mutated(self, tiny_params, tiny_dataset):
        snapshot = tiny_params.copy()
        train(tiny_params, tiny_dataset, _cfg(max_epochs=1))
        assert _params_equal(tiny_params, snapshot)

    def test_resume_matches_uninterrupted(self, tmp_path, tiny_params,
                                          tiny_dataset):
        cfg = _cfg(max_epochs=4, early_stop_patience=4)
        straight, _ = train(tiny_params, tiny_dataset, cfg,
                            run_dir=tmp_path / "straight")
        short = replace(cfg, max_epochs=2, early_stop_patience=2)
        train(tiny_params, tiny_dataset, short, run_dir=tmp_path / "resumed")
        resumed, _ = train(tiny_params, tiny_dataset, cfg,
                           run_dir=tmp_path / "resumed",
                           resume_from=tmp_path / "resumed")
        assert _params_equal(straight, resumed)
        s1, _, _ = load_checkpoint(tmp_path / "straight" / "state.npz")
        s2, _, _ = load_checkpoint(tmp_path / "resumed" / "state.npz")
        assert _params_equal(s1, s2)

    def test_early_stopping_returns_best(self, tiny_params, tiny_dataset):
        # an absurd step size makes validation loss erratic, so some epoch
        # fails to improve and patience 0 stops the run early
        cfg = _cfg(learning_rate=3.0, max_epochs=8, early_stop_patience=0)
        from conceptlm.model import batch_loss
        best, log = train(tiny_params, tiny_dataset, cfg)
        assert log.stopping_epoch < 8
        vals = [e["combined"] for e in log.val_history]
        assert min(vals) == vals[log.best_epoch - 1]
        _, val_set = trainer.split_dataset(tiny_dataset, cfg)
        recomputed = batch_loss(best, val_set, cfg.objective).combined
        assert recomputed == vals[log.best_epoch - 1]

    def test_divergence_returns_last_good(self, tiny_params, tiny_dataset):
        bad = tiny_params.copy()
        bad.tensors["tok_emb"][:] = 1e308  # overflows on the first forward
        best, log = train(bad, tiny_dataset, _cfg())
        assert log.diverged
        assert _params_equal(best, bad)

    def test_step_csv_and_runlog_written(self, tmp_path, tiny_params,
                                         tiny_dataset):
        train(tiny_params, tiny_dataset, _cfg(max_epochs=1),
              run_dir=tmp_path / "run")
        csv_text = (tmp_path / "run" / "steps.csv").read_text()
        header = csv_text.splitlines()[0]
        assert header == "step,ntp,concept,combined,gated_count,active_count"
        summary = json.loads((tmp_path / "run" / "runlog.json").read_text())
        assert summary["stopping_epoch"] == 1
        assert "train_gate_fraction" in summary["val_history"][0]

    def test_empty_dataset_rejected(self, tiny_params):
        with pytest.raises(ConfigError):
            train(tiny_params, [], _cfg())


class TestGrid:
    def test_grid_counts(self):
        lams = [0.0, 0.25, 0.5, 0.75, 1.0]
        assert len(grid_points(lams, ["concepts"], ["all"])) == 5
        assert len(grid_points(lams, ["concepts", "noise"], ["all"])) == 10
        assert len(grid_points(lams, ["concepts", "noise"],
                               ["all", "half", "quarter", "last_only"])) == 40

    def test_run_ids_unique(self):
        points = grid_points([0.0, 0.5, 1.0], ["concepts", "noise"],
                             ["all", "half"])
        ids = [p.run_id() for p in points]
        assert len(set(ids)) == len(ids)

    def test_seeds_distinct_and_stable(self):
        points = grid_points([0.0, 0.5], ["concepts", "noise"], ["all"])
        seeds = [derive_run_seed(17, p) for p in points]
        assert len(set(seeds)) == len(seeds)
        assert seeds == [derive_run_seed(17, p) for p in points]
        assert seeds != [derive_run_seed(18, p) for p in points]

    def test_invalid_grid(self):
        with pytest.raises(ConfigError):
            grid_points([], ["concepts"], ["all"])
        with pytest.raises(ConfigError):
            grid_points([0.0], ["bogus"], ["all"])


class TestSweep:
    @pytest.fixture
    def mini(self, tiny_params, tiny_dataset, tmp_path):
        cfg = _cfg(max_epochs=1)
        return dict(base_params=tiny_params, dataset=tiny_dataset,
                    base_cfg=cfg, run_root=tmp_path / "sweep")

    def test_one_run_per_grid_point(self, mini):
        manifest = sweep(mini["base_params"], mini["dataset"],
                         mini["base_cfg"], [0.0, 1.0], ["concepts", "noise"],
                         ["all", "last_only"], 17, mini["run_root"])
        assert len(manifest["runs"]) == 8
        assert all(r["status"] == "done" for r in manifest["runs"].values())
        for r in manifest["runs"].values():
            import pathlib
            assert pathlib.Path(r["paths"]["checkpoint"]).exists()

    def test_rerun_skips_done(self, mini, monkeypatch):
        sweep(mini["base_params"], mini["dataset"], mini["base_cfg"],
              [0.0], ["concepts"], ["all"], 17, mini["run_root"])
        calls = []
        monkeypatch.setattr(trainer, "train",
                            lambda *a, **k: calls.append(1) or (_ for _ in
                                                                ()).throw(
                                RuntimeError("should not retrain")))
        manifest = sweep(mini["base_params"], mini["dataset"],
                         mini["base_cfg"], [0.0], ["concepts"], ["all"], 17,
                         mini["run_root"])
        assert not calls
        assert manifest["runs"]["lam0_concepts_all"]["status"] == "done"

    def test_partial_failure_recorded_and_continues(self, mini, monkeypatch):
        real_train = trainer.train

        def failing(params, dataset, cfg, **kw):
            if cfg.objective.concept_weight == 1.0:
                raise RuntimeError("boom")
            return real_train(params, dataset, cfg, **kw)

        monkeypatch.setattr(trainer, "train", failing)
        manifest = sweep(mini["base_params"], mini["dataset"],
                         mini["base_cfg"], [0.0, 1.0], ["concepts"], ["all"],
                         17, mini["run_root"])
        statuses = {rid: r["status"] for rid, r in manifest["runs"].items()}
        assert statuses["lam0_concepts_all"] == "done"
        assert statuses["lam1_concepts_all"] == "failed"
        assert "boom" in manifest["runs"]["lam1_concepts_all"]["error"]

    def test_noise_and_proportion_variants_differ(self, mini):
        manifest = sweep(mini["base_params"], mini["dataset"],
                         mini["base_cfg"], [1.0], ["concepts", "noise"],
                         ["all"], 17, mini["run_root"])
        a, _, _ = load_checkpoint(
            manifest["runs"]["lam1_concepts_all"]["paths"]["checkpoint"])
        b, _, _ = load_checkpoint(
            manifest["runs"]["lam1_noise_all"]["paths"]["checkpoint"])
        assert not _params_equal(a, b)

    def test_manifest_single_source_of_truth(self, mini):
        sweep(mini["base_params"], mini["dataset"], mini["base_cfg"], [0.0],
              ["concepts"], ["all"], 17, mini["run_root"])
        manifest = load_manifest(mini["run_root"] / "manifest.json")
        assert manifest["master_seed"] == 17
        entry = manifest["runs"]["lam0_concepts_all"]
        assert entry["grid"] == {"concept_weight": 0.0, "mode": "concepts",
                                 "proportion": "all"}
