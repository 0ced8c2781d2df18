import csv
import json

import pytest

from cocelab.errors import ConfigError
from cocelab.evaluation import EvalReport
from cocelab.harness import (
    ExperimentConfig,
    MethodSpec,
    TrialRecord,
    best_hyper,
    load_config,
    load_records,
    run_cell,
    run_experiment,
    select_model,
    summarize,
    write_outputs,
)

TINY = {
    "data": {"samples": 120, "test_samples": 60, "input_dim": 4},
    "methods": [
        {"name": "erm"},
        {"name": "coce"},
        {"name": "softad", "grid": [0.5]},
        {"name": "sam", "grid": [0.05]},
        {"name": "sharpdro", "grid": [0.05]},
        {"name": "flooding", "grid": [0.3]},
        {"name": "tilted-erm", "grid": [0.5]},
    ],
    "hyper_grid": [0.1, 0.5],
    "epochs": 4,
    "batch_size": 32,
    "trials": 2,
    "eval_epochs": [2],
}


def _tiny(**over):
    d = json.loads(json.dumps(TINY))
    d.update(over)
    return ExperimentConfig.from_dict(d)


def _record(val_accs, epochs=None, test_bal=0.5):
    epochs = epochs or list(range(1, len(val_accs) + 1))
    rec = TrialRecord("m", 0.1, 0, 0)
    for e, a in zip(epochs, val_accs):
        rec.rows.append((e, "val", EvalReport(a, 0.0, 0.0)))
        rec.rows.append((e, "test", EvalReport(a, 0.0, 0.0, balanced_accuracy=test_bal)))
    return rec


@pytest.fixture(scope="module")
def tiny_records():
    cfg = _tiny()
    return cfg, run_experiment(cfg)


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig(methods=(MethodSpec.from_dict({"name": "erm"}),))
        assert cfg.epochs == 200 and cfg.batch_size == 100 and cfg.trials == 10
        assert cfg.hyper_grid == (0.01, 0.02, 0.05, 0.1, 0.2, 0.5)
        assert cfg.eval_schedule() == [50, 150, 200]
        assert cfg.to_dict()["total_steps"] == 200 * 50

    def test_round_trip(self):
        cfg = _tiny()
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("patch", [
        {"epoch": 3},
        {"data": {"samplez": 10}},
        {"methods": [{"name": "coce", "gamma": 0.1}]},
        {"methods": [{"name": "coce", "phi": {"kind": "raw-exp", "gamma": 0.1}, "theta": {"kind": "joint"}}]},
        {"methods": [{"name": "groupdro"}]},
        {"methods": []},
        {"methods": [{"name": "erm"}, {"name": "erm"}]},
        {"data": {"drift_mode": True}},
        {"hyper_grid": [-0.1]},
        {"methods": [{"name": "tilted-erm", "grid": [0.0]}]},
        {"model": {"architecture": "mlp"}},
        {"schedule": {"momentum": 1.5}},
    ])
    def test_rejected(self, patch):
        d = json.loads(json.dumps(TINY))
        d.update(patch)
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(d)

    def test_load_config_errors(self, tmp_path):
        bad = tmp_path / "c.json"
        bad.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load_config(bad)
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(bad)
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.json")

    def test_record_count_arithmetic(self):
        cfg = ExperimentConfig.from_dict({"methods": [{"name": "erm"}, {"name": "coce"}], "trials": 10})
        assert len(cfg.cells()) == 10 * (1 + 6) == 70

    def test_softad_is_identity_coce(self):
        obj = MethodSpec.from_dict({"name": "softad"}).objective(0.2)
        assert obj.aggregator == "coce" and obj.phi.kind == "identity" and obj.eta == 0.2


class TestSelectModel:
    def test_examples(self):
        assert select_model(_record([0.5, 0.6, 0.7])) == 3
        assert select_model(_record([0.6, 0.6, 0.6])) == 1
        assert select_model(_record([0.5, 0.9, 0.7], epochs=[50, 150, 200])) == 150

    def test_needs_validation_rows(self):
        with pytest.raises(ValueError):
            select_model(TrialRecord("m", None, 0, 0))


class TestSummarize:
    def _recs(self, accs):
        out = []
        for t, a in enumerate(accs):
            r = _record([0.5], test_bal=a)
            r.trial = t
            r.selected_epoch = 1
            out.append(r)
        return out

    def test_equal(self):
        row = summarize(self._recs([0.8, 0.8]))[0]
        assert row["balanced_accuracy_mean"] == pytest.approx(0.8)
        assert row["balanced_accuracy_std"] == 0.0

    def test_sample_std(self):
        row = summarize(self._recs([0.7, 0.9]))[0]
        assert row["balanced_accuracy_mean"] == pytest.approx(0.8)
        assert row["balanced_accuracy_std"] == pytest.approx(0.1414213562, rel=1e-9)

    def test_single_trial_flag(self):
        row = summarize(self._recs([0.7]))[0]
        assert row["single_trial"] and row["balanced_accuracy_std"] == 0.0

    def test_failed_cells_counted(self):
        recs = self._recs([0.7, 0.9])
        recs[1].status = "failed"
        row = summarize(recs)[0]
        assert row["trials"] == 1 and row["failed"] == 1

    def test_best_hyper(self):
        rows = [
            {"method": "c", "hyper": 0.1, "trials": 2, "val_accuracy_mean": 0.7},
            {"method": "c", "hyper": 0.2, "trials": 2, "val_accuracy_mean": 0.9},
            {"method": "c", "hyper": 0.5, "trials": 2, "val_accuracy_mean": 0.9},
        ]
        assert best_hyper(rows, "c")["hyper"] == 0.2
        with pytest.raises(KeyError):
            best_hyper(rows, "x")


class TestRun:
    def test_counts_and_status(self, tiny_records):
        cfg, recs = tiny_records
        assert len(recs) == 2 * (1 + 2 + 1 + 1 + 1 + 1 + 1)
        assert all(r.status == "ok" for r in recs), [r.error for r in recs if r.status != "ok"]
        assert [r.key for r in recs] == [(m.label, h, t) for m, h, t in cfg.cells()]
        for r in recs:
            assert sorted({e for e, _, _ in r.rows}) == [2, 4]
            assert r.total_steps == 4 * 3

    def test_erm_once_per_trial(self, tiny_records):
        _, recs = tiny_records
        assert [r.hyper for r in recs if r.method == "erm"] == [None, None]

    def test_same_batches_across_methods(self, tiny_records):
        _, recs = tiny_records
        for t in range(2):
            assert len({r.batch_hash for r in recs if r.trial == t}) == 1
        assert recs[0].batch_hash != recs[1].batch_hash

    def test_cell_rerun_is_exact(self, tiny_records):
        cfg, recs = tiny_records
        for k in (3, 9):
            m, h, t = cfg.cells()[k]
            again = run_cell(cfg, m, h, t)
            assert [(e, s, r.metrics()) for e, s, r in again.rows] == \
                   [(e, s, r.metrics()) for e, s, r in recs[k].rows]

    def test_parallel_matches_serial(self, tiny_records, tmp_path):
        cfg, recs = tiny_records
        write_outputs(recs, cfg, tmp_path / "a")
        write_outputs(run_experiment(cfg, jobs=2), cfg, tmp_path / "b")
        assert (tmp_path / "a" / "records.csv").read_bytes() == (tmp_path / "b" / "records.csv").read_bytes()

    def test_failure_is_recorded_not_raised(self):
        cfg = _tiny(methods=[{"name": "coce", "phi": {"kind": "raw-exp", "gamma": 50.0}, "rho": "quadratic"}],
                    hyper_grid=[0.1], trials=1, epochs=2)
        (rec,) = run_experiment(cfg)
        assert rec.status == "failed" and "NonFiniteError" in rec.error
        row = summarize([rec])[0]
        assert row["failed"] == 1 and row["trials"] == 0

    def test_outputs(self, tiny_records, tmp_path):
        cfg, recs = tiny_records
        write_outputs(recs, cfg, tmp_path)
        with open(tmp_path / "records.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["method", "hyper", "trial", "epoch", "split", "metric", "value"]
        assert {r[4] for r in rows[1:]} == {"train", "val", "test"}
        echo = json.loads((tmp_path / "config-echo.json").read_text())
        assert echo["total_steps"] == 12 and echo["data"]["s_max"] == 5
        assert ExperimentConfig.from_dict(echo) == cfg

        back = load_records(tmp_path)
        assert [r.key for r in back] == [r.key for r in recs]
        assert summarize(back) == summarize(recs)
