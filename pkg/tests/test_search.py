"""Search orchestration: record store, loops, reports, config loading."""

import json
import math

import numpy as np
import pytest

import rnndsl.search as search
from rnndsl.dsl import OpKind, builtin, render
from rnndsl.evaluator import ArchPerfRecord, TaskSpec, TrainConfig, make_task
from rnndsl.randgen import GenConfig, arch_id
from rnndsl.ranker import RankerConfig
from rnndsl.rlgen import Policy, RLConfig
from rnndsl.search import (
    OPERATOR_COLUMNS,
    RecordStore,
    SearchConfig,
    StoreError,
    hidden_dump,
    load_config,
    ops_over_time,
    report,
    run_random_search,
    run_rl_search,
    search_curve,
    write_csv,
)


def make_record(arch, metric, status="ok", batch=0, source="random"):
    return ArchPerfRecord(
        id=arch_id(arch),
        dsl=render(arch),
        ct_node=arch.ct_node,
        source=source,
        task="copy_memory",
        status=status,
        valid_metric=metric,
        test_metric=None,
        epochs_run=1,
        wall_seconds=0.0,
        batch_index=batch,
        timestamp="1970-01-01T00:00:00Z",
    )


def tiny_task():
    return make_task(
        TaskSpec(
            kind="copy_memory",
            seed=1,
            batch_size=16,
            train_size=64,
            valid_size=32,
            test_size=32,
        )
    )


def tiny_train():
    return TrainConfig(epochs=2, hidden_size=10, failure_check_epoch=1, seed=0)


class TestSearchConfig:
    def test_mode_validated(self):
        with pytest.raises(ValueError):
            SearchConfig(mode="grid")

    def test_selection_cannot_exceed_pool(self):
        with pytest.raises(ValueError):
            SearchConfig(candidates_per_step=10, k_top=28, k_sampled=4)

    def test_batch_rule_consistency(self):
        with pytest.raises(ValueError):
            SearchConfig(min_good=4, max_failing=2, min_batch=4)

    def test_desk_scale_defaults(self):
        cfg = SearchConfig.desk_scale()
        assert cfg.candidates_per_step == 2000
        assert cfg.k_top == 8
        assert cfg.k_sampled == 2


class TestRecordStore:
    def test_round_trip(self, tmp_path):
        path = str(tmp_path / "records.jsonl")
        store = RecordStore(path)
        store.append(make_record(builtin("tanh_rnn"), 1.0))
        store.append(make_record(builtin("gru"), 0.9))
        loaded = RecordStore.load(path)
        assert loaded.records == store.records

    def test_duplicate_append_rejected(self):
        store = RecordStore()
        store.append(make_record(builtin("gru"), 0.9))
        with pytest.raises(StoreError):
            store.append(make_record(builtin("gru"), 0.8))

    def test_duplicate_line_reports_lineno(self, tmp_path):
        path = tmp_path / "dup.jsonl"
        rec = make_record(builtin("gru"), 0.9)
        path.write_text(rec.to_json() + "\n" + rec.to_json() + "\n")
        with pytest.raises(StoreError, match="dup.jsonl:2"):
            RecordStore.load(str(path))

    def test_malformed_line_reports_lineno(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        rec = make_record(builtin("gru"), 0.9)
        path.write_text(rec.to_json() + "\nnot json at all\n")
        with pytest.raises(StoreError, match="bad.jsonl:2"):
            RecordStore.load(str(path))

    def test_missing_file_is_empty_store(self, tmp_path):
        store = RecordStore.load(str(tmp_path / "absent.jsonl"))
        assert len(store) == 0

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "blank.jsonl"
        rec = make_record(builtin("gru"), 0.9)
        path.write_text("\n" + rec.to_json() + "\n\n")
        assert len(RecordStore.load(str(path))) == 1

    def test_best_ignores_failures(self):
        store = RecordStore()
        store.append(make_record(builtin("gru"), 0.9))
        store.append(make_record(builtin("lstm"), None, status="diverged"))
        store.append(make_record(builtin("tanh_rnn"), 1.2))
        assert store.best().valid_metric == 0.9

    def test_valid_ht_count_excludes_ct_and_failures(self):
        store = RecordStore()
        store.append(make_record(builtin("tanh_rnn"), 1.0))  # ok, no tap
        store.append(make_record(builtin("lstm"), 0.8))  # ok, has tap
        store.append(make_record(builtin("gru"), None, status="timeout"))
        assert store.valid_ht_count() == 1


class TestRLBatchComposition:
    def test_three_good_one_fail_deferred_fail(self, monkeypatch):
        """Script [good,fail,fail,good,good]: the update batch holds the
        three goods plus one failure; the second failure stays pending."""
        script = [(1.0, True), (0.0, False), (0.0, False), (1.0, True), (1.0, True)]
        calls = {"i": 0}
        batches = []

        def fake_result(ep, task, train_cfg, reward_cfg, store, cfg, batch_index):
            r, good = script[calls["i"]]
            calls["i"] += 1
            return r, good, 1

        def fake_update(policy, batch, opt):
            batches.append([e.reward for e in batch])
            return True

        monkeypatch.setattr(search, "_episode_result", fake_result)
        monkeypatch.setattr(search, "_safe_update", fake_update)
        cfg = SearchConfig(
            mode="rl", max_evaluations=5, min_good=3, max_failing=1, min_batch=4
        )
        policy = Policy(RLConfig(width=8, seed=0))
        result = run_rl_search(cfg, task=None, policy=policy, train_cfg=None)
        assert len(batches) == 1
        assert sorted(batches[0], reverse=True) == [1.0, 1.0, 1.0, 0.0]
        assert result.batches_applied == 1
        assert result.relaxed_batches == 0

    def test_starvation_relaxes_composition(self, monkeypatch):
        def fake_result(ep, task, train_cfg, reward_cfg, store, cfg, batch_index):
            return 0.0, False, 1  # failures only: rule never satisfiable

        batches = []

        def fake_update(policy, batch, opt):
            batches.append(len(batch))
            return True

        monkeypatch.setattr(search, "_episode_result", fake_result)
        monkeypatch.setattr(search, "_safe_update", fake_update)
        cfg = SearchConfig(mode="rl", max_evaluations=8, starvation_limit=4)
        policy = Policy(RLConfig(width=8, seed=0))
        result = run_rl_search(cfg, task=None, policy=policy, train_cfg=None)
        assert result.relaxed_batches == 2
        assert batches == [4, 4]

    def test_stops_at_max_evaluations(self, monkeypatch):
        def fake_result(ep, task, train_cfg, reward_cfg, store, cfg, batch_index):
            return 0.5, True, 1

        monkeypatch.setattr(search, "_episode_result", fake_result)
        monkeypatch.setattr(search, "_safe_update", lambda p, b, o: True)
        cfg = SearchConfig(mode="rl", max_evaluations=7)
        policy = Policy(RLConfig(width=8, seed=0))
        result = run_rl_search(cfg, task=None, policy=policy, train_cfg=None)
        assert len(result.episode_rewards) == 7


class TestReports:
    def _store(self):
        store = RecordStore()
        store.append(make_record(builtin("tanh_rnn"), 1.2, batch=0))
        store.append(make_record(builtin("gru"), 0.9, batch=1))
        store.append(make_record(builtin("mgu"), None, status="diverged", batch=1))
        store.append(make_record(builtin("lstm"), 0.8, batch=2))
        return store

    def test_ops_rows_sum_to_one(self):
        rows = ops_over_time(self._store())
        assert len(rows) == 3
        for row in rows:
            total = sum(row[c] for c in OPERATOR_COLUMNS)
            assert abs(total - 1.0) < 1e-9

    def test_search_curve_monotone(self):
        rows = search_curve(self._store())
        assert len(rows) == 4
        bests = [r["best_so_far"] for r in rows if r["best_so_far"] is not None]
        assert all(a >= b for a, b in zip(bests, bests[1:]))
        assert rows[-1]["best_so_far"] == 0.8

    def test_search_curve_batch_means(self):
        rows = search_curve(self._store())
        batch1 = [r for r in rows if r["batch"] == 1]
        # the diverged record contributes no metric to the batch mean
        assert all(r["batch_mean_metric"] == pytest.approx(0.9) for r in batch1)

    def test_hidden_dump_row_per_timestep(self):
        rows = hidden_dump(render(builtin("gru")), seq_len=16, hidden_size=8)
        assert len(rows) == 16
        assert all(len(r) == 9 for r in rows)  # t + 8 hidden columns

    def test_hidden_dump_deterministic(self):
        a = hidden_dump(render(builtin("gru")), seed=5)
        b = hidden_dump(render(builtin("gru")), seed=5)
        assert a == b

    def test_report_dispatch(self):
        store = self._store()
        assert report(store, "ops_over_time") == ops_over_time(store)
        assert report(store, "search_curve") == search_curve(store)
        dump = report(store, "hidden_dump", seq_len=4)
        assert len(dump) == 4  # defaults to the best record's cell
        with pytest.raises(ValueError):
            report(store, "pie_chart")

    def test_write_csv_round_trip(self, tmp_path):
        import csv

        path = str(tmp_path / "out.csv")
        rows = ops_over_time(self._store())
        write_csv(rows, path)
        with open(path) as fh:
            back = list(csv.DictReader(fh))
        assert len(back) == len(rows)
        assert set(back[0].keys()) == set(str(k) for k in rows[0].keys())

    def test_write_csv_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_csv([], str(tmp_path / "x.csv"))


class TestRandomSearch:
    def _run(self, tmp_path, name):
        cfg = SearchConfig(
            candidates_per_step=40,
            k_top=2,
            k_sampled=1,
            max_steps=2,
            seed=0,
        )
        gen_cfg = GenConfig(seed=0, max_height=4)
        ranker_cfg = RankerConfig(hidden=8, epochs=5, seed=0)
        store = RecordStore(str(tmp_path / name))
        return run_random_search(
            cfg, tiny_task(), gen_cfg, tiny_train(), ranker_cfg, store
        )

    def test_seeds_baseline_and_evaluates(self, tmp_path):
        store, best = self._run(tmp_path, "a.jsonl")
        assert store.records[0].source == "seed"
        assert store.records[0].id == arch_id(builtin("tanh_rnn"))
        assert len(store) > 1
        ids = [r.id for r in store.records]
        assert len(ids) == len(set(ids))

    def test_byte_identical_replay(self, tmp_path):
        self._run(tmp_path, "a.jsonl")
        self._run(tmp_path, "b.jsonl")
        a = (tmp_path / "a.jsonl").read_bytes()
        b = (tmp_path / "b.jsonl").read_bytes()
        assert a == b

    def test_ct_gate_closed_early(self, tmp_path):
        # far below ct_enable_after: no candidate may carry a memory tap
        store, _ = self._run(tmp_path, "c.jsonl")
        assert all(r.ct_node is None for r in store.records)


class TestLoadConfig:
    def test_defaults_and_sections(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({
            "search": {"max_steps": 2},
            "gen": {"operator_weights": {"Tanh": 2.0},
                    "require_sources": ["x_t", "h_tm1"]},
            "train": {"optimizer": {"kind": "adam", "learning_rate": 0.01}},
        }))
        cfg = load_config(str(path))
        assert cfg["search"].max_steps == 2
        assert cfg["search"].k_top == 28  # untouched default
        assert cfg["gen"].operator_weights[OpKind.TANH] == 2.0
        assert cfg["gen"].require_sources == (OpKind.X, OpKind.HM1)
        assert cfg["train"].optimizer.kind == "adam"
        assert cfg["task"].kind  # every section materializes

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"searches": {}}))
        with pytest.raises(ValueError, match="unknown config sections"):
            load_config(str(path))

    def test_unknown_field_rejected(self, tmp_path):
        path = tmp_path / "bad2.json"
        path.write_text(json.dumps({"search": {"max_step": 3}}))
        with pytest.raises(ValueError, match="SearchConfig"):
            load_config(str(path))
